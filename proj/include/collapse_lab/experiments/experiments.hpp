#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "collapse_lab/arch/forward.hpp"
#include "collapse_lab/data.hpp"
#include "collapse_lab/metrics/metrics.hpp"
#include "collapse_lab/numerics/gradcheck.hpp"

namespace collapse_lab {

/// K Gaussian clusters in R^{d0}: centers with expected pairwise distance 2,
/// within-class spread 0.25 per unit direction. Balanced, samples ordered by
/// class, all columns distinct (duplicates are resampled).
[[nodiscard]] Dataset make_synthetic_classification(Index K, Index n, Index d0,
                                                    std::uint64_t seed);

/// `sequences` random token sequences of length C over V tokens, labelled by a
/// hash of the whole prefix (so identical contexts share labels). Sequences
/// are drawn by rejection until every class has the same count.
[[nodiscard]] Dataset make_synthetic_language(Index V, Index C, Index K, Index sequences,
                                              std::uint64_t rule_seed);

/// Deterministic context -> label rule used by make_synthetic_language.
[[nodiscard]] int context_label(const std::vector<int>& prefix, Index K, std::uint64_t rule_seed);

enum class LambdaSchedule { constant, inverse_depth };
enum class Optimizer { gd, adam };

struct DataSpec {
    bool language = false;
    Index classes = 4;
    Index per_class = 16;  // n, classification only
    Index input_dim = 16;  // d0, classification only
    Index vocab = 3;
    Index context = 4;
    Index sequences = 24;
    std::uint64_t seed = 0;
};

struct TrainConfig {
    Variant variant = Variant::rn1;
    Placement placement = Placement::post;
    LossKind loss = LossKind::ce;
    bool last_bias = false;
    std::vector<Index> depths{2, 3, 5, 8, 13};
    Index width = 32;
    Index hidden = 0;  // 0: width
    double learning_rate = 0.05;
    double momentum = 0.9;
    Optimizer optimizer = Optimizer::gd;
    double lambda = 0.005;
    LambdaSchedule schedule = LambdaSchedule::constant;
    Index steps = 2000;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::uint64_t master_seed = 0;
    unsigned threads = 0;
    DataSpec data;

    /// Regularization strength at depth L.
    [[nodiscard]] double lambda_at(Index depth) const;
    /// Throws Config on an invalid combination.
    void validate() const;
};

[[nodiscard]] Dataset make_dataset(const DataSpec& spec);

struct TrainResult {
    std::vector<double> history;  // objective before every step, plus the final value
    bool diverged = false;
};

/// Full-batch minimization of the regularized objective; weight decay acts only
/// on the hidden and last matrices. Throws NonFinite on divergence.
TrainResult train(ResNetParams& p, const Dataset& data, const TrainConfig& config, Index depth);
TrainResult train(TransformerParams& p, const Dataset& data, const TrainConfig& config,
                  Index depth);

struct SweepRow {
    std::string architecture;
    Index depth = 0;
    std::uint64_t seed = 0;
    double objective = 0.0;
    double accuracy = 0.0;
    NCReport nc;
};

struct SweepResult {
    std::vector<SweepRow> rows;  // sorted by (depth, seed)
    Index dropped = 0;           // diverged runs
};

/// Trains a fresh network per (depth, seed) cell, in parallel, with streams
/// derived from (master seed, depth, seed).
[[nodiscard]] SweepResult depth_sweep(const TrainConfig& config);

/// Evaluation of one trained network: objective, accuracy, NC metrics.
[[nodiscard]] SweepRow evaluate(const ResNetParams& p, const Dataset& data,
                                const TrainConfig& config, Index depth);
[[nodiscard]] SweepRow evaluate(const TransformerParams& p, const Dataset& data,
                                const TrainConfig& config, Index depth);

enum class NcMetric { nc1, nc2a, nc2b, nc3 };
[[nodiscard]] NcMetric parse_metric(const std::string& name);
[[nodiscard]] double metric_value(const NCReport& r, NcMetric m);

struct TrendResult {
    std::vector<Index> depths;
    std::vector<double> median_log10;  // per depth, median over seeds
    double spearman = 0.0;
    double slope = 0.0;  // d log10(median) / d log10(depth)
};

[[nodiscard]] TrendResult trend_test(const std::vector<SweepRow>& rows, NcMetric metric);

/// Spearman rank correlation with average ranks for ties; 0 if either side is
/// constant.
[[nodiscard]] double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct FlatnessResult {
    SweepResult sweep;
    TrendResult trend;
    double spread = 0.0;    // max - min of median log10 NC1 across depths
    double end_drop = 0.0;  // |median log10 NC1 at deepest - at shallowest|
};

[[nodiscard]] FlatnessResult flatness_experiment(const TrainConfig& config);

[[nodiscard]] std::string sweep_csv_header();
[[nodiscard]] std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Finite-difference check of the full regularized objective for one
/// architecture: width d, depth L (blocks for transformers), N samples, random
/// nonzero biases, lambda = (0.1, 0.05).
[[nodiscard]] GradCheckResult gradcheck_architecture(Variant variant, Placement placement,
                                                     LossKind loss, Index d, Index L, Index N,
                                                     std::uint64_t seed, double step = 1e-4);

[[nodiscard]] nlohmann::json to_json(const TrainConfig& config);
/// Rejects unknown keys and type mismatches with Error(Config).
[[nodiscard]] TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace collapse_lab
