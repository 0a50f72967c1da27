#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "collapse_lab/arch/forward.hpp"
#include "collapse_lab/data.hpp"
#include "collapse_lab/gufm/gufm.hpp"

namespace collapse_lab {

/// Great-circle arc on the sphere of radius sqrt(d) inside the zero-sum
/// hyperplane: p(t) = cos(t) a + sin(t) b for t in [0, angle], with a ⟂ b and
/// both of norm sqrt(d).
struct Arc {
    Matrix a, b;
    double angle = 0.0;

    [[nodiscard]] Matrix at(double t) const;
    /// max over t in [t0, t1] of y^T p(t), in closed form.
    [[nodiscard]] double max_dot(const Matrix& y, double t0, double t1) const;
};

/// Shorter arc from `from` to `to`. Throws ZeroVector when the two points are
/// parallel or antipodal (no unique great circle).
[[nodiscard]] Arc make_arc(const Matrix& from, const Matrix& to);

/// Piecewise geodesic from a sample's start to its target, parametrised by
/// the angle travelled. `park` is where the path first meets the cap
/// {x : x^T h >= d (1 - c m)}.
struct Curve {
    std::vector<Arc> arcs;
    double park = 0.0;
    bool detour = false;

    [[nodiscard]] double length() const;
    [[nodiscard]] Matrix at(double s) const;
    [[nodiscard]] double max_dot(const Matrix& y, double s0, double s1) const;
};

struct PlanOptions {
    double c = 2.0;
    double m_floor = 1e-6;
    Index detour_retries = 32;
    /// Times c is doubled when no margin above the floor exists.
    Index c_raises = 3;
    std::uint64_t seed = 0;
};

/// Curves for U distinct samples, in schedule order.
struct CurvePlan {
    Matrix starts;   // d x U
    Matrix targets;  // d x U
    Matrix parking;  // d x U, where each sample sits after stage 1
    Matrix groups;   // d x Kbar distinct targets, in order of first use
    std::vector<Index> group_of;
    std::vector<Curve> curves;
    double m = 0.0;
    double c = 0.0;
    double curvature = 0.0;  // geodesic curvature bound; kinks counted separately
    Index detours = 0;

    [[nodiscard]] Index samples() const { return starts.cols(); }
    [[nodiscard]] Index group_count() const { return groups.cols(); }
};

/// Largest margin m (log bisection between the floor and the group
/// separation cap) for which every curve clears later samples' starts and
/// earlier samples' parking spots by d (1 - m). Throws MarginBelowFloor.
[[nodiscard]] CurvePlan plan_curves(const Matrix& starts, const Matrix& targets,
                                    const PlanOptions& options = {});

struct Embedding {
    Matrix W0, b0;
    Matrix X1;  // LN(W0 X0 + b0)
    Index attempts = 0;
};

/// Random first layer whose outputs are pairwise distinct and distinct from
/// every target. Up to 16 attempts, then CollisionPersists.
[[nodiscard]] Embedding embed_first_layer(const Matrix& X0, Index d, const Matrix& targets,
                                          std::uint64_t seed);

/// Stage-1 block moving x (exactly) to `next` through one ReLU layer; other
/// samples y with x^T y <= d (1 - m) get a non-positive pre-activation.
/// Two-layer blocks split the scale as sqrt(alpha) in each sub-layer.
[[nodiscard]] MlpBlock stage1_block(const Matrix& x, const Matrix& next, double m,
                                    bool two_layer, double* alpha = nullptr);

/// Stage-2 block pulling every sample in the cap of h toward h and leaving
/// the other samples fixed.
[[nodiscard]] MlpBlock stage2_block(const Matrix& h, double alpha, double c, double m,
                                    bool two_layer);

enum class BlockKind { stage1, stage2 };

struct BlockRecord {
    BlockKind kind = BlockKind::stage1;
    Index owner = -1;  // unique sample (stage 1) or group (stage 2)
    double alpha = 0.0;
    Matrix planned;  // stage 1: the curve point the owner should reach
};

struct BoundLedger {
    double lambda = 0.0;
    Index L1 = 0, L2 = 0;
    Index samples = 0, groups = 0;
    double m = 0.0, c = 0.0;
    /// Unweighted sums of squared Frobenius norms per stage, the weighted
    /// (lambda/2) versions and the bounds they must respect.
    double stage1_sum = 0.0, stage1_reg = 0.0, stage1_bound = 0.0;
    double stage2_sum = 0.0, stage2_reg = 0.0, stage2_bound = 0.0;
    double prologue_sum = 0.0;
    /// Per group: largest member angle to the target before / after stage 2,
    /// and the bound 2 beta0 / L2.
    std::vector<double> beta0, beta_final, beta_bound;
    /// min over moving stage-1 layers of angle / (m alpha / (4 sqrt d)).
    double min_advance_ratio = 0.0;
    Index stage1_overrun = 0;  // samples still outside their cap after L1 layers

    [[nodiscard]] nlohmann::json to_json() const;
};

struct SynthesisConfig {
    Variant variant = Variant::rn1;
    Index L1 = 50;
    Index L2 = 50;
    double lambda = 0.1;
    PlanOptions plan;
    std::uint64_t seed = 0;
    double gamma = 0.0;   // 0: min(0.1, min(L1, L2)^(-1/4))
    double theta = 1e-3;  // prologue rotation angle before halving
};

struct Prologue {
    Matrix W_e, W_p;
    TransformerBlock block;
    double gamma = 0.0;
    double theta = 0.0;
    Index halvings = 0;
};

struct Synthesis {
    Variant variant = Variant::rn1;
    ResNetParams resnet;            // RN variants
    TransformerParams transformer;  // T variants
    Prologue prologue;
    CurvePlan plan;
    BoundLedger ledger;
    std::vector<BlockRecord> schedule;  // one per constructed block (prologue excluded)
    /// R classes in schedule order; representative = first member.
    Equivalence unique;
    Index embedding_attempts = 0;
};

/// Zero-loss-gap construction: a network of depth U L1 + Kbar L2 + 1 whose
/// last-layer features approach the GUFM solution's features.
[[nodiscard]] Synthesis synthesize(const Dataset& data, const GufmSolution& solution,
                                   const SynthesisConfig& config);

/// Block-1 transformer weights: one-hot token lift, positional code whose LN
/// scale halves per step back from the last position, and a uniform
/// attention that shifts the prefix average into fresh coordinates.
/// `tokens`/`targets` drive the collision check (theta halves on collision).
[[nodiscard]] Prologue transformer_prologue(Variant variant, Index vocab, Index context,
                                            Index d, const TokenBatch& tokens,
                                            const Matrix& targets, double gamma,
                                            double theta);

/// Distinctness of block-1 outputs over every context up to length C.
struct ContextSeparation {
    Index contexts = 0;
    double min_output_distance = 0.0;    // after residual and LN
    double min_residual_distance = 0.0;  // z + mixed, before LN
    double min_mixing_distance = 0.0;    // ||zA_p - zA_q||
    double bound = 0.0;                  // gamma * min_mixing_distance
};
[[nodiscard]] ContextSeparation prologue_separation(const Prologue& prologue, Variant variant);

struct Assertion {
    std::string name;
    bool passed = false;
    double value = 0.0;
    double bound = 0.0;
};

struct VerificationReport {
    std::vector<Assertion> checks;

    [[nodiscard]] bool passed() const;
    [[nodiscard]] nlohmann::json to_json() const;
};

/// Re-runs the synthesized network (verification-mode LN) and checks the
/// construction's invariants against its schedule and ledger.
[[nodiscard]] VerificationReport verify_construction(const Synthesis& s, const Dataset& data,
                                                     const GufmSolution& solution);

/// Objective of the synthesized network (verification-mode LN, lambda on
/// every hidden matrix and on the last layer).
[[nodiscard]] ObjectiveValue synthesized_objective(const Synthesis& s, const Dataset& data,
                                                   LossKind loss, double lambda);

struct GapRow {
    Index L1 = 0, L2 = 0;
    Index depth = 0;
    double objective = 0.0;
    double gufm = 0.0;
    double gap = 0.0;
    double hidden_sum = 0.0;
};

/// Synthesizes at L1 = L2 = each grid value and records the loss gap.
[[nodiscard]] std::vector<GapRow> loss_gap_curve(const Dataset& data,
                                                 const GufmSolution& solution,
                                                 const GufmProblem& problem,
                                                 SynthesisConfig config,
                                                 const std::vector<Index>& grid);

/// Least-squares slope of log(y) against log(x).
[[nodiscard]] double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace collapse_lab
