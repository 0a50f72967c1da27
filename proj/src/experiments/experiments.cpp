#include "collapse_lab/experiments/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "collapse_lab/error.hpp"
#include "collapse_lab/io/json_reader.hpp"
#include "collapse_lab/numerics/ops.hpp"
#include "collapse_lab/parallel.hpp"
#include "collapse_lab/rng.hpp"

namespace collapse_lab {

namespace {

struct OptimizerState {
    std::vector<Matrix> first, second;
    Index t = 0;
};

template <class P, class Input>
TrainResult train_impl(P& p, const Input& input, const Dataset& data, const TrainConfig& cfg,
                       Index depth) {
    const Matrix Y = data.targets();
    const double lam = cfg.lambda_at(depth);
    const Regularization reg{lam, lam};
    TrainResult result;
    OptimizerState state;
    std::vector<Matrix> grads;
    for (Index step = 0; step < cfg.steps; ++step) {
        const ObjectiveValue v =
            objective_and_gradient(p, input, Y, cfg.loss, reg, NormMode::training, grads);
        result.history.push_back(v.total());
        auto refs = tensors(p);
        if (state.first.empty()) {
            for (const auto& g : grads) {
                state.first.push_back(Matrix::Zero(g.rows(), g.cols()));
                if (cfg.optimizer == Optimizer::adam) {
                    state.second.push_back(Matrix::Zero(g.rows(), g.cols()));
                }
            }
        }
        ++state.t;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            Matrix& w = *refs[i].tensor;
            if (cfg.optimizer == Optimizer::gd) {
                state.first[i] = cfg.momentum * state.first[i] + grads[i];
                w -= cfg.learning_rate * state.first[i];
            } else {
                constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
                state.first[i] = b1 * state.first[i] + (1.0 - b1) * grads[i];
                state.second[i] =
                    b2 * state.second[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
                w.array() -= cfg.learning_rate * (state.first[i].array() / c1) /
                             ((state.second[i].array() / c2).sqrt() + eps);
            }
            require_finite(w, refs[i].name.c_str());
        }
    }
    const ObjectiveValue last = objective(p, input, Y, cfg.loss, reg, NormMode::training);
    require(std::isfinite(last.total()), ErrorKind::NonFinite, "objective diverged");
    result.history.push_back(last.total());
    return result;
}

double accuracy(const Matrix& logits, const Labels& labels) {
    Index hits = 0;
    for (Index j = 0; j < logits.cols(); ++j) {
        Index k = 0;
        logits.col(j).maxCoeff(&k);
        hits += k == labels[static_cast<std::size_t>(j)];
    }
    return static_cast<double>(hits) / static_cast<double>(logits.cols());
}

SweepRow evaluate_impl(const ForwardResult& fr, const Matrix& W, const Dataset& data,
                       const TrainConfig& cfg, Index depth, double objective_value) {
    SweepRow row;
    row.architecture = std::string(to_string(cfg.variant));
    row.depth = depth;
    row.objective = objective_value;
    row.accuracy = accuracy(fr.logits, data.labels);
    row.nc = report(W, fr.features, data.labels, cfg.loss, cfg.last_bias);
    return row;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

std::string_view to_string(LambdaSchedule s) {
    return s == LambdaSchedule::constant ? "constant" : "inverse_depth";
}
std::string_view to_string(Optimizer o) { return o == Optimizer::gd ? "gd" : "adam"; }

}  // namespace

Dataset make_synthetic_classification(Index K, Index n, Index d0, std::uint64_t seed) {
    require(K >= 2 && n >= 1 && d0 >= 1, ErrorKind::Config, "classification needs K >= 2, n, d0 >= 1");
    Rng rng(derive_seed({seed, 0x636c73ULL}));
    const Matrix centers = gaussian_matrix(rng, d0, K, std::sqrt(2.0 / static_cast<double>(d0)));
    const double noise = 0.5 / std::sqrt(static_cast<double>(d0));
    Dataset data;
    data.X0.resize(d0, K * n);
    data.classes = K;
    for (Index k = 0; k < K; ++k) {
        for (Index i = 0; i < n; ++i) {
            const Index j = k * n + i;
            while (true) {
                data.X0.col(j) = centers.col(k) + gaussian_matrix(rng, d0, 1, noise);
                bool duplicate = false;
                for (Index q = 0; q < j && !duplicate; ++q) duplicate = data.X0.col(q) == data.X0.col(j);
                if (!duplicate) break;
            }
            data.labels.push_back(static_cast<int>(k));
        }
    }
    data.equivalence = singleton_classes(K * n);
    return data;
}

int context_label(const std::vector<int>& prefix, Index K, std::uint64_t rule_seed) {
    std::uint64_t h = mix_seed(rule_seed ^ 0x6c616e67ULL);
    for (int t : prefix) h = mix_seed(h ^ (static_cast<std::uint64_t>(t) + 1));
    return static_cast<int>(h % static_cast<std::uint64_t>(K));
}

Dataset make_synthetic_language(Index V, Index C, Index K, Index sequences,
                                std::uint64_t rule_seed) {
    require(V >= 1 && C >= 1 && K >= 2 && sequences >= 1, ErrorKind::Config,
            "language data needs V, C, sequences >= 1 and K >= 2");
    require((sequences * C) % K == 0, ErrorKind::Config,
            "sequences * C must be divisible by K for balanced labels");
    const Index quota = sequences * C / K;
    Rng rng(derive_seed({rule_seed, 0x736571ULL}));
    std::uniform_int_distribution<int> token(0, static_cast<int>(V) - 1);
    Dataset data;
    data.vocab = V;
    data.context = C;
    data.classes = K;
    // Whole sequences that would overflow a class quota are rejected; a run
    // that stalls near the end starts over.
    for (int restart = 0; restart < 1000; ++restart) {
        std::vector<Index> counts(static_cast<std::size_t>(K), 0);
        data.tokens.sequences.clear();
        data.labels.clear();
        Index stalled = 0;
        while (static_cast<Index>(data.tokens.sequences.size()) < sequences && stalled < 5000) {
            std::vector<int> seq(static_cast<std::size_t>(C));
            for (auto& t : seq) t = token(rng);
            std::vector<int> labels;
            std::vector<Index> next = counts;
            bool fits = true;
            for (Index t = 0; t < C && fits; ++t) {
                const int y = context_label({seq.begin(), seq.begin() + t + 1}, K, rule_seed);
                labels.push_back(y);
                fits = ++next[static_cast<std::size_t>(y)] <= quota;
            }
            if (!fits) {
                ++stalled;
                continue;
            }
            stalled = 0;
            counts = next;
            data.tokens.sequences.push_back(std::move(seq));
            data.labels.insert(data.labels.end(), labels.begin(), labels.end());
        }
        if (static_cast<Index>(data.tokens.sequences.size()) == sequences) {
            data.equivalence = identical_contexts(data.tokens);
            return data;
        }
    }
    throw Error(ErrorKind::Config, "could not balance labels by rejection; change K, C or sequences");
}

double TrainConfig::lambda_at(Index depth) const {
    return schedule == LambdaSchedule::constant ? lambda : lambda / static_cast<double>(depth);
}

void TrainConfig::validate() const {
    require(!depths.empty(), ErrorKind::Config, "depths must be nonempty");
    for (Index L : depths) require(L >= 1, ErrorKind::Config, "depths must be >= 1");
    require(lambda > 0.0, ErrorKind::Config, "lambda must be positive");
    require(steps >= 0 && learning_rate >= 0.0, ErrorKind::Config, "steps and learning rate must be >= 0");
    require(!seeds.empty(), ErrorKind::Config, "seeds must be nonempty");
    require(width >= 1 && hidden >= 0, ErrorKind::Config, "width must be positive");
    require(is_transformer(variant) == data.language, ErrorKind::Config,
            "transformers train on language data, ResNets on classification data");
}

Dataset make_dataset(const DataSpec& spec) {
    return spec.language
               ? make_synthetic_language(spec.vocab, spec.context, spec.classes, spec.sequences, spec.seed)
               : make_synthetic_classification(spec.classes, spec.per_class, spec.input_dim, spec.seed);
}

TrainResult train(ResNetParams& p, const Dataset& data, const TrainConfig& config, Index depth) {
    return train_impl(p, data.X0, data, config, depth);
}

TrainResult train(TransformerParams& p, const Dataset& data, const TrainConfig& config,
                  Index depth) {
    return train_impl(p, data.tokens, data, config, depth);
}

SweepRow evaluate(const ResNetParams& p, const Dataset& data, const TrainConfig& config,
                  Index depth) {
    const double lam = config.lambda_at(depth);
    const auto fr = forward_resnet(p, data.X0);
    const auto obj = objective(p, data.X0, data.targets(), config.loss, {lam, lam});
    return evaluate_impl(fr, p.WL, data, config, depth, obj.total());
}

SweepRow evaluate(const TransformerParams& p, const Dataset& data, const TrainConfig& config,
                  Index depth) {
    const double lam = config.lambda_at(depth);
    const auto fr = forward_transformer(p, data.tokens);
    const auto obj = objective(p, data.tokens, data.targets(), config.loss, {lam, lam});
    return evaluate_impl(fr, p.W_last, data, config, depth, obj.total());
}

SweepResult depth_sweep(const TrainConfig& config) {
    config.validate();
    const Dataset data = make_dataset(config.data);
    struct Cell {
        Index depth;
        std::uint64_t seed;
    };
    std::vector<Cell> cells;
    for (Index L : config.depths) {
        for (auto s : config.seeds) cells.push_back({L, s});
    }
    std::vector<std::optional<SweepRow>> out(cells.size());
    parallel_for(cells.size(), config.threads, [&](std::size_t i) {
        const Cell cell = cells[i];
        Rng rng(derive_seed({config.master_seed, static_cast<std::uint64_t>(cell.depth), cell.seed}));
        try {
            if (is_transformer(config.variant)) {
                TransformerShape shape;
                shape.variant = config.variant;
                shape.placement = config.placement;
                shape.vocab = data.vocab;
                shape.context = data.context;
                shape.width = config.width;
                shape.hidden = config.hidden;
                shape.classes = data.classes;
                shape.blocks = cell.depth;
                shape.last_bias = config.last_bias;
                TransformerParams p = init_transformer(shape, rng);
                (void)train(p, data, config, cell.depth);
                out[i] = evaluate(p, data, config, cell.depth);
            } else {
                ResNetShape shape;
                shape.variant = config.variant;
                shape.placement = config.placement;
                shape.input_dim = data.X0.rows();
                shape.width = config.width;
                shape.hidden = config.hidden;
                shape.classes = data.classes;
                shape.depth = cell.depth;
                shape.last_bias = config.last_bias;
                ResNetParams p = init_resnet(shape, rng);
                (void)train(p, data, config, cell.depth);
                out[i] = evaluate(p, data, config, cell.depth);
            }
            out[i]->seed = cell.seed;
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::NonFinite && e.kind() != ErrorKind::ZeroVariance) throw;
        }
    });
    SweepResult result;
    for (auto& row : out) {
        if (row) {
            result.rows.push_back(std::move(*row));
        } else {
            ++result.dropped;
        }
    }
    std::stable_sort(result.rows.begin(), result.rows.end(), [](const auto& a, const auto& b) {
        return a.depth != b.depth ? a.depth < b.depth : a.seed < b.seed;
    });
    return result;
}

NcMetric parse_metric(const std::string& name) {
    if (name == "nc1") return NcMetric::nc1;
    if (name == "nc2a") return NcMetric::nc2a;
    if (name == "nc2b") return NcMetric::nc2b;
    if (name == "nc3") return NcMetric::nc3;
    throw Error(ErrorKind::Config, "unknown metric '" + name + "'");
}

double metric_value(const NCReport& r, NcMetric m) {
    switch (m) {
        case NcMetric::nc1: return r.nc1;
        case NcMetric::nc2a: return r.nc2a;
        case NcMetric::nc2b: return r.nc2b;
        case NcMetric::nc3: return r.nc3;
    }
    return r.nc1;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::ShapeMismatch,
            "spearman needs two equal-length series");
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

TrendResult trend_test(const std::vector<SweepRow>& rows, NcMetric metric) {
    std::map<Index, std::vector<double>> by_depth;
    for (const auto& r : rows) {
        by_depth[r.depth].push_back(std::log10(std::max(metric_value(r.nc, metric), 1e-300)));
    }
    TrendResult t;
    std::vector<double> xd, xlog;
    for (auto& [depth, values] : by_depth) {
        t.depths.push_back(depth);
        t.median_log10.push_back(median(values));
        xd.push_back(static_cast<double>(depth));
        xlog.push_back(std::log10(static_cast<double>(depth)));
    }
    if (t.depths.size() < 2) return t;
    t.spearman = spearman(xd, t.median_log10);
    const double n = static_cast<double>(xlog.size());
    const double mx = std::accumulate(xlog.begin(), xlog.end(), 0.0) / n;
    const double my = std::accumulate(t.median_log10.begin(), t.median_log10.end(), 0.0) / n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < xlog.size(); ++i) {
        sxy += (xlog[i] - mx) * (t.median_log10[i] - my);
        sxx += (xlog[i] - mx) * (xlog[i] - mx);
    }
    t.slope = sxx > 0.0 ? sxy / sxx : 0.0;
    return t;
}

FlatnessResult flatness_experiment(const TrainConfig& config) {
    FlatnessResult f;
    f.sweep = depth_sweep(config);
    f.trend = trend_test(f.sweep.rows, NcMetric::nc1);
    if (!f.trend.median_log10.empty()) {
        const auto [lo, hi] = std::minmax_element(f.trend.median_log10.begin(), f.trend.median_log10.end());
        f.spread = *hi - *lo;
        f.end_drop = std::abs(f.trend.median_log10.back() - f.trend.median_log10.front());
    }
    return f;
}

std::string sweep_csv_header() { return "architecture,depth,seed,objective,accuracy,nc1,nc2a,nc2b,nc3"; }

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::string out = sweep_csv_header() + "\n";
    for (const auto& r : rows) {
        out += r.architecture + "," + std::to_string(r.depth) + "," + std::to_string(r.seed) + "," +
               format_real(r.objective) + "," + format_real(r.accuracy) + "," + format_real(r.nc.nc1) +
               "," + format_real(r.nc.nc2a) + "," + format_real(r.nc.nc2b) + "," +
               format_real(r.nc.nc3) + "\n";
    }
    return out;
}

GradCheckResult gradcheck_architecture(Variant variant, Placement placement, LossKind loss,
                                       Index d, Index L, Index N, std::uint64_t seed,
                                       double step) {
    require(N >= 2 && N % 2 == 0, ErrorKind::Config, "gradcheck uses an even sample count");
    const Index K = 2;
    const Regularization reg{0.1, 0.05};
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(variant),
                         static_cast<std::uint64_t>(placement)}));
    Labels labels;
    for (Index j = 0; j < N; ++j) labels.push_back(static_cast<int>(j % K));
    const Matrix Y = one_hot(labels, K);
    auto randomize = [&](auto refs) {
        for (auto& r : refs) {
            if (r.role == TensorRole::bias) *r.tensor = gaussian_matrix(rng, r.tensor->rows(), 1, 0.1);
        }
    };
    DifferentiableObjective f;
    std::vector<Matrix> theta;
    if (!is_transformer(variant)) {
        ResNetParams p = init_resnet({variant, placement, 5, d, 0, K, L, true}, rng);
        randomize(tensors(p));
        const Matrix X0 = gaussian_matrix(rng, 5, N);
        for (auto& r : tensors(p)) theta.push_back(*r.tensor);
        f = [=](const std::vector<Matrix>& th, std::vector<Matrix>* g) mutable {
            auto refs = tensors(p);
            for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = th[i];
            if (g) return objective_and_gradient(p, X0, Y, loss, reg, NormMode::training, *g).total();
            return objective(p, X0, Y, loss, reg).total();
        };
    } else {
        const Index V = 3;
        TransformerParams p = init_transformer({variant, placement, V, 2, d, 0, K, L, true}, rng);
        randomize(tensors(p));
        TokenBatch tokens;
        std::uniform_int_distribution<int> token(0, static_cast<int>(V) - 1);
        for (Index s = 0; s < N / 2; ++s) tokens.sequences.push_back({token(rng), token(rng)});
        for (auto& r : tensors(p)) theta.push_back(*r.tensor);
        f = [=](const std::vector<Matrix>& th, std::vector<Matrix>* g) mutable {
            auto refs = tensors(p);
            for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = th[i];
            if (g) return objective_and_gradient(p, tokens, Y, loss, reg, NormMode::training, *g).total();
            return objective(p, tokens, Y, loss, reg).total();
        };
    }
    return finite_diff_check(f, theta, step);
}

nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"variant", std::string(to_string(c.variant))},
        {"placement", std::string(to_string(c.placement))},
        {"loss", std::string(to_string(c.loss))},
        {"last_bias", c.last_bias},
        {"depths", c.depths},
        {"width", c.width},
        {"hidden", c.hidden},
        {"learning_rate", c.learning_rate},
        {"momentum", c.momentum},
        {"optimizer", std::string(to_string(c.optimizer))},
        {"lambda", c.lambda},
        {"lambda_schedule", std::string(to_string(c.schedule))},
        {"steps", c.steps},
        {"seeds", c.seeds},
        {"master_seed", c.master_seed},
        {"threads", c.threads},
        {"data",
         {{"language", c.data.language},
          {"classes", c.data.classes},
          {"per_class", c.data.per_class},
          {"input_dim", c.data.input_dim},
          {"vocab", c.data.vocab},
          {"context", c.data.context},
          {"sequences", c.data.sequences},
          {"seed", c.data.seed}}},
    };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    io::JsonReader r(j, "train");
    std::string variant(to_string(c.variant)), placement(to_string(c.placement)),
        loss(to_string(c.loss)), optimizer(to_string(c.optimizer)), schedule(to_string(c.schedule));
    r.get("variant", variant);
    r.get("placement", placement);
    r.get("loss", loss);
    r.get("optimizer", optimizer);
    r.get("lambda_schedule", schedule);
    r.get("last_bias", c.last_bias);
    r.get("depths", c.depths);
    r.get("width", c.width);
    r.get("hidden", c.hidden);
    r.get("learning_rate", c.learning_rate);
    r.get("momentum", c.momentum);
    r.get("lambda", c.lambda);
    r.get("steps", c.steps);
    r.get("seeds", c.seeds);
    r.get("master_seed", c.master_seed);
    r.get("threads", c.threads);
    if (const auto* d = r.child("data")) {
        io::JsonReader dr(*d, "train.data");
        dr.get("language", c.data.language);
        dr.get("classes", c.data.classes);
        dr.get("per_class", c.data.per_class);
        dr.get("input_dim", c.data.input_dim);
        dr.get("vocab", c.data.vocab);
        dr.get("context", c.data.context);
        dr.get("sequences", c.data.sequences);
        dr.get("seed", c.data.seed);
        dr.finish();
    }
    r.finish();
    c.variant = parse_variant(variant);
    c.placement = parse_placement(placement);
    c.loss = parse_loss_kind(loss);
    if (optimizer == "gd") {
        c.optimizer = Optimizer::gd;
    } else if (optimizer == "adam") {
        c.optimizer = Optimizer::adam;
    } else {
        throw Error(ErrorKind::Config, "optimizer must be gd or adam");
    }
    if (schedule == "constant") {
        c.schedule = LambdaSchedule::constant;
    } else if (schedule == "inverse_depth") {
        c.schedule = LambdaSchedule::inverse_depth;
    } else {
        throw Error(ErrorKind::Config, "lambda_schedule must be constant or inverse_depth");
    }
    c.validate();
    return c;
}

}  // namespace collapse_lab
