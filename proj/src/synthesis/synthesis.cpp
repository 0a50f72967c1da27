#include "collapse_lab/synthesis/synthesis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "collapse_lab/error.hpp"
#include "collapse_lab/numerics/ops.hpp"
#include "collapse_lab/rng.hpp"

namespace collapse_lab {

namespace {

constexpr NormMode kExact = NormMode::verification;

double sqrt_d(Index d) { return std::sqrt(static_cast<double>(d)); }

double angle_between(const Matrix& x, const Matrix& y) {
    const Matrix u = x / x.norm();
    const Matrix v = y / y.norm();
    return 2.0 * std::atan2((u - v).norm(), (u + v).norm());
}

double min_pairwise_distance(const Matrix& X) {
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < X.cols(); ++i) {
        for (Index j = i + 1; j < X.cols(); ++j) {
            best = std::min(best, (X.col(i) - X.col(j)).norm());
        }
    }
    return best;
}

double min_cross_distance(const Matrix& X, const Matrix& Y) {
    double best = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < X.cols(); ++i) {
        for (Index j = 0; j < Y.cols(); ++j) {
            best = std::min(best, (X.col(i) - Y.col(j)).norm());
        }
    }
    return best;
}

Matrix columns(const Matrix& X, const std::vector<Index>& idx) {
    Matrix out(X.rows(), static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Index>(i)) = X.col(idx[i]);
    return out;
}

Matrix branch(const MlpBlock& b, const Matrix& X) {
    Matrix h = (b.W1 * X).colwise() + b.b1.col(0);
    h = relu(h);
    if (b.W2.size() == 0) return h;
    return (b.W2 * h).colwise() + b.b2.col(0);
}

Matrix pre_activation(const MlpBlock& b, const Matrix& X) {
    return (b.W1 * X).colwise() + b.b1.col(0);
}

Matrix apply_block(const MlpBlock& b, const Matrix& X) {
    return layer_norm(X + branch(b, X), kExact);
}

double block_sum(const MlpBlock& b) { return b.W1.squaredNorm() + b.W2.squaredNorm(); }

// RN1 scale from a built block: ||W1||_F = alpha, or ||W1||_F^2 = alpha for
// two-layer blocks.
double block_alpha(const MlpBlock& b) {
    return b.W2.size() == 0 ? b.W1.norm() : b.W1.squaredNorm();
}

// Unique samples ordered by (label, first index).
Equivalence schedule_order(const Equivalence& classes, const Labels& labels) {
    Equivalence out = classes;
    std::sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
        const int la = labels[static_cast<std::size_t>(a.front())];
        const int lb = labels[static_cast<std::size_t>(b.front())];
        return la != lb ? la < lb : a.front() < b.front();
    });
    return out;
}

std::vector<Index> representatives(const Equivalence& unique) {
    std::vector<Index> reps;
    for (const auto& cls : unique) reps.push_back(cls.front());
    return reps;
}

Matrix shift_matrix(Index V, Index d) {
    Matrix S = Matrix::Zero(d, d);
    for (Index v = 0; v < V; ++v) S(V + v, v) = 1.0;
    return S;
}

// Rotation mixing the last shifted-token coordinate with the first positional one.
Matrix givens(Index V, Index d, double theta) {
    Matrix G = Matrix::Identity(d, d);
    const Index p = 2 * V - 1;
    const Index q = 2 * V;
    G(p, p) = std::cos(theta);
    G(q, q) = std::cos(theta);
    G(p, q) = -std::sin(theta);
    G(q, p) = std::sin(theta);
    return G;
}

TransformerParams prologue_network(const Prologue& pr, Variant variant, Index K) {
    TransformerParams p;
    p.variant = variant;
    p.placement = Placement::post;
    p.W_e = pr.W_e;
    p.W_p = pr.W_p;
    p.blocks = {pr.block};
    p.W_last = Matrix::Zero(K, pr.W_e.rows());
    p.b_last = Matrix::Zero(K, 1);
    return p;
}

// Block-1 outputs, per flattened token position.
Matrix prologue_features(const Prologue& pr, Variant variant, const TokenBatch& tokens) {
    ForwardOptions opts;
    opts.mode = kExact;
    opts.capture = true;
    return forward_transformer(prologue_network(pr, variant, 1), tokens, opts).states.at(1);
}

struct Trajectory {
    std::vector<MlpBlock> blocks;
    std::vector<BlockRecord> schedule;
    BoundLedger ledger;
};

Trajectory build_blocks(const CurvePlan& plan, const SynthesisConfig& cfg, bool two_layer) {
    const Index d = plan.starts.rows();
    const Index U = plan.samples();
    const double dd = static_cast<double>(d);
    const double m = plan.m;
    const double c = plan.c;
    const double q = std::sqrt(dd + m * m / 4.0);

    Trajectory out;
    BoundLedger& led = out.ledger;
    led.lambda = cfg.lambda;
    led.L1 = cfg.L1;
    led.L2 = cfg.L2;
    led.samples = U;
    led.groups = plan.group_count();
    led.m = m;
    led.c = c;
    led.min_advance_ratio = std::numeric_limits<double>::infinity();

    Matrix X = plan.starts;
    for (Index u = 0; u < U; ++u) {
        const Curve& curve = plan.curves[static_cast<std::size_t>(u)];
        const double alpha0 = 4.0 * sqrt_d(d) * curve.park / (static_cast<double>(cfg.L1) * m);
        const double step = 2.0 * std::asin(std::min(1.0, alpha0 * m / (4.0 * q)));
        double s = 0.0;
        for (Index l = 0; l < cfg.L1; ++l) {
            BlockRecord rec;
            rec.kind = BlockKind::stage1;
            rec.owner = u;
            MlpBlock block;
            if (s < curve.park) {
                const double s_next = std::min(s + step, curve.park);
                rec.planned = curve.at(s_next);
                block = stage1_block(X.col(u), rec.planned, m, two_layer, &rec.alpha);
                s = s_next;
            } else {
                block = zero_mlp_block(d, d, two_layer);
            }
            const Matrix before = X.col(u);
            X = apply_block(block, X);
            if (rec.alpha > 0.0) {
                const double ratio = angle_between(before, X.col(u)) /
                                     (m * rec.alpha / (4.0 * sqrt_d(d)));
                led.min_advance_ratio = std::min(led.min_advance_ratio, ratio);
            }
            led.stage1_sum += block_sum(block);
            out.blocks.push_back(std::move(block));
            out.schedule.push_back(std::move(rec));
        }
        if (X.col(u).dot(plan.targets.col(u)) < dd * (1.0 - c * m) - 1e-9 * dd) {
            ++led.stage1_overrun;
        }
    }

    const double L2 = static_cast<double>(cfg.L2);
    const double alpha2 = 16.0 * sqrt_d(d) * std::log(L2) / (c * m * L2);
    for (Index j = 0; j < plan.group_count(); ++j) {
        const Matrix h = plan.groups.col(j);
        auto worst_angle = [&] {
            double beta = 0.0;
            for (Index u = 0; u < U; ++u) {
                if (plan.group_of[static_cast<std::size_t>(u)] == j) {
                    beta = std::max(beta, angle_between(X.col(u), h));
                }
            }
            return beta;
        };
        const double beta0 = worst_angle();
        for (Index l = 0; l < cfg.L2; ++l) {
            MlpBlock block = stage2_block(h, alpha2, c, m, two_layer);
            X = apply_block(block, X);
            led.stage2_sum += block_sum(block);
            out.blocks.push_back(std::move(block));
            BlockRecord rec;
            rec.kind = BlockKind::stage2;
            rec.owner = j;
            rec.alpha = alpha2;
            out.schedule.push_back(std::move(rec));
        }
        led.beta0.push_back(beta0);
        led.beta_final.push_back(worst_angle());
        led.beta_bound.push_back(2.0 * beta0 / L2);
    }
    if (!std::isfinite(led.min_advance_ratio)) led.min_advance_ratio = 0.0;

    const double lam = cfg.lambda;
    const double N = static_cast<double>(U);
    const double pi = std::numbers::pi;
    const double logL2 = std::log(L2);
    led.stage1_reg = 0.5 * lam * led.stage1_sum;
    led.stage2_reg = 0.5 * lam * led.stage2_sum;
    if (two_layer) {
        led.stage1_bound = 16.0 * sqrt_d(d) * pi * lam * N / m;
        led.stage2_bound = 16.0 * N * sqrt_d(d) * logL2 * lam / m;
    } else {
        led.stage1_bound = 32.0 * dd * pi * pi * lam * N / (static_cast<double>(cfg.L1) * m * m);
        led.stage2_bound = 128.0 * N * dd * lam * logL2 * logL2 / (m * m * L2);
    }
    return out;
}

Matrix targets_for(const GufmSolution& solution, const std::vector<Index>& reps) {
    return columns(solution.X, reps);
}

}  // namespace

Embedding embed_first_layer(const Matrix& X0, Index d, const Matrix& targets,
                            std::uint64_t seed) {
    require(d >= 4, ErrorKind::DimensionTooSmall, "width must be at least 4");
    const double tol = 1e-6 * sqrt_d(d);
    for (Index attempt = 0; attempt < 16; ++attempt) {
        Rng rng(derive_seed({seed, 0x656d62ULL, static_cast<std::uint64_t>(attempt)}));
        Embedding e;
        e.W0 = gaussian_matrix(rng, d, X0.rows(), 1.0 / std::sqrt(static_cast<double>(X0.rows())));
        e.b0 = gaussian_matrix(rng, d, 1);
        e.attempts = attempt + 1;
        try {
            e.X1 = layer_norm((e.W0 * X0).colwise() + e.b0.col(0), kExact);
        } catch (const Error& err) {
            if (err.kind() != ErrorKind::ZeroVariance) throw;
            continue;
        }
        if (min_pairwise_distance(e.X1) > tol && min_cross_distance(e.X1, targets) > tol) {
            return e;
        }
    }
    throw Error(ErrorKind::CollisionPersists, "first-layer embedding keeps colliding");
}

MlpBlock stage1_block(const Matrix& x, const Matrix& next, double m, bool two_layer,
                      double* alpha_out) {
    const Index d = x.rows();
    const double dd = static_cast<double>(d);
    const Matrix diff = next - x;
    const double r = diff.norm();
    if (alpha_out) *alpha_out = 0.0;
    if (r == 0.0) return zero_mlp_block(d, d, two_layer);

    const double q = std::sqrt(dd + m * m / 4.0);
    const double alpha = 2.0 * r * q / (m * sqrt_d(d));
    const Matrix dir = diff / r;
    const Matrix u = (ones(d) + (m / 2.0) * dir) / q;
    const Matrix v = x / sqrt_d(d);
    const Matrix bias = -(1.0 - m / 2.0) * sqrt_d(d) / q * ones(d);
    if (alpha_out) *alpha_out = alpha;

    MlpBlock b;
    if (!two_layer) {
        b.W1 = alpha * u * v.transpose();
        b.b1 = alpha * bias;
        return b;
    }
    const double root = std::sqrt(alpha);
    const Matrix w = ones(d) + dir;
    b.W1 = root * u * v.transpose();
    b.b1 = root * bias;
    b.W2 = root * (w * w.transpose()) / w.squaredNorm();
    b.b2 = Matrix::Zero(d, 1);
    return b;
}

MlpBlock stage2_block(const Matrix& h, double alpha, double c, double m, bool two_layer) {
    const Index d = h.rows();
    const Matrix hh = h / h.norm();
    const Matrix w = ones(d) + c * m * hh;
    const double nw = w.norm();
    const Matrix bias = -(1.0 - 2.0 * c * m) * sqrt_d(d) / nw * ones(d);

    MlpBlock b;
    if (!two_layer) {
        b.W1 = alpha * (w / nw) * hh.transpose();
        b.b1 = alpha * bias;
        return b;
    }
    const double root = std::sqrt(alpha);
    b.W1 = root * (w / nw) * hh.transpose();
    b.b1 = root * bias;
    b.W2 = root * (ones(d) * ones(d).transpose() / static_cast<double>(d) + hh * hh.transpose());
    b.b2 = Matrix::Zero(d, 1);
    return b;
}

nlohmann::json BoundLedger::to_json() const {
    return {
        {"lambda", lambda},
        {"L1", L1},
        {"L2", L2},
        {"samples", samples},
        {"groups", groups},
        {"m", m},
        {"c", c},
        {"stage1", {{"sum_sq", stage1_sum}, {"reg", stage1_reg}, {"bound", stage1_bound}}},
        {"stage2", {{"sum_sq", stage2_sum}, {"reg", stage2_reg}, {"bound", stage2_bound}}},
        {"prologue_sum_sq", prologue_sum},
        {"beta0", beta0},
        {"beta_final", beta_final},
        {"beta_bound", beta_bound},
        {"min_advance_ratio", min_advance_ratio},
        {"stage1_overrun", stage1_overrun},
    };
}

Prologue transformer_prologue(Variant variant, Index vocab, Index context, Index d,
                              const TokenBatch& tokens, const Matrix& targets, double gamma,
                              double theta) {
    require(is_transformer(variant), ErrorKind::Config, "prologue needs a transformer variant");
    require(d >= 2 * vocab + 2, ErrorKind::DimensionTooSmall, "transformer width below 2V + 2");
    Prologue pr;
    pr.gamma = gamma;
    pr.W_e = Matrix::Zero(d, vocab);
    for (Index v = 0; v < vocab; ++v) pr.W_e(v, v) = 1.0;
    pr.W_p = Matrix::Zero(d, context);
    for (Index t = 0; t < context; ++t) {
        const double S = std::pow(4.0, static_cast<double>(context - t)) - 1.0;
        const double root = std::sqrt(2.0 * S - 1.0);
        pr.W_p(2 * vocab, t) = (-1.0 + root) / 2.0;
        pr.W_p(2 * vocab + 1, t) = (-1.0 - root) / 2.0;
    }

    const Equivalence unique = identical_contexts(tokens);
    const std::vector<Index> reps = representatives(unique);
    const Matrix S = shift_matrix(vocab, d);
    const double tol = 1e-9 * sqrt_d(d);
    for (Index halving = 0; halving <= 16; ++halving, theta /= 2.0) {
        pr.block = zero_transformer_block(variant, d, d);
        const Matrix G = givens(vocab, d, theta);
        if (has_factored_attention(variant)) {
            Matrix P = Matrix::Zero(d, d);
            for (Index v = 0; v < vocab; ++v) P(vocab + v, vocab + v) = 1.0;
            pr.block.attn.W_V = std::sqrt(gamma) * S;
            pr.block.attn.W_O = std::sqrt(gamma) * G * P;
        } else {
            pr.block.attn.W_VO = gamma * G * S;
        }
        pr.theta = theta;
        pr.halvings = halving;
        if (tokens.sequences.empty()) return pr;
        const Matrix feats = columns(prologue_features(pr, variant, tokens), reps);
        if (min_pairwise_distance(feats) > tol &&
            (targets.size() == 0 || min_cross_distance(feats, targets) > tol)) {
            return pr;
        }
    }
    throw Error(ErrorKind::CollisionPersists, "prologue outputs keep colliding");
}

ContextSeparation prologue_separation(const Prologue& pr, Variant variant) {
    const Index V = pr.W_e.cols();
    const Index C = pr.W_p.cols();
    const Index d = pr.W_e.rows();
    TokenBatch all;
    std::vector<int> seq(static_cast<std::size_t>(C), 0);
    while (true) {
        all.sequences.push_back(seq);
        Index pos = C - 1;
        while (pos >= 0 && seq[static_cast<std::size_t>(pos)] == V - 1) {
            seq[static_cast<std::size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
        ++seq[static_cast<std::size_t>(pos)];
    }
    const Equivalence unique = identical_contexts(all);
    const std::vector<Index> reps = representatives(unique);

    ForwardOptions opts;
    opts.mode = kExact;
    opts.capture = true;
    const auto fr = forward_transformer(prologue_network(pr, variant, 1), all, opts);
    const Matrix z = layer_norm(fr.states.at(0), kExact);
    const Index N = z.cols();
    Matrix mixed_in = Matrix::Zero(d, N);
    for (Index j = 0; j < N; ++j) {
        const Index start = (j / C) * C;
        mixed_in.col(j) = z.middleCols(start, j - start + 1).rowwise().mean();
    }
    const Matrix mixed = has_factored_attention(variant)
                             ? Matrix(pr.block.attn.W_O * (pr.block.attn.W_V * mixed_in))
                             : Matrix(pr.block.attn.W_VO * mixed_in);

    ContextSeparation sep;
    sep.contexts = static_cast<Index>(reps.size());
    sep.min_output_distance = min_pairwise_distance(columns(fr.states.at(1), reps));
    sep.min_residual_distance = min_pairwise_distance(columns(Matrix(z + mixed), reps));
    sep.min_mixing_distance = min_pairwise_distance(columns(mixed_in, reps));
    sep.bound = pr.gamma * sep.min_mixing_distance;
    return sep;
}

Synthesis synthesize(const Dataset& data, const GufmSolution& solution,
                     const SynthesisConfig& config) {
    require(config.L1 >= 1 && config.L2 >= 1, ErrorKind::Config, "L1 and L2 must be positive");
    require(solution.X.cols() == data.samples(), ErrorKind::ShapeMismatch,
            "solution does not match the dataset");
    const Index d = solution.X.rows();
    const bool transformer = is_transformer(config.variant);
    require(transformer == data.is_tokens(), ErrorKind::Config,
            "transformer variants need token data, ResNets vector data");
    const bool two_layer = has_two_layer_mlp(config.variant);

    Synthesis s;
    s.variant = config.variant;
    s.unique = schedule_order(
        transformer ? identical_contexts(data.tokens) : identical_columns(data.X0), data.labels);
    const std::vector<Index> reps = representatives(s.unique);
    const Matrix targets = targets_for(solution, reps);

    Matrix starts;
    if (transformer) {
        const double gamma =
            config.gamma > 0.0
                ? config.gamma
                : std::min(0.1, std::pow(static_cast<double>(std::min(config.L1, config.L2)), -0.25));
        s.prologue = transformer_prologue(config.variant, data.vocab, data.context, d, data.tokens,
                                          targets, gamma, config.theta);
        starts = columns(prologue_features(s.prologue, config.variant, data.tokens), reps);
    } else {
        const Embedding e = embed_first_layer(columns(data.X0, reps), d, targets, config.seed);
        s.embedding_attempts = e.attempts;
        s.resnet.W0 = e.W0;
        s.resnet.b0 = e.b0;
        starts = e.X1;
    }

    PlanOptions plan_opts = config.plan;
    plan_opts.seed = derive_seed({config.seed, 0x706c616eULL});
    s.plan = plan_curves(starts, targets, plan_opts);
    Trajectory traj = build_blocks(s.plan, config, two_layer);
    s.schedule = std::move(traj.schedule);
    s.ledger = std::move(traj.ledger);

    if (transformer) {
        TransformerParams& p = s.transformer;
        p.variant = config.variant;
        p.placement = Placement::post;
        p.W_e = s.prologue.W_e;
        p.W_p = s.prologue.W_p;
        p.blocks.reserve(traj.blocks.size() + 1);
        p.blocks.push_back(s.prologue.block);
        for (auto& mlp : traj.blocks) {
            TransformerBlock b = zero_transformer_block(config.variant, d, d);
            b.mlp = std::move(mlp);
            p.blocks.push_back(std::move(b));
        }
        p.W_last = solution.W;
        p.b_last = Matrix::Zero(solution.W.rows(), 1);
        const auto& a = s.prologue.block.attn;
        s.ledger.prologue_sum = a.W_VO.squaredNorm() + a.W_QK.squaredNorm() +
                                a.W_V.squaredNorm() + a.W_O.squaredNorm() +
                                a.W_Q.squaredNorm() + a.W_K.squaredNorm();
    } else {
        ResNetParams& p = s.resnet;
        p.variant = config.variant;
        p.placement = Placement::post;
        p.blocks = std::move(traj.blocks);
        p.WL = solution.W;
    }
    return s;
}

bool VerificationReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Assertion& a) { return a.passed; });
}

nlohmann::json VerificationReport::to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& a : checks) {
        out.push_back({{"name", a.name}, {"passed", a.passed}, {"value", a.value}, {"bound", a.bound}});
    }
    return {{"passed", passed()}, {"checks", out}};
}

VerificationReport verify_construction(const Synthesis& s, const Dataset& data,
                                       const GufmSolution& solution) {
    const bool transformer = is_transformer(s.variant);
    ForwardOptions opts;
    opts.mode = kExact;
    opts.capture = true;
    const ForwardResult fr = transformer ? forward_transformer(s.transformer, data.tokens, opts)
                                         : forward_resnet(s.resnet, data.X0, opts);
    const std::vector<Index> reps = representatives(s.unique);
    const Index offset = transformer ? 1 : 0;
    auto state = [&](std::size_t l) {
        const Matrix X = columns(fr.states.at(l + static_cast<std::size_t>(offset)), reps);
        return transformer ? layer_norm(X, kExact) : X;
    };
    auto block_at = [&](std::size_t l) -> const MlpBlock& {
        return transformer ? s.transformer.blocks.at(l + 1).mlp : s.resnet.blocks.at(l);
    };

    const CurvePlan& plan = s.plan;
    const Index d = plan.starts.rows();
    const double dd = static_cast<double>(d);
    const double m = plan.m;
    const double c = plan.c;
    const Index U = plan.samples();

    double max_pre1 = -std::numeric_limits<double>::infinity();
    double max_pre2 = max_pre1;
    double min_member_pre = std::numeric_limits<double>::infinity();
    Index moved1 = 0, moved2 = 0;
    double traj_err = 0.0;
    double min_ratio = std::numeric_limits<double>::infinity();
    double park_deficit = -std::numeric_limits<double>::infinity();
    double sum1 = 0.0, sum2 = 0.0;
    std::vector<double> beta0(static_cast<std::size_t>(plan.group_count()), 0.0);

    Matrix X = state(0);
    for (std::size_t l = 0; l < s.schedule.size(); ++l) {
        const BlockRecord& rec = s.schedule[l];
        const MlpBlock& b = block_at(l);
        const Matrix pre = pre_activation(b, X);
        const Matrix next = state(l + 1);
        for (Index u = 0; u < U; ++u) {
            const bool active = rec.kind == BlockKind::stage1
                                    ? (u == rec.owner && rec.alpha > 0.0)
                                    : plan.group_of[static_cast<std::size_t>(u)] == rec.owner;
            if (active) continue;
            const bool moved = next.col(u) != X.col(u);
            if (rec.kind == BlockKind::stage1) {
                max_pre1 = std::max(max_pre1, pre.col(u).maxCoeff());
                moved1 += moved;
            } else {
                max_pre2 = std::max(max_pre2, pre.col(u).maxCoeff());
                moved2 += moved;
            }
        }
        if (rec.kind == BlockKind::stage1) {
            sum1 += block_sum(b);
            if (rec.alpha > 0.0) {
                const Index o = rec.owner;
                traj_err = std::max(traj_err, (next.col(o) - rec.planned).norm());
                min_ratio = std::min(min_ratio, angle_between(X.col(o), next.col(o)) /
                                                    (m * block_alpha(b) / (4.0 * std::sqrt(dd))));
            }
        } else {
            sum2 += block_sum(b);
            for (Index u = 0; u < U; ++u) {
                if (plan.group_of[static_cast<std::size_t>(u)] == rec.owner) {
                    min_member_pre = std::min(min_member_pre, pre.col(u).minCoeff());
                }
            }
        }
        const bool stage1_done = rec.kind == BlockKind::stage1 &&
                                 (l + 1 == s.schedule.size() ||
                                  s.schedule[l + 1].kind == BlockKind::stage2);
        if (stage1_done) {
            for (Index u = 0; u < U; ++u) {
                park_deficit = std::max(
                    park_deficit, (dd * (1.0 - c * m) - next.col(u).dot(plan.targets.col(u))) / dd);
                const std::size_t j = static_cast<std::size_t>(plan.group_of[static_cast<std::size_t>(u)]);
                beta0[j] = std::max(beta0[j], angle_between(next.col(u), plan.groups.col(static_cast<Index>(j))));
            }
        }
        X = next;
    }

    double contraction = 0.0;
    for (Index u = 0; u < U; ++u) {
        const std::size_t j = static_cast<std::size_t>(plan.group_of[static_cast<std::size_t>(u)]);
        const double beta = angle_between(X.col(u), plan.groups.col(static_cast<Index>(j)));
        const double bound = 2.0 * beta0[j] / static_cast<double>(s.ledger.L2);
        contraction = std::max(contraction, bound > 0.0 ? beta / bound : (beta > 0.0 ? 1e300 : 0.0));
    }
    const Matrix features = columns(fr.features, reps);
    const double feature_err = (features - columns(solution.X, reps)).norm();

    const double lam = s.ledger.lambda;
    VerificationReport r;
    auto add = [&](std::string name, bool ok, double value, double bound) {
        r.checks.push_back({std::move(name), ok, value, bound});
    };
    if (!std::isfinite(max_pre1)) max_pre1 = 0.0;
    if (!std::isfinite(max_pre2)) max_pre2 = 0.0;
    if (!std::isfinite(min_ratio)) min_ratio = 1.0;
    if (!std::isfinite(min_member_pre)) min_member_pre = 1.0;
    add("stage1_exclusive_preactivation", max_pre1 <= 1e-12, max_pre1, 1e-12);
    add("stage1_bystanders_stationary", moved1 == 0, static_cast<double>(moved1), 0.0);
    add("stage1_trajectory", traj_err <= 1e-8, traj_err, 1e-8);
    add("stage1_angle_advance", min_ratio >= 1.0 - 1e-6, min_ratio, 1.0 - 1e-6);
    add("stage1_parked_in_cap", park_deficit <= 1e-9, park_deficit, 1e-9);
    add("stage2_exclusive_preactivation", max_pre2 <= 1e-12, max_pre2, 1e-12);
    add("stage2_bystanders_stationary", moved2 == 0, static_cast<double>(moved2), 0.0);
    add("stage2_members_linear", min_member_pre > 0.0, min_member_pre, 0.0);
    add("stage2_contraction", contraction <= 1.0, contraction, 1.0);
    add("stage1_regularization_bound", 0.5 * lam * sum1 <= s.ledger.stage1_bound, 0.5 * lam * sum1,
        s.ledger.stage1_bound);
    add("stage2_regularization_bound", 0.5 * lam * sum2 <= s.ledger.stage2_bound, 0.5 * lam * sum2,
        s.ledger.stage2_bound);
    // Features land within the contraction ball around their targets.
    double ball = 0.0;
    for (double b0 : beta0) ball = std::max(ball, 2.0 * b0 / static_cast<double>(s.ledger.L2));
    const double ball_radius = std::sqrt(dd) * ball * std::sqrt(static_cast<double>(U));
    add("final_features_near_targets", feature_err <= ball_radius, feature_err, ball_radius);
    return r;
}

ObjectiveValue synthesized_objective(const Synthesis& s, const Dataset& data, LossKind loss,
                                     double lambda) {
    const Regularization reg{lambda, lambda};
    const Matrix Y = data.targets();
    return is_transformer(s.variant) ? objective(s.transformer, data.tokens, Y, loss, reg, kExact)
                                     : objective(s.resnet, data.X0, Y, loss, reg, kExact);
}

std::vector<GapRow> loss_gap_curve(const Dataset& data, const GufmSolution& solution,
                                   const GufmProblem& problem, SynthesisConfig config,
                                   const std::vector<Index>& grid) {
    require(problem.loss != GufmLoss::custom, ErrorKind::Config,
            "loss gap needs CE or MSE");
    const LossKind kind = problem.loss == GufmLoss::mse ? LossKind::mse : LossKind::ce;
    const double reference = gufm_loss(solution.W, solution.X, problem);
    config.lambda = problem.lambda;
    std::vector<GapRow> rows;
    for (Index L : grid) {
        config.L1 = L;
        config.L2 = L;
        const Synthesis s = synthesize(data, solution, config);
        const ObjectiveValue obj = synthesized_objective(s, data, kind, problem.lambda);
        GapRow row;
        row.L1 = L;
        row.L2 = L;
        row.depth = is_transformer(s.variant) ? static_cast<Index>(s.transformer.blocks.size()) + 1
                                              : s.resnet.depth();
        row.objective = obj.total();
        row.gufm = reference;
        row.gap = row.objective - reference;
        row.hidden_sum = is_transformer(s.variant) ? hidden_sum_squares(s.transformer)
                                                   : hidden_sum_squares(s.resnet);
        rows.push_back(row);
    }
    return rows;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::ShapeMismatch, "slope needs pairs");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double lx = std::log(x[i]);
        const double ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace collapse_lab
