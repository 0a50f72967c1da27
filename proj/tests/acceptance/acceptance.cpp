// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "collapse_lab/experiments/experiments.hpp"
#include "collapse_lab/gufm/gufm.hpp"
#include "collapse_lab/rng.hpp"
#include "collapse_lab/synthesis/synthesis.hpp"

using namespace collapse_lab;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
    std::printf("%s %2d  %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

void criterion1() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string where;
    for (Variant v : {Variant::rn1, Variant::rn2, Variant::t11, Variant::t12, Variant::t21, Variant::t22}) {
        for (Placement p : {Placement::post, Placement::pre}) {
            for (LossKind l : {LossKind::ce, LossKind::mse}) {
                const GradCheckResult r = gradcheck_architecture(v, p, l, 8, 3, 4, 0);
                if (r.max_relative_error >= worst) {
                    worst = r.max_relative_error;
                    where = std::string(to_string(v)) + "/" + std::string(to_string(p)) + "/" +
                            std::string(to_string(l));
                }
            }
        }
    }
    const double t = seconds_since(t0);
    char buf[256];
    std::snprintf(buf, sizeof buf, "gradient check: max rel err %.3e (%s) < 1e-5, %.1f s < 30 s",
                  worst, where.c_str(), t);
    verdict(1, worst < 1e-5 && t < 30.0, buf);
}

void criterion2() {
    struct Case { Index d, K; double lambda; };
    double norm_err = 0.0, loss_err = 0.0, cert = 0.0;
    for (const Case c : {Case{4, 2, 0.25}, Case{8, 3, 0.1}, Case{16, 6, 0.05}}) {
        const GufmProblem p = make_gufm_problem(c.K, 3, c.d, c.lambda, GufmLoss::mse);
        const GufmSolution cf = solve_closed_form(p);
        const double expected = 1.0 / (std::sqrt(static_cast<double>(c.d)) * (1.0 + c.lambda * c.K));
        for (Index k = 0; k < c.K; ++k) norm_err = std::max(norm_err, std::abs(cf.W.row(k).norm() - expected));
        NumericOptions opts;
        opts.seed = 1;
        const GufmSolution num = solve_numeric(p, opts);
        loss_err = std::max(loss_err, std::abs(num.loss - cf.loss));
        cert = std::max({cert, cf.certificate.nc1, cf.certificate.nc2b, cf.certificate.nc3});
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "MSE closed form: | ||w_k|| - 1/(sqrt d (1+lambda K)) | = %.3e <= 1e-12; "
                  "numeric loss diff %.3e <= 1e-6; certificate max %.3e < 1e-10",
                  norm_err, loss_err, cert);
    verdict(2, norm_err <= 1e-12 && loss_err <= 1e-6 && cert < 1e-10, buf);
}

void criterion3() {
    struct Case { Index d, K; double lambda; };
    double loss_err = 0.0, cert = 0.0;
    for (const Case c : {Case{8, 4, 0.05}, Case{6, 3, 0.1}}) {
        const GufmProblem p = make_gufm_problem(c.K, 3, c.d, c.lambda, GufmLoss::ce);
        const GufmSolution cf = solve_closed_form(p);
        NumericOptions opts;
        opts.seed = 2;
        const GufmSolution num = solve_numeric(p, opts);
        loss_err = std::max(loss_err, std::abs(num.loss - cf.loss));
        const auto [W, X] = align_to(num.W, num.X, cf.W, cf.X);
        const NCReport r = certify(W, X, p);
        cert = std::max({cert, r.nc1, r.nc2a, r.nc3});
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "CE closed form: numeric loss diff %.3e <= 1e-5; aligned nc1/nc2a/nc3 max %.3e < 1e-3",
                  loss_err, cert);
    verdict(3, loss_err <= 1e-5 && cert < 1e-3, buf);
}

void criterion4() {
    const GufmProblem p = make_gufm_problem(2, 1, 4, 0.25, GufmLoss::mse);
    std::vector<double> eps;
    for (int k = 0; k <= 6; ++k) eps.push_back(1e-2 / std::pow(2.0, k));
    StabilityOptions opts;
    opts.directions = 64;
    const std::vector<StabilityRow> rows = stability_probe(p, eps, opts);
    // C fitted at the largest epsilon; smaller epsilons must stay under C eps^(1/4).
    const double C = rows.front().distance / std::pow(rows.front().epsilon, 0.25);
    bool monotone = true, bounded = true;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        monotone = monotone && rows[i].distance <= rows[i - 1].distance + 2.0 * rows[i].noise;
        bounded = bounded && rows[i].distance <= C * std::pow(rows[i].epsilon, 0.25) + 2.0 * rows[i].noise;
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "stability probe: distance %.3e at eps=1e-2 -> %.3e at eps=1e-2/64, "
                  "monotone=%d, <= C eps^(1/4) with C=%.3f: %d",
                  rows.front().distance, rows.back().distance, monotone, C, bounded);
    verdict(4, monotone && bounded && rows.front().distance > 0.0, buf);
}

struct Fixture {
    GufmProblem problem = make_gufm_problem(3, 2, 8, 0.1, GufmLoss::ce);
    GufmSolution solution = solve_closed_form(problem);
    Dataset data;

    Fixture() {
        Rng rng(7);
        data.X0 = gaussian_matrix(rng, 8, 6);
        data.labels = problem.labels();
        data.classes = 3;
        data.equivalence = singleton_classes(6);
    }
};

const std::vector<Index> kGrid{50, 100, 200, 400};

std::vector<Matrix> block_states(const ResNetParams& p, const Matrix& X0) {
    ForwardOptions opts;
    opts.mode = NormMode::verification;
    opts.capture = true;
    return forward_resnet(p, X0, opts).states;
}

void criteria5and6(const Fixture& f) {
    const auto t0 = Clock::now();
    bool verified = true, bounds = true;
    std::string failed;
    std::vector<double> gaps;
    double worst_pre = -1e300;
    bool post_zero = true;
    for (Index L : kGrid) {
        SynthesisConfig cfg;
        cfg.variant = Variant::rn1;
        cfg.lambda = f.problem.lambda;
        cfg.L1 = cfg.L2 = L;
        const Synthesis s = synthesize(f.data, f.solution, cfg);
        const VerificationReport rep = verify_construction(s, f.data, f.solution);
        for (const auto& a : rep.checks) {
            if (!a.passed) {
                verified = false;
                failed = a.name;
            }
        }
        bounds = bounds && s.ledger.stage1_reg <= s.ledger.stage1_bound &&
                 s.ledger.stage2_reg <= s.ledger.stage2_bound;
        const ObjectiveValue obj = synthesized_objective(s, f.data, LossKind::ce, f.problem.lambda);
        gaps.push_back(obj.total() - gufm_loss(f.solution.W, f.solution.X, f.problem));

        const std::vector<Matrix> states = block_states(s.resnet, f.data.X0);
        for (std::size_t b = 0; b < s.schedule.size(); ++b) {
            const BlockRecord& rec = s.schedule[b];
            if (rec.kind != BlockKind::stage1) continue;
            const MlpBlock& blk = s.resnet.blocks[b];
            const Matrix pre = (blk.W1 * states[b]).colwise() + blk.b1.col(0);
            const auto& own = s.unique[static_cast<std::size_t>(rec.owner)];
            for (Index j = 0; j < pre.cols(); ++j) {
                if (std::find(own.begin(), own.end(), j) != own.end()) continue;
                worst_pre = std::max(worst_pre, pre.col(j).maxCoeff());
                post_zero = post_zero && (pre.col(j).array().max(0.0) == 0.0).all();
            }
        }
    }
    bool decreasing = gaps.front() > 0.0;
    for (std::size_t i = 1; i < gaps.size(); ++i) decreasing = decreasing && gaps[i] > 0.0 && gaps[i] < gaps[i - 1];
    const bool halved = gaps.back() < gaps.front() / 2.0;
    const double t = seconds_since(t0);
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "RN1 construction: verify %s%s; ledger bounds %s; gaps %.4g %.4g %.4g %.4g "
                  "(positive, strictly decreasing: %d; gap(400) < gap(50)/2: %d); %.1f s < 300 s",
                  verified ? "all passed" : "failed at ", verified ? "" : failed.c_str(),
                  bounds ? "held" : "violated", gaps[0], gaps[1], gaps[2], gaps[3], decreasing, halved, t);
    verdict(5, verified && bounds && decreasing && halved && t < 300.0, buf);
    std::snprintf(buf, sizeof buf,
                  "non-target exactness: max non-owner stage-1 pre-activation %.3e <= 1e-12, "
                  "post-activation exactly 0: %d",
                  worst_pre, post_zero);
    verdict(6, worst_pre <= 1e-12 && post_zero, buf);
}

void criterion7(const Fixture& f) {
    double block_diff = 0.0;
    std::vector<double> hidden;
    bool verified = true;
    for (Index L : kGrid) {
        SynthesisConfig cfg;
        cfg.lambda = f.problem.lambda;
        cfg.L1 = cfg.L2 = L;
        cfg.variant = Variant::rn1;
        const Synthesis s1 = synthesize(f.data, f.solution, cfg);
        cfg.variant = Variant::rn2;
        const Synthesis s2 = synthesize(f.data, f.solution, cfg);
        verified = verified && verify_construction(s2, f.data, f.solution).passed();
        const auto a = block_states(s1.resnet, f.data.X0);
        const auto b = block_states(s2.resnet, f.data.X0);
        for (std::size_t i = 0; i < a.size(); ++i) {
            block_diff = std::max(block_diff, (a[i] - b[i]).cwiseAbs().maxCoeff());
        }
        hidden.push_back(hidden_sum_squares(s2.resnet));
    }
    double lo = 1e300, hi = 0.0;
    for (double h : hidden) {
        lo = std::min(lo, h / hidden.front());
        hi = std::max(hi, h / hidden.front());
    }

    // lambda(L) = 1 / log(L)^2: the GUFM target and the penalty weight both follow L.
    std::vector<double> pen;
    for (Index L : {kGrid.front(), kGrid.back()}) {
        const double lambda = 1.0 / std::pow(std::log(static_cast<double>(L)), 2);
        GufmProblem p = f.problem;
        p.lambda = lambda;
        const GufmSolution sol = solve_closed_form(p);
        SynthesisConfig cfg;
        cfg.variant = Variant::rn2;
        cfg.lambda = lambda;
        cfg.L1 = cfg.L2 = L;
        const Synthesis s = synthesize(f.data, sol, cfg);
        pen.push_back(synthesized_objective(s, f.data, LossKind::ce, lambda).penalty);
    }
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "RN2 construction: block outputs vs RN1 max diff %.3e <= 1e-10; hidden sum ratio "
                  "to L=50 in [%.3f, %.3f] within [0.5, 2]; penalty with lambda=1/log^2 L: %.4g (L=400) "
                  "< %.4g (L=50); verify %s",
                  block_diff, lo, hi, pen[1], pen[0], verified ? "passed" : "failed");
    verdict(7, block_diff <= 1e-10 && lo >= 0.5 && hi <= 2.0 && pen[1] < pen[0] && verified, buf);
}

void criterion8() {
    const auto t0 = Clock::now();
    const Index V = 3, C = 4, d = 10;
    const Prologue pr = transformer_prologue(Variant::t11, V, C, d, {}, Matrix(), 0.1, 1e-3);
    const ContextSeparation sep = prologue_separation(pr, Variant::t11);
    const double t = seconds_since(t0);
    const double m_tilde = sep.min_mixing_distance / std::sqrt(static_cast<double>(d));
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "prologue: %lld contexts, min output distance %.6e >= gamma sqrt(d) m~ = %.6e "
                  "(m~ = %.3e, ratio %.5f; pre-LN residual distance %.6e); %.2f s < 10 s",
                  static_cast<long long>(sep.contexts), sep.min_output_distance, sep.bound, m_tilde,
                  sep.min_output_distance / sep.bound, sep.min_residual_distance, t);
    verdict(8, sep.contexts == 120 && m_tilde > 0.0 && sep.min_output_distance >= sep.bound && t < 10.0,
            buf);
}

double median_drop_rn1 = 0.0;

void criterion9() {
    const auto t0 = Clock::now();
    TrainConfig c;  // defaults are the desk-scale protocol
    const FlatnessResult f = flatness_experiment(c);
    const double t = seconds_since(t0);
    const auto& m = f.trend.median_log10;
    const bool complete = f.sweep.dropped == 0 && m.size() == 5;
    median_drop_rn1 = complete ? m.front() - m.back() : 0.0;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "RN1 depth sweep: Spearman(median log10 NC1, depth) %.3f <= -0.6; median NC1 "
                  "depth 13 %.4g < depth 2 %.4g; dropped %lld; %.0f s < 1200 s",
                  f.trend.spearman, complete ? std::pow(10.0, m.back()) : NAN,
                  complete ? std::pow(10.0, m.front()) : NAN, static_cast<long long>(f.sweep.dropped), t);
    verdict(9, complete && f.trend.spearman <= -0.6 && m.back() < m.front() && t < 1200.0, buf);
}

void criterion10() {
    TrainConfig c;
    c.variant = Variant::rn2;
    c.lambda = 0.0025;
    const FlatnessResult f = flatness_experiment(c);
    const bool complete = f.sweep.dropped == 0 && f.trend.median_log10.size() == 5;
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "RN2 flatness: |log10 NC1(13) - log10 NC1(2)| = %.4f <= half the RN1 drop %.4f / 2",
                  f.end_drop, median_drop_rn1);
    verdict(10, complete && median_drop_rn1 > 0.0 && f.end_drop <= 0.5 * median_drop_rn1, buf);
}

void criterion11() {
    const Dataset data = make_synthetic_classification(4, 16, 16, 0);
    double nc_diff = 0.0;
    bool exact = true;
    for (std::uint64_t seed : {0, 1, 2}) {
        TrainConfig c;
        c.steps = 300;
        Rng rng(derive_seed({seed, 11}));
        ResNetShape shape;
        shape.input_dim = 16;
        shape.width = 32;
        shape.classes = 4;
        shape.depth = 5;
        ResNetParams p = init_resnet(shape, rng);
        (void)train(p, data, c, 5);
        const ResNetParams q = deepen(p, 5);
        ForwardOptions opts;
        opts.mode = NormMode::verification;
        const ForwardResult a = forward_resnet(p, data.X0, opts);
        const ForwardResult b = forward_resnet(q, data.X0, opts);
        exact = exact && a.logits == b.logits;
        const NCReport ra = report(p.WL, a.features, data.labels, LossKind::ce, false);
        const NCReport rb = report(q.WL, b.features, data.labels, LossKind::ce, false);
        nc_diff = std::max({nc_diff, std::abs(ra.nc1 - rb.nc1), std::abs(ra.nc2a - rb.nc2a),
                            std::abs(ra.nc2b - rb.nc2b), std::abs(ra.nc3 - rb.nc3)});
    }
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "deepen by 5 identity blocks: logits bit-identical %d; max NC metric change %.3e < 1e-12",
                  exact, nc_diff);
    verdict(11, exact && nc_diff < 1e-12, buf);
}

}  // namespace

int main() {
    criterion1();
    criterion2();
    criterion3();
    criterion4();
    const Fixture f;
    criteria5and6(f);
    criterion7(f);
    criterion8();
    criterion9();
    criterion10();
    criterion11();
    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
