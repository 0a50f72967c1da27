#include <cmath>
#include <map>

#include "collapse_lab/error.hpp"
#include "collapse_lab/experiments/experiments.hpp"
#include "collapse_lab/numerics/ops.hpp"
#include "doctest.h"

using namespace collapse_lab;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.depths = {2, 3};
    c.seeds = {0, 1};
    c.steps = 10;
    c.width = 8;
    c.data.classes = 3;
    c.data.per_class = 4;
    c.data.input_dim = 5;
    return c;
}

ResNetParams tiny_resnet(const Dataset& data, Index depth, std::uint64_t seed, LossKind loss) {
    ResNetShape shape;
    shape.input_dim = data.X0.rows();
    shape.width = 8;
    shape.classes = data.classes;
    shape.depth = depth;
    (void)loss;
    Rng rng(seed);
    return init_resnet(shape, rng);
}

}  // namespace

TEST_CASE("classification data: distinct, balanced, separated clusters") {
    const Dataset two = make_synthetic_classification(2, 1, 3, 1);
    CHECK(two.X0.cols() == 2);
    CHECK(two.X0.col(0) != two.X0.col(1));

    const Dataset d = make_synthetic_classification(4, 16, 16, 0);
    CHECK(d.samples() == 64);
    CHECK(identical_columns(d.X0).size() == 64);
    std::map<int, int> counts;
    for (int y : d.labels) ++counts[y];
    for (const auto& [k, n] : counts) CHECK(n == 16);
    Matrix means = Matrix::Zero(16, 4);
    for (Index j = 0; j < 64; ++j) means.col(d.labels[static_cast<std::size_t>(j)]) += d.X0.col(j) / 16.0;
    double lo = 1e300, hi = 0.0;
    for (Index a = 0; a < 4; ++a) {
        for (Index b = a + 1; b < 4; ++b) {
            const double dist = (means.col(a) - means.col(b)).norm();
            lo = std::min(lo, dist);
            hi = std::max(hi, dist);
        }
    }
    CHECK(lo >= 1.0);
    CHECK(hi <= 4.0);
}

TEST_CASE("language data: labels are a function of the context and balanced") {
    const Dataset d = make_synthetic_language(3, 4, 2, 12, 5);
    CHECK(d.samples() == 48);
    std::map<int, int> counts;
    for (int y : d.labels) ++counts[y];
    CHECK(counts[0] == 24);
    CHECK(counts[1] == 24);
    for (const auto& cls : d.equivalence) {
        for (Index j : cls) {
            CHECK(d.labels[static_cast<std::size_t>(j)] == d.labels[static_cast<std::size_t>(cls.front())]);
        }
    }
    const auto& seq = d.tokens.sequences.front();
    CHECK(d.labels[1] == context_label({seq[0], seq[1]}, 2, 5));
    CHECK_THROWS_AS((void)make_synthetic_language(3, 4, 3, 2, 5), Error);
}

TEST_CASE("training: zero step size leaves parameters untouched") {
    const Dataset data = make_synthetic_classification(3, 4, 5, 2);
    TrainConfig c = tiny_config();
    c.learning_rate = 0.0;
    ResNetParams p = tiny_resnet(data, 3, 9, c.loss);
    const ResNetParams before = p;
    const TrainResult r = train(p, data, c, 3);
    CHECK(r.history.size() == static_cast<std::size_t>(c.steps + 1));
    const auto a = tensors(p);
    const auto b = tensors(before);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i].tensor == *b[i].tensor);
}

TEST_CASE("training: one plain step on the last layer matches the hand gradient") {
    const Dataset data = make_synthetic_classification(3, 4, 5, 2);
    TrainConfig c = tiny_config();
    c.loss = LossKind::mse;
    c.momentum = 0.0;
    c.steps = 1;
    c.learning_rate = 0.1;
    c.lambda = 0.3;
    ResNetParams p = tiny_resnet(data, 1, 4, c.loss);
    const Matrix F = forward_resnet(p, data.X0).features;
    const Matrix Y = data.targets();
    const double N = static_cast<double>(data.samples());
    const Matrix grad = (p.WL * F - Y) * F.transpose() / N + c.lambda * p.WL;
    const Matrix expected = p.WL - c.learning_rate * grad;
    (void)train(p, data, c, 1);
    CHECK((p.WL - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training: heavy weight decay shrinks weights every step") {
    const Dataset data = make_synthetic_classification(3, 4, 5, 2);
    TrainConfig c = tiny_config();
    c.lambda = 50.0;
    c.momentum = 0.0;
    c.learning_rate = 0.005;
    c.steps = 1;
    ResNetParams p = tiny_resnet(data, 3, 4, c.loss);
    double prev_last = p.WL.norm();
    double prev_hidden = hidden_sum_squares(p);
    for (int i = 0; i < 20; ++i) {
        (void)train(p, data, c, 3);
        CHECK(p.WL.norm() < prev_last);
        CHECK(hidden_sum_squares(p) < prev_hidden);
        prev_last = p.WL.norm();
        prev_hidden = hidden_sum_squares(p);
    }
}

TEST_CASE("rank statistics") {
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3, 4}, {5, 5, 5, 5}) == 0.0);
    CHECK(spearman({1, 2, 3, 4}, {1, 3, 3, 4}) == doctest::Approx(0.9486832980505138));

    std::vector<SweepRow> rows;
    for (Index depth : {2, 4, 8}) {
        for (std::uint64_t seed : {0u, 1u, 2u}) {
            SweepRow r;
            r.depth = depth;
            r.seed = seed;
            r.nc.nc1 = std::pow(static_cast<double>(depth), -2.0) * (seed == 1 ? 1.0 : (seed == 0 ? 0.5 : 3.0));
            rows.push_back(r);
        }
    }
    const TrendResult t = trend_test(rows, NcMetric::nc1);
    CHECK(t.spearman == doctest::Approx(-1.0));
    CHECK(t.slope == doctest::Approx(-2.0));
    CHECK(t.median_log10[0] == doctest::Approx(std::log10(0.25)));
}

TEST_CASE("sweep rows are identical for any worker count") {
    TrainConfig c = tiny_config();
    c.threads = 1;
    const SweepResult a = depth_sweep(c);
    c.threads = 3;
    const SweepResult b = depth_sweep(c);
    REQUIRE(a.rows.size() == 4);
    CHECK(sweep_csv(a.rows) == sweep_csv(b.rows));
    CHECK(a.rows[0].depth == 2);
    CHECK(a.rows[3].depth == 3);
    CHECK(a.rows[3].seed == 1);
    CHECK(sweep_csv(a.rows).rfind(sweep_csv_header() + "\n", 0) == 0);
}

TEST_CASE("deepening a trained network keeps verification-mode rows") {
    const Dataset data = make_synthetic_classification(3, 4, 5, 2);
    TrainConfig c = tiny_config();
    c.steps = 30;
    ResNetParams p = tiny_resnet(data, 3, 4, c.loss);
    (void)train(p, data, c, 3);
    const ResNetParams q = deepen(p, 5);
    ForwardOptions opts;
    opts.mode = NormMode::verification;
    const auto a = forward_resnet(p, data.X0, opts);
    const auto b = forward_resnet(q, data.X0, opts);
    CHECK(a.logits == b.logits);
    const NCReport ra = report(p.WL, a.features, data.labels, c.loss, false);
    const NCReport rb = report(q.WL, b.features, data.labels, c.loss, false);
    CHECK(std::abs(ra.nc1 - rb.nc1) < 1e-12);
    CHECK(std::abs(ra.nc3 - rb.nc3) < 1e-12);
}

TEST_CASE("transformer training runs on language data") {
    TrainConfig c;
    c.variant = Variant::t12;
    c.data.language = true;
    c.data.classes = 2;
    c.data.sequences = 6;
    c.depths = {1, 2};
    c.seeds = {0};
    c.steps = 5;
    c.width = 8;
    c.optimizer = Optimizer::adam;
    c.learning_rate = 0.01;
    const SweepResult r = depth_sweep(c);
    CHECK(r.rows.size() + static_cast<std::size_t>(r.dropped) == 2);
    for (const auto& row : r.rows) CHECK(std::isfinite(row.objective));
}

TEST_CASE("train configs round-trip and reject unknown keys") {
    TrainConfig c = tiny_config();
    c.schedule = LambdaSchedule::inverse_depth;
    c.optimizer = Optimizer::adam;
    const auto j = to_json(c);
    const TrainConfig back = train_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.lambda_at(4) == doctest::Approx(c.lambda / 4));

    auto bad = j;
    bad["learning_rte"] = 0.1;
    CHECK_THROWS_AS((void)train_config_from_json(bad), Error);
    auto bad_nested = j;
    bad_nested["data"]["clases"] = 3;
    CHECK_THROWS_AS((void)train_config_from_json(bad_nested), Error);
    auto bad_type = j;
    bad_type["steps"] = "many";
    CHECK_THROWS_AS((void)train_config_from_json(bad_type), Error);
    auto bad_value = j;
    bad_value["lambda"] = 0.0;
    CHECK_THROWS_AS((void)train_config_from_json(bad_value), Error);
}

TEST_CASE("architecture gradient check helper") {
    for (Variant v : {Variant::rn2, Variant::t21}) {
        const GradCheckResult r = gradcheck_architecture(v, Placement::pre, LossKind::ce, 8, 3, 4, 1);
        CHECK(r.max_relative_error < 1e-5);
        CHECK(r.coordinates > 100);
    }
}
