#include <cmath>
#include <filesystem>

#include "collapse_lab/arch/forward.hpp"
#include "collapse_lab/error.hpp"
#include "collapse_lab/io/container.hpp"
#include "collapse_lab/numerics/gradcheck.hpp"
#include "doctest.h"

using namespace collapse_lab;

namespace {

using Vec = std::vector<double>;

// Straight-line reference evaluator: plain loops, no shared code with forward.cpp.
Vec matvec(const Matrix& W, const Vec& x) {
    Vec y(static_cast<std::size_t>(W.rows()), 0.0);
    for (Index i = 0; i < W.rows(); ++i)
        for (Index j = 0; j < W.cols(); ++j) y[i] += W(i, j) * x[j];
    return y;
}
Vec plus(Vec a, const Vec& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}
Vec bias_of(const Matrix& b) { return Vec(b.data(), b.data() + b.size()); }
Vec relu_v(Vec a) {
    for (auto& x : a) x = x > 0 ? x : 0;
    return a;
}
Vec ln_v(const Vec& a, double eps) {
    double mean = 0;
    for (double x : a) mean += x;
    mean /= a.size();
    double var = 0;
    for (double x : a) var += (x - mean) * (x - mean);
    var /= a.size();
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - mean) / std::sqrt(var + eps);
    return out;
}
Vec branch(const MlpBlock& b, const Vec& x) {
    Vec h = relu_v(plus(matvec(b.W1, x), bias_of(b.b1)));
    if (b.W2.size() == 0) return h;
    return plus(matvec(b.W2, h), bias_of(b.b2));
}

Matrix reference_resnet(const ResNetParams& p, const Matrix& X0, double eps) {
    Matrix out(p.WL.rows(), X0.cols());
    for (Index n = 0; n < X0.cols(); ++n) {
        Vec x0(static_cast<std::size_t>(X0.rows()));
        for (Index i = 0; i < X0.rows(); ++i) x0[i] = X0(i, n);
        Vec x = ln_v(plus(matvec(p.W0, x0), bias_of(p.b0)), eps);
        for (const auto& b : p.blocks) {
            x = p.placement == Placement::post ? ln_v(plus(x, branch(b, x)), eps)
                                               : plus(x, branch(b, ln_v(x, eps)));
        }
        if (p.placement == Placement::pre) x = ln_v(x, eps);
        Vec y = matvec(p.WL, x);
        if (p.last_bias.size()) y = plus(y, bias_of(p.last_bias));
        for (Index k = 0; k < out.rows(); ++k) out(k, n) = y[k];
    }
    return out;
}

// One sequence at a time; attention computed per query position with explicit
// prefix sums.
Matrix reference_transformer(const TransformerParams& p, const TokenBatch& tb, double eps) {
    const Index d = p.width();
    const Index T = tb.length();
    Matrix out(p.W_last.rows(), tb.samples());
    auto attn = [&](const AttentionBlock& a, const std::vector<Vec>& z) {
        Matrix QK, VO;
        if (has_factored_attention(p.variant)) {
            QK = a.W_K.transpose() * a.W_Q;
            VO = a.W_O * a.W_V;
        } else {
            QK = a.W_QK;
            VO = a.W_VO;
        }
        std::vector<Vec> out_z(z.size(), Vec(d, 0.0));
        for (std::size_t j = 0; j < z.size(); ++j) {
            Vec qj = matvec(QK, z[j]);
            std::vector<double> s(j + 1);
            double mx = -1e300;
            for (std::size_t i = 0; i <= j; ++i) {
                double dot = 0;
                for (Index r = 0; r < d; ++r) dot += z[i][r] * qj[r];
                s[i] = dot / std::sqrt(double(d));
                mx = std::max(mx, s[i]);
            }
            double tot = 0;
            for (auto& v : s) tot += (v = std::exp(v - mx));
            Vec mixed(d, 0.0);
            for (std::size_t i = 0; i <= j; ++i)
                for (Index r = 0; r < d; ++r) mixed[r] += z[i][r] * s[i] / tot;
            out_z[j] = matvec(VO, mixed);
        }
        return out_z;
    };
    for (std::size_t s = 0; s < tb.sequences.size(); ++s) {
        std::vector<Vec> z(T);
        for (Index t = 0; t < T; ++t) {
            z[t].resize(d);
            for (Index r = 0; r < d; ++r) z[t][r] = p.W_e(r, tb.sequences[s][t]) + p.W_p(r, t);
            if (p.placement == Placement::pre) z[t] = ln_v(z[t], eps);
        }
        for (const auto& b : p.blocks) {
            if (p.placement == Placement::post) {
                for (auto& v : z) v = ln_v(v, eps);
                auto a = attn(b.attn, z);
                for (Index t = 0; t < T; ++t) z[t] = ln_v(plus(z[t], a[t]), eps);
                for (auto& v : z) v = plus(v, branch(b.mlp, v));
            } else {
                std::vector<Vec> y(T);
                for (Index t = 0; t < T; ++t) y[t] = ln_v(z[t], eps);
                auto a = attn(b.attn, y);
                for (Index t = 0; t < T; ++t) z[t] = plus(z[t], a[t]);
                for (auto& v : z) v = plus(v, branch(b.mlp, ln_v(v, eps)));
            }
        }
        for (Index t = 0; t < T; ++t) {
            Vec y = matvec(p.W_last, ln_v(z[t], eps));
            if (p.b_last.size()) y = plus(y, bias_of(p.b_last));
            for (Index k = 0; k < out.rows(); ++k) out(k, Index(s) * T + t) = y[k];
        }
    }
    return out;
}

Matrix labels_onehot(Index K, Index N) {
    Matrix Y = Matrix::Zero(K, N);
    for (Index j = 0; j < N; ++j) Y(j % K, j) = 1;
    return Y;
}

void randomize_biases(std::vector<TensorRef> refs, Rng& rng) {
    for (auto& r : refs)
        if (r.role == TensorRole::bias) *r.tensor = gaussian_matrix(rng, r.tensor->rows(), 1, 0.3);
}

TokenBatch all_sequences(Index V, Index T) {
    TokenBatch tb;
    Index total = 1;
    for (Index i = 0; i < T; ++i) total *= V;
    for (Index code = 0; code < total; ++code) {
        std::vector<int> seq(T);
        Index c = code;
        for (Index i = 0; i < T; ++i, c /= V) seq[i] = int(c % V);
        tb.sequences.push_back(seq);
    }
    return tb;
}

}  // namespace

TEST_CASE("resnet forward matches straight-line evaluator") {
    for (Variant v : {Variant::rn1, Variant::rn2})
        for (Placement pl : {Placement::post, Placement::pre})
            for (bool bias : {false, true}) {
                Rng rng(derive_seed({1, static_cast<std::uint64_t>(v), bias}));
                auto p = init_resnet({v, pl, 5, 8, 6, 3, 4, bias}, rng);
                randomize_biases(tensors(p), rng);
                const Matrix X0 = gaussian_matrix(rng, 5, 4);
                for (NormMode mode : {NormMode::training, NormMode::verification}) {
                    const Matrix got = forward_resnet(p, X0, {mode}).logits;
                    const Matrix want = reference_resnet(p, X0, layer_norm_eps(mode));
                    CHECK((got - want).norm() < 1e-12 * (1 + want.norm()));
                }
            }
}

TEST_CASE("transformer forward matches straight-line evaluator") {
    const TokenBatch tb{{{0, 2, 1}, {1, 1, 0}, {2, 0, 2}}};
    for (Variant v : {Variant::t11, Variant::t12, Variant::t21, Variant::t22})
        for (Placement pl : {Placement::post, Placement::pre}) {
            Rng rng(derive_seed({2, static_cast<std::uint64_t>(v)}));
            auto p = init_transformer({v, pl, 3, 3, 8, 5, 2, 2, true}, rng);
            randomize_biases(tensors(p), rng);
            const Matrix got = forward_transformer(p, tb).logits;
            const Matrix want = reference_transformer(p, tb, kTrainingLayerNormEps);
            CHECK((got - want).norm() < 1e-12 * (1 + want.norm()));
        }
}

TEST_CASE("zero blocks are identities after the first LayerNorm") {
    Rng rng(4);
    auto p = init_resnet({Variant::rn1, Placement::post, 4, 6, 0, 2, 5, false}, rng);
    for (auto& b : p.blocks) b = zero_mlp_block(6, 6, false);
    const Matrix X0 = gaussian_matrix(rng, 4, 3);
    const auto r = forward_resnet(p, X0, {NormMode::verification, true});
    REQUIRE(r.states.size() == 5);
    for (const auto& s : r.states) CHECK(s == r.states.front());
    auto probe = p;
    probe.blocks.clear();
    CHECK(forward_resnet(probe, X0, {NormMode::verification}).logits == r.logits);
    const Matrix X1 = layer_norm(p.W0 * X0 + p.b0 * Matrix::Ones(1, 3), NormMode::verification);
    CHECK((r.logits - p.WL * X1).norm() < 1e-13);
}

TEST_CASE("single-token context gives weight-1 attention") {
    Rng rng(8);
    auto p = init_transformer({Variant::t11, Placement::post, 3, 1, 6, 0, 2, 1, true}, rng);
    const TokenBatch tb{{{2}, {0}}};
    auto q = p;
    q.blocks[0].attn.W_QK *= 50.0;  // irrelevant with one admissible key
    CHECK((forward_transformer(p, tb).logits - forward_transformer(q, tb).logits).norm() < 1e-13);
}

TEST_CASE("post-LN penultimate features are GUFM-feasible") {
    Rng rng(9);
    auto p = init_resnet({Variant::rn2, Placement::post, 4, 8, 0, 3, 4, false}, rng);
    const auto r = forward_resnet(p, gaussian_matrix(rng, 4, 6), {NormMode::verification});
    for (Index j = 0; j < r.features.cols(); ++j) {
        CHECK(std::abs(r.features.col(j).sum()) < 1e-12);
        CHECK(std::abs(r.features.col(j).norm() - std::sqrt(8.0)) < 1e-12);
    }
}

TEST_CASE("causality: changing token t leaves earlier positions untouched") {
    const Index V = 3, C = 4;
    const TokenBatch base = all_sequences(V, C);
    for (Variant v : {Variant::t11, Variant::t22})
        for (Placement pl : {Placement::post, Placement::pre}) {
            Rng rng(derive_seed({10, static_cast<std::uint64_t>(v)}));
            auto p = init_transformer({v, pl, V, C, 8, 0, 3, 2, true}, rng);
            const Matrix ref = forward_transformer(p, base).logits;
            for (Index t = 0; t < C; ++t) {
                TokenBatch changed = base;
                for (auto& s : changed.sequences) s[t] = (s[t] + 1) % V;
                const Matrix got = forward_transformer(p, changed).logits;
                for (std::size_t s = 0; s < base.sequences.size(); ++s)
                    for (Index pos = 0; pos < t; ++pos) {
                        const Index c = Index(s) * C + pos;
                        CHECK(got.col(c) == ref.col(c));
                    }
            }
        }
}

TEST_CASE("objective: zero weights give log K; penalty is hand summed") {
    Rng rng(12);
    auto p = init_resnet({Variant::rn1, Placement::post, 3, 4, 0, 3, 3, false}, rng);
    const Matrix X0 = gaussian_matrix(rng, 3, 6);
    const Matrix Y = labels_onehot(3, 6);
    auto z = p;
    z.WL.setZero();
    for (auto& b : z.blocks) b.W1.setZero();
    CHECK(objective(z, X0, Y, LossKind::ce, {0.3, 0.7}).total() == doctest::Approx(std::log(3.0)));

    const double lam = 0.01;
    double hand = 0.0;
    for (Index i = 0; i < p.WL.size(); ++i) hand += p.WL.data()[i] * p.WL.data()[i];
    for (const auto& b : p.blocks)
        for (Index i = 0; i < b.W1.size(); ++i) hand += b.W1.data()[i] * b.W1.data()[i];
    hand *= lam / 2;
    const auto obj = objective(p, X0, Y, LossKind::ce, {lam, lam});
    CHECK(obj.penalty == doctest::Approx(hand).epsilon(1e-14));
    CHECK(obj.fit == doctest::Approx(cross_entropy(forward_resnet(p, X0).logits, Y)));
}

TEST_CASE("objective excludes W0, biases and embeddings") {
    Rng rng(13);
    auto p = init_transformer({Variant::t21, Placement::post, 3, 2, 6, 0, 2, 1, true}, rng);
    const double before = penalty(p, {1.0, 1.0});
    p.W_e *= 10;
    p.W_p *= 10;
    p.b_last.setConstant(5);
    p.blocks[0].mlp.b1.setConstant(3);
    CHECK(penalty(p, {1.0, 1.0}) == before);
    p.blocks[0].attn.W_Q *= 2;
    CHECK(penalty(p, {1.0, 1.0}) > before);
}

TEST_CASE("deepen preserves logits bit for bit in verification mode") {
    Rng rng(14);
    auto p = init_resnet({Variant::rn1, Placement::post, 4, 8, 0, 3, 4, false}, rng);
    const Matrix X0 = gaussian_matrix(rng, 4, 6);
    const Matrix Y = labels_onehot(3, 6);
    CHECK(deepen(p, 0).blocks.size() == p.blocks.size());
    const auto q = deepen(p, 3);
    CHECK(q.blocks.size() == p.blocks.size() + 3);
    CHECK(forward_resnet(q, X0, {NormMode::verification}).logits ==
          forward_resnet(p, X0, {NormMode::verification}).logits);
    CHECK(objective(q, X0, Y, LossKind::ce, {0.1, 0.1}, NormMode::verification).total() ==
          objective(p, X0, Y, LossKind::ce, {0.1, 0.1}, NormMode::verification).total());

    auto t = init_transformer({Variant::t12, Placement::post, 3, 3, 8, 0, 2, 2, true}, rng);
    const TokenBatch tb = all_sequences(3, 3);
    CHECK(forward_transformer(deepen(t, 2), tb, {NormMode::verification}).logits ==
          forward_transformer(t, tb, {NormMode::verification}).logits);
}

TEST_CASE("pre-LN and post-LN agree without inner blocks") {
    Rng rng(15);
    auto p = init_resnet({Variant::rn1, Placement::post, 4, 6, 0, 3, 1, true}, rng);
    auto q = p;
    q.placement = Placement::pre;
    const Matrix X0 = gaussian_matrix(rng, 4, 5);
    CHECK(forward_resnet(p, X0, {NormMode::verification}).logits ==
          forward_resnet(q, X0, {NormMode::verification}).logits);
}

TEST_CASE("gradients of every architecture match finite differences") {
    const Index d = 8, N = 4, K = 2;
    for (Variant v : {Variant::rn1, Variant::rn2, Variant::t11, Variant::t12, Variant::t21,
                      Variant::t22})
        for (Placement pl : {Placement::post, Placement::pre})
            for (LossKind loss : {LossKind::ce, LossKind::mse}) {
                CAPTURE(to_string(v));
                CAPTURE(to_string(pl));
                Rng rng(derive_seed({16, static_cast<std::uint64_t>(v),
                                     static_cast<std::uint64_t>(pl)}));
                DifferentiableObjective f;
                std::vector<Matrix> theta;
                if (!is_transformer(v)) {
                    auto p = init_resnet({v, pl, 5, d, 0, K, 3, true}, rng);
                    randomize_biases(tensors(p), rng);
                    const Matrix X0 = gaussian_matrix(rng, 5, N);
                    const Matrix Y = labels_onehot(K, N);
                    for (auto& r : tensors(p)) theta.push_back(*r.tensor);
                    f = [=](const std::vector<Matrix>& th, std::vector<Matrix>* g) mutable {
                        auto refs = tensors(p);
                        for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = th[i];
                        if (g) {
                            return objective_and_gradient(p, X0, Y, loss, {0.1, 0.05},
                                                          NormMode::training, *g)
                                .total();
                        }
                        return objective(p, X0, Y, loss, {0.1, 0.05}).total();
                    };
                } else {
                    auto p = init_transformer({v, pl, 3, 2, d, 0, K, 2, true}, rng);
                    randomize_biases(tensors(p), rng);
                    const TokenBatch tb{{{0, 2}, {1, 1}}};
                    const Matrix Y = labels_onehot(K, N);
                    for (auto& r : tensors(p)) theta.push_back(*r.tensor);
                    f = [=](const std::vector<Matrix>& th, std::vector<Matrix>* g) mutable {
                        auto refs = tensors(p);
                        for (std::size_t i = 0; i < refs.size(); ++i) *refs[i].tensor = th[i];
                        if (g) {
                            return objective_and_gradient(p, tb, Y, loss, {0.1, 0.05},
                                                          NormMode::training, *g)
                                .total();
                        }
                        return objective(p, tb, Y, loss, {0.1, 0.05}).total();
                    };
                }
                CHECK(finite_diff_check(f, theta, 1e-5).max_relative_error < 1e-5);
            }
}

TEST_CASE("parameter container round trip") {
    Rng rng(17);
    const auto dir = std::filesystem::temp_directory_path();
    auto p = init_resnet({Variant::rn2, Placement::pre, 4, 6, 5, 3, 3, true}, rng);
    io::write_container(dir / "clab_rt_resnet.bin", io::to_container(p));
    const auto q = io::resnet_from_container(io::read_container(dir / "clab_rt_resnet.bin"));
    CHECK(q.variant == Variant::rn2);
    CHECK(q.placement == Placement::pre);
    const Matrix X0 = gaussian_matrix(rng, 4, 3);
    CHECK(forward_resnet(q, X0).logits == forward_resnet(p, X0).logits);

    auto t = init_transformer({Variant::t21, Placement::post, 3, 4, 8, 0, 2, 2, false}, rng);
    io::write_container(dir / "clab_rt_tf.bin", io::to_container(t));
    const auto u = io::transformer_from_container(io::read_container(dir / "clab_rt_tf.bin"));
    CHECK(u.b_last.size() == 0);
    const TokenBatch tb{{{0, 1, 2, 0}}};
    CHECK(forward_transformer(u, tb).logits == forward_transformer(t, tb).logits);
    CHECK_THROWS_AS((void)io::transformer_from_container(
                        io::read_container(dir / "clab_rt_resnet.bin")),
                    Error);
}
