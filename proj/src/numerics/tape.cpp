#include "collapse_lab/numerics/tape.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "collapse_lab/error.hpp"

namespace collapse_lab::ad {

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, false});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true, true});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : Backward{},
                          requires_grad, false});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::accumulate(Var v, const Matrix& g) {
    Node& node = nodes_[v.id];
    if (!node.requires_grad) {
        return;
    }
    if (node.grad.size() == 0) {
        node.grad = g;
    } else {
        node.grad += g;
    }
}

void Tape::backward(Var loss) {
    require(value(loss).rows() == 1 && value(loss).cols() == 1, ErrorKind::ShapeMismatch,
            "backward: loss node must be 1x1");
    for (auto& node : nodes_) {
        node.grad.resize(0, 0);
    }
    accumulate(loss, Matrix::Ones(1, 1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        Node& node = nodes_[i];
        if (node.backward && node.grad.size() != 0) {
            // The callback may append to parents only; copy the grad so the
            // reference stays valid regardless of what it touches.
            const Matrix g = node.grad;
            node.backward(*this, g);
        }
    }
}

Matrix Tape::grad(Var v) const {
    const Node& node = nodes_[v.id];
    if (node.grad.size() == 0) {
        return Matrix::Zero(node.value.rows(), node.value.cols());
    }
    return node.grad;
}

namespace {

void expect_shape(bool ok, const char* op) {
    if (!ok) {
        throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": incompatible shapes");
    }
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    expect_shape(t.value(a).cols() == t.value(b).rows(), "matmul");
    Matrix out = t.value(a) * t.value(b);
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
        if (tp.requires_grad(a)) {
            tp.accumulate(a, g * tp.value(b).transpose());
        }
        if (tp.requires_grad(b)) {
            tp.accumulate(b, tp.value(a).transpose() * g);
        }
    });
}

Var add(Tape& t, Var a, Var b) {
    expect_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                 "add");
    Matrix out = t.value(a) + t.value(b);
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    expect_shape(t.value(a).rows() == t.value(b).rows() && t.value(a).cols() == t.value(b).cols(),
                 "sub");
    Matrix out = t.value(a) - t.value(b);
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(out), rg, [a, b](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, -g);
    });
}

Var add_bias(Tape& t, Var a, Var bias) {
    expect_shape(t.value(bias).cols() == 1 && t.value(bias).rows() == t.value(a).rows(),
                 "add_bias");
    Matrix out = t.value(a);
    out.colwise() += t.value(bias).col(0);
    const bool rg = t.requires_grad(a) || t.requires_grad(bias);
    return t.record(std::move(out), rg, [a, bias](Tape& tp, const Matrix& g) {
        tp.accumulate(a, g);
        if (tp.requires_grad(bias)) {
            Matrix gb = g.rowwise().sum();
            tp.accumulate(bias, gb);
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Matrix out = t.value(a) * s;
    return t.record(std::move(out), t.requires_grad(a),
                    [a, s](Tape& tp, const Matrix& g) { tp.accumulate(a, g * s); });
}

Var transpose(Tape& t, Var a) {
    Matrix out = t.value(a).transpose();
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        Matrix gt = g.transpose();
        tp.accumulate(a, gt);
    });
}

Var relu(Tape& t, Var a) {
    Matrix out = collapse_lab::relu(t.value(a));
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        Matrix ga = (tp.value(a).array() > 0.0).select(g, 0.0);
        tp.accumulate(a, ga);
    });
}

Var layer_norm(Tape& t, Var a, NormMode mode) {
    const Matrix& x = t.value(a);
    const Index d = x.rows();
    const double eps = layer_norm_eps(mode);
    Matrix out = collapse_lab::layer_norm(x, mode);
    // Per-column 1/sqrt(var + eps); columns passed through as fixed points get 0
    // to mark an identity backward.
    Matrix inv_std = Matrix::Zero(1, x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        if (mode == NormMode::verification && column_is_normalized(x, j)) {
            continue;
        }
        const double mean = x.col(j).mean();
        const double var = (x.col(j).array() - mean).square().sum() / static_cast<double>(d);
        inv_std(0, j) = 1.0 / std::sqrt(var + eps);
    }
    const Var out_var = Var{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), t.requires_grad(a),
                    [a, out_var, inv_std, d](Tape& tp, const Matrix& g) {
                        const Matrix& y = tp.value(out_var);
                        Matrix ga(g.rows(), g.cols());
                        for (Index j = 0; j < g.cols(); ++j) {
                            if (inv_std(0, j) == 0.0) {
                                ga.col(j) = g.col(j);
                                continue;
                            }
                            const double mean_g = g.col(j).mean();
                            const double mean_gy =
                                g.col(j).dot(y.col(j)) / static_cast<double>(d);
                            ga.col(j) = inv_std(0, j) *
                                        (g.col(j).array() - mean_g - y.col(j).array() * mean_gy)
                                            .matrix();
                        }
                        tp.accumulate(a, ga);
                    });
}

Var masked_softmax(Tape& t, Var scores, Index segment) {
    Matrix out = collapse_lab::masked_softmax(t.value(scores), segment);
    const Var out_var = Var{static_cast<std::uint32_t>(t.size())};
    return t.record(std::move(out), t.requires_grad(scores),
                    [scores, out_var](Tape& tp, const Matrix& g) {
                        const Matrix& p = tp.value(out_var);
                        Matrix gs(p.rows(), p.cols());
                        for (Index j = 0; j < p.cols(); ++j) {
                            const double inner = p.col(j).dot(g.col(j));
                            gs.col(j) = (p.col(j).array() * (g.col(j).array() - inner)).matrix();
                        }
                        tp.accumulate(scores, gs);
                    });
}

Var sum_squares(Tape& t, Var a) {
    Matrix out(1, 1);
    out(0, 0) = t.value(a).squaredNorm();
    return t.record(std::move(out), t.requires_grad(a), [a](Tape& tp, const Matrix& g) {
        tp.accumulate(a, 2.0 * g(0, 0) * tp.value(a));
    });
}

Var cross_entropy(Tape& t, Var logits, const Matrix& targets) {
    Matrix out(1, 1);
    out(0, 0) = collapse_lab::cross_entropy(t.value(logits), targets);
    return t.record(std::move(out), t.requires_grad(logits),
                    [logits, targets](Tape& tp, const Matrix& g) {
                        tp.accumulate(logits,
                                      g(0, 0) * cross_entropy_grad(tp.value(logits), targets));
                    });
}

Var mse(Tape& t, Var logits, const Matrix& targets) {
    Matrix out(1, 1);
    out(0, 0) = collapse_lab::mse(t.value(logits), targets);
    return t.record(std::move(out), t.requires_grad(logits),
                    [logits, targets](Tape& tp, const Matrix& g) {
                        tp.accumulate(logits, g(0, 0) * mse_grad(tp.value(logits), targets));
                    });
}

}  // namespace collapse_lab::ad
