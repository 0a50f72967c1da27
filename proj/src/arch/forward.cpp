#include "collapse_lab/arch/forward.hpp"

#include <cmath>
#include <map>

#include "collapse_lab/error.hpp"

namespace collapse_lab {

namespace {

using ad::Tape;
using ad::Var;

class Leaves {
public:
    template <class Refs>
    Leaves(Tape& t, const Refs& refs, bool trainable, std::vector<Var>& out) {
        for (const auto& r : refs) {
            Var v = trainable ? t.parameter(*r.tensor) : t.constant(*r.tensor);
            by_address_[r.tensor] = v;
            out.push_back(v);
        }
    }
    Var operator()(const Matrix& m) const { return by_address_.at(&m); }

private:
    std::map<const Matrix*, Var> by_address_;
};

/// sigma(W1 x + b1) or W2 sigma(W1 x + b1) + b2.
Var mlp_branch(Tape& t, const Leaves& leaf, const MlpBlock& b, Var x) {
    Var h = ad::relu(t, ad::add_bias(t, ad::matmul(t, leaf(b.W1), x), leaf(b.b1)));
    if (b.W2.size() == 0) {
        return h;
    }
    return ad::add_bias(t, ad::matmul(t, leaf(b.W2), h), leaf(b.b2));
}

void check_mlp_shapes(const MlpBlock& b, Index d) {
    require(b.W1.cols() == d && b.b1.rows() == b.W1.rows() && b.b1.cols() == 1,
            ErrorKind::ShapeMismatch, "block first layer shape");
    if (b.W2.size() != 0) {
        require(b.W2.rows() == d && b.W2.cols() == b.W1.rows() && b.b2.rows() == d,
                ErrorKind::ShapeMismatch, "block second layer shape");
    } else {
        require(b.W1.rows() == d, ErrorKind::ShapeMismatch, "one-layer block must be d x d");
    }
}

Var attention_branch(Tape& t, const Leaves& leaf, const TransformerParams& p,
                     const AttentionBlock& a, Var z, Index segment) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.width()));
    Var scores;
    Var mixed;
    if (has_factored_attention(p.variant)) {
        Var q = ad::matmul(t, leaf(a.W_Q), z);
        Var k = ad::matmul(t, leaf(a.W_K), z);
        scores = ad::scale(t, ad::matmul(t, ad::transpose(t, k), q), inv_sqrt_d);
    } else {
        Var qz = ad::matmul(t, leaf(a.W_QK), z);
        scores = ad::scale(t, ad::matmul(t, ad::transpose(t, z), qz), inv_sqrt_d);
    }
    Var weights = ad::masked_softmax(t, scores, segment);
    Var za = ad::matmul(t, z, weights);
    if (has_factored_attention(p.variant)) {
        mixed = ad::matmul(t, leaf(a.W_O), ad::matmul(t, leaf(a.W_V), za));
    } else {
        mixed = ad::matmul(t, leaf(a.W_VO), za);
    }
    return mixed;
}

template <class Refs>
double weighted_penalty(const Refs& refs, Regularization reg) {
    double last = 0.0;
    double rest = 0.0;
    for (const auto& r : refs) {
        if (r.role == TensorRole::last) {
            last += r.tensor->squaredNorm();
        } else if (r.role == TensorRole::hidden) {
            rest += r.tensor->squaredNorm();
        }
    }
    return 0.5 * reg.last * last + 0.5 * reg.rest * rest;
}

template <class Refs>
double hidden_squares(const Refs& refs) {
    double s = 0.0;
    for (const auto& r : refs) {
        if (r.role == TensorRole::hidden) {
            s += r.tensor->squaredNorm();
        }
    }
    return s;
}

Var fit_loss(Tape& t, Var logits, const Matrix& Y, LossKind loss) {
    require(t.value(logits).rows() == Y.rows() && t.value(logits).cols() == Y.cols(),
            ErrorKind::ShapeMismatch, "targets do not match logits");
    return loss == LossKind::ce ? ad::cross_entropy(t, logits, Y) : ad::mse(t, logits, Y);
}

template <class P, class Refs>
ObjectiveValue gradient_from_graph(Tape& t, const Graph& g, const P& p, const Refs& refs,
                                   const Matrix& Y, LossKind loss, Regularization reg,
                                   std::vector<Matrix>& grads) {
    Var fit = fit_loss(t, g.logits, Y, loss);
    t.backward(fit);
    ObjectiveValue out{t.value(fit)(0, 0), penalty(p, reg)};
    grads.clear();
    for (std::size_t i = 0; i < refs.size(); ++i) {
        Matrix gi = t.grad(g.leaves[i]);
        if (refs[i].role == TensorRole::last) {
            gi += reg.last * *refs[i].tensor;
        } else if (refs[i].role == TensorRole::hidden) {
            gi += reg.rest * *refs[i].tensor;
        }
        grads.push_back(std::move(gi));
    }
    require(std::isfinite(out.total()), ErrorKind::NonFinite, "objective diverged");
    return out;
}

}  // namespace

Graph resnet_graph(Tape& t, const ResNetParams& p, const Matrix& X0, NormMode mode,
                   bool trainable, bool capture) {
    const Index d = p.width();
    require(p.W0.cols() == X0.rows(), ErrorKind::ShapeMismatch, "W0 does not match inputs");
    require(p.b0.rows() == d && p.b0.cols() == 1, ErrorKind::ShapeMismatch, "b0 shape");
    require(p.WL.cols() == d, ErrorKind::ShapeMismatch, "last layer shape");
    for (const auto& b : p.blocks) {
        check_mlp_shapes(b, d);
    }

    Graph g;
    const auto refs = tensors(p);
    Leaves leaf(t, refs, trainable, g.leaves);

    Var x = ad::layer_norm(
        t, ad::add_bias(t, ad::matmul(t, leaf(p.W0), t.constant(X0)), leaf(p.b0)), mode);
    if (capture) g.states.push_back(x);
    for (const auto& b : p.blocks) {
        if (p.placement == Placement::post) {
            x = ad::layer_norm(t, ad::add(t, x, mlp_branch(t, leaf, b, x)), mode);
        } else {
            x = ad::add(t, x, mlp_branch(t, leaf, b, ad::layer_norm(t, x, mode)));
        }
        if (capture) g.states.push_back(x);
    }
    g.features = p.placement == Placement::post ? x : ad::layer_norm(t, x, mode);
    g.logits = ad::matmul(t, leaf(p.WL), g.features);
    if (p.last_bias.size() != 0) {
        g.logits = ad::add_bias(t, g.logits, leaf(p.last_bias));
    }
    return g;
}

Graph transformer_graph(Tape& t, const TransformerParams& p, const TokenBatch& tokens,
                        NormMode mode, bool trainable, bool capture) {
    const Index d = p.width();
    const Index V = p.vocab();
    const Index T = tokens.length();
    const Index N = tokens.samples();
    require(T >= 1 && T <= p.context(), ErrorKind::ShapeMismatch,
            "sequence length must be in [1, C]");
    require(p.W_p.rows() == d && p.W_last.cols() == d, ErrorKind::ShapeMismatch,
            "embedding / last layer shape");

    Matrix onehot = Matrix::Zero(V, N);
    Matrix select = Matrix::Zero(p.context(), N);
    for (std::size_t s = 0; s < tokens.sequences.size(); ++s) {
        const auto& seq = tokens.sequences[s];
        require(static_cast<Index>(seq.size()) == T, ErrorKind::ShapeMismatch,
                "sequences must share one length");
        for (Index pos = 0; pos < T; ++pos) {
            const Index col = static_cast<Index>(s) * T + pos;
            require(seq[pos] >= 0 && seq[pos] < V, ErrorKind::ShapeMismatch,
                    "token index out of range");
            onehot(seq[pos], col) = 1.0;
            select(pos, col) = 1.0;
        }
    }

    Graph g;
    const auto refs = tensors(p);
    Leaves leaf(t, refs, trainable, g.leaves);

    Var z = ad::add(t, ad::matmul(t, leaf(p.W_e), t.constant(onehot)),
                    ad::matmul(t, leaf(p.W_p), t.constant(select)));
    if (p.placement == Placement::pre) {
        z = ad::layer_norm(t, z, mode);
    }
    if (capture) g.states.push_back(z);
    for (const auto& b : p.blocks) {
        check_mlp_shapes(b.mlp, d);
        if (p.placement == Placement::post) {
            z = ad::layer_norm(t, z, mode);
            z = ad::add(t, z, attention_branch(t, leaf, p, b.attn, z, T));
            z = ad::layer_norm(t, z, mode);
            z = ad::add(t, z, mlp_branch(t, leaf, b.mlp, z));
        } else {
            Var y = ad::layer_norm(t, z, mode);
            z = ad::add(t, z, attention_branch(t, leaf, p, b.attn, y, T));
            y = ad::layer_norm(t, z, mode);
            z = ad::add(t, z, mlp_branch(t, leaf, b.mlp, y));
        }
        if (capture) g.states.push_back(z);
    }
    g.features = ad::layer_norm(t, z, mode);
    g.logits = ad::matmul(t, leaf(p.W_last), g.features);
    if (p.b_last.size() != 0) {
        g.logits = ad::add_bias(t, g.logits, leaf(p.b_last));
    }
    return g;
}

namespace {

ForwardResult collect(const Tape& t, const Graph& g) {
    ForwardResult r;
    r.logits = t.value(g.logits);
    r.features = t.value(g.features);
    for (Var s : g.states) {
        r.states.push_back(t.value(s));
    }
    return r;
}

}  // namespace

ForwardResult forward_resnet(const ResNetParams& p, const Matrix& X0, const ForwardOptions& opts) {
    Tape t;
    const Graph g = resnet_graph(t, p, X0, opts.mode, false, opts.capture);
    return collect(t, g);
}

ForwardResult forward_transformer(const TransformerParams& p, const TokenBatch& tokens,
                                  const ForwardOptions& opts) {
    Tape t;
    const Graph g = transformer_graph(t, p, tokens, opts.mode, false, opts.capture);
    return collect(t, g);
}

double penalty(const ResNetParams& p, Regularization reg) {
    return weighted_penalty(tensors(p), reg);
}
double penalty(const TransformerParams& p, Regularization reg) {
    return weighted_penalty(tensors(p), reg);
}
double hidden_sum_squares(const ResNetParams& p) { return hidden_squares(tensors(p)); }
double hidden_sum_squares(const TransformerParams& p) { return hidden_squares(tensors(p)); }

ObjectiveValue objective(const ResNetParams& p, const Matrix& X0, const Matrix& Y, LossKind loss,
                         Regularization reg, NormMode mode) {
    Tape t;
    const Graph g = resnet_graph(t, p, X0, mode, false);
    return {t.value(fit_loss(t, g.logits, Y, loss))(0, 0), penalty(p, reg)};
}

ObjectiveValue objective(const TransformerParams& p, const TokenBatch& tokens, const Matrix& Y,
                         LossKind loss, Regularization reg, NormMode mode) {
    Tape t;
    const Graph g = transformer_graph(t, p, tokens, mode, false);
    return {t.value(fit_loss(t, g.logits, Y, loss))(0, 0), penalty(p, reg)};
}

ObjectiveValue objective_and_gradient(const ResNetParams& p, const Matrix& X0, const Matrix& Y,
                                      LossKind loss, Regularization reg, NormMode mode,
                                      std::vector<Matrix>& grads) {
    Tape t;
    const Graph g = resnet_graph(t, p, X0, mode, true);
    return gradient_from_graph(t, g, p, tensors(p), Y, loss, reg, grads);
}

ObjectiveValue objective_and_gradient(const TransformerParams& p, const TokenBatch& tokens,
                                      const Matrix& Y, LossKind loss, Regularization reg,
                                      NormMode mode, std::vector<Matrix>& grads) {
    Tape t;
    const Graph g = transformer_graph(t, p, tokens, mode, true);
    return gradient_from_graph(t, g, p, tensors(p), Y, loss, reg, grads);
}

ResNetParams deepen(ResNetParams p, Index extra) {
    const Index d = p.width();
    const Index hidden = p.blocks.empty() ? d : p.blocks.front().W1.rows();
    for (Index i = 0; i < extra; ++i) {
        p.blocks.push_back(zero_mlp_block(d, hidden, p.variant == Variant::rn2));
    }
    return p;
}

TransformerParams deepen(TransformerParams p, Index extra) {
    const Index d = p.width();
    const Index hidden = p.blocks.empty() ? d : p.blocks.front().mlp.W1.rows();
    for (Index i = 0; i < extra; ++i) {
        p.blocks.push_back(zero_transformer_block(p.variant, d, hidden));
    }
    return p;
}

}  // namespace collapse_lab
