#include <cmath>

#include "collapse_lab/arch/params.hpp"
#include "collapse_lab/error.hpp"

namespace collapse_lab {

namespace {

Matrix he(Rng& rng, Index rows, Index cols) {
    return gaussian_matrix(rng, rows, cols, std::sqrt(2.0 / static_cast<double>(cols)));
}

MlpBlock random_mlp(Rng& rng, Index d, Index hidden, bool two_layer) {
    MlpBlock b = zero_mlp_block(d, hidden, two_layer);
    b.W1 = he(rng, b.W1.rows(), b.W1.cols());
    if (two_layer) {
        b.W2 = he(rng, b.W2.rows(), b.W2.cols());
    }
    return b;
}

}  // namespace

ResNetParams init_resnet(const ResNetShape& s, Rng& rng) {
    require(s.input_dim > 0 && s.width > 0 && s.classes > 0 && s.depth >= 1, ErrorKind::Config,
            "resnet shape must be positive");
    require(!is_transformer(s.variant), ErrorKind::Config, "not a resnet variant");
    const Index hidden = s.hidden > 0 ? s.hidden : s.width;
    ResNetParams p;
    p.variant = s.variant;
    p.placement = s.placement;
    p.W0 = he(rng, s.width, s.input_dim);
    p.b0 = Matrix::Zero(s.width, 1);
    for (Index l = 1; l < s.depth; ++l) {
        p.blocks.push_back(random_mlp(rng, s.width, hidden, s.variant == Variant::rn2));
    }
    p.WL = he(rng, s.classes, s.width);
    if (s.last_bias) {
        p.last_bias = Matrix::Zero(s.classes, 1);
    }
    return p;
}

TransformerParams init_transformer(const TransformerShape& s, Rng& rng) {
    require(s.vocab > 0 && s.context > 0 && s.width > 0 && s.classes > 0 && s.blocks >= 0,
            ErrorKind::Config, "transformer shape must be positive");
    require(is_transformer(s.variant), ErrorKind::Config, "not a transformer variant");
    const Index d = s.width;
    const Index hidden = s.hidden > 0 ? s.hidden : d;
    TransformerParams p;
    p.variant = s.variant;
    p.placement = s.placement;
    p.W_e = he(rng, d, s.vocab);
    p.W_p = he(rng, d, s.context);
    for (Index l = 0; l < s.blocks; ++l) {
        TransformerBlock b = zero_transformer_block(s.variant, d, hidden);
        for (Matrix* m : {&b.attn.W_QK, &b.attn.W_VO, &b.attn.W_Q, &b.attn.W_K, &b.attn.W_V,
                          &b.attn.W_O}) {
            if (m->size() != 0) {
                *m = he(rng, d, d);
            }
        }
        b.mlp = random_mlp(rng, d, hidden, has_two_layer_mlp(s.variant));
        p.blocks.push_back(std::move(b));
    }
    p.W_last = he(rng, s.classes, d);
    if (s.last_bias) {
        p.b_last = Matrix::Zero(s.classes, 1);
    }
    return p;
}

}  // namespace collapse_lab
