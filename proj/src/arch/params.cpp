#include "collapse_lab/arch/params.hpp"

#include <string>

#include "collapse_lab/error.hpp"

namespace collapse_lab {

std::string_view to_string(Variant v) noexcept {
    switch (v) {
        case Variant::rn1: return "rn1";
        case Variant::rn2: return "rn2";
        case Variant::t11: return "t11";
        case Variant::t12: return "t12";
        case Variant::t21: return "t21";
        case Variant::t22: return "t22";
    }
    return "?";
}

std::string_view to_string(Placement p) noexcept { return p == Placement::post ? "post" : "pre"; }

std::string_view to_string(LossKind k) noexcept { return k == LossKind::ce ? "ce" : "mse"; }

Variant parse_variant(std::string_view tag) {
    for (Variant v : {Variant::rn1, Variant::rn2, Variant::t11, Variant::t12, Variant::t21,
                      Variant::t22}) {
        if (to_string(v) == tag) {
            return v;
        }
    }
    throw Error(ErrorKind::Config, "unknown variant '" + std::string(tag) + "'");
}

Placement parse_placement(std::string_view tag) {
    if (tag == "post") return Placement::post;
    if (tag == "pre") return Placement::pre;
    throw Error(ErrorKind::Config, "unknown placement '" + std::string(tag) + "'");
}

LossKind parse_loss_kind(std::string_view tag) {
    if (tag == "ce") return LossKind::ce;
    if (tag == "mse") return LossKind::mse;
    throw Error(ErrorKind::Config, "unknown loss '" + std::string(tag) + "'");
}

namespace {

template <class Ref, class Block>
void push_mlp(std::vector<Ref>& out, const std::string& prefix, Block& b) {
    out.push_back({prefix + "W1", &b.W1, TensorRole::hidden});
    out.push_back({prefix + "b1", &b.b1, TensorRole::bias});
    if (b.W2.size() != 0) {
        out.push_back({prefix + "W2", &b.W2, TensorRole::hidden});
        out.push_back({prefix + "b2", &b.b2, TensorRole::bias});
    }
}

template <class Ref, class P>
std::vector<Ref> resnet_tensors(P& p) {
    std::vector<Ref> out;
    out.push_back({"W0", &p.W0, TensorRole::embedding});
    out.push_back({"b0", &p.b0, TensorRole::bias});
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        push_mlp(out, "blocks." + std::to_string(l) + ".", p.blocks[l]);
    }
    out.push_back({"WL", &p.WL, TensorRole::last});
    if (p.last_bias.size() != 0) {
        out.push_back({"last_bias", &p.last_bias, TensorRole::bias});
    }
    return out;
}

template <class Ref, class P>
std::vector<Ref> transformer_tensors(P& p) {
    std::vector<Ref> out;
    out.push_back({"W_e", &p.W_e, TensorRole::embedding});
    out.push_back({"W_p", &p.W_p, TensorRole::embedding});
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        const std::string prefix = "blocks." + std::to_string(l) + ".";
        auto& a = p.blocks[l].attn;
        if (has_factored_attention(p.variant)) {
            out.push_back({prefix + "W_Q", &a.W_Q, TensorRole::hidden});
            out.push_back({prefix + "W_K", &a.W_K, TensorRole::hidden});
            out.push_back({prefix + "W_V", &a.W_V, TensorRole::hidden});
            out.push_back({prefix + "W_O", &a.W_O, TensorRole::hidden});
        } else {
            out.push_back({prefix + "W_QK", &a.W_QK, TensorRole::hidden});
            out.push_back({prefix + "W_VO", &a.W_VO, TensorRole::hidden});
        }
        push_mlp(out, prefix + "mlp.", p.blocks[l].mlp);
    }
    out.push_back({"W_last", &p.W_last, TensorRole::last});
    if (p.b_last.size() != 0) {
        out.push_back({"b_last", &p.b_last, TensorRole::bias});
    }
    return out;
}

}  // namespace

std::vector<TensorRef> tensors(ResNetParams& p) { return resnet_tensors<TensorRef>(p); }
std::vector<ConstTensorRef> tensors(const ResNetParams& p) {
    return resnet_tensors<ConstTensorRef>(p);
}
std::vector<TensorRef> tensors(TransformerParams& p) { return transformer_tensors<TensorRef>(p); }
std::vector<ConstTensorRef> tensors(const TransformerParams& p) {
    return transformer_tensors<ConstTensorRef>(p);
}

MlpBlock zero_mlp_block(Index d, Index hidden, bool two_layer) {
    MlpBlock b;
    if (two_layer) {
        b.W1 = Matrix::Zero(hidden, d);
        b.b1 = Matrix::Zero(hidden, 1);
        b.W2 = Matrix::Zero(d, hidden);
        b.b2 = Matrix::Zero(d, 1);
    } else {
        b.W1 = Matrix::Zero(d, d);
        b.b1 = Matrix::Zero(d, 1);
    }
    return b;
}

TransformerBlock zero_transformer_block(Variant v, Index d, Index hidden) {
    TransformerBlock b;
    if (has_factored_attention(v)) {
        b.attn.W_Q = Matrix::Zero(d, d);
        b.attn.W_K = Matrix::Zero(d, d);
        b.attn.W_V = Matrix::Zero(d, d);
        b.attn.W_O = Matrix::Zero(d, d);
    } else {
        b.attn.W_QK = Matrix::Zero(d, d);
        b.attn.W_VO = Matrix::Zero(d, d);
    }
    b.mlp = zero_mlp_block(d, hidden, has_two_layer_mlp(v));
    return b;
}

}  // namespace collapse_lab
