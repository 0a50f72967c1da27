#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

enum class Variant { rn1, rn2, t11, t12, t21, t22 };
enum class Placement { post, pre };
enum class LossKind { ce, mse };

[[nodiscard]] std::string_view to_string(Variant v) noexcept;
[[nodiscard]] std::string_view to_string(Placement p) noexcept;
[[nodiscard]] std::string_view to_string(LossKind k) noexcept;
/// Parse lowercase tags; throw Error(Config) on anything else.
[[nodiscard]] Variant parse_variant(std::string_view tag);
[[nodiscard]] Placement parse_placement(std::string_view tag);
[[nodiscard]] LossKind parse_loss_kind(std::string_view tag);

[[nodiscard]] constexpr bool is_transformer(Variant v) noexcept {
    return v != Variant::rn1 && v != Variant::rn2;
}
/// Two linear layers in the MLP / residual branch (RN2, Tx2).
[[nodiscard]] constexpr bool has_two_layer_mlp(Variant v) noexcept {
    return v == Variant::rn2 || v == Variant::t12 || v == Variant::t22;
}
/// Factored attention W_O W_V and W_K^T W_Q (T2x).
[[nodiscard]] constexpr bool has_factored_attention(Variant v) noexcept {
    return v == Variant::t21 || v == Variant::t22;
}

/// Role of a tensor in the regularized objective. Only `hidden` and `last`
/// are penalized; embeddings (W0, W_e, W_p) and biases are exempt.
enum class TensorRole { embedding, bias, hidden, last };

/// Residual MLP branch. One-layer blocks use W1/b1 only and leave W2/b2 empty.
struct MlpBlock {
    Matrix W1, b1, W2, b2;
};

struct ResNetParams {
    Variant variant = Variant::rn1;
    Placement placement = Placement::post;
    Matrix W0, b0;
    std::vector<MlpBlock> blocks;  // L - 1 of them
    Matrix WL;
    Matrix last_bias;  // K x 1, or empty when the last layer has no bias

    [[nodiscard]] Index width() const { return W0.rows(); }
    [[nodiscard]] Index depth() const { return static_cast<Index>(blocks.size()) + 1; }
};

struct AttentionBlock {
    // T1x: W_VO and W_QK. T2x: W_V, W_O, W_Q, W_K. Unused members stay empty.
    Matrix W_VO, W_QK;
    Matrix W_V, W_O, W_Q, W_K;
};

struct TransformerBlock {
    AttentionBlock attn;
    MlpBlock mlp;
};

struct TransformerParams {
    Variant variant = Variant::t11;
    Placement placement = Placement::post;
    Matrix W_e;  // d x V
    Matrix W_p;  // d x C
    std::vector<TransformerBlock> blocks;  // L of them
    Matrix W_last;
    Matrix b_last;  // K x 1, or empty

    [[nodiscard]] Index width() const { return W_e.rows(); }
    [[nodiscard]] Index vocab() const { return W_e.cols(); }
    [[nodiscard]] Index context() const { return W_p.cols(); }
};

template <class M>
struct BasicTensorRef {
    std::string name;
    M* tensor;
    TensorRole role;
};
using TensorRef = BasicTensorRef<Matrix>;
using ConstTensorRef = BasicTensorRef<const Matrix>;

/// All non-empty tensors in a fixed canonical order (the order used by the
/// forward graphs, training and serialization).
[[nodiscard]] std::vector<TensorRef> tensors(ResNetParams& p);
[[nodiscard]] std::vector<ConstTensorRef> tensors(const ResNetParams& p);
[[nodiscard]] std::vector<TensorRef> tensors(TransformerParams& p);
[[nodiscard]] std::vector<ConstTensorRef> tensors(const TransformerParams& p);

/// Zero-initialized block of the right shapes for the variant.
[[nodiscard]] MlpBlock zero_mlp_block(Index d, Index hidden, bool two_layer);
[[nodiscard]] TransformerBlock zero_transformer_block(Variant v, Index d, Index hidden);

}  // namespace collapse_lab

#include "collapse_lab/rng.hpp"

namespace collapse_lab {

struct ResNetShape {
    Variant variant = Variant::rn1;
    Placement placement = Placement::post;
    Index input_dim = 0;
    Index width = 0;
    Index hidden = 0;  // RN2 inner width; 0 means `width`
    Index classes = 0;
    Index depth = 1;  // L, i.e. L - 1 blocks
    bool last_bias = false;
};

struct TransformerShape {
    Variant variant = Variant::t11;
    Placement placement = Placement::post;
    Index vocab = 0;
    Index context = 0;
    Index width = 0;
    Index hidden = 0;
    Index classes = 0;
    Index blocks = 1;
    bool last_bias = true;
};

/// Matrices with i.i.d. N(0, 2 / fan_in) entries; biases zero.
[[nodiscard]] ResNetParams init_resnet(const ResNetShape& shape, Rng& rng);
[[nodiscard]] TransformerParams init_transformer(const TransformerShape& shape, Rng& rng);

}  // namespace collapse_lab
