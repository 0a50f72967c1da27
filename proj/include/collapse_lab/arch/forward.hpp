#pragma once

#include <vector>

#include "collapse_lab/arch/params.hpp"
#include "collapse_lab/numerics/tape.hpp"

namespace collapse_lab {

/// Token input for transformers: S sequences of a common length T <= C.
/// Sample j of the flattened batch is position j % T of sequence j / T.
struct TokenBatch {
    std::vector<std::vector<int>> sequences;

    [[nodiscard]] Index length() const {
        return sequences.empty() ? 0 : static_cast<Index>(sequences.front().size());
    }
    [[nodiscard]] Index samples() const {
        return static_cast<Index>(sequences.size()) * length();
    }
};

struct ForwardOptions {
    NormMode mode = NormMode::training;
    /// Record every block output (X_1..X_L for ResNets; embedding and block
    /// outputs for transformers).
    bool capture = false;
};

struct ForwardResult {
    Matrix logits;
    Matrix features;  // input of the last linear layer
    std::vector<Matrix> states;
};

/// Handles into a forward graph. `leaves` follow tensors(params) order.
struct Graph {
    ad::Var logits;
    ad::Var features;
    std::vector<ad::Var> leaves;
    std::vector<ad::Var> states;
};

/// Records the forward pass on `tape`. With `trainable` the leaves are
/// parameters, otherwise constants.
Graph resnet_graph(ad::Tape& tape, const ResNetParams& p, const Matrix& X0, NormMode mode,
                   bool trainable, bool capture = false);
Graph transformer_graph(ad::Tape& tape, const TransformerParams& p, const TokenBatch& tokens,
                        NormMode mode, bool trainable, bool capture = false);

ForwardResult forward_resnet(const ResNetParams& p, const Matrix& X0,
                             const ForwardOptions& opts = {});
ForwardResult forward_transformer(const TransformerParams& p, const TokenBatch& tokens,
                                  const ForwardOptions& opts = {});

struct Regularization {
    double last = 0.0;
    double rest = 0.0;
};

struct ObjectiveValue {
    double fit = 0.0;
    double penalty = 0.0;
    [[nodiscard]] double total() const { return fit + penalty; }
};

/// (lambda_last/2)||W_L||^2 + (lambda_rest/2) * sum of hidden ||W||^2.
[[nodiscard]] double penalty(const ResNetParams& p, Regularization reg);
[[nodiscard]] double penalty(const TransformerParams& p, Regularization reg);
/// Unweighted sum of squared Frobenius norms of the hidden matrices.
[[nodiscard]] double hidden_sum_squares(const ResNetParams& p);
[[nodiscard]] double hidden_sum_squares(const TransformerParams& p);

ObjectiveValue objective(const ResNetParams& p, const Matrix& X0, const Matrix& Y, LossKind loss,
                         Regularization reg, NormMode mode = NormMode::training);
ObjectiveValue objective(const TransformerParams& p, const TokenBatch& tokens, const Matrix& Y,
                         LossKind loss, Regularization reg, NormMode mode = NormMode::training);

/// Objective plus its gradient with respect to every tensor, in tensors(p) order.
ObjectiveValue objective_and_gradient(const ResNetParams& p, const Matrix& X0, const Matrix& Y,
                                      LossKind loss, Regularization reg, NormMode mode,
                                      std::vector<Matrix>& grads);
ObjectiveValue objective_and_gradient(const TransformerParams& p, const TokenBatch& tokens,
                                      const Matrix& Y, LossKind loss, Regularization reg,
                                      NormMode mode, std::vector<Matrix>& grads);

/// Appends `extra` zero blocks before the last layer.
[[nodiscard]] ResNetParams deepen(ResNetParams p, Index extra);
[[nodiscard]] TransformerParams deepen(TransformerParams p, Index extra);

}  // namespace collapse_lab
