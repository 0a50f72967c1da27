#pragma once

#include <cstddef>

#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

/// LayerNorm numerical regime.
///
/// training:     variance stabilizer eps = 1e-5.
/// verification: eps = 0, constant columns raise ZeroVariance, and a column that
///               is already zero-mean with norm sqrt(d) (to a few ulps) is a fixed
///               point, so identity blocks reproduce their input bit for bit.
enum class NormMode { training, verification };

inline constexpr double kTrainingLayerNormEps = 1e-5;

[[nodiscard]] constexpr double layer_norm_eps(NormMode mode) noexcept {
    return mode == NormMode::training ? kTrainingLayerNormEps : 0.0;
}

/// Column-wise LayerNorm with population (divisor d) variance, no affine part.
[[nodiscard]] Matrix layer_norm(const Matrix& x, NormMode mode);

/// True when column j is zero-mean with norm sqrt(d) up to roundoff.
[[nodiscard]] bool column_is_normalized(const Matrix& x, Index j);

/// Column-wise softmax of `scores` under a block-diagonal causal mask: entry
/// (i, j) is admissible iff i <= j and both fall in the same segment of length
/// `segment` (segment == 0 means one segment spanning all columns). Each column
/// is a probability vector over its admissible rows; other entries are exactly 0.
[[nodiscard]] Matrix masked_softmax(const Matrix& scores, Index segment = 0);

[[nodiscard]] inline bool causal_allowed(Index i, Index j, Index segment) noexcept {
    if (segment > 0 && (i / segment) != (j / segment)) {
        return false;
    }
    return i <= j;
}

/// Mean over columns of -log softmax(logits)[true class].
[[nodiscard]] double cross_entropy(const Matrix& logits, const Matrix& targets);

/// ||logits - targets||_F^2 / (2N).
[[nodiscard]] double mse(const Matrix& logits, const Matrix& targets);

[[nodiscard]] inline Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

/// Loss gradients with respect to the logits (same normalization as the losses).
[[nodiscard]] Matrix cross_entropy_grad(const Matrix& logits, const Matrix& targets);
[[nodiscard]] Matrix mse_grad(const Matrix& logits, const Matrix& targets);

}  // namespace collapse_lab
