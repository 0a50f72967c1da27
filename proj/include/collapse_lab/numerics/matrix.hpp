#pragma once

#include <Eigen/Dense>

namespace collapse_lab {

/// Dense real-64 matrix, row-major storage. Column vectors are `n x 1` matrices
/// so parameters, biases and features all share one type.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

[[nodiscard]] inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Throws Error(NonFinite) naming `what` if any entry is NaN/inf.
void require_finite(const Matrix& m, const char* what);

/// Column vector of ones.
[[nodiscard]] inline Matrix ones(Index n) { return Matrix::Ones(n, 1); }

/// One-hot K x N label matrix.
template <class Labels>
[[nodiscard]] Matrix one_hot(const Labels& labels, Index classes) {
    Matrix y = Matrix::Zero(classes, static_cast<Index>(labels.size()));
    Index j = 0;
    for (auto k : labels) {
        y(static_cast<Index>(k), j++) = 1.0;
    }
    return y;
}

}  // namespace collapse_lab
