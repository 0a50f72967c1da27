#include "collapse_lab/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "collapse_lab/error.hpp"

namespace collapse_lab {

void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw Error(ErrorKind::NonFinite, std::string(what) + " contains non-finite entries");
    }
}

bool column_is_normalized(const Matrix& x, Index j) {
    const auto d = static_cast<double>(x.rows());
    const auto col = x.col(j);
    const double sum = col.sum();
    const double sq = col.squaredNorm();
    constexpr double tol = 64.0 * std::numeric_limits<double>::epsilon();
    return std::abs(sum) <= tol * std::sqrt(d) * std::sqrt(d) && std::abs(sq - d) <= tol * d;
}

Matrix layer_norm(const Matrix& x, NormMode mode) {
    const Index d = x.rows();
    const double eps = layer_norm_eps(mode);
    Matrix out(x.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        if (mode == NormMode::verification && column_is_normalized(x, j)) {
            out.col(j) = x.col(j);
            continue;
        }
        const double mean = x.col(j).mean();
        const auto centered = (x.col(j).array() - mean).matrix();
        const double var = centered.squaredNorm() / static_cast<double>(d);
        if (mode == NormMode::verification && var == 0.0) {
            throw Error(ErrorKind::ZeroVariance, "layer_norm: constant column " + std::to_string(j));
        }
        out.col(j) = centered / std::sqrt(var + eps);
    }
    return out;
}

Matrix masked_softmax(const Matrix& scores, Index segment) {
    const Index n = scores.rows();
    Matrix out = Matrix::Zero(n, scores.cols());
    for (Index j = 0; j < scores.cols(); ++j) {
        double top = -std::numeric_limits<double>::infinity();
        for (Index i = 0; i < n; ++i) {
            if (causal_allowed(i, j, segment)) {
                top = std::max(top, scores(i, j));
            }
        }
        double total = 0.0;
        for (Index i = 0; i < n; ++i) {
            if (causal_allowed(i, j, segment)) {
                out(i, j) = std::exp(scores(i, j) - top);
                total += out(i, j);
            }
        }
        out.col(j) /= total;
    }
    return out;
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorKind::ShapeMismatch, what);
    }
}

double log_sum_exp(const Matrix& logits, Index j) {
    const double top = logits.col(j).maxCoeff();
    return top + std::log((logits.col(j).array() - top).exp().sum());
}

}  // namespace

double cross_entropy(const Matrix& logits, const Matrix& targets) {
    check_same_shape(logits, targets, "cross_entropy: logits/targets shape");
    double total = 0.0;
    for (Index j = 0; j < logits.cols(); ++j) {
        const double lse = log_sum_exp(logits, j);
        for (Index k = 0; k < logits.rows(); ++k) {
            if (targets(k, j) != 0.0) {
                total += targets(k, j) * (lse - logits(k, j));
            }
        }
    }
    return total / static_cast<double>(logits.cols());
}

Matrix cross_entropy_grad(const Matrix& logits, const Matrix& targets) {
    check_same_shape(logits, targets, "cross_entropy_grad: logits/targets shape");
    Matrix g(logits.rows(), logits.cols());
    const double inv_n = 1.0 / static_cast<double>(logits.cols());
    for (Index j = 0; j < logits.cols(); ++j) {
        const double lse = log_sum_exp(logits, j);
        const double mass = targets.col(j).sum();
        for (Index k = 0; k < logits.rows(); ++k) {
            g(k, j) = (mass * std::exp(logits(k, j) - lse) - targets(k, j)) * inv_n;
        }
    }
    return g;
}

double mse(const Matrix& logits, const Matrix& targets) {
    check_same_shape(logits, targets, "mse: logits/targets shape");
    return (logits - targets).squaredNorm() / (2.0 * static_cast<double>(logits.cols()));
}

Matrix mse_grad(const Matrix& logits, const Matrix& targets) {
    check_same_shape(logits, targets, "mse_grad: logits/targets shape");
    return (logits - targets) / static_cast<double>(logits.cols());
}

}  // namespace collapse_lab
