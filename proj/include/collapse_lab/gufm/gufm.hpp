#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "collapse_lab/data.hpp"
#include "collapse_lab/metrics/metrics.hpp"
#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

enum class GufmLoss { ce, mse, custom };

/// Fit loss on logits; writes d(loss)/d(logits) into `grad` when non-null.
using CustomLoss = std::function<double(const Matrix& logits, const Matrix& Y, Matrix* grad)>;

struct GufmProblem {
    Matrix Y;  // K x N one-hot
    Index d = 0;
    double lambda = 0.0;
    GufmLoss loss = GufmLoss::ce;
    Equivalence classes;
    CustomLoss custom;

    [[nodiscard]] Index K() const { return Y.rows(); }
    [[nodiscard]] Index N() const { return Y.cols(); }
    [[nodiscard]] Labels labels() const;
};

/// Balanced problem with samples ordered by class (column k*n + i) and no ties.
[[nodiscard]] GufmProblem make_gufm_problem(Index K, Index n, Index d, double lambda,
                                            GufmLoss loss);

struct GufmSolution {
    Matrix W;  // K x d
    Matrix X;  // d x N
    double loss = 0.0;
    NCReport certificate;
};

/// Per equivalence class: average, center, rescale to norm sqrt(d).
[[nodiscard]] Matrix project_feasible(const Matrix& X_raw, const Equivalence& classes);

/// Fit loss of W X plus (lambda/2)||W||^2. Optional gradients of the fit part
/// plus penalty with respect to W and X.
double gufm_loss(const Matrix& W, const Matrix& X, const GufmProblem& problem,
                 Matrix* grad_W = nullptr, Matrix* grad_X = nullptr);

/// d x count orthonormal columns spanning part of the zero-sum hyperplane,
/// by Gram-Schmidt on e_i - 1/d. Requires count <= d - 1.
[[nodiscard]] Matrix zero_sum_frame(Index d, Index count);

/// d x K unit columns with pairwise inner products -1/(K-1), all zero-sum.
[[nodiscard]] Matrix simplex_etf(Index d, Index K);

/// phi(rho) = log(1 + (K-1) exp(-rho sqrt(d) K/(K-1))) + (lambda K / 2) rho^2.
[[nodiscard]] double ce_phi(double rho, Index d, Index K, double lambda);
[[nodiscard]] double ce_optimal_scale(Index d, Index K, double lambda);

/// z* = sqrt(d) / (d + lambda K), the minimizer of the MSE GUFM restricted to
/// orthonormal directions.
[[nodiscard]] double mse_optimal_scale(Index d, Index K, double lambda);

[[nodiscard]] GufmSolution solve_mse_closed_form(const GufmProblem& problem);
[[nodiscard]] GufmSolution solve_ce_closed_form(const GufmProblem& problem);
/// Dispatches on problem.loss (CE or MSE).
[[nodiscard]] GufmSolution solve_closed_form(const GufmProblem& problem);

enum class StepRule {
    /// step_scale / sqrt(t + 1) on the raw gradient.
    decaying,
    /// step_scale / L per block, with L the current curvature bound of the fit
    /// loss in that block (W, or one class representative).
    curvature,
};

struct NumericOptions {
    Index restarts = 8;
    Index steps = 5000;
    StepRule rule = StepRule::curvature;
    double step_scale = 1.0;
    std::uint64_t seed = 0;
    unsigned threads = 0;  // 0: hardware concurrency
    /// Optional starting point; restarts beyond the first are still random.
    const GufmSolution* start = nullptr;
};

[[nodiscard]] GufmSolution solve_numeric(const GufmProblem& problem,
                                         const NumericOptions& options = {});

/// NC certificate: CE selects NC2A, bias-free MSE selects NC2B. All entries
/// are NaN when the labels are unbalanced.
[[nodiscard]] NCReport certify(const Matrix& W, const Matrix& X, const GufmProblem& problem);

/// Frobenius distance between [W; X^T] and the orbit of [W*; X*^T] under
/// orthogonal maps of the zero-sum hyperplane (orthogonal Procrustes). The
/// component along the all-ones direction is not aligned.
[[nodiscard]] double aligned_distance(const Matrix& W, const Matrix& X, const Matrix& W_star,
                                      const Matrix& X_star);

/// `other` rotated within the zero-sum hyperplane to best match `reference`.
[[nodiscard]] std::pair<Matrix, Matrix> align_to(const Matrix& W, const Matrix& X,
                                                 const Matrix& W_ref, const Matrix& X_ref);

struct StabilityRow {
    double epsilon = 0.0;
    double distance = 0.0;  // max over both direction batches
    double noise = 0.0;     // |batch A - batch B|
};

struct StabilityOptions {
    Index directions = 64;  // per batch
    std::uint64_t seed = 0;
};

/// For each epsilon: along random feasible rays from the closed-form optimum,
/// the first point whose loss gap reaches epsilon, and its aligned distance.
[[nodiscard]] std::vector<StabilityRow> stability_probe(const GufmProblem& problem,
                                                        const std::vector<double>& epsilons,
                                                        const StabilityOptions& options = {});

}  // namespace collapse_lab
