#include "collapse_lab/gufm/gufm.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>

#include "collapse_lab/error.hpp"
#include "collapse_lab/numerics/ops.hpp"
#include "collapse_lab/parallel.hpp"
#include "collapse_lab/rng.hpp"

namespace collapse_lab {

Labels GufmProblem::labels() const {
    Labels out(static_cast<std::size_t>(N()));
    for (Index j = 0; j < N(); ++j) {
        Index k = 0;
        Y.col(j).maxCoeff(&k);
        out[static_cast<std::size_t>(j)] = static_cast<int>(k);
    }
    return out;
}

GufmProblem make_gufm_problem(Index K, Index n, Index d, double lambda, GufmLoss loss) {
    require(K >= 1 && n >= 1 && d >= 2, ErrorKind::Config, "gufm problem sizes");
    require(lambda > 0.0, ErrorKind::Config, "lambda must be positive");
    GufmProblem p;
    p.Y = Matrix::Zero(K, K * n);
    for (Index k = 0; k < K; ++k)
        for (Index i = 0; i < n; ++i) p.Y(k, k * n + i) = 1.0;
    p.d = d;
    p.lambda = lambda;
    p.loss = loss;
    p.classes = singleton_classes(K * n);
    return p;
}

Matrix project_feasible(const Matrix& X_raw, const Equivalence& classes) {
    const Index d = X_raw.rows();
    const double radius = std::sqrt(static_cast<double>(d));
    Matrix X(d, X_raw.cols());
    for (const auto& cls : classes) {
        Matrix v = Matrix::Zero(d, 1);
        for (Index j : cls) v += X_raw.col(j);
        v /= static_cast<double>(cls.size());
        v.array() -= v.mean();
        const double norm = v.norm();
        require(norm >= 1e-12, ErrorKind::DegenerateClass,
                "equivalence class averages to the all-ones line");
        v *= radius / norm;
        for (Index j : cls) X.col(j) = v;
    }
    return X;
}

double gufm_loss(const Matrix& W, const Matrix& X, const GufmProblem& problem, Matrix* grad_W,
                 Matrix* grad_X) {
    require(W.cols() == X.rows() && W.rows() == problem.K() && X.cols() == problem.N(),
            ErrorKind::ShapeMismatch, "gufm shapes");
    const Matrix logits = W * X;
    double fit = 0.0;
    Matrix g;
    switch (problem.loss) {
        case GufmLoss::ce:
            fit = cross_entropy(logits, problem.Y);
            if (grad_W || grad_X) g = cross_entropy_grad(logits, problem.Y);
            break;
        case GufmLoss::mse:
            fit = mse(logits, problem.Y);
            if (grad_W || grad_X) g = mse_grad(logits, problem.Y);
            break;
        case GufmLoss::custom:
            require(static_cast<bool>(problem.custom), ErrorKind::Config, "custom loss missing");
            fit = problem.custom(logits, problem.Y, (grad_W || grad_X) ? &g : nullptr);
            break;
    }
    if (grad_W) *grad_W = g * X.transpose() + problem.lambda * W;
    if (grad_X) *grad_X = W.transpose() * g;
    return fit + 0.5 * problem.lambda * W.squaredNorm();
}

Matrix zero_sum_frame(Index d, Index count) {
    require(count <= d - 1, ErrorKind::DimensionTooSmall,
            "zero-sum hyperplane has dimension d - 1");
    Matrix F(d, count);
    Index filled = 0;
    for (Index i = 0; i < d && filled < count; ++i) {
        Matrix v = Matrix::Constant(d, 1, -1.0 / static_cast<double>(d));
        v(i, 0) += 1.0;
        for (Index c = 0; c < filled; ++c) v -= F.col(c).dot(v.col(0)) * F.col(c);
        const double n = v.norm();
        if (n > 1e-8) F.col(filled++) = v / n;
    }
    return F;
}

Matrix simplex_etf(Index d, Index K) {
    require(K >= 2 && d >= K, ErrorKind::DimensionTooSmall, "simplex ETF needs d >= K >= 2");
    // K centered basis vectors of R^K, expressed in a (K-1)-dim frame, then
    // placed in the zero-sum hyperplane of R^d.
    const Matrix Q = zero_sum_frame(K, K - 1);
    const Matrix centered = Matrix::Identity(K, K) - Matrix::Constant(K, K, 1.0 / K);
    const Matrix B = std::sqrt(static_cast<double>(K) / (K - 1)) * Q.transpose() * centered;
    return zero_sum_frame(d, K - 1) * B;
}

double ce_phi(double rho, Index d, Index K, double lambda) {
    const double a = std::sqrt(static_cast<double>(d)) * K / (K - 1.0);
    return std::log1p((K - 1.0) * std::exp(-rho * a)) + 0.5 * lambda * K * rho * rho;
}

namespace {

double ce_phi_prime(double rho, Index d, Index K, double lambda) {
    const double a = std::sqrt(static_cast<double>(d)) * K / (K - 1.0);
    const double e = (K - 1.0) * std::exp(-rho * a);
    return -a * e / (1.0 + e) + lambda * K * rho;
}

}  // namespace

double ce_optimal_scale(Index d, Index K, double lambda) {
    require(K >= 2 && lambda > 0.0, ErrorKind::Config, "ce scale needs K >= 2, lambda > 0");
    double hi = 1.0;
    while (ce_phi_prime(hi, d, K, lambda) <= 0.0) hi *= 2.0;
    double lo = 0.0;
    const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - ratio * (hi - lo);
    double x2 = lo + ratio * (hi - lo);
    double f1 = ce_phi(x1, d, K, lambda);
    double f2 = ce_phi(x2, d, K, lambda);
    while (hi - lo > 1e-12) {
        if (f1 < f2) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = ce_phi(x1, d, K, lambda);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = ce_phi(x2, d, K, lambda);
        }
    }
    return 0.5 * (lo + hi);
}

double mse_optimal_scale(Index d, Index K, double lambda) {
    return std::sqrt(static_cast<double>(d)) / (static_cast<double>(d) + lambda * K);
}

NCReport certify(const Matrix& W, const Matrix& X, const GufmProblem& problem) {
    const LossKind kind = problem.loss == GufmLoss::mse ? LossKind::mse : LossKind::ce;
    try {
        return report(W, X, problem.labels(), kind, false);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::Unbalanced) throw;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        return NCReport{nan, nan, nan, nan, kind == LossKind::mse ? Nc2Kind::b : Nc2Kind::a};
    }
}

namespace {

void check_label_homogeneous(const GufmProblem& p) {
    const Labels labels = p.labels();
    for (const auto& cls : p.classes)
        for (Index j : cls)
            require(labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(cls[0])],
                    ErrorKind::Config, "equivalence class mixes labels");
}

GufmSolution from_directions(const GufmProblem& p, const Matrix& U, double scale) {
    // U: d x K unit directions; W rows scale * u_k; x_ki = sqrt(d) u_k.
    GufmSolution s;
    s.W = scale * U.transpose();
    const Labels labels = p.labels();
    s.X.resize(p.d, p.N());
    for (Index j = 0; j < p.N(); ++j)
        s.X.col(j) = std::sqrt(static_cast<double>(p.d)) * U.col(labels[static_cast<std::size_t>(j)]);
    s.loss = gufm_loss(s.W, s.X, p);
    s.certificate = certify(s.W, s.X, p);
    return s;
}

}  // namespace

GufmSolution solve_mse_closed_form(const GufmProblem& p) {
    require(p.loss == GufmLoss::mse, ErrorKind::Config, "problem is not MSE");
    require(p.d >= p.K() + 1, ErrorKind::DimensionTooSmall, "MSE closed form needs d >= K + 1");
    check_label_homogeneous(p);
    return from_directions(p, zero_sum_frame(p.d, p.K()), mse_optimal_scale(p.d, p.K(), p.lambda));
}

GufmSolution solve_ce_closed_form(const GufmProblem& p) {
    require(p.loss == GufmLoss::ce, ErrorKind::Config, "problem is not CE");
    require(p.d >= p.K(), ErrorKind::DimensionTooSmall, "CE closed form needs d >= K");
    check_label_homogeneous(p);
    return from_directions(p, simplex_etf(p.d, p.K()), ce_optimal_scale(p.d, p.K(), p.lambda));
}

GufmSolution solve_closed_form(const GufmProblem& p) {
    switch (p.loss) {
        case GufmLoss::ce: return solve_ce_closed_form(p);
        case GufmLoss::mse: return solve_mse_closed_form(p);
        case GufmLoss::custom: break;
    }
    throw Error(ErrorKind::Config, "no closed form for a custom loss");
}

namespace {

// Per-class representative columns <-> full feature matrix.
Matrix expand(const Matrix& Z, const Equivalence& classes, Index N) {
    Matrix X(Z.rows(), N);
    for (std::size_t c = 0; c < classes.size(); ++c)
        for (Index j : classes[c]) X.col(j) = Z.col(static_cast<Index>(c));
    return X;
}

Matrix representatives(const Matrix& X, const Equivalence& classes) {
    Matrix Z(X.rows(), static_cast<Index>(classes.size()));
    for (std::size_t c = 0; c < classes.size(); ++c) Z.col(static_cast<Index>(c)) = X.col(classes[c][0]);
    return Z;
}

Matrix project_columns(Matrix Z) {
    const double radius = std::sqrt(static_cast<double>(Z.rows()));
    for (Index c = 0; c < Z.cols(); ++c) {
        Z.col(c).array() -= Z.col(c).mean();
        const double n = Z.col(c).norm();
        require(n >= 1e-12, ErrorKind::DegenerateClass, "feature iterate collapsed to zero");
        Z.col(c) *= radius / n;
    }
    return Z;
}

// Largest squared singular value.
double spectral_sq(const Matrix& A) {
    const Matrix G = A.rows() <= A.cols() ? Matrix(A * A.transpose()) : Matrix(A.transpose() * A);
    return Eigen::SelfAdjointEigenSolver<Matrix>(G, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
}

struct Iterate {
    Matrix W, X;
    double loss = std::numeric_limits<double>::infinity();
};

Iterate run_restart(const GufmProblem& p, const NumericOptions& o, Index r) {
    Rng rng(derive_seed({o.seed, static_cast<std::uint64_t>(r)}));
    Matrix W;
    Matrix Z;
    if (r == 0 && o.start) {
        W = o.start->W;
        Z = representatives(o.start->X, p.classes);
    } else {
        W = gaussian_matrix(rng, p.K(), p.d, 1.0 / std::sqrt(static_cast<double>(p.d)));
        Z = project_columns(gaussian_matrix(rng, p.d, static_cast<Index>(p.classes.size())));
    }
    Iterate best;
    Matrix gW, gX;
    for (Index t = 0; t <= o.steps; ++t) {
        const Matrix X = expand(Z, p.classes, p.N());
        const double loss = gufm_loss(W, X, p, &gW, &gX);
        require(std::isfinite(loss), ErrorKind::NonFinite, "gufm loss diverged");
        if (loss < best.loss) best = {W, X, loss};
        if (t == o.steps) break;
        Matrix gZ = Matrix::Zero(Z.rows(), Z.cols());
        for (std::size_t c = 0; c < p.classes.size(); ++c)
            for (Index j : p.classes[c]) gZ.col(static_cast<Index>(c)) += gX.col(j);
        if (o.rule == StepRule::decaying) {
            const double eta = o.step_scale / std::sqrt(static_cast<double>(t + 1));
            W -= eta * gW;
            Z -= eta * gZ;
        } else {
            // Logit-space curvature: 1 for MSE, 1/2 bounds the CE Hessian.
            const double c_fit = p.loss == GufmLoss::ce ? 0.5 : 1.0;
            const double n = static_cast<double>(p.N());
            W -= o.step_scale / (c_fit * spectral_sq(X) / n + p.lambda) * gW;
            const double w2 = spectral_sq(W);
            for (std::size_t c = 0; c < p.classes.size(); ++c) {
                const double lz = c_fit * w2 * static_cast<double>(p.classes[c].size()) / n;
                if (lz > 0.0) Z.col(static_cast<Index>(c)) -= o.step_scale / lz * gZ.col(static_cast<Index>(c));
            }
        }
        Z = project_columns(Z);
    }
    return best;
}

}  // namespace

GufmSolution solve_numeric(const GufmProblem& p, const NumericOptions& o) {
    require(o.restarts >= 1 && o.steps >= 0, ErrorKind::Config, "restarts >= 1 required");
    std::vector<Iterate> results(static_cast<std::size_t>(o.restarts));
    parallel_for(results.size(), o.threads,
                 [&](std::size_t r) { results[r] = run_restart(p, o, static_cast<Index>(r)); });
    std::size_t best = 0;
    for (std::size_t r = 1; r < results.size(); ++r)
        if (results[r].loss < results[best].loss) best = r;
    GufmSolution s;
    s.W = std::move(results[best].W);
    s.X = std::move(results[best].X);
    s.loss = results[best].loss;
    s.certificate = certify(s.W, s.X, p);
    return s;
}

namespace {

// Coordinates of the rows of [W; X^T] in an orthonormal basis of the zero-sum
// hyperplane, plus the residual along 1/sqrt(d).
struct SplitRows {
    Matrix plane;
    Matrix ones;
};

SplitRows split(const Matrix& W, const Matrix& X) {
    const Index d = W.cols();
    Matrix S(W.rows() + X.cols(), d);
    S << W, X.transpose();
    const Matrix F = zero_sum_frame(d, d - 1);
    return {S * F, S * Matrix::Constant(d, 1, 1.0 / std::sqrt(static_cast<double>(d)))};
}

Matrix procrustes(const Matrix& A, const Matrix& B) {
    // argmin_Q ||A - B Q|| over orthogonal Q.
    Eigen::JacobiSVD<Matrix> svd(B.transpose() * A, Eigen::ComputeFullU | Eigen::ComputeFullV);
    return svd.matrixU() * svd.matrixV().transpose();
}

}  // namespace

double aligned_distance(const Matrix& W, const Matrix& X, const Matrix& W_star,
                        const Matrix& X_star) {
    const SplitRows a = split(W, X);
    const SplitRows b = split(W_star, X_star);
    const Matrix Q = procrustes(a.plane, b.plane);
    return std::sqrt((a.plane - b.plane * Q).squaredNorm() + (a.ones - b.ones).squaredNorm());
}

std::pair<Matrix, Matrix> align_to(const Matrix& W, const Matrix& X, const Matrix& W_ref,
                                   const Matrix& X_ref) {
    const Index d = W.cols();
    const SplitRows a = split(W, X);
    const SplitRows b = split(W_ref, X_ref);
    // Rotate `a` onto `b`: plane coordinates a Q with Q = argmin ||b - a Q||.
    const Matrix Q = procrustes(b.plane, a.plane);
    const Matrix F = zero_sum_frame(d, d - 1);
    const Matrix ones_dir = Matrix::Constant(1, d, 1.0 / std::sqrt(static_cast<double>(d)));
    const Matrix S = a.plane * Q * F.transpose() + a.ones * ones_dir;
    return {S.topRows(W.rows()), S.bottomRows(X.cols()).transpose()};
}

std::vector<StabilityRow> stability_probe(const GufmProblem& p, const std::vector<double>& eps,
                                          const StabilityOptions& o) {
    const GufmSolution opt = solve_closed_form(p);
    const Matrix Z_star = representatives(opt.X, p.classes);
    const double base = opt.loss;

    struct Direction {
        Matrix dW, dZ;
    };
    auto draw = [&](std::uint64_t batch) {
        Rng rng(derive_seed({o.seed, batch}));
        std::vector<Direction> out;
        for (Index i = 0; i < o.directions; ++i) {
            Direction dir{gaussian_matrix(rng, p.K(), p.d), gaussian_matrix(rng, p.d, Z_star.cols())};
            const double n = std::sqrt(dir.dW.squaredNorm() + dir.dZ.squaredNorm());
            dir.dW /= n;
            dir.dZ /= n;
            out.push_back(std::move(dir));
        }
        return out;
    };
    const std::vector<Direction> batches[2] = {draw(1), draw(2)};

    auto point = [&](const Direction& dir, double t) {
        Matrix W = opt.W + t * dir.dW;
        Matrix X = expand(project_columns(Z_star + t * dir.dZ), p.classes, p.N());
        return std::make_pair(std::move(W), std::move(X));
    };
    auto gap = [&](const Direction& dir, double t) {
        auto [W, X] = point(dir, t);
        return gufm_loss(W, X, p) - base;
    };
    auto ray_distance = [&](const Direction& dir, double epsilon) {
        if (epsilon <= 0.0) return 0.0;
        double lo = 0.0;
        double hi = 1e-6;
        while (gap(dir, hi) < epsilon && hi < 1e6) {
            lo = hi;
            hi *= 2.0;
        }
        for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
            const double mid = 0.5 * (lo + hi);
            (gap(dir, mid) < epsilon ? lo : hi) = mid;
        }
        auto [W, X] = point(dir, lo);
        return aligned_distance(W, X, opt.W, opt.X);
    };

    std::vector<StabilityRow> rows;
    for (double e : eps) {
        double dist[2] = {0.0, 0.0};
        for (int b = 0; b < 2; ++b)
            for (const auto& dir : batches[b]) dist[b] = std::max(dist[b], ray_distance(dir, e));
        rows.push_back({e, std::max(dist[0], dist[1]), std::abs(dist[0] - dist[1])});
    }
    return rows;
}

}  // namespace collapse_lab
