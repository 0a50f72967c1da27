#include "collapse_lab/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "collapse_lab/error.hpp"

namespace collapse_lab {

ClassStats class_statistics(const Matrix& features, const Labels& labels, Index classes) {
    const Index d = features.rows();
    const Index N = features.cols();
    require(static_cast<Index>(labels.size()) == N, ErrorKind::ShapeMismatch,
            "one label per feature column required");
    require(classes >= 1 && N >= 1, ErrorKind::ShapeMismatch, "empty dataset");

    std::vector<Index> counts(static_cast<std::size_t>(classes), 0);
    ClassStats s;
    s.means = Matrix::Zero(d, classes);
    for (Index j = 0; j < N; ++j) {
        const int k = labels[static_cast<std::size_t>(j)];
        require(k >= 0 && k < classes, ErrorKind::ShapeMismatch, "label out of range");
        s.means.col(k) += features.col(j);
        ++counts[static_cast<std::size_t>(k)];
    }
    require(std::all_of(counts.begin(), counts.end(), [&](Index c) { return c == counts[0]; }),
            ErrorKind::Unbalanced, "class counts differ");
    s.means /= static_cast<double>(counts[0]);
    s.global_mean = s.means.rowwise().mean();

    Matrix centered(d, N);
    for (Index j = 0; j < N; ++j) {
        centered.col(j) = features.col(j) - s.means.col(labels[static_cast<std::size_t>(j)]);
    }
    s.sigma_w = centered * centered.transpose() / static_cast<double>(N);
    const Matrix between = s.means.colwise() - s.global_mean.col(0);
    s.sigma_b = between * between.transpose() / static_cast<double>(classes);
    return s;
}

double nc1(const ClassStats& stats) {
    const double tb = stats.sigma_b.trace();
    require(tb > kDegeneracyThreshold, ErrorKind::DegenerateBetweenClass,
            "between-class variability vanishes");
    return stats.sigma_w.trace() / tb;
}

Matrix etf_gram(Index K, EtfForm form) {
    const double off = form == EtfForm::centered ? 1.0 / static_cast<double>(K) : 1.0;
    return Matrix::Identity(K, K) - Matrix::Constant(K, K, off);
}

double gram_distance(const Matrix& W, const Matrix& reference) {
    const Matrix G = W * W.transpose();
    const double gnorm = G.norm();
    require(gnorm > kDegeneracyThreshold, ErrorKind::ZeroGram, "W W^T vanishes");
    const double rr = reference.squaredNorm();
    const double c = rr > 0.0 ? std::max(0.0, G.cwiseProduct(reference).sum() / rr) : 0.0;
    return (G - c * reference).norm() / gnorm;
}

double nc2a(const Matrix& W, EtfForm form) { return gram_distance(W, etf_gram(W.rows(), form)); }

double nc2b(const Matrix& W) { return gram_distance(W, Matrix::Identity(W.rows(), W.rows())); }

double nc3(const Matrix& W, const Matrix& features, const Labels& labels) {
    const Index N = features.cols();
    require(static_cast<Index>(labels.size()) == N && W.cols() == features.rows(),
            ErrorKind::ShapeMismatch, "nc3 shapes");
    double total = 0.0;
    for (Index j = 0; j < N; ++j) {
        const int k = labels[static_cast<std::size_t>(j)];
        require(k >= 0 && k < W.rows(), ErrorKind::ShapeMismatch, "label out of range");
        const double xn = features.col(j).norm();
        const double wn = W.row(k).norm();
        require(xn > 0.0 && wn > 0.0, ErrorKind::ZeroVector, "zero feature or classifier row");
        total += W.row(k).dot(features.col(j).transpose()) / (xn * wn);
    }
    return 1.0 - total / static_cast<double>(N);
}

NCReport report(const Matrix& W, const Matrix& features, const Labels& labels, LossKind loss,
                bool last_bias, EtfForm form) {
    NCReport r;
    r.nc1 = nc1(class_statistics(features, labels, W.rows()));
    r.nc2a = nc2a(W, form);
    r.nc2b = nc2b(W);
    r.nc3 = nc3(W, features, labels);
    r.which_nc2 = (loss == LossKind::mse && !last_bias) ? Nc2Kind::b : Nc2Kind::a;
    return r;
}

std::string format_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string report_csv_header() { return "depth,seed,loss,nc1,nc2a,nc2b,nc3"; }

std::string report_csv_row(Index depth, std::uint64_t seed, double loss, const NCReport& r) {
    return std::to_string(depth) + "," + std::to_string(seed) + "," + format_real(loss) + "," +
           format_real(r.nc1) + "," + format_real(r.nc2a) + "," + format_real(r.nc2b) + "," +
           format_real(r.nc3);
}

}  // namespace collapse_lab
