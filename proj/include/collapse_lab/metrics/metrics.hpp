#pragma once

#include <string>
#include <vector>

#include "collapse_lab/arch/params.hpp"
#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

using Labels = std::vector<int>;

inline constexpr double kDegeneracyThreshold = 1e-14;

struct ClassStats {
    Matrix means;        // d x K, column k is mu_k (this is M)
    Matrix global_mean;  // d x 1
    Matrix sigma_w;      // d x d
    Matrix sigma_b;      // d x d
};

/// Balanced-class moments; throws Unbalanced if class counts differ.
[[nodiscard]] ClassStats class_statistics(const Matrix& features, const Labels& labels,
                                          Index classes);

/// tr(Sigma_W) / tr(Sigma_B).
[[nodiscard]] double nc1(const ClassStats& stats);

/// Reference frame for NC2A. `centered` is I - 11^T/K (simplex ETF Gram);
/// `literal` is I - 11^T.
enum class EtfForm { centered, literal };

[[nodiscard]] Matrix etf_gram(Index K, EtfForm form);

/// min_{c >= 0} ||WW^T - c R||_F / ||WW^T||_F for a reference R.
[[nodiscard]] double gram_distance(const Matrix& W, const Matrix& reference);
[[nodiscard]] double nc2a(const Matrix& W, EtfForm form = EtfForm::centered);
[[nodiscard]] double nc2b(const Matrix& W);

/// 1 - mean cosine between each sample and its class row of W.
[[nodiscard]] double nc3(const Matrix& W, const Matrix& features, const Labels& labels);

enum class Nc2Kind { a, b };

struct NCReport {
    double nc1 = 0.0;
    double nc2a = 0.0;
    double nc2b = 0.0;
    double nc3 = 0.0;
    Nc2Kind which_nc2 = Nc2Kind::a;

    [[nodiscard]] double nc2() const { return which_nc2 == Nc2Kind::a ? nc2a : nc2b; }
};

/// All four metrics; NC2B is the selected NC2 only for bias-free MSE.
[[nodiscard]] NCReport report(const Matrix& W, const Matrix& features, const Labels& labels,
                              LossKind loss, bool last_bias, EtfForm form = EtfForm::centered);

/// Decimal with 17 significant digits.
[[nodiscard]] std::string format_real(double x);
[[nodiscard]] std::string report_csv_header();
[[nodiscard]] std::string report_csv_row(Index depth, std::uint64_t seed, double loss,
                                         const NCReport& r);

}  // namespace collapse_lab
