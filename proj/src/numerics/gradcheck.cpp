#include "collapse_lab/numerics/gradcheck.hpp"

#include <cmath>

namespace collapse_lab {

GradCheckResult finite_diff_check(const DifferentiableObjective& f,
                                  const std::vector<Matrix>& params, double step) {
    std::vector<Matrix> analytic;
    f(params, &analytic);

    GradCheckResult result;
    std::vector<Matrix> probe = params;
    for (std::size_t t = 0; t < probe.size(); ++t) {
        for (Index e = 0; e < probe[t].size(); ++e) {
            double& coord = probe[t].data()[e];
            const double base = coord;
            auto eval_at = [&](double offset) {
                coord = base + offset;
                return f(probe, nullptr);
            };
            const double f_p1 = eval_at(step);
            const double f_m1 = eval_at(-step);
            const double f_p2 = eval_at(2.0 * step);
            const double f_m2 = eval_at(-2.0 * step);
            coord = base;

            const double g_fd = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * step);
            const double g_ad = analytic[t].data()[e];
            const double err = std::abs(g_ad - g_fd) / (std::abs(g_ad) + std::abs(g_fd) + 1e-12);
            ++result.coordinates;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_tensor = t;
                result.worst_entry = e;
            }
        }
    }
    return result;
}

}  // namespace collapse_lab
