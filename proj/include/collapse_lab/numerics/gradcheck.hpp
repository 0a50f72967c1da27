#pragma once

#include <functional>
#include <vector>

#include "collapse_lab/numerics/matrix.hpp"

namespace collapse_lab {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_tensor = 0;
    Index worst_entry = 0;
    std::size_t coordinates = 0;
};

/// Objective over a list of parameter tensors, returning the value and (when
/// `grads` is non-null) the analytic gradient of every tensor.
using DifferentiableObjective =
    std::function<double(const std::vector<Matrix>& params, std::vector<Matrix>* grads)>;

/// Compares analytic gradients against central differences of step `step`
/// (fourth-order stencil f(+-h), f(+-2h)). Per coordinate the error is
/// |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12); the maximum is returned.
GradCheckResult finite_diff_check(const DifferentiableObjective& f,
                                  const std::vector<Matrix>& params, double step);

}  // namespace collapse_lab
