#pragma once

#include <functional>
#include <vector>

#include "sdclip/tensor.hpp"

namespace sdclip {

// Relative-error denominator floor. Double-precision differences resolve
// about 1e-12 absolute, so gradients below 1e-6 are compared on that scale.
inline constexpr double kGradCheckDenominatorFloor = 1e-6;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  // Largest |numeric| seen where the analytic gradient is exactly zero.
  double max_numeric_where_analytic_zero = 0.0;
  bool analytic_all_zero = true;
};

/// Compares tape gradients against fourth-order central differences
/// (−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h, coordinate by coordinate,
/// for every leaf.
/// Relative error uses max(|analytic|, |numeric|, kGradCheckDenominatorFloor)
/// as denominator.
/// `f` must rebuild its graph from the leaves on every call.
///
/// With `honor_stop_gradient`, stop_gradient outputs are recorded during the
/// analytic pass and held fixed while perturbing, so the numeric side
/// differentiates the same function the tape does. Without it, the numeric
/// side also sees change flowing through stopped paths.
GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f,
                                        std::vector<Tensor<double>> leaves, double h = 1e-4,
                                        bool honor_stop_gradient = true);

GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x,
    double h = 1e-4, bool honor_stop_gradient = true);

}  // namespace sdclip
