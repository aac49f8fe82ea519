#include "sdclip/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sdclip/ops.hpp"

namespace sdclip {

GradCheckResult finite_difference_check(const std::function<Tensor<double>()>& f,
                                        std::vector<Tensor<double>> leaves, double h,
                                        bool honor_stop_gradient) {
  using testing::StopGradientFreeze;
  // Restores the freeze mode even when f throws.
  struct FreezeGuard {
    ~FreezeGuard() { testing::set_stop_gradient_freeze(StopGradientFreeze::kOff); }
  } guard;
  auto eval = [&]() {
    if (honor_stop_gradient) testing::set_stop_gradient_freeze(StopGradientFreeze::kReplay);
    return f().item();
  };
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    if (honor_stop_gradient) testing::set_stop_gradient_freeze(StopGradientFreeze::kRecord);
    Tensor<double> loss = f();
    if (loss.requires_grad()) tape.backward(loss);
  }

  GradCheckResult result;
  NoGradScope<double> no_grad;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    Tensor<double>& leaf = leaves[l];
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double offset) {
        values[i] = saved + offset;
        return eval();
      };
      const double numeric =
          (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
      values[i] = saved;
      const double a = analytic[i];
      if (a != 0.0) result.analytic_all_zero = false;
      if (a == 0.0) {
        result.max_numeric_where_analytic_zero =
            std::max(result.max_numeric_where_analytic_zero, std::abs(numeric));
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckDenominatorFloor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error || (l == 0 && i == 0)) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_leaf = l;
        result.worst_index = i;
        result.analytic_at_worst = a;
        result.numeric_at_worst = numeric;
      }
    }
  }
  return result;
}

GradCheckResult finite_difference_check(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x, double h,
    bool honor_stop_gradient) {
  return finite_difference_check([&f, &x] { return f(x); }, std::vector<Tensor<double>>{x}, h,
                                 honor_stop_gradient);
}

}  // namespace sdclip
