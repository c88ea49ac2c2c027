#include "robtok/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace robtok {

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step,
                           double floor) {
  GradCheckResult result;
  Tensor leaf = point.clone(true);
  backward(fn(leaf));
  result.analytic = leaf.grad();

  result.numeric.resize(point.size());
  Tensor probe = point.clone(false);
  for (Index i = 0; i < point.size(); ++i) {
    const double x0 = point.value()[i];
    probe.mutable_value()[i] = x0 + step;
    const double up = fn(probe).item();
    probe.mutable_value()[i] = x0 - step;
    const double down = fn(probe).item();
    probe.mutable_value()[i] = x0;
    result.numeric[i] = (up - down) / (2.0 * step);
  }

  for (Index i = 0; i < point.size(); ++i) {
    const double a = result.analytic[i], n = result.numeric[i];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (err > result.max_relative_error || result.worst_index < 0) {
      result.max_relative_error = err;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace robtok
