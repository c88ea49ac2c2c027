#pragma once

#include "robtok/tensor.hpp"

#include <functional>

namespace robtok {

struct GradCheckResult {
  double max_relative_error = 0.0;
  Index worst_index = -1;
  Vector analytic;
  Vector numeric;
};

/// Compare backward() against central finite differences at `point`.
///
/// The per-coordinate error is |analytic - numeric| / max(|analytic|, |numeric|, floor),
/// which reads as a relative error wherever the gradient is not vanishingly small.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double step = 1e-5,
                           double floor = 1e-6);

}  // namespace robtok
