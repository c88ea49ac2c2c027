#pragma once

#include "robtok/tensor.hpp"

#include <vector>

namespace robtok {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
};

/// Moments shaped like the parameters they track, plus the step counter.
struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  long step = 0;

  static AdamState zeros_like(const std::vector<Tensor>& params);
};

/// One bias-corrected Adam update, applied in place to leaf tensors from their
/// accumulated gradients. Parameters without a gradient are left untouched.
void adam_update(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

}  // namespace robtok
