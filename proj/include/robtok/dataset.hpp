#pragma once

#include "robtok/tensor.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace robtok {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Procedural shapes: class k draws shape (k % 4) in hue band (k / 4).
struct SyntheticDatasetSpec {
  Index n_images = 2400;
  int image_size = 32;
  int n_classes = 8;
  std::uint64_t seed = 7;
  double train_fraction = 2.0 / 3.0;
  double probe_fraction = 1.0 / 6.0;  // eval gets the remainder
  double pixel_noise = 0.01;          // std of i.i.d. Gaussian noise added per pixel
  double background_gradient = 0.25;  // amplitude of the random linear background ramp
  /// Amplitude of a faint stripe texture inside the shape whose orientation
  /// depends on the class.
  double texture_amplitude = 0.06;
  double texture_period = 4.0;  // pixels

  static constexpr int kShapes = 4;
  static constexpr int kHueBands = 4;

  void validate() const;
};

struct LabeledBatch {
  Tensor images;  // [N, 3, H, W], values on the 8-bit grid in [0, 1]
  std::vector<int> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  LabeledBatch range(Index begin, Index end) const;
  LabeledBatch select(std::span<const Index> indices) const;
};

struct SyntheticDataset {
  LabeledBatch train;
  LabeledBatch probe;
  LabeledBatch eval;
};

/// Render a single image; stateless given (spec.seed, index).
Vector render_image(const SyntheticDatasetSpec& spec, Index index, int label);

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec);

}  // namespace robtok
