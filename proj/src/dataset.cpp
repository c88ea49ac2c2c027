#include "robtok/dataset.hpp"

#include "robtok/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace robtok {

void SyntheticDatasetSpec::validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2, got " + std::to_string(n_classes));
  if (n_classes > kShapes * kHueBands) {
    throw ConfigError("n_classes " + std::to_string(n_classes) + " exceeds the " +
                      std::to_string(kShapes * kHueBands) + " available shape/hue combinations");
  }
  if (image_size < 4) throw ConfigError("image_size too small: " + std::to_string(image_size));
  if (!(texture_period > 0.0)) throw ConfigError("texture_period must be positive");
  if (!(pixel_noise >= 0.0) || !(background_gradient >= 0.0) || !(texture_amplitude >= 0.0)) throw ConfigError("noise settings must be non-negative");
  if (n_images < 0) throw ConfigError("n_images must be non-negative");
  if (!(train_fraction >= 0.0) || !(probe_fraction >= 0.0) || train_fraction + probe_fraction > 1.0 + 1e-12) {
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  }
}

LabeledBatch LabeledBatch::range(Index begin, Index end) const {
  if (begin < 0 || end < begin || end > size()) throw ShapeError("LabeledBatch::range out of bounds");
  LabeledBatch out;
  out.images = slice(images, 0, begin, end).detach();
  out.labels.assign(labels.begin() + begin, labels.begin() + end);
  return out;
}

LabeledBatch LabeledBatch::select(std::span<const Index> indices) const {
  Shape shape = images.shape();
  const Index per = shape[1] * shape[2] * shape[3];
  shape[0] = static_cast<Index>(indices.size());
  Vector values(shape[0] * per);
  LabeledBatch out;
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Index src = indices[i];
    if (src < 0 || src >= size()) throw ShapeError("LabeledBatch::select index out of range");
    values.segment(static_cast<Index>(i) * per, per) = images.value().segment(src * per, per);
    out.labels.push_back(labels[src]);
  }
  out.images = Tensor(shape, std::move(values));
  return out;
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (double& ch : rgb) ch += m;
  return rgb;
}

// (u, v) are shape-local coordinates in units of the shape radius.
bool inside(int shape, double u, double v) {
  switch (shape) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1:
      return std::max(std::abs(u), std::abs(v)) <= 0.8;
    case 2: {
      // equilateral triangle with vertices on the unit circle
      return v >= -0.5 && v <= 1.0 - std::numbers::sqrt3 * std::abs(u);
    }
    default:
      return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);
  }
}

// splitmix64 finalizer, so neighbouring indices get unrelated streams
std::uint64_t image_seed(std::uint64_t seed, Index index) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(index) + 1;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace

Vector render_image(const SyntheticDatasetSpec& spec, Index index, int label) {
  if (label < 0 || label >= spec.n_classes) throw ConfigError("label out of range: " + std::to_string(label));
  std::mt19937_64 rng(image_seed(spec.seed, index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const int size = spec.image_size;
  const int shape = label % SyntheticDatasetSpec::kShapes;
  const int band = label / SyntheticDatasetSpec::kShapes;
  const int bands = (spec.n_classes + SyntheticDatasetSpec::kShapes - 1) / SyntheticDatasetSpec::kShapes;

  const double hue = (band + 0.5 + 0.6 * (unit(rng) - 0.5)) / bands;
  const auto color = hsv_to_rgb(hue, 0.6 + 0.4 * unit(rng), 0.65 + 0.35 * unit(rng));
  const double background = 0.15 + 0.7 * unit(rng);
  const double cx = size * (0.35 + 0.3 * unit(rng));
  const double cy = size * (0.35 + 0.3 * unit(rng));
  const double radius = size * (0.2 + 0.12 * unit(rng));
  const double theta = 2.0 * std::numbers::pi * unit(rng);
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double stripe_angle = std::numbers::pi * (label + 0.5 * (unit(rng) - 0.5)) / spec.n_classes;
  const double stripe_phase = 2.0 * std::numbers::pi * unit(rng);
  const double stripe_u = 2.0 * std::numbers::pi * std::cos(stripe_angle) / spec.texture_period;
  const double stripe_v = 2.0 * std::numbers::pi * std::sin(stripe_angle) / spec.texture_period;
  const double ramp_angle = 2.0 * std::numbers::pi * unit(rng);
  const double ramp_x = spec.background_gradient * std::cos(ramp_angle) / size;
  const double ramp_y = spec.background_gradient * std::sin(ramp_angle) / size;

  const Index plane = static_cast<Index>(size) * size;
  Vector img(3 * plane);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx - cx;
          const double py = y + 0.25 + 0.5 * sy - cy;
          const double u = (cs * px + sn * py) / radius;
          const double v = (-sn * px + cs * py) / radius;
          hits += inside(shape, u, v) ? 1 : 0;
        }
      }
      const double coverage = hits / 4.0;
      const double bg = background + ramp_x * (x - 0.5 * size) + ramp_y * (y - 0.5 * size);
      const double stripe = spec.texture_amplitude * std::sin(stripe_u * x + stripe_v * y + stripe_phase);
      for (int c = 0; c < 3; ++c) {
        double p = bg * (1.0 - coverage) + (color[c] + stripe) * coverage + spec.pixel_noise * noise(rng);
        p = std::clamp(p, 0.0, 1.0);
        img[c * plane + static_cast<Index>(y) * size + x] = std::floor(p * 255.0 + 0.5) / 255.0;
      }
    }
  }
  return img;
}

SyntheticDataset generate_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  const Index n = spec.n_images;
  const Index per = 3 * static_cast<Index>(spec.image_size) * spec.image_size;
  Vector all(n * per);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(i % spec.n_classes);
    all.segment(i * per, per) = render_image(spec, i, labels[static_cast<std::size_t>(i)]);
  }
  LabeledBatch whole{Tensor({n, 3, spec.image_size, spec.image_size}, std::move(all)), std::move(labels)};

  // Contiguous ranges that are multiples of K keep every split balanced.
  const Index k = spec.n_classes;
  auto rounded = [&](double fraction) {
    return std::min(n, static_cast<Index>(std::llround(fraction * static_cast<double>(n) / static_cast<double>(k))) * k);
  };
  const Index n_train = rounded(spec.train_fraction);
  const Index n_probe = std::min(n - n_train, rounded(spec.probe_fraction));
  SyntheticDataset ds;
  ds.train = whole.range(0, n_train);
  ds.probe = whole.range(n_train, n_train + n_probe);
  ds.eval = whole.range(n_train + n_probe, n);
  return ds;
}

}  // namespace robtok
