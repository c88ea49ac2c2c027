#pragma once

#include "robtok/tensor.hpp"

#include <bit>
#include <cstdint>
#include <random>

namespace robtok::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Vector v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

/// Images on the 8-bit grid, as the dataset produces them.
inline Tensor random_images(Index n, Index size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(0, 255);
  Vector v(n * 3 * size * size);
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng) / 255.0;
  return Tensor({n, 3, size, size}, std::move(v));
}

inline bool bit_equal(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) return false;
  for (Index i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

}  // namespace robtok::testing
