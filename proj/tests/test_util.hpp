#pragma once

#include <cmath>
#include <vector>

#include "dsiv/rng.hpp"
#include "dsiv/tensor.hpp"

namespace dsiv::testing {

inline Tensor random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::param(std::move(shape), std::move(v));
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

/// Values bounded away from zero, for kinked ops like relu.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return Tensor::param(std::move(shape), std::move(v));
}

/// Fixed random projection to a scalar so every output element carries a
/// distinct gradient weight.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(y * random_tensor(y.shape(), rng));
}

}  // namespace dsiv::testing
