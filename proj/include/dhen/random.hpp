#pragma once

#include <cmath>
#include <random>

#include "dhen/tensor.hpp"

namespace dhen {

using Rng = std::mt19937_64;

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace dhen
