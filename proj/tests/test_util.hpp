#pragma once

#include <cstdint>
#include <vector>

#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct::testing {

/// Uniform values in [lo, hi), deterministic per (seed, stream).
template <Scalar T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0,
                        std::uint64_t stream = 0) {
  Tensor<T> t(std::move(shape));
  CounterRng rng(seed, stream);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <Scalar T = double>
Tensor<T> make(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace cct::testing
