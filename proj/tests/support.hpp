#pragma once

// Shared helpers for the unit tests: seeded random tensors and scalar
// reductions used as test oracles.

#include "msvm/gradcheck.hpp"
#include "msvm/ops.hpp"
#include "msvm/rng.hpp"

namespace msvm::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> d(numel(shape));
  for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(d));
}

// Scalar probe: sum(out * weights) with fixed random weights, so every
// output element contributes a distinct gradient.
template <typename T>
Tensor<T> probe(const Tensor<T>& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(out, random_tensor<T>(out.shape(), rng)));
}

// Every trainable entry of a store, in registration order.
template <typename T>
std::vector<Parameter<T>*> trainable(ParamStore<T>& store) {
  std::vector<Parameter<T>*> out;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store[i].trainable) out.push_back(&store[i]);
  return out;
}

// Central-difference check over every trainable tensor in `store`, at most
// `coords` sampled entries per tensor.
inline double store_gradcheck(ParamStore<double>& store, const std::function<Tensor<double>()>& loss,
                              std::uint64_t seed, std::size_t coords = 24) {
  auto params = trainable(store);
  GradCheckOptions opts;
  opts.seed = seed;
  opts.max_coords = coords;
  return check_param_grads(loss, params, opts).max_rel_error;
}

}  // namespace msvm::testing
