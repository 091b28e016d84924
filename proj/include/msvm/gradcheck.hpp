#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "msvm/tape.hpp"

namespace msvm {

struct GradCheckOptions {
  double step = 1e-6;
  // Coordinates checked per tensor; 0 checks every coordinate, otherwise a
  // seeded random sample of this size.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  // max |g_ad - g_fd| / max(1, |g_fd|) over all checked coordinates
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst;
};

class GradCheckError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Central-difference check of reverse-mode gradients for every trainable
/// parameter in `params`. `loss` must return a scalar and read the
/// parameters through use().
GradCheckReport check_param_grads(const std::function<Tensor<double>()>& loss,
                                  std::span<Parameter<double>* const> params, const GradCheckOptions& opts = {});

/// Same check for a function of plain input tensors.
double finite_diff_grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                              const std::vector<Tensor<double>>& inputs, double step = 1e-6);

}  // namespace msvm
