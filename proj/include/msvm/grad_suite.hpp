#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace msvm {

struct GradSuiteEntry {
  std::string group;  // "op", "block" or "model"
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  bool pass() const { return max_rel_error <= tolerance; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  std::size_t op_seeds = 20;
  std::size_t block_seeds = 3;
  double op_tolerance = 1e-4;
  double block_tolerance = 1e-4;
  double model_tolerance = 1e-3;
};

/// Double-precision central-difference checks of every differentiable op,
/// every composite block and the micro model. `on_entry` is called as each
/// entry finishes.
std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opts,
                                           const std::function<void(const GradSuiteEntry&)>& on_entry = {});

}  // namespace msvm
