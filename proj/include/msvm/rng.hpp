#pragma once

#include <cstdint>
#include <vector>

namespace msvm {

/// Counter-based generator: the n-th draw is a pure function of (seed, n),
/// so streams are reproducible on any platform. Distributions are derived
/// here rather than through <random>, whose distributions are
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  // Normal truncated to [-2, 2] standard deviations, then scaled.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  // Independent generator for a named sub-stream.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  template <typename V>
  void shuffle(std::vector<V>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace msvm
