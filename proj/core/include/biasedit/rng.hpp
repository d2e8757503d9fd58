#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace biasedit {

// Portable generator: mt19937_64 is fully specified by the standard, and the
// derived draws below avoid the implementation-defined std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                          // [0, 1)
  double normal();                           // N(0, 1), Box-Muller
  std::size_t below(std::size_t n);          // uniform in [0, n)
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream for a named sub-component.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace biasedit
