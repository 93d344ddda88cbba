#pragma once

#include <cstdint>
#include <vector>

namespace saelab {

/// Counter-based generator: draw n is splitmix64(seed + n * golden_gamma).
/// The whole sequence is a pure function of the seed, so datasets and
/// initializations are identical across compilers and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform in (0, 1].
  double uniform_open_low() { return 1.0 - uniform(); }
  /// Standard normal via Box-Muller (no cached second value).
  double normal();
  double exponential(double rate = 1.0);
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n); n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream; the parent is not advanced.
  Rng fork(std::uint64_t stream) const;

  std::vector<std::size_t> permutation(std::size_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace saelab
