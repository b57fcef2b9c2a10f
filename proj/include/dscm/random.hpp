#pragma once

#include <cstdint>
#include <random>

namespace dscm {

/// Seedable 64-bit generator with deterministic stream splitting: split(k)
/// derives an independent child from (seed, k) alone, so parallel work can be
/// reproduced by seed arithmetic regardless of scheduling.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }
  Rng split(std::uint64_t stream) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1).
  double uniform();
  /// Uniform on the open interval (0, 1).
  double uniform_open();
  double normal();
  std::size_t index(std::size_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace dscm
