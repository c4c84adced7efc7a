#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace daptkit {

/// Seedable generator with platform-independent output.
///
/// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
/// C++ standard. The standard distributions are not portable, so all derived
/// draws (uniform reals, bounded integers, normals) are implemented here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by rejection sampling; n must be > 0.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Standard normal via the Box-Muller transform.
  double normal();

  /// Normal(0, stddev) redrawn until it falls within bound * stddev.
  double truncated_normal(double stddev, double bound = 2.0);

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a base seed with a stream index (splitmix64 finalizer) so that
/// per-segment and per-step generators are decorrelated.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace daptkit
