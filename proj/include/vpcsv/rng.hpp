#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vpcsv {

/// Seeded generator. Distributions are computed from raw 64-bit draws so the
/// streams do not depend on the standard library's distribution code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Seed for an independent sub-stream, e.g. derive(seed, "dropout", step).
  static std::uint64_t derive(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace vpcsv
