#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>

namespace bridgeprune {

/// Seeded pseudorandom source. Every draw is built from raw mt19937_64
/// output, so sequences are identical across standard libraries (the
/// std:: distributions are implementation-defined and are not used).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Unbiased integer in [0, n).
  std::size_t below(std::size_t n);

  /// Standard normal via Box-Muller; consumes two uniforms per call.
  double normal();

  std::string state() const;
  void set_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace bridgeprune
