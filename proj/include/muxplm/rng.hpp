#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace muxplm {

// Deterministic random stream. Wraps mt19937_64 and derives floating-point
// draws from raw 64-bit words so results do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  // Full engine state (including the cached normal) as text.
  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer applied to (base, stream); used to split one seed into
// independent per-purpose streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace muxplm
