#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace implantformer {

// Deterministic random source. Wraps std::mt19937_64 (whose output sequence
// is fixed by the standard) but converts to floats/ints by hand, because the
// standard *distributions* are implementation-defined and would break
// byte-for-byte reproducibility across toolchains.
class Rng {
public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of randomness.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], both inclusive.
  int uniform_int(int lo, int hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; draws two uniforms per call and discards the second variate,
  // which keeps the stream position independent of call parity.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Normal(0, std) resampled until |x| <= cut * std.
  double trunc_normal(double stddev, double cut = 2.0) {
    for (;;) {
      const double x = normal() * stddev;
      if (std::fabs(x) <= cut * stddev) return x;
    }
  }

  // Derives an independent stream seed from (a, b); splitmix64 finalizer.
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

private:
  std::mt19937_64 engine_;
};

}  // namespace implantformer
