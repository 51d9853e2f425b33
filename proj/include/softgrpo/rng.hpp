#pragma once

// Counter-based random streams.
//
// A stream is identified by a 64-bit key derived from a master seed and a
// path of integer stream ids. Draw n of a stream is
//   mix64(key + (n + 1) * 0x9E3779B97F4A7C15)
// where mix64 is the SplitMix64 finalizer. Since every draw is a pure
// function of (key, counter), two streams never interact and a stream
// replays bitwise no matter which thread consumes it.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>

namespace softgrpo {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class RngStream {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit RngStream(std::uint64_t master_seed) : key_(mix64(master_seed ^ 0x5347'5250'4F2D'4C42ULL)) {}

  // Child stream for the id path; independent of how many draws the parent made.
  RngStream derive(std::initializer_list<std::uint64_t> ids) const {
    std::uint64_t k = key_;
    for (std::uint64_t id : ids) k = mix64(k ^ mix64(id + kGamma));
    return RngStream(k, Tag{});
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGamma); }

  // Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

  // Standard normal via Box-Muller; uses two uniforms per draw.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // log of a Gamma(shape, 1) variate (Marsaglia-Tsang). Kept in log space so
  // that small shapes do not underflow to zero.
  double log_gamma_variate(double shape) {
    if (shape < 1.0) {
      // G(a) = G(a + 1) * U^(1/a)
      const double lu = std::log(uniform());
      return log_gamma_variate(shape + 1.0) + lu / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return std::log(d * v);
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

 private:
  struct Tag {};
  RngStream(std::uint64_t key, Tag) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace softgrpo
