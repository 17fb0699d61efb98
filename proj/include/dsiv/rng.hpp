#pragma once

// Counter-based random numbers.
//
// The engine is "SplitMix64 in counter mode": the k-th output of a stream with
// key K is mix64(K + (k + 1) * 0x9E3779B97F4A7C15), where mix64 is the
// SplitMix64 finalizer. A stream is fully described by (key, counter), so any
// substream can be re-derived from a master seed and a list of ids without
// touching other streams. That is what makes per-unit generation order- and
// worker-independent.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace dsiv {

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ (mix64(b) + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2)));
}

/// FNV-1a, used to turn substream names ("data", "init", ...) into ids.
inline constexpr std::uint64_t name_id(std::string_view name) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : key_(mix64(seed)) {}

  /// Independent child stream; does not advance this stream.
  Rng substream(std::uint64_t id) const noexcept { return Rng(Raw{}, hash_combine(key_, id)); }
  Rng substream(std::string_view name) const noexcept { return substream(name_id(name)); }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Standard normal by Box-Muller; consumes exactly two draws.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) noexcept { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  struct Raw {};
  Rng(Raw, std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace dsiv
