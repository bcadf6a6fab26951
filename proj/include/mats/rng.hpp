#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace mats {

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_bytes(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a 64
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

// Counter-based stream: the draw at a given (seed, counter) is a pure function
// of both, so streams are reproducible and cheap to fork. Forking by label
// derives a new seed; the child starts at counter 0 and is statistically
// independent of the parent.
class RngStream {
 public:
  RngStream() = default;
  explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return detail::mix64(seed_ + 0x9E3779B97F4A7C15ULL * counter_);
  }

  // Uniform on [0, 1) with 53 random bits.
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double next_gaussian() {
    double u1 = 1.0 - next_uniform();  // (0, 1]
    double u2 = next_uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform integer in [0, n), n > 0. Rejection-free modulo is fine here:
  // n is tiny relative to 2^64 in every call site.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  RngStream fork(std::string_view label) const {
    std::uint64_t s = detail::mix64(seed_ ^ 0xA24BAED4963EE407ULL);
    return RngStream(detail::mix64(s ^ detail::hash_bytes(label)));
  }

  RngStream fork_index(std::uint64_t i) const {
    std::uint64_t s = detail::mix64(seed_ ^ 0x9FB21C651E98DF25ULL);
    return RngStream(detail::mix64(s + 0xD1B54A32D192ED03ULL * (i + 1)));
  }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace mats
