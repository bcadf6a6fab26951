#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "mats/types.hpp"

namespace mats {

// Streaming FNV-1a 64 over raw bytes. Used for artifact digests, freeze
// checks, and content-addressed run directories. Not cryptographic; collision
// resistance is irrelevant here, stability across platforms is what matters.
class Digest {
 public:
  Digest& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ULL;
    }
    return *this;
  }

  Digest& str(std::string_view s) { return bytes(s.data(), s.size()); }

  Digest& u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return bytes(b, 8);
  }

  Digest& f64(double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    return u64(u);
  }

  Digest& matrix(const Matrix& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r) f64(m(r, c));
    return *this;
  }

  std::uint64_t value() const { return h_; }

  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[15 - i] = k[(h_ >> (4 * i)) & 0xF];
    return s;
  }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

inline std::string digest_hex(std::string_view s) {
  return Digest().str(s).hex();
}

}  // namespace mats
