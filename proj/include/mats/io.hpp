#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "mats/error.hpp"
#include "mats/types.hpp"

namespace mats {

using Json = nlohmann::ordered_json;

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, std::string_view bytes);

Json load_json_file(const std::string& path);
void save_json_file(const std::string& path, const Json& j);

// Checks the leading magic/version fields every JSON artifact carries.
void require_json_magic(const Json& j, const std::string& magic,
                        const std::string& path);

std::vector<double> to_double_vec(const Vector& v);
Vector from_double_vec(const std::vector<double>& v);
Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

// Little-endian binary buffer writer. Matrices serialize row-major.
class BinWriter {
 public:
  void raw(const void* p, std::size_t n);
  void magic(const char m[9]);  // 8 chars, no terminator written
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void str(std::string_view s);  // u64 length + bytes
  void matrix(const Matrix& m);  // u64 rows + u64 cols + row-major f64
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

// Matching reader; throws IoError on truncation or magic mismatch.
class BinReader {
 public:
  explicit BinReader(std::string_view buf) : buf_(buf) {}
  void raw(void* p, std::size_t n);
  void magic(const char m[9]);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string str();
  Matrix matrix();
  bool at_end() const { return pos_ == buf_.size(); }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace mats
