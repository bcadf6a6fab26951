#include "mats/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace mats {

std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing input artifact: " + path);
  std::string out((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed: " + path);
  return out;
}

void write_file_bytes(const std::string& path, std::string_view bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

Json load_json_file(const std::string& path) {
  const std::string text = read_file_bytes(path);
  Json j = Json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw IoError("malformed JSON artifact: " + path);
  return j;
}

void save_json_file(const std::string& path, const Json& j) {
  write_file_bytes(path, j.dump(2) + "\n");
}

void require_json_magic(const Json& j, const std::string& magic,
                        const std::string& path) {
  if (!j.is_object() || !j.contains("magic") || !j["magic"].is_string() ||
      j["magic"].get<std::string>() != magic)
    throw IoError("artifact " + path + " lacks magic '" + magic + "'");
  if (!j.contains("version") || !j["version"].is_number_integer())
    throw IoError("artifact " + path + " lacks a version field");
}

std::vector<double> to_double_vec(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Vector from_double_vec(const std::vector<double>& v) {
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i)
    out[static_cast<Index>(i)] = v[i];
  return out;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    Json row = Json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j) {
  if (!j.is_array()) throw IoError("matrix JSON must be an array of rows");
  const Index rows = static_cast<Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  const Index cols = static_cast<Index>(j[0].size());
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (static_cast<Index>(j[r].size()) != cols)
      throw IoError("matrix JSON has ragged rows");
    for (Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

void BinWriter::raw(const void* p, std::size_t n) {
  buf_.append(static_cast<const char*>(p), n);
}

void BinWriter::magic(const char m[9]) { buf_.append(m, 8); }

void BinWriter::u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

void BinWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinWriter::f64(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  u64(u);
}

void BinWriter::str(std::string_view s) {
  u64(s.size());
  buf_.append(s.data(), s.size());
}

void BinWriter::matrix(const Matrix& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) f64(m(r, c));
}

void BinReader::raw(void* p, std::size_t n) {
  if (pos_ + n > buf_.size()) throw IoError("binary artifact truncated");
  std::memcpy(p, buf_.data() + pos_, n);
  pos_ += n;
}

void BinReader::magic(const char m[9]) {
  char got[8];
  raw(got, 8);
  if (std::memcmp(got, m, 8) != 0)
    throw IoError(std::string("bad magic, expected '") + m + "'");
}

std::uint8_t BinReader::u8() {
  std::uint8_t v;
  raw(&v, 1);
  return v;
}

std::uint32_t BinReader::u32() {
  unsigned char b[4];
  raw(b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t BinReader::u64() {
  unsigned char b[8];
  raw(b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double BinReader::f64() {
  const std::uint64_t u = u64();
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

std::string BinReader::str() {
  const std::uint64_t n = u64();
  if (pos_ + n > buf_.size()) throw IoError("binary artifact truncated");
  std::string s(buf_.substr(pos_, n));
  pos_ += n;
  return s;
}

Matrix BinReader::matrix() {
  const auto rows = static_cast<Index>(u64());
  const auto cols = static_cast<Index>(u64());
  if (rows < 0 || cols < 0) throw IoError("binary matrix has bad shape");
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = f64();
  return m;
}

}  // namespace mats
