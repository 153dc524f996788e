#include "pfrouter/binary_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pfrouter::io {

namespace {

template <class U>
void put_le(std::vector<char>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xffU));
  }
}

template <class U>
U get_le(const char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return value;
}

}  // namespace

void ByteWriter::magic(const Magic& m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
void ByteWriter::u8(std::uint8_t v) { bytes_.push_back(static_cast<char>(v)); }
void ByteWriter::u16(std::uint16_t v) { put_le(bytes_, v); }
void ByteWriter::u32(std::uint32_t v) { put_le(bytes_, v); }
void ByteWriter::f32(float v) { put_le(bytes_, std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { put_le(bytes_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::string(const std::string& s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void ByteWriter::matrix(const Matrix& m) {
  u32(static_cast<std::uint32_t>(m.rows()));
  u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }
}

void ByteWriter::vector(const Vector& v) {
  u32(static_cast<std::uint32_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) f64(v(i));
}

void ByteWriter::save(const std::filesystem::path& path) const { write_file(path, bytes_); }

ByteReader::ByteReader(std::vector<char> bytes, std::string origin)
    : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

ByteReader ByteReader::load(const std::filesystem::path& path) {
  return ByteReader(read_file(path), path.string());
}

const char* ByteReader::take(std::size_t n) {
  if (n > remaining()) {
    throw DataError(origin_ + ": truncated file (needed " + std::to_string(n) + " bytes at offset " +
                    std::to_string(pos_) + ")");
  }
  const char* p = bytes_.data() + pos_;
  pos_ += n;
  return p;
}

void ByteReader::expect_magic(const Magic& m) {
  if (remaining() < m.size() || !std::equal(m.begin(), m.end(), bytes_.data() + pos_)) {
    throw DataError(origin_ + ": malformed header magic");
  }
  pos_ += m.size();
}

std::uint8_t ByteReader::u8() { return static_cast<std::uint8_t>(*take(1)); }
std::uint16_t ByteReader::u16() { return get_le<std::uint16_t>(take(2)); }
std::uint32_t ByteReader::u32() { return get_le<std::uint32_t>(take(4)); }
float ByteReader::f32() { return std::bit_cast<float>(get_le<std::uint32_t>(take(4))); }
double ByteReader::f64() { return std::bit_cast<double>(get_le<std::uint64_t>(take(8))); }

std::string ByteReader::string() {
  const std::uint32_t n = u32();
  const char* p = take(n);
  return std::string(p, n);
}

Matrix ByteReader::matrix() {
  const std::uint32_t rows = u32();
  const std::uint32_t cols = u32();
  if (static_cast<std::size_t>(rows) * cols * 8 > remaining()) {
    throw DataError(origin_ + ": matrix payload truncated");
  }
  Matrix m(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = f64();
  }
  return m;
}

Vector ByteReader::vector() {
  const std::uint32_t n = u32();
  if (static_cast<std::size_t>(n) * 8 > remaining()) {
    throw DataError(origin_ + ": vector payload truncated");
  }
  Vector v(n);
  for (std::uint32_t i = 0; i < n; ++i) v(i) = f64();
  return v;
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<char> bytes(size);
  if (size > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(size))) {
    throw DataError("failed reading " + path.string());
  }
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("I/O failure writing " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const char>(text.data(), text.size()));
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace pfrouter::io
