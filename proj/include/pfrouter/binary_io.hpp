#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pfrouter/common.hpp"

namespace pfrouter::io {

using Magic = std::array<char, 8>;

inline constexpr Magic kActivationMagic{'P', 'F', 'A', 'C', 'T', '\x00', '\x01', '\x00'};
inline constexpr Magic kPcaMagic{'P', 'F', 'P', 'C', 'A', '\x00', '\x01', '\x00'};
inline constexpr Magic kNetMagic{'P', 'F', 'N', 'E', 'T', '\x00', '\x01', '\x00'};
inline constexpr Magic kFeatureMagic{'P', 'F', 'F', 'E', 'A', '\x00', '\x01', '\x00'};

/// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void magic(const Magic& m);
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void f64(double v);
  void string(const std::string& s);  // u32 length prefix
  /// u32 rows, u32 cols, then f64 values row-major.
  void matrix(const Matrix& m);
  void vector(const Vector& v);

  const std::vector<char>& bytes() const { return bytes_; }
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<char> bytes_;
};

/// Bounds-checked little-endian reader over an in-memory file image.
class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string origin);
  static ByteReader load(const std::filesystem::path& path);

  void expect_magic(const Magic& m);
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  double f64();
  std::string string();
  Matrix matrix();
  Vector vector();

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::string& origin() const { return origin_; }

 private:
  const char* take(std::size_t n);
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const char> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace pfrouter::io
