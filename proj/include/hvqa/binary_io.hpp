#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hvqa/errors.hpp"

namespace hvqa::io {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    magic(s);
  }

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  void clear() { bytes_.clear(); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  std::vector<std::uint8_t> bytes_;
};

/// Little-endian cursor over an in-memory file; every short read is a FormatError at the cursor.
class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }

  void require(std::uint64_t n, const std::string& what) const {
    if (remaining() < n)
      throw FormatError("truncated " + what + ": need " + std::to_string(n) + " bytes, " +
                            std::to_string(remaining()) + " left",
                        pos_);
  }

  std::uint8_t u8(const char* what = "field") {
    require(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what = "field") { return static_cast<std::uint16_t>(get(2, what)); }
  std::uint32_t u32(const char* what = "field") { return static_cast<std::uint32_t>(get(4, what)); }
  std::uint64_t u64(const char* what = "field") { return get(8, what); }
  float f32(const char* what = "field") { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what = "field") { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what = "string") {
    const auto n = u32(what);
    require(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  /// Reads a fixed magic tag; mismatch is a FormatError at its start.
  void expect_magic(std::string_view m) {
    require(m.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0)
      throw FormatError("bad magic, expected \"" + std::string(m) + "\"", pos_);
    pos_ += m.size();
  }

 private:
  std::uint64_t get(int n, const char* what) {
    require(static_cast<std::uint64_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += n;
    return v;
  }

  std::vector<std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
/// Writes through a temporary sibling and renames it into place.
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

/// FNV-1a, 64 bit.
std::uint64_t fnv1a(std::string_view data);
std::uint64_t fnv1a(const std::vector<std::uint8_t>& data);

}  // namespace hvqa::io
