#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diffnas::io {

using Bytes = std::vector<std::uint8_t>;

/// Writes to a sibling temp file, then renames over `path`. Parent
/// directories are created.
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void atomic_write(const std::filesystem::path& path, std::string_view text);

/// Throws StageDependencyError if the file does not exist.
Bytes read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_file(const std::filesystem::path& path);

/// Little-endian serializer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  void raw(std::string_view s);
  const Bytes& bytes() const noexcept { return out_; }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

/// Little-endian reader that reports the byte offset of every failure.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  void f32s(std::span<float> out);
  std::string raw(std::size_t n);
  /// Throws FormatError at the current offset unless `n` bytes remain.
  void require(std::size_t n, std::string_view what) const;

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace diffnas::io
