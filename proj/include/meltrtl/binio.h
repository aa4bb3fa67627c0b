#pragma once

// Little-endian binary framing shared by every artifact file:
//   magic (8 bytes) | u32 version | payload ... | u32 CRC-32 of everything before it

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace meltrtl {

class BinaryWriter {
 public:
  BinaryWriter(std::string_view magic, std::uint32_t version);

  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void f64s(std::span<const double> v);
  // u32 length prefix followed by raw bytes.
  void str(std::string_view s);

  // Appends the checksum and returns the finished byte image.
  std::string finish() &&;
  void write_file(const std::filesystem::path& path) &&;

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  // Verifies magic, version and trailing checksum up front.
  BinaryReader(std::string bytes, std::string_view magic, std::uint32_t version,
               std::string_view what);
  static BinaryReader from_file(const std::filesystem::path& path, std::string_view magic,
                                std::uint32_t version, std::string_view what);

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  void f64s(std::span<double> out);
  std::string str();

  std::size_t remaining() const { return end_ - pos_; }
  void expect_end() const;

 private:
  void need(std::size_t n) const;

  std::string bytes_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes);
std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace meltrtl
