#include "meltrtl/binio.h"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "meltrtl/error.h"

namespace meltrtl {

static_assert(std::endian::native == std::endian::little,
              "artifact encoders assume a little-endian host");

namespace {

constexpr std::size_t kMagicLen = 8;

std::string padded_magic(std::string_view magic) {
  std::string m(magic.substr(0, kMagicLen));
  m.resize(kMagicLen, '\0');
  return m;
}

template <typename T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

}  // namespace

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

BinaryWriter::BinaryWriter(std::string_view magic, std::uint32_t version)
    : buf_(padded_magic(magic)) {
  u32(version);
}

void BinaryWriter::u8(std::uint8_t v) { put(buf_, v); }
void BinaryWriter::u16(std::uint16_t v) { put(buf_, v); }
void BinaryWriter::u32(std::uint32_t v) { put(buf_, v); }
void BinaryWriter::u64(std::uint64_t v) { put(buf_, v); }
void BinaryWriter::f64(double v) { put(buf_, v); }

void BinaryWriter::f64s(std::span<const double> v) {
  buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

std::string BinaryWriter::finish() && {
  const std::uint32_t crc = crc32_of(buf_);
  put(buf_, crc);
  return std::move(buf_);
}

void BinaryWriter::write_file(const std::filesystem::path& path) && {
  write_file_bytes(path, std::move(*this).finish());
}

BinaryReader::BinaryReader(std::string bytes, std::string_view magic, std::uint32_t version,
                           std::string_view what)
    : bytes_(std::move(bytes)), what_(what) {
  if (bytes_.size() < kMagicLen + 8) fail(ErrorCode::kFormat, what_ + ": file too short");
  if (bytes_.compare(0, kMagicLen, padded_magic(magic)) != 0)
    fail(ErrorCode::kFormat, what_ + ": bad magic bytes");
  end_ = bytes_.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes_.data() + end_, 4);
  if (stored != crc32_of(std::string_view(bytes_).substr(0, end_)))
    fail(ErrorCode::kFormat, what_ + ": checksum mismatch (file corrupted)");
  pos_ = kMagicLen;
  const std::uint32_t v = u32();
  if (v != version)
    fail(ErrorCode::kFormat, what_ + ": unsupported format version " + std::to_string(v) +
                                 " (expected " + std::to_string(version) + ")");
}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path, std::string_view magic,
                                     std::uint32_t version, std::string_view what) {
  return BinaryReader(read_file_bytes(path), magic, version, what);
}

void BinaryReader::need(std::size_t n) const {
  if (end_ - pos_ < n) fail(ErrorCode::kFormat, what_ + ": truncated payload");
}

#define MELTRTL_GET(T)                              \
  need(sizeof(T));                                  \
  T v;                                              \
  std::memcpy(&v, bytes_.data() + pos_, sizeof(T)); \
  pos_ += sizeof(T);                                \
  return v

std::uint8_t BinaryReader::u8() { MELTRTL_GET(std::uint8_t); }
std::uint16_t BinaryReader::u16() { MELTRTL_GET(std::uint16_t); }
std::uint32_t BinaryReader::u32() { MELTRTL_GET(std::uint32_t); }
std::uint64_t BinaryReader::u64() { MELTRTL_GET(std::uint64_t); }
double BinaryReader::f64() { MELTRTL_GET(double); }

#undef MELTRTL_GET

void BinaryReader::f64s(std::span<double> out) {
  need(out.size() * sizeof(double));
  std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
  pos_ += out.size() * sizeof(double);
}

std::string BinaryReader::str() {
  const std::uint32_t n = u32();
  need(n);
  std::string s = bytes_.substr(pos_, n);
  pos_ += n;
  return s;
}

void BinaryReader::expect_end() const {
  if (pos_ != end_) fail(ErrorCode::kFormat, what_ + ": trailing bytes after payload");
}

}  // namespace meltrtl
