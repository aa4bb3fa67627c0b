#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "meltrtl/binio.h"
#include "meltrtl/error.h"

namespace meltrtl {
namespace {

std::string sample_image() {
  BinaryWriter w("TESTFMT", 3);
  w.u8(7);
  w.u16(0xBEEF);
  w.u32(123456);
  w.u64(1ULL << 40);
  w.f64(-2.5);
  const double xs[] = {1.0, 0.1, -0.0};
  w.f64s(xs);
  w.str("hello");
  return std::move(w).finish();
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kContract;
}

TEST(Binio, RoundTripsEveryFieldType) {
  BinaryReader r(sample_image(), "TESTFMT", 3, "test");
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u16(), 0xBEEF);
  EXPECT_EQ(r.u32(), 123456u);
  EXPECT_EQ(r.u64(), 1ULL << 40);
  EXPECT_EQ(r.f64(), -2.5);
  double xs[3];
  r.f64s(xs);
  EXPECT_EQ(xs[1], 0.1);
  EXPECT_TRUE(std::signbit(xs[2]));
  EXPECT_EQ(r.str(), "hello");
  EXPECT_EQ(r.remaining(), 0u);
  r.expect_end();
}

TEST(Binio, LayoutIsLittleEndianWithMagicAndVersion) {
  const std::string img = sample_image();
  EXPECT_EQ(img.substr(0, 8), std::string("TESTFMT\0", 8));
  EXPECT_EQ(static_cast<unsigned char>(img[8]), 3);
  EXPECT_EQ(static_cast<unsigned char>(img[9]), 0);
  EXPECT_EQ(static_cast<unsigned char>(img[12]), 7);
  EXPECT_EQ(static_cast<unsigned char>(img[13]), 0xEF);
}

TEST(Binio, DetectsCorruption) {
  std::string img = sample_image();
  img[20] ^= 0x40;
  try {
    BinaryReader r(img, "TESTFMT", 3, "test");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kFormat);
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }
}

TEST(Binio, RejectsWrongMagicAndVersion) {
  EXPECT_EQ(code_of([] { BinaryReader r(sample_image(), "OTHER", 3, "test"); }),
            ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { BinaryReader r(sample_image(), "TESTFMT", 4, "test"); }),
            ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { BinaryReader r("short", "TESTFMT", 3, "test"); }), ErrorCode::kFormat);
}

TEST(Binio, ReadingPastPayloadIsFormatError) {
  BinaryWriter w("X", 1);
  w.u8(1);
  BinaryReader r(std::move(w).finish(), "X", 1, "test");
  r.u8();
  EXPECT_EQ(code_of([&] { r.u32(); }), ErrorCode::kFormat);
}

TEST(Binio, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { read_file_bytes("/nonexistent/dir/file.bin"); }), ErrorCode::kIo);
}

}  // namespace
}  // namespace meltrtl
