#include <gtest/gtest.h>

#include "fmp/federated.hpp"
#include "wire_cases.hpp"

using namespace fmp;
using fmp::testing::reseal;
using fmp::testing::wire_formats;

TEST(WireFixtures, DecodeToKnownValuesAndReencodeExactly) {
  const auto bad = fmp::testing::fixture_mismatches();
  std::string all;
  for (const auto& b : bad) all += b + "; ";
  EXPECT_TRUE(bad.empty()) << all;
}

TEST(WireFixtures, HandComputedSizes) {
  const std::size_t expected[] = {78, 207, 108, 80};
  std::size_t i = 0;
  for (const auto& f : wire_formats()) EXPECT_EQ(fmp::testing::fixture_bytes(f).size(), expected[i++]) << f.magic;
}

TEST(WireCrc, EverySingleByteCorruptionIsDetected) {
  for (const auto& f : wire_formats()) {
    EXPECT_EQ(fmp::testing::undetected_corruptions(f, fmp::testing::fixture_bytes(f)), 0u) << f.magic;
  }
}

TEST(WireCrc, KnownCheckValue) {
  const std::string s = "123456789";
  EXPECT_EQ(wire::crc32_of(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())), 0xCBF43926u);
}

TEST(WireFuzz, ThousandRoundTripsPerFormat) {
  RngStream rng(2025, 0);
  for (const auto& f : wire_formats()) {
    std::size_t failures = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto bytes = f.random_message(rng);
      if (f.reencode(bytes) != bytes) ++failures;
    }
    EXPECT_EQ(failures, 0u) << f.magic;
  }
}

TEST(WireFuzz, RandomCorruptionOfRandomMessages) {
  RngStream rng(2026, 0);
  for (const auto& f : wire_formats()) {
    for (int i = 0; i < 200; ++i) {
      auto bytes = f.random_message(rng);
      bytes[rng.uniform_index(bytes.size())] ^= static_cast<std::uint8_t>(1 + rng.uniform_index(255));
      EXPECT_THROW(f.decode(bytes), FormatError) << f.magic << " message " << i;
    }
  }
}

TEST(WireErrors, TruncationIsRejected) {
  for (const auto& f : wire_formats()) {
    const auto good = fmp::testing::fixture_bytes(f);
    for (std::size_t cut = 0; cut < good.size(); ++cut) {
      wire::Bytes part(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
      EXPECT_THROW(f.decode(part), FormatError) << f.magic << " cut " << cut;
      if (cut >= 4) {
        reseal(part);
        EXPECT_THROW(f.decode(part), FormatError) << f.magic << " resealed cut " << cut;
      }
    }
  }
}

TEST(WireErrors, BadMagicAndVersionReportOffsets) {
  for (const auto& f : wire_formats()) {
    auto magic = fmp::testing::fixture_bytes(f);
    magic[0] = 'X';
    reseal(magic);
    try {
      f.decode(magic);
      ADD_FAILURE() << f.magic << ": bad magic accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), 0u) << f.magic;
    }
    auto version = fmp::testing::fixture_bytes(f);
    version[4] = 9;
    reseal(version);
    try {
      f.decode(version);
      ADD_FAILURE() << f.magic << ": bad version accepted";
    } catch (const FormatError& e) {
      EXPECT_EQ(e.offset(), 4u) << f.magic;
    }
  }
}

TEST(WireErrors, TrailingBytesAreRejected) {
  for (const auto& f : wire_formats()) {
    auto bytes = fmp::testing::fixture_bytes(f);
    bytes.insert(bytes.end() - 4, 0);
    reseal(bytes);
    EXPECT_THROW(f.decode(bytes), FormatError) << f.magic;
  }
}

TEST(WireErrors, UnknownProvenanceIsRejected) {
  auto bytes = fmp::testing::fixture_bytes(wire_formats()[1]);
  // provenance follows magic, version, id and four u32 counts
  bytes[4 + 2 + 4 + 4 * 4] = 7;
  reseal(bytes);
  try {
    decode_sample_upload(bytes);
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 26u);
  }
}

TEST(WireErrors, NonFinitePayloadIsNotEncoded) {
  CompressedUpload u;
  u.payload = Matrix(1, 2, {1.0, NAN});
  EXPECT_THROW(encode_upload(u), WireError);
}

TEST(Checkpoint, MissingSectionNamesIt) {
  const auto ck = wire::decode_checkpoint(fmp::testing::fixture_bytes(wire_formats()[2]));
  try {
    ck.get("zzz");
    FAIL() << "expected a format error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
  }
}
