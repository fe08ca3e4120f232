#pragma once

#include <zlib.h>

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmp/error.hpp"
#include "fmp/matrix.hpp"

namespace fmp::wire {

static_assert(std::endian::native == std::endian::little, "wire codecs assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  void str(std::string_view s) {
    u16(static_cast<std::uint16_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  // Appends the CRC32 of everything written so far and returns the finished buffer.
  Bytes finish() && {
    const std::uint32_t crc = crc32_of(bytes_);
    u32(crc);
    return std::move(bytes_);
  }

  std::size_t size() const noexcept { return bytes_.size(); }

 private:
  template <class U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes bytes_;
};

// Bounds-checked little-endian reader; every failure reports the byte offset.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  // Verifies the 4-byte CRC trailer and restricts reading to the body before it.
  void check_crc() {
    if (bytes_.size() < 4) throw FormatError("message shorter than CRC trailer", bytes_.size());
    const auto body = bytes_.first(bytes_.size() - 4);
    Reader tail(bytes_.subspan(bytes_.size() - 4));
    const std::uint32_t stored = tail.u32();
    if (crc32_of(body) != stored) throw FormatError("CRC mismatch", bytes_.size() - 4);
    bytes_ = body;
  }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw FormatError("bad magic, expected '" + std::string(m) + "'", pos_);
    }
    pos_ += m.size();
  }
  std::uint8_t u8() { return get<std::uint8_t>("u8"); }
  std::uint16_t u16() { return get<std::uint16_t>("u16"); }
  std::uint32_t u32() { return get<std::uint32_t>("u32"); }
  std::uint64_t u64() { return get<std::uint64_t>("u64"); }
  double f64() { return std::bit_cast<double>(get<std::uint64_t>("f64")); }
  std::vector<double> f64s(std::size_t count) {
    if (count > remaining() / 8) throw FormatError("payload truncated", pos_);
    std::vector<double> out(count);
    for (auto& v : out) v = f64();
    return out;
  }
  std::string str() {
    const std::size_t n = u16();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw FormatError("trailing bytes after message body", pos_);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) throw FormatError(std::string("truncated while reading ") + what, pos_);
  }
  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- FMPC checkpoint: named float64 sections ----

struct Section {
  std::string name;
  Matrix data;
};

struct Checkpoint {
  std::vector<Section> sections;

  const Matrix& get(std::string_view name) const {
    for (const auto& s : sections)
      if (s.name == name) return s.data;
    throw FormatError("checkpoint has no section '" + std::string(name) + "'", 0);
  }
  bool has(std::string_view name) const {
    for (const auto& s : sections)
      if (s.name == name) return true;
    return false;
  }
  void put(std::string name, Matrix m) { sections.push_back({std::move(name), std::move(m)}); }
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

// "FMPC" | version u16 | count u32 | table {name, rows u32, cols u32, offset u64}*
//        | sections {name, rows u32, cols u32, payload f64*}* | crc32
// Offsets in the table are byte offsets of the corresponding section record.
inline Bytes encode_checkpoint(const Checkpoint& ck) {
  std::size_t table = 4 + 2 + 4;
  for (const auto& s : ck.sections) table += 2 + s.name.size() + 4 + 4 + 8;
  Writer w;
  w.magic("FMPC");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.sections.size()));
  std::uint64_t off = table;
  for (const auto& s : ck.sections) {
    w.str(s.name);
    w.u32(static_cast<std::uint32_t>(s.data.rows()));
    w.u32(static_cast<std::uint32_t>(s.data.cols()));
    w.u64(off);
    off += 2 + s.name.size() + 4 + 4 + 8 * s.data.size();
  }
  for (const auto& s : ck.sections) {
    w.str(s.name);
    w.u32(static_cast<std::uint32_t>(s.data.rows()));
    w.u32(static_cast<std::uint32_t>(s.data.cols()));
    w.f64s(s.data.values());
  }
  return std::move(w).finish();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.check_crc();
  r.expect_magic("FMPC");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version", 4);
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
    std::uint64_t offset;
  };
  std::vector<Entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str();
    e.rows = r.u32();
    e.cols = r.u32();
    e.offset = r.u64();
    table.push_back(std::move(e));
  }
  Checkpoint ck;
  for (const auto& e : table) {
    if (r.offset() != e.offset) throw FormatError("section offset does not match table", r.offset());
    const std::size_t at = r.offset();
    const std::string name = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (name != e.name || rows != e.rows || cols != e.cols) throw FormatError("section header does not match table", at);
    auto data = r.f64s(static_cast<std::size_t>(rows) * cols);
    ck.put(name, Matrix(rows, cols, std::move(data)));
  }
  r.expect_end();
  return ck;
}

}  // namespace fmp::wire
