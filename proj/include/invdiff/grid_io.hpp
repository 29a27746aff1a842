#pragma once

// Little-endian binary helpers and the "CGMG" grid file.
//
//   offset  size  field
//   0       4     magic "CGMG"
//   4       2     version (u16) = 1
//   6       1     dtype code (0 = f32, 1 = f64)
//   7       12    h, w, c (u32 each)
//   19      ...   payload, row-major channel-minor, little-endian reals

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"

namespace invdiff {

namespace io {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(char(v)); }
  void u16(std::uint16_t v) { put_le(v, 2); }
  void u32(std::uint32_t v) { put_le(v, 4); }
  void u64(std::uint64_t v) { put_le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class S>
  void real(S v) {
    if constexpr (std::is_same_v<S, float>) f32(v);
    else f64(v);
  }

  const std::vector<char>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(buf_.data(), std::streamsize(buf_.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
  }

 private:
  void put_le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(char((v >> (8 * i)) & 0xff));
  }
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(std::vector<char> data, std::string origin) : buf_(std::move(data)), origin_(std::move(origin)) {}

  static Reader load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string() + " for reading");
    std::vector<char> data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return Reader(std::move(data), path.string());
  }

  std::uint8_t u8() { return std::uint8_t(take(1)); }
  std::uint16_t u16() { return std::uint16_t(take(2)); }
  std::uint32_t u32() { return std::uint32_t(take(4)); }
  std::uint64_t u64() { return take(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  template <class S>
  S real() {
    if constexpr (std::is_same_v<S, float>) return f32();
    else return f64();
  }

  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }
  const std::string& origin() const { return origin_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw std::runtime_error(origin_ + ": truncated (need " + std::to_string(n) +
                               " bytes at offset " + std::to_string(pos_) + ", have " +
                               std::to_string(remaining()) + ")");
    }
  }

 private:
  std::uint64_t take(int n) {
    need(std::size_t(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(std::uint8_t(buf_[pos_ + i])) << (8 * i);
    pos_ += std::size_t(n);
    return v;
  }

  std::vector<char> buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

inline std::string hex_dump(const std::string& bytes) {
  std::ostringstream os;
  for (unsigned char ch : bytes) os << std::hex << std::setw(2) << std::setfill('0') << int(ch) << ' ';
  return os.str();
}

}  // namespace io

inline constexpr char kGridMagic[4] = {'C', 'G', 'M', 'G'};
inline constexpr std::uint16_t kGridVersion = 1;

template <class S>
void encode_grid(io::Writer& wr, const Grid<S>& g) {
  wr.bytes(kGridMagic, 4);
  wr.u16(kGridVersion);
  wr.u8(std::uint8_t(dtype_of<S>()));
  wr.u32(std::uint32_t(g.h()));
  wr.u32(std::uint32_t(g.w()));
  wr.u32(std::uint32_t(g.c()));
  for (std::size_t i = 0; i < g.size(); ++i) wr.real<S>(g[i]);
}

template <class S>
void write_grid(const std::filesystem::path& path, const Grid<S>& g) {
  io::Writer wr;
  encode_grid(wr, g);
  wr.save(path);
}

struct GridHeader {
  Dtype dtype;
  std::uint32_t h, w, c;
};

inline GridHeader decode_grid_header(io::Reader& rd) {
  rd.need(19);
  const std::string head = rd.str(4);
  if (head != std::string(kGridMagic, 4)) {
    throw std::runtime_error(rd.origin() + ": bad magic, expected \"CGMG\", header bytes: " +
                             io::hex_dump(head));
  }
  const std::uint16_t version = rd.u16();
  const std::uint8_t code = rd.u8();
  GridHeader hd{Dtype::F32, rd.u32(), rd.u32(), rd.u32()};
  if (version != kGridVersion) {
    throw std::runtime_error(rd.origin() + ": unsupported version " + std::to_string(version) +
                             " (expected 1); header: magic=CGMG dtype=" + std::to_string(code) +
                             " h=" + std::to_string(hd.h) + " w=" + std::to_string(hd.w) +
                             " c=" + std::to_string(hd.c));
  }
  if (code > 1) {
    throw std::runtime_error(rd.origin() + ": bad dtype code " + std::to_string(code) +
                             " (expected 0=f32 or 1=f64); header: version=" +
                             std::to_string(version) + " h=" + std::to_string(hd.h) +
                             " w=" + std::to_string(hd.w) + " c=" + std::to_string(hd.c));
  }
  hd.dtype = Dtype(code);
  return hd;
}

// Reads a grid, converting to S if the file stores the other dtype.
template <class S>
Grid<S> decode_grid(io::Reader& rd) {
  const GridHeader hd = decode_grid_header(rd);
  const std::size_t n = std::size_t(hd.h) * hd.w * hd.c;
  rd.need(n * dtype_size(hd.dtype));
  Grid<S> g(hd.h, hd.w, hd.c);
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = hd.dtype == Dtype::F32 ? static_cast<S>(rd.f32()) : static_cast<S>(rd.f64());
  }
  return g;
}

template <class S>
Grid<S> read_grid(const std::filesystem::path& path) {
  io::Reader rd = io::Reader::load(path);
  Grid<S> g = decode_grid<S>(rd);
  if (rd.remaining() != 0) {
    throw std::runtime_error(path.string() + ": " + std::to_string(rd.remaining()) +
                             " trailing bytes after payload");
  }
  return g;
}

inline GridHeader read_grid_header(const std::filesystem::path& path) {
  io::Reader rd = io::Reader::load(path);
  return decode_grid_header(rd);
}

}  // namespace invdiff
