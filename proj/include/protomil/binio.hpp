#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protomil/error.hpp"

namespace protomil::binio {

// Little-endian encoder. Bytes are assembled explicitly so the output does not
// depend on host byte order.
class Writer {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }

  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  static Reader open(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error("missing file " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), path.string());
  }

  bool expect_magic(std::string_view tag) {
    if (remaining() < tag.size()) return false;
    const bool ok = std::memcmp(bytes_.data() + pos_, tag.data(), tag.size()) == 0;
    pos_ += tag.size();
    return ok;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(pos_ + i)) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }

  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw Error(origin_ + ": trailing bytes after payload");
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& origin() const { return origin_; }

 private:
  unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(bytes_[i]); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(origin_ + ": truncated file");
  }

  std::vector<char> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace protomil::binio
