#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "ussr/tensor.hpp"

namespace ussr {

/// Little-endian byte sink, independent of host byte order.
class ByteWriter {
 public:
  void raw(const char* bytes, std::size_t n) { out_.append(bytes, n); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u64(s.size());
    out_.append(s);
  }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.data()) f64(v);
  }

  const std::string& bytes() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

/// Bounds-checked reader; every overrun raises an Error naming `what`.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what) : in_(bytes), what_(std::move(what)) {}

  std::size_t remaining() const { return in_.size() - pos_; }

  void expect_magic(const char (&magic)[8]) {
    need(8);
    const std::string_view found = in_.substr(pos_, 8);
    if (found != std::string_view(magic, 8)) {
      throw Error(what_ + ": bad magic, expected '" + std::string(magic, 8) + "', found '" +
                  printable(found) + "'");
    }
    pos_ += 8;
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 8) throw Error(what_ + ": corrupt tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = u64();
      if (d == 0 || d > remaining()) throw Error(what_ + ": corrupt tensor extent");
      count *= d;
    }
    if (count > remaining() / 8) throw Error(what_ + ": truncated tensor data");
    std::vector<double> data(count);
    for (double& v : data) v = f64();
    return Tensor(std::move(shape), std::move(data));
  }

  void expect_end() const {
    if (pos_ != in_.size()) throw Error(what_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw Error(what_ + ": truncated (needed " + std::to_string(n) + " bytes, " +
                                     std::to_string(remaining()) + " left)");
  }

  static std::string printable(std::string_view s) {
    std::string out;
    for (char c : s) out.push_back(c >= 32 && c < 127 ? c : '?');
    return out;
  }

  std::string_view in_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace ussr
