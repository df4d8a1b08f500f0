#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "splitq/tensor.hpp"

namespace splitq {

namespace detail {

// Little-endian byte sink.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void magic(std::string_view m) {
    for (char ch : m) u8(static_cast<std::uint8_t>(ch));
  }

  [[nodiscard]] const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

// Little-endian byte source with bounds checking.
class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> bytes, std::string source)
      : bytes_(std::move(bytes)), source_(std::move(source)) {}

  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    const std::uint16_t lo = u8();
    return static_cast<std::uint16_t>(lo | (u8() << 8));
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int s = 0; s < 32; s += 8) v |= static_cast<std::uint32_t>(u8()) << s;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }

  void expect_magic(std::string_view m) {
    for (char ch : m) {
      if (u8() != static_cast<std::uint8_t>(ch)) {
        throw io_error(source_ + ": bad magic, expected " + std::string(m));
      }
    }
  }

  void expect_end() const {
    if (pos_ != bytes_.size()) {
      throw io_error(source_ + ": " + std::to_string(bytes_.size() - pos_) + " trailing bytes");
    }
  }

  [[nodiscard]] const std::string& source() const noexcept { return source_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw io_error(source_ + ": truncated file");
  }

  std::vector<std::uint8_t> bytes_;
  std::string source_;
  std::size_t pos_{0};
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path.string());
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw shape_error(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

// SVT1 layout: "SVT1", u32 dtype (0 = real32), u32 rows, u32 cols, then
// rows*cols little-endian float32 values in row-major order.
inline constexpr std::string_view kTensorMagic = "SVT1";
inline constexpr std::uint32_t kDtypeReal32 = 0;

inline std::vector<std::uint8_t> encode_tensor(const Tensor2D& t) {
  detail::ByteWriter w;
  w.magic(kTensorMagic);
  w.u32(kDtypeReal32);
  w.u32(detail::checked_u32(t.rows(), "rows"));
  w.u32(detail::checked_u32(t.cols(), "cols"));
  for (float v : t.data()) w.f32(v);
  return w.bytes();
}

inline Tensor2D decode_tensor(std::vector<std::uint8_t> bytes, std::string source = "<memory>") {
  detail::ByteReader r(std::move(bytes), std::move(source));
  r.expect_magic(kTensorMagic);
  const std::uint32_t dtype = r.u32();
  if (dtype != kDtypeReal32) {
    throw io_error(r.source() + ": unsupported dtype code " + std::to_string(dtype));
  }
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (rows == 0 || cols == 0) throw io_error(r.source() + ": empty tensor");
  std::vector<float> data(static_cast<std::size_t>(rows) * cols);
  for (float& v : data) v = r.f32();
  r.expect_end();
  try {
    return Tensor2D(rows, cols, std::move(data));
  } catch (const data_error& e) {
    throw io_error(r.source() + ": " + e.what());
  }
}

inline void save_tensor(const std::filesystem::path& path, const Tensor2D& t) {
  detail::write_file(path, encode_tensor(t));
}

inline Tensor2D load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

}  // namespace splitq
