#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "splitq/half.hpp"
#include "splitq/tensor.hpp"
#include "splitq/tensor_io.hpp"

namespace splitq {

// Two-level group quantizer settings. Each base group owns one FP16 scale;
// each sub-group inside it owns a shift_bits-wide power-of-two down-shift of
// that scale. shift_bits == 0 with base_group == sub_group degenerates to
// plain single-level group quantization.
struct HgqConfig {
  std::size_t sub_group{32};
  std::size_t base_group{128};
  std::size_t shift_bits{2};
  std::size_t code_bits{4};

  [[nodiscard]] int max_code() const noexcept { return (1 << (code_bits - 1)) - 1; }
  [[nodiscard]] int max_shift() const noexcept { return (1 << shift_bits) - 1; }
  // Largest combined shift of an activation/weight sub-group pair.
  [[nodiscard]] int max_pair_shift() const noexcept { return 2 * max_shift(); }
  [[nodiscard]] std::size_t subs_per_base() const noexcept { return base_group / sub_group; }

  void validate() const {
    if (sub_group == 0 || base_group == 0) throw parameter_error("group sizes must be positive");
    if (base_group % sub_group != 0) {
      throw parameter_error("base_group " + std::to_string(base_group) +
                            " is not a multiple of sub_group " + std::to_string(sub_group));
    }
    if (code_bits < 2 || code_bits > 8) throw parameter_error("code_bits must be in [2, 8]");
    if (shift_bits > 4) throw parameter_error("shift_bits must be in [0, 4]");
    // Sub-group dot products are held in 32 bits before alignment.
    const double worst = static_cast<double>(sub_group) * max_code() * max_code();
    if (worst >= 2147483648.0) throw parameter_error("sub_group too large for 32-bit partial sums");
  }

  friend bool operator==(const HgqConfig&, const HgqConfig&) = default;
};

// Single-level group quantizer with group size g: no shifts.
inline HgqConfig flat_group_config(std::size_t g, std::size_t code_bits = 4) {
  return HgqConfig{g, g, 0, code_bits};
}

// Grouping (reduction) axis. `cols` groups along each row, as for
// activations in x * W; `rows` groups down each column, as for weights.
enum class GroupAxis : std::uint32_t { rows = 0, cols = 1 };

// Quantized tensor stored vector-major: vector v holds the elements along
// the grouping axis, so codes[v * length() + i] is element i of vector v.
struct HgqTensor {
  HgqConfig config;
  GroupAxis axis{GroupAxis::cols};
  std::size_t rows{0};
  std::size_t cols{0};
  std::vector<std::int8_t> codes;
  std::vector<Half> bsf;             // vectors() * base_groups()
  std::vector<std::uint8_t> shift;   // vectors() * sub_groups()

  [[nodiscard]] std::size_t length() const noexcept { return axis == GroupAxis::cols ? cols : rows; }
  [[nodiscard]] std::size_t vectors() const noexcept { return axis == GroupAxis::cols ? rows : cols; }
  [[nodiscard]] std::size_t sub_groups() const noexcept { return length() / config.sub_group; }
  [[nodiscard]] std::size_t base_groups() const noexcept {
    return (length() + config.base_group - 1) / config.base_group;
  }

  [[nodiscard]] std::int8_t code_at(std::size_t r, std::size_t c) const noexcept {
    return axis == GroupAxis::cols ? codes[r * cols + c] : codes[c * rows + r];
  }

  friend bool operator==(const HgqTensor&, const HgqTensor&) = default;
};

namespace detail {

inline std::size_t grouping_length(const Tensor2D& x, GroupAxis axis) {
  return axis == GroupAxis::cols ? x.cols() : x.rows();
}

inline float element_along(const Tensor2D& x, GroupAxis axis, std::size_t v, std::size_t i) {
  return axis == GroupAxis::cols ? x(v, i) : x(i, v);
}

inline void check_groupable(std::size_t length, const HgqConfig& cfg) {
  if (length == 0) throw shape_error("grouping axis has zero length");
  if (length % cfg.sub_group != 0) {
    throw shape_error("grouping axis length " + std::to_string(length) +
                      " is not a multiple of sub_group " + std::to_string(cfg.sub_group));
  }
}

// Largest d in [0, max_shift] with m_sub * 2^d <= m_base, i.e.
// floor(log2(m_base / m_sub)) clamped, computed without log2 rounding.
inline int shift_for(double m_base, double m_sub, int max_shift) {
  if (m_base == 0.0 || m_sub == 0.0) return 0;
  int d = 0;
  while (d < max_shift && std::ldexp(m_sub, d + 1) <= m_base) ++d;
  return d;
}

inline std::int8_t quantize_code(double x, double scale, int max_code) {
  if (scale == 0.0) return 0;
  const double q = round_half_even(x / scale);
  return static_cast<std::int8_t>(std::clamp(q, -static_cast<double>(max_code),
                                             static_cast<double>(max_code)));
}

// Shared quantizer. `base_max_override`, when set, replaces every base
// group's local maximum (used for a single tensor-wide scale).
inline HgqTensor quantize_groups(const Tensor2D& x, const HgqConfig& cfg, GroupAxis axis,
                                 const double* base_max_override) {
  cfg.validate();
  const std::size_t len = grouping_length(x, axis);
  check_groupable(len, cfg);

  HgqTensor t;
  t.config = cfg;
  t.axis = axis;
  t.rows = x.rows();
  t.cols = x.cols();
  const std::size_t nvec = t.vectors();
  const std::size_t nsub = t.sub_groups();
  const std::size_t nbase = t.base_groups();
  t.codes.assign(nvec * len, 0);
  t.bsf.assign(nvec * nbase, Half{});
  t.shift.assign(nvec * nsub, 0);

  const int max_code = cfg.max_code();
  const int max_shift = cfg.max_shift();
  for (std::size_t v = 0; v < nvec; ++v) {
    for (std::size_t b = 0; b < nbase; ++b) {
      const std::size_t begin = b * cfg.base_group;
      const std::size_t end = std::min(len, begin + cfg.base_group);
      double m_base = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        m_base = std::max(m_base, static_cast<double>(std::fabs(element_along(x, axis, v, i))));
      }
      if (base_max_override != nullptr) m_base = *base_max_override;
      const Half bsf = to_half_rtne(m_base / max_code);
      t.bsf[v * nbase + b] = bsf;
      const double bsf_real = to_float(bsf);

      for (std::size_t s0 = begin; s0 < end; s0 += cfg.sub_group) {
        double m_sub = 0.0;
        for (std::size_t i = s0; i < s0 + cfg.sub_group; ++i) {
          m_sub = std::max(m_sub, static_cast<double>(std::fabs(element_along(x, axis, v, i))));
        }
        const int d = shift_for(m_base, m_sub, max_shift);
        t.shift[v * nsub + s0 / cfg.sub_group] = static_cast<std::uint8_t>(d);
        const double scale = std::ldexp(bsf_real, -d);
        for (std::size_t i = s0; i < s0 + cfg.sub_group; ++i) {
          t.codes[v * len + i] = quantize_code(element_along(x, axis, v, i), scale, max_code);
        }
      }
    }
  }
  return t;
}

}  // namespace detail

// Hierarchical group quantization along `axis`. The grouping length must be
// a multiple of sub_group; a trailing partial base group gets its own scale.
inline HgqTensor hgq_quantize(const Tensor2D& x, const HgqConfig& cfg = {},
                              GroupAxis axis = GroupAxis::cols) {
  return detail::quantize_groups(x, cfg, axis, nullptr);
}

// Scale of element i's sub-group within vector v.
inline double sub_scale(const HgqTensor& t, std::size_t v, std::size_t i) {
  const Half bsf = t.bsf[v * t.base_groups() + i / t.config.base_group];
  const int d = t.shift[v * t.sub_groups() + i / t.config.sub_group];
  return std::ldexp(static_cast<double>(to_float(bsf)), -d);
}

inline Tensor2D hgq_dequantize(const HgqTensor& t) {
  Tensor2D out(t.rows, t.cols);
  const std::size_t len = t.length();
  for (std::size_t v = 0; v < t.vectors(); ++v) {
    for (std::size_t i = 0; i < len; ++i) {
      const float value = static_cast<float>(t.codes[v * len + i] * sub_scale(t, v, i));
      if (t.axis == GroupAxis::cols) out(v, i) = value;
      else out(i, v) = value;
    }
  }
  return out;
}

// Single-level reference quantizers.
struct BaselineMode {
  enum class Kind { per_tensor, per_vector, per_group };
  Kind kind{Kind::per_group};
  std::size_t group{32};

  static BaselineMode per_tensor() { return {Kind::per_tensor, 0}; }
  static BaselineMode per_vector() { return {Kind::per_vector, 0}; }
  static BaselineMode per_group(std::size_t g) { return {Kind::per_group, g}; }
};

// One FP16 scale per group, codes in [-7, 7], no shifts. per_tensor uses one
// scale for the whole tensor (replicated per vector); per_vector one per
// vector along the axis; per_group(g) one per g consecutive elements.
inline HgqTensor baseline_quantize(const Tensor2D& x, BaselineMode mode,
                                   GroupAxis axis = GroupAxis::cols) {
  const std::size_t len = detail::grouping_length(x, axis);
  switch (mode.kind) {
    case BaselineMode::Kind::per_tensor: {
      const double m = x.max_abs();
      return detail::quantize_groups(x, flat_group_config(len), axis, &m);
    }
    case BaselineMode::Kind::per_vector:
      return detail::quantize_groups(x, flat_group_config(len), axis, nullptr);
    case BaselineMode::Kind::per_group:
      if (mode.group == 0) throw parameter_error("group size must be positive");
      return detail::quantize_groups(x, flat_group_config(mode.group), axis, nullptr);
  }
  throw parameter_error("unknown baseline mode");
}

struct HgqGemmStats {
  std::uint64_t int_accumulations{0};  // sub-group integer partials produced
  std::uint64_t shift_alignments{0};   // partials shift-aligned before an integer add
  std::uint64_t fp_accumulations{0};   // scale multiply + FP add, one per base-group pair
  std::uint64_t int_mac_count{0};      // code-pair multiplies

  HgqGemmStats& operator+=(const HgqGemmStats& o) noexcept {
    int_accumulations += o.int_accumulations;
    shift_alignments += o.shift_alignments;
    fp_accumulations += o.fp_accumulations;
    int_mac_count += o.int_mac_count;
    return *this;
  }
  friend bool operator==(const HgqGemmStats&, const HgqGemmStats&) = default;
};

struct HgqGemmResult {
  Tensor2D output;
  HgqGemmStats stats;
};

// Fused GEMM over quantized operands: `a` grouped along its columns, `w`
// along its rows, both with the same config. Within a base-group pair every
// sub-group dot product is an exact integer, left-shifted by
// (max_pair_shift - d_a - d_w) and summed in 64 bits; the only floating-point
// step is one scale multiply-accumulate per base-group pair.
inline HgqGemmResult hgq_gemm(const HgqTensor& a, const HgqTensor& w, unsigned threads = 1) {
  if (a.axis != GroupAxis::cols || w.axis != GroupAxis::rows) {
    throw parameter_error("hgq_gemm expects activations grouped along cols and weights along rows");
  }
  if (!(a.config == w.config)) throw parameter_error("hgq_gemm: operand configs differ");
  if (a.cols != w.rows) {
    throw shape_error("hgq_gemm: reduction lengths differ (" + std::to_string(a.cols) + " vs " +
                      std::to_string(w.rows) + ")");
  }
  const HgqConfig& cfg = a.config;
  const std::size_t len = a.cols;
  const std::size_t nsub = a.sub_groups();
  const std::size_t nbase = a.base_groups();
  const int dmax = cfg.max_pair_shift();
  const double unshift = std::ldexp(1.0, -dmax);

  Tensor2D out(a.rows, w.cols);
  detail::parallel_for(a.rows, threads, [&](std::size_t i) {
    const std::int8_t* arow = a.codes.data() + i * len;
    for (std::size_t j = 0; j < w.cols; ++j) {
      const std::int8_t* wcol = w.codes.data() + j * len;
      double total = 0.0;
      for (std::size_t b = 0; b < nbase; ++b) {
        const std::size_t begin = b * cfg.base_group;
        const std::size_t end = std::min(len, begin + cfg.base_group);
        std::int64_t acc = 0;
        for (std::size_t s0 = begin; s0 < end; s0 += cfg.sub_group) {
          std::int32_t dot = 0;
          for (std::size_t p = s0; p < s0 + cfg.sub_group; ++p) dot += arow[p] * wcol[p];
          const std::size_t sub = s0 / cfg.sub_group;
          const int align = dmax - a.shift[i * nsub + sub] - w.shift[j * nsub + sub];
          acc += static_cast<std::int64_t>(dot) << align;
        }
        const double scale = static_cast<double>(to_float(a.bsf[i * nbase + b])) *
                             static_cast<double>(to_float(w.bsf[j * nbase + b]));
        total += static_cast<double>(acc) * scale * unshift;
      }
      out(i, j) = static_cast<float>(total);
    }
  });

  const std::uint64_t outputs = static_cast<std::uint64_t>(a.rows) * w.cols;
  HgqGemmStats stats;
  stats.int_mac_count = outputs * len;
  stats.int_accumulations = outputs * nsub;
  stats.shift_alignments = cfg.shift_bits > 0 ? outputs * nsub : 0;
  stats.fp_accumulations = outputs * nbase;
  return HgqGemmResult{std::move(out), stats};
}

// HGQ1 layout (little-endian): "HGQ1", u32 sub_group, base_group, shift_bits,
// code_bits, axis, rows, cols; codes two per byte (low nibble first, two's
// complement); shifts four per byte (lowest bits first); BSFs as raw binary16.
// All arrays are vector-major. Requires code_bits <= 4 and shift_bits <= 2.
inline constexpr std::string_view kHgqMagic = "HGQ1";

inline std::vector<std::uint8_t> encode_hgq(const HgqTensor& t) {
  if (t.config.code_bits > 4 || t.config.shift_bits > 2) {
    throw parameter_error("HGQ1 stores at most 4-bit codes and 2-bit shifts");
  }
  detail::ByteWriter w;
  w.magic(kHgqMagic);
  w.u32(detail::checked_u32(t.config.sub_group, "sub_group"));
  w.u32(detail::checked_u32(t.config.base_group, "base_group"));
  w.u32(detail::checked_u32(t.config.shift_bits, "shift_bits"));
  w.u32(detail::checked_u32(t.config.code_bits, "code_bits"));
  w.u32(static_cast<std::uint32_t>(t.axis));
  w.u32(detail::checked_u32(t.rows, "rows"));
  w.u32(detail::checked_u32(t.cols, "cols"));
  for (std::size_t i = 0; i < t.codes.size(); i += 2) {
    const auto lo = static_cast<std::uint8_t>(t.codes[i] & 0x0F);
    const auto hi = i + 1 < t.codes.size() ? static_cast<std::uint8_t>(t.codes[i + 1] & 0x0F) : 0;
    w.u8(static_cast<std::uint8_t>(lo | (hi << 4)));
  }
  for (std::size_t i = 0; i < t.shift.size(); i += 4) {
    std::uint8_t byte = 0;
    for (std::size_t k = 0; k < 4 && i + k < t.shift.size(); ++k) {
      byte |= static_cast<std::uint8_t>((t.shift[i + k] & 0x3) << (2 * k));
    }
    w.u8(byte);
  }
  for (Half h : t.bsf) w.u16(h.bits);
  return w.bytes();
}

inline HgqTensor decode_hgq(std::vector<std::uint8_t> bytes, std::string source = "<memory>") {
  detail::ByteReader r(std::move(bytes), std::move(source));
  r.expect_magic(kHgqMagic);
  HgqTensor t;
  t.config.sub_group = r.u32();
  t.config.base_group = r.u32();
  t.config.shift_bits = r.u32();
  t.config.code_bits = r.u32();
  const std::uint32_t axis = r.u32();
  t.rows = r.u32();
  t.cols = r.u32();
  try {
    t.config.validate();
  } catch (const parameter_error& e) {
    throw io_error(r.source() + ": " + e.what());
  }
  if (t.config.code_bits > 4 || t.config.shift_bits > 2) {
    throw io_error(r.source() + ": HGQ1 stores at most 4-bit codes and 2-bit shifts");
  }
  if (axis > 1) throw io_error(r.source() + ": bad axis code " + std::to_string(axis));
  t.axis = static_cast<GroupAxis>(axis);
  if (t.rows == 0 || t.cols == 0 || t.length() % t.config.sub_group != 0) {
    throw io_error(r.source() + ": shape incompatible with sub_group");
  }

  const int max_code = t.config.max_code();
  t.codes.resize(t.rows * t.cols);
  for (std::size_t i = 0; i < t.codes.size(); i += 2) {
    const std::uint8_t byte = r.u8();
    for (std::size_t k = 0; k < 2 && i + k < t.codes.size(); ++k) {
      const int nibble = (byte >> (4 * k)) & 0x0F;
      const int code = nibble >= 8 ? nibble - 16 : nibble;
      if (code < -max_code || code > max_code) {
        throw io_error(r.source() + ": code out of range");
      }
      t.codes[i + k] = static_cast<std::int8_t>(code);
    }
  }
  t.shift.resize(t.vectors() * t.sub_groups());
  for (std::size_t i = 0; i < t.shift.size(); i += 4) {
    const std::uint8_t byte = r.u8();
    for (std::size_t k = 0; k < 4 && i + k < t.shift.size(); ++k) {
      const int d = (byte >> (2 * k)) & 0x3;
      if (d > t.config.max_shift()) throw io_error(r.source() + ": shift out of range");
      t.shift[i + k] = static_cast<std::uint8_t>(d);
    }
  }
  t.bsf.resize(t.vectors() * t.base_groups());
  for (Half& h : t.bsf) {
    h.bits = r.u16();
    if (!h.is_finite()) throw io_error(r.source() + ": non-finite base scale");
  }
  r.expect_end();
  return t;
}

inline void save_hgq(const std::filesystem::path& path, const HgqTensor& t) {
  detail::write_file(path, encode_hgq(t));
}

inline HgqTensor load_hgq(const std::filesystem::path& path) {
  return decode_hgq(detail::read_file(path), path.string());
}

}  // namespace splitq
