#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "splitq/tensor.hpp"
#include "splitq/tensor_io.hpp"

namespace splitq {

// Channel ordering for the low-rank path: sensitive input channels first
// (in the given order), the rest after them in ascending original order.
// permutation[p] is the original channel stored at position p.
struct MpLayout {
  std::vector<std::size_t> sensitive;
  std::vector<std::size_t> permutation;
  std::size_t d_in{0};

  [[nodiscard]] std::size_t sensitive_count() const noexcept { return sensitive.size(); }
  [[nodiscard]] std::size_t plain_count() const noexcept { return d_in - sensitive.size(); }

  friend bool operator==(const MpLayout&, const MpLayout&) = default;
};

inline MpLayout build_mp_layout(const std::vector<std::size_t>& sensitive, std::size_t d_in) {
  std::vector<bool> taken(d_in, false);
  for (std::size_t idx : sensitive) {
    if (idx >= d_in) {
      throw parameter_error("sensitive channel " + std::to_string(idx) + " out of range for d_in " +
                            std::to_string(d_in));
    }
    if (taken[idx]) throw parameter_error("duplicate sensitive channel " + std::to_string(idx));
    taken[idx] = true;
  }
  MpLayout layout{sensitive, sensitive, d_in};
  for (std::size_t c = 0; c < d_in; ++c) {
    if (!taken[c]) layout.permutation.push_back(c);
  }
  return layout;
}

inline MpLayout all_sensitive_layout(std::size_t d_in) {
  std::vector<std::size_t> all(d_in);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return build_mp_layout(all, d_in);
}

inline MpLayout no_sensitive_layout(std::size_t d_in) { return build_mp_layout({}, d_in); }

inline constexpr int kWeightHiMax = 127;    // INT8 weights on sensitive channels
inline constexpr int kWeightLoMax = 7;      // INT4 weights elsewhere
inline constexpr int kActHiMax = 32767;     // INT16 activations on sensitive channels
inline constexpr int kActLoMax = 127;       // INT8 activations elsewhere
// INT8 activation lanes carry the top 8 of the 16 aligned bits, so their
// exponent sits this far above the row's shared exponent.
inline constexpr int kLowLaneShift = 8;

// Low-rank projection weights (d_in x d_out) in permuted channel order with
// one scale per output column shared by both precisions.
struct QuantizedLowRank {
  MpLayout layout;
  std::size_t d_out{0};
  std::vector<std::int8_t> w_hi;  // sensitive_count x d_out, row-major
  std::vector<std::int8_t> w_lo;  // plain_count x d_out, row-major, values in [-7, 7]
  std::vector<float> w_scale;     // d_out

  friend bool operator==(const QuantizedLowRank&, const QuantizedLowRank&) = default;
};

namespace detail {

inline double clamp_round(double v, int bound) {
  return std::clamp(round_half_even(v), -static_cast<double>(bound), static_cast<double>(bound));
}

}  // namespace detail

// Per column j: scale_j = max(max|sensitive_j| / 127, max|rest_j| / 7);
// sensitive rows get 8-bit codes and the rest 4-bit codes at that scale.
inline QuantizedLowRank quantize_lowrank_weights(const Tensor2D& w, const MpLayout& layout) {
  if (w.rows() != layout.d_in) {
    throw shape_error("low-rank weight has " + std::to_string(w.rows()) +
                      " input channels, layout expects " + std::to_string(layout.d_in));
  }
  const std::size_t ns = layout.sensitive_count();
  const std::size_t np = layout.plain_count();
  QuantizedLowRank q;
  q.layout = layout;
  q.d_out = w.cols();
  q.w_hi.assign(ns * q.d_out, 0);
  q.w_lo.assign(np * q.d_out, 0);
  q.w_scale.assign(q.d_out, 0.0f);

  for (std::size_t j = 0; j < q.d_out; ++j) {
    double max_hi = 0.0;
    double max_lo = 0.0;
    for (std::size_t p = 0; p < layout.d_in; ++p) {
      const double mag = std::fabs(w(layout.permutation[p], j));
      if (p < ns) max_hi = std::max(max_hi, mag);
      else max_lo = std::max(max_lo, mag);
    }
    const float scale = static_cast<float>(std::max(max_hi / kWeightHiMax, max_lo / kWeightLoMax));
    q.w_scale[j] = scale;
    if (scale == 0.0f) continue;
    for (std::size_t p = 0; p < layout.d_in; ++p) {
      const double ratio = static_cast<double>(w(layout.permutation[p], j)) / scale;
      if (p < ns) {
        q.w_hi[p * q.d_out + j] = static_cast<std::int8_t>(detail::clamp_round(ratio, kWeightHiMax));
      } else {
        q.w_lo[(p - ns) * q.d_out + j] =
            static_cast<std::int8_t>(detail::clamp_round(ratio, kWeightLoMax));
      }
    }
  }
  return q;
}

// Back to a real d_in x d_out matrix in original channel order.
inline Tensor2D dequantize_lowrank_weights(const QuantizedLowRank& q) {
  Tensor2D out(q.layout.d_in, q.d_out);
  const std::size_t ns = q.layout.sensitive_count();
  for (std::size_t p = 0; p < q.layout.d_in; ++p) {
    const std::size_t row = q.layout.permutation[p];
    for (std::size_t j = 0; j < q.d_out; ++j) {
      const int code = p < ns ? q.w_hi[p * q.d_out + j] : q.w_lo[(p - ns) * q.d_out + j];
      out(row, j) = static_cast<float>(static_cast<double>(code) * q.w_scale[j]);
    }
  }
  return out;
}

// Exponent-aligned activations. Row r shares exponent e = shared_exp[r]:
// sensitive lanes hold 16-bit codes worth code * 2^e, plain lanes hold
// 8-bit codes worth code * 2^(e + kLowLaneShift).
struct AlignedActivations {
  MpLayout layout;
  std::size_t rows{0};
  std::vector<std::int16_t> a_hi;  // rows x sensitive_count
  std::vector<std::int8_t> a_lo;   // rows x plain_count
  std::vector<int> shared_exp;     // rows
};

// ceil(log2(m)) for m > 0, exact.
inline int ceil_log2(double m) {
  int e = 0;
  const double frac = std::frexp(m, &e);
  return frac == 0.5 ? e - 1 : e;
}

inline AlignedActivations align_activations(const Tensor2D& x, const MpLayout& layout) {
  if (x.cols() != layout.d_in) {
    throw shape_error("activations have " + std::to_string(x.cols()) +
                      " channels, layout expects " + std::to_string(layout.d_in));
  }
  const std::size_t ns = layout.sensitive_count();
  const std::size_t np = layout.plain_count();
  AlignedActivations a;
  a.layout = layout;
  a.rows = x.rows();
  a.a_hi.assign(a.rows * ns, 0);
  a.a_lo.assign(a.rows * np, 0);
  a.shared_exp.assign(a.rows, 0);

  for (std::size_t r = 0; r < a.rows; ++r) {
    const double m = std::fabs(static_cast<double>(*std::max_element(
        x.row(r).begin(), x.row(r).end(),
        [](float u, float v) { return std::fabs(u) < std::fabs(v); })));
    if (m == 0.0) continue;
    const int e = ceil_log2(m) - 15;
    a.shared_exp[r] = e;
    for (std::size_t p = 0; p < layout.d_in; ++p) {
      const double v = x(r, layout.permutation[p]);
      if (p < ns) {
        a.a_hi[r * ns + p] = static_cast<std::int16_t>(detail::clamp_round(std::ldexp(v, -e), kActHiMax));
      } else {
        a.a_lo[r * np + (p - ns)] =
            static_cast<std::int8_t>(detail::clamp_round(std::ldexp(v, -(e + kLowLaneShift)), kActLoMax));
      }
    }
  }
  return a;
}

inline Tensor2D dequantize_activations(const AlignedActivations& a) {
  Tensor2D out(a.rows, a.layout.d_in);
  const std::size_t ns = a.layout.sensitive_count();
  const std::size_t np = a.layout.plain_count();
  for (std::size_t r = 0; r < a.rows; ++r) {
    const int e = a.shared_exp[r];
    for (std::size_t p = 0; p < a.layout.d_in; ++p) {
      const double v = p < ns ? std::ldexp(static_cast<double>(a.a_hi[r * ns + p]), e)
                              : std::ldexp(static_cast<double>(a.a_lo[r * np + (p - ns)]), e + kLowLaneShift);
      out(r, a.layout.permutation[p]) = static_cast<float>(v);
    }
  }
  return out;
}

enum class SliceMode { high_precision, low_precision };

// Slice products issued per multiply: four 8x4 passes for 16x8, one for 8x4.
constexpr int slice_passes(SliceMode mode) noexcept {
  return mode == SliceMode::high_precision ? 4 : 1;
}

// Bit-sliced multiply. In high precision the 16-bit operand splits into a
// signed MSB byte and a zero-extended LSB byte, the 8-bit operand into a
// signed MSB nibble and a zero-extended LSB nibble; the four 8x4 slice
// products are recombined by shifts. Low precision is a single 8x4 product.
inline std::int32_t bitslice_mac(std::int16_t a, std::int8_t w, SliceMode mode) {
  if (mode == SliceMode::low_precision) {
    if (a < -kActLoMax || a > kActLoMax || w < -kWeightLoMax || w > kWeightLoMax) {
      throw parameter_error("low-precision operands exceed 8x4 widths");
    }
    return static_cast<std::int32_t>(a) * w;
  }
  const std::int32_t a_msb = a >> 8;
  const std::int32_t a_lsb = a & 0xFF;
  const std::int32_t w_msb = w >> 4;
  const std::int32_t w_lsb = w & 0x0F;
  return ((a_msb * w_msb) << 12) + ((a_msb * w_lsb) << 8) + ((a_lsb * w_msb) << 4) + a_lsb * w_lsb;
}

struct MpGemmStats {
  std::uint64_t high_precision_macs{0};  // 16x8 multiplies (4 slice passes each)
  std::uint64_t slice_passes{0};
  std::uint64_t low_precision_macs{0};   // 8x4 multiplies (1 pass each)
  std::uint64_t lane_alignments{0};      // plain-lane partial shifted into the accumulator
  std::uint64_t fp_scalings{0};          // terminal scale multiply per output

  MpGemmStats& operator+=(const MpGemmStats& o) noexcept {
    high_precision_macs += o.high_precision_macs;
    slice_passes += o.slice_passes;
    low_precision_macs += o.low_precision_macs;
    lane_alignments += o.lane_alignments;
    fp_scalings += o.fp_scalings;
    return *this;
  }
  friend bool operator==(const MpGemmStats&, const MpGemmStats&) = default;
};

struct MpGemmResult {
  Tensor2D output;
  MpGemmStats stats;
};

// Integer GEMM over aligned activations and mixed-width weights. Sensitive
// channels run in high-precision slice mode, then plain channels in
// low-precision mode; the plain partial is shifted onto the sensitive
// exponent, and each output gets one FP multiply by 2^e * scale_j.
inline MpGemmResult mp_gemm(const AlignedActivations& acts, const QuantizedLowRank& w,
                            unsigned threads = 1) {
  if (!(acts.layout == w.layout)) throw parameter_error("mp_gemm: activation and weight layouts differ");
  const std::size_t ns = w.layout.sensitive_count();
  const std::size_t np = w.layout.plain_count();
  Tensor2D out(acts.rows, w.d_out);
  detail::parallel_for(acts.rows, threads, [&](std::size_t r) {
    const std::int16_t* hi = acts.a_hi.data() + r * ns;
    const std::int8_t* lo = acts.a_lo.data() + r * np;
    const double exp_scale = std::ldexp(1.0, acts.shared_exp[r]);
    for (std::size_t j = 0; j < w.d_out; ++j) {
      std::int64_t acc_hi = 0;
      for (std::size_t p = 0; p < ns; ++p) {
        acc_hi += bitslice_mac(hi[p], w.w_hi[p * w.d_out + j], SliceMode::high_precision);
      }
      std::int64_t acc_lo = 0;
      for (std::size_t p = 0; p < np; ++p) {
        acc_lo += bitslice_mac(lo[p], w.w_lo[p * w.d_out + j], SliceMode::low_precision);
      }
      const std::int64_t acc = acc_hi + acc_lo * (std::int64_t{1} << kLowLaneShift);
      out(r, j) = static_cast<float>(static_cast<double>(acc) * exp_scale * static_cast<double>(w.w_scale[j]));
    }
  });

  const std::uint64_t outputs = static_cast<std::uint64_t>(acts.rows) * w.d_out;
  MpGemmStats stats;
  stats.high_precision_macs = outputs * ns;
  stats.slice_passes = stats.high_precision_macs * slice_passes(SliceMode::high_precision);
  stats.low_precision_macs = outputs * np;
  stats.lane_alignments = np > 0 ? outputs : 0;
  stats.fp_scalings = outputs;
  return MpGemmResult{std::move(out), stats};
}

struct LowRankResult {
  Tensor2D output;
  MpGemmStats stats;
  std::uint64_t aligned_elements{0};  // activation elements converted online
};

// x * L1 * L2 on the mixed-precision path; the intermediate is re-aligned
// with the L2 layout.
inline LowRankResult lowrank_forward(const Tensor2D& x, const QuantizedLowRank& l1q,
                                     const QuantizedLowRank& l2q, unsigned threads = 1) {
  if (x.cols() != l1q.layout.d_in) {
    throw shape_error("lowrank_forward: input has " + std::to_string(x.cols()) +
                      " channels, L1 expects " + std::to_string(l1q.layout.d_in));
  }
  if (l1q.d_out != l2q.layout.d_in) {
    throw shape_error("lowrank_forward: L1 rank " + std::to_string(l1q.d_out) +
                      " does not match L2 input " + std::to_string(l2q.layout.d_in));
  }
  MpGemmResult h = mp_gemm(align_activations(x, l1q.layout), l1q, threads);
  MpGemmResult y = mp_gemm(align_activations(h.output, l2q.layout), l2q, threads);
  MpGemmStats stats = h.stats;
  stats += y.stats;
  return LowRankResult{std::move(y.output), stats, x.size() + h.output.size()};
}

// SMP1 layout (little-endian): "SMP1", u32 d_in, u32 d_out, u32 sensitive
// count, u32 permutation[d_in], f32 scale[d_out], i8 sensitive codes
// (sensitive x d_out), plain 4-bit codes packed two per byte, low nibble first.
inline constexpr std::string_view kLowRankMagic = "SMP1";

inline std::vector<std::uint8_t> encode_lowrank(const QuantizedLowRank& q) {
  detail::ByteWriter w;
  w.magic(kLowRankMagic);
  w.u32(detail::checked_u32(q.layout.d_in, "d_in"));
  w.u32(detail::checked_u32(q.d_out, "d_out"));
  w.u32(detail::checked_u32(q.layout.sensitive_count(), "sensitive count"));
  for (std::size_t p : q.layout.permutation) w.u32(detail::checked_u32(p, "permutation"));
  for (float s : q.w_scale) w.f32(s);
  for (std::int8_t c : q.w_hi) w.u8(static_cast<std::uint8_t>(c));
  for (std::size_t i = 0; i < q.w_lo.size(); i += 2) {
    const auto lo = static_cast<std::uint8_t>(q.w_lo[i] & 0x0F);
    const auto hi = i + 1 < q.w_lo.size() ? static_cast<std::uint8_t>(q.w_lo[i + 1] & 0x0F) : 0;
    w.u8(static_cast<std::uint8_t>(lo | (hi << 4)));
  }
  return w.bytes();
}

inline QuantizedLowRank decode_lowrank(std::vector<std::uint8_t> bytes, std::string source = "<memory>") {
  detail::ByteReader r(std::move(bytes), std::move(source));
  r.expect_magic(kLowRankMagic);
  const std::size_t d_in = r.u32();
  const std::size_t d_out = r.u32();
  const std::size_t ns = r.u32();
  if (d_in == 0 || d_out == 0 || ns > d_in) throw io_error(r.source() + ": bad SMP1 header");
  std::vector<std::size_t> perm(d_in);
  for (std::size_t& p : perm) p = r.u32();

  QuantizedLowRank q;
  try {
    q.layout = build_mp_layout(std::vector<std::size_t>(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(ns)), d_in);
  } catch (const parameter_error& e) {
    throw io_error(r.source() + ": " + e.what());
  }
  if (q.layout.permutation != perm) {
    throw io_error(r.source() + ": plain channels are not in ascending order");
  }
  q.d_out = d_out;
  q.w_scale.resize(d_out);
  for (float& s : q.w_scale) {
    s = r.f32();
    if (!std::isfinite(s) || s < 0.0f) throw io_error(r.source() + ": bad column scale");
  }
  q.w_hi.resize(ns * d_out);
  for (std::int8_t& c : q.w_hi) {
    c = static_cast<std::int8_t>(r.u8());
    if (c < -kWeightHiMax) throw io_error(r.source() + ": 8-bit code out of range");
  }
  q.w_lo.resize((d_in - ns) * d_out);
  for (std::size_t i = 0; i < q.w_lo.size(); i += 2) {
    const std::uint8_t byte = r.u8();
    for (std::size_t k = 0; k < 2 && i + k < q.w_lo.size(); ++k) {
      const int nibble = (byte >> (4 * k)) & 0x0F;
      const int code = nibble >= 8 ? nibble - 16 : nibble;
      if (code < -kWeightLoMax) throw io_error(r.source() + ": 4-bit code out of range");
      q.w_lo[i + k] = static_cast<std::int8_t>(code);
    }
  }
  r.expect_end();
  return q;
}

inline void save_lowrank(const std::filesystem::path& path, const QuantizedLowRank& q) {
  detail::write_file(path, encode_lowrank(q));
}

inline QuantizedLowRank load_lowrank(const std::filesystem::path& path) {
  return decode_lowrank(detail::read_file(path), path.string());
}

}  // namespace splitq
