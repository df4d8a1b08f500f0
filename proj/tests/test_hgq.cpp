#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "splitq/hgq.hpp"
#include "splitq/synthetic.hpp"

using namespace splitq;

namespace {

// Rows of mixed-magnitude groups with occasional outliers.
Tensor2D mixed_tensor(std::size_t rows, std::size_t cols, std::size_t group, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> decade(-4, 4);
  std::uniform_int_distribution<int> coin(0, 9);
  Tensor2D t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < cols; g += group) {
      const double scale = std::pow(10.0, decade(rng));
      for (std::size_t c = g; c < std::min(cols, g + group); ++c) {
        double v = u(rng) * scale;
        if (coin(rng) == 0) v *= 40.0;
        if (coin(rng) == 0) v = 0.0;
        t(r, c) = float(v);
      }
    }
  }
  return t;
}

// Dequantize-then-multiply in long double.
Tensor2D gemm_oracle(const HgqTensor& a, const HgqTensor& w) {
  const Tensor2D da = hgq_dequantize(a);
  const Tensor2D dw = hgq_dequantize(w);
  Tensor2D out(da.rows(), dw.cols());
  for (std::size_t i = 0; i < da.rows(); ++i) {
    for (std::size_t j = 0; j < dw.cols(); ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < da.cols(); ++p) s += (long double)da(i, p) * dw(p, j);
      out(i, j) = float(s);
    }
  }
  return out;
}

double rel_fro(const Tensor2D& a, const Tensor2D& ref) {
  const double n = frobenius_norm(ref);
  return n == 0.0 ? frobenius_norm(a) : frobenius_distance(a, ref) / n;
}

}  // namespace

TEST(HgqQuantize, HandExample) {
  const HgqConfig cfg{2, 4, 2, 4};
  const HgqTensor q = hgq_quantize(Tensor2D::from_rows({{7.0f, -3.5f, 0.8f, -0.9f}}), cfg);
  ASSERT_EQ(q.bsf.size(), 1u);
  EXPECT_EQ(q.bsf[0].bits, 0x3C00);
  EXPECT_EQ(q.shift, (std::vector<std::uint8_t>{0, 2}));
  EXPECT_EQ(q.codes, (std::vector<std::int8_t>{7, -4, 3, -4}));
  EXPECT_EQ(hgq_dequantize(q), Tensor2D::from_rows({{7.0f, -4.0f, 0.75f, -1.0f}}));
}

TEST(HgqQuantize, ZeroGroup) {
  Tensor2D x(2, 256);
  for (std::size_t c = 128; c < 256; ++c) x(1, c) = 1.0f;
  const HgqTensor q = hgq_quantize(x);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_EQ(q.bsf[b].bits, 0);
  EXPECT_EQ(q.bsf[2].bits, 0);
  for (std::size_t s = 0; s < 8; ++s) EXPECT_EQ(q.shift[s], 0);
  for (std::size_t i = 0; i < 256 + 128; ++i) EXPECT_EQ(q.codes[i], 0);
  EXPECT_EQ(hgq_dequantize(hgq_quantize(Tensor2D(3, 64))), Tensor2D(3, 64));
}

TEST(HgqQuantize, ConfigAndShapeErrors) {
  EXPECT_THROW(hgq_quantize(Tensor2D(1, 64), HgqConfig{32, 96 + 1, 2, 4}), parameter_error);
  EXPECT_THROW(hgq_quantize(Tensor2D(1, 64), HgqConfig{0, 128, 2, 4}), parameter_error);
  EXPECT_THROW(hgq_quantize(Tensor2D(1, 64), HgqConfig{32, 128, 5, 4}), parameter_error);
  EXPECT_THROW(hgq_quantize(Tensor2D(1, 48)), shape_error);
  EXPECT_THROW(hgq_quantize(Tensor2D(48, 1), HgqConfig{}, GroupAxis::rows), shape_error);
}

TEST(HgqQuantize, TrailingPartialBaseGroup) {
  Tensor2D x(1, 160);
  for (std::size_t c = 0; c < 160; ++c) x(0, c) = float(c < 128 ? 1.0 : 0.1 * (c - 127));
  const HgqTensor q = hgq_quantize(x);
  ASSERT_EQ(q.base_groups(), 2u);
  ASSERT_EQ(q.sub_groups(), 5u);
  EXPECT_EQ(q.bsf[1].bits, to_half_rtne(double(x(0, 159)) / 7.0).bits);
  EXPECT_EQ(q.shift[4], 0);
}

TEST(HgqQuantize, AxesAreTransposes) {
  const Tensor2D x = mixed_tensor(64, 256, 32, 5);
  const HgqTensor by_cols = hgq_quantize(x);
  const HgqTensor by_rows = hgq_quantize(transpose(x), HgqConfig{}, GroupAxis::rows);
  EXPECT_EQ(by_cols.codes, by_rows.codes);
  EXPECT_EQ(by_cols.shift, by_rows.shift);
  EXPECT_EQ(by_cols.bsf, by_rows.bsf);
  EXPECT_EQ(transpose(hgq_dequantize(by_cols)), hgq_dequantize(by_rows));
  EXPECT_EQ(by_rows.code_at(5, 3), by_cols.code_at(3, 5));
}

TEST(HgqQuantize, RangeOverAMillionBaseGroups) {
  // 10^6 base groups of 32 (sub-groups of 8), in chunks.
  const HgqConfig cfg{8, 32, 2, 4};
  std::uint64_t groups = 0;
  for (std::uint64_t chunk = 0; chunk < 100; ++chunk) {
    const Tensor2D x = mixed_tensor(1000, 320, 8, 1000 + chunk);
    const HgqTensor q = hgq_quantize(x, cfg);
    for (auto c : q.codes) ASSERT_TRUE(c >= -7 && c <= 7);
    for (auto d : q.shift) ASSERT_LE(d, 3);
    groups += q.vectors() * q.base_groups();
  }
  EXPECT_EQ(groups, 1000000u);
}

TEST(HgqQuantize, ReconstructionBound) {
  // |x - dq| <= 0.5 * s_sub + 2^-11 * m_base on >= 10^6 elements.
  std::uint64_t checked = 0;
  for (std::uint64_t chunk = 0; chunk < 4; ++chunk) {
    const Tensor2D x = mixed_tensor(2048, 128, 32, 50 + chunk);
    const HgqTensor q = hgq_quantize(x);
    const Tensor2D dq = hgq_dequantize(q);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double m_base = 0.0;
      for (std::size_t c = 0; c < 128; ++c) m_base = std::max(m_base, double(std::fabs(x(r, c))));
      for (std::size_t c = 0; c < 128; ++c) {
        const double s = to_float(q.bsf[r]) * std::exp2(-double(q.shift[r * 4 + c / 32]));
        ASSERT_LE(std::fabs(double(x(r, c)) - dq(r, c)), (0.5 * s + std::ldexp(m_base, -11)) * (1 + 1e-12));
        ++checked;
      }
    }
  }
  EXPECT_GE(checked, 1000000u);
}

TEST(HgqQuantize, ShiftIsFloorLog2) {
  const Tensor2D x = mixed_tensor(500, 256, 32, 9);
  const HgqTensor q = hgq_quantize(x);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t b = 0; b < 2; ++b) {
      double m_base = 0.0;
      for (std::size_t c = b * 128; c < (b + 1) * 128; ++c) m_base = std::max(m_base, double(std::fabs(x(r, c))));
      for (std::size_t s = b * 4; s < (b + 1) * 4; ++s) {
        double m_sub = 0.0;
        for (std::size_t c = s * 32; c < (s + 1) * 32; ++c) m_sub = std::max(m_sub, double(std::fabs(x(r, c))));
        const int d = q.shift[r * 8 + s];
        if (m_sub == 0.0) {
          EXPECT_EQ(d, 0);
          continue;
        }
        EXPECT_LE(m_sub, std::ldexp(m_base, -d));
        if (d < 3) {
          EXPECT_GT(m_sub, std::ldexp(m_base, -(d + 1)));
        }
      }
    }
  }
}

TEST(HgqQuantize, ErrorOrderingOnOutlierData) {
  double per_tensor = 0, g128 = 0, hgq = 0, g32 = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const Tensor2D x = gen_synthetic(SyntheticSpec{256, 256, seed, 8, 100.0, 1.0});
    per_tensor += mean_squared_error(hgq_dequantize(baseline_quantize(x, BaselineMode::per_tensor())), x);
    g128 += mean_squared_error(hgq_dequantize(baseline_quantize(x, BaselineMode::per_group(128))), x);
    hgq += mean_squared_error(hgq_dequantize(hgq_quantize(x)), x);
    g32 += mean_squared_error(hgq_dequantize(baseline_quantize(x, BaselineMode::per_group(32))), x);
  }
  EXPECT_GT(per_tensor, g128);
  EXPECT_GT(g128, hgq);
  EXPECT_GE(hgq, g32);
}

TEST(Baseline, Examples) {
  const HgqTensor t = baseline_quantize(Tensor2D::from_rows({{14.0f, -7.0f}}), BaselineMode::per_tensor());
  EXPECT_EQ(to_float(t.bsf[0]), 2.0f);
  EXPECT_EQ(t.codes, (std::vector<std::int8_t>{7, -4}));

  const HgqTensor g = baseline_quantize(Tensor2D::from_rows({{14.0f, -7.0f, 0.5f, 0.25f}}), BaselineMode::per_group(2));
  ASSERT_EQ(g.bsf.size(), 2u);
  EXPECT_EQ(to_float(g.bsf[0]), 2.0f);
  EXPECT_NEAR(to_float(g.bsf[1]), 0.5 / 7.0, 1e-4);
  EXPECT_EQ(g.codes, (std::vector<std::int8_t>{7, -4, 7, 4}));
  for (auto d : g.shift) EXPECT_EQ(d, 0);
}

TEST(Baseline, WholeVectorGroupEqualsPerTensorOnOneVector) {
  const Tensor2D x = mixed_tensor(1, 96, 32, 3);
  const HgqTensor a = baseline_quantize(x, BaselineMode::per_group(96));
  EXPECT_EQ(a, baseline_quantize(x, BaselineMode::per_tensor()));
  EXPECT_EQ(a, baseline_quantize(x, BaselineMode::per_vector()));
}

TEST(Baseline, PerTensorSharesOneScale) {
  const Tensor2D x = mixed_tensor(6, 64, 64, 4);
  const HgqTensor t = baseline_quantize(x, BaselineMode::per_tensor());
  for (const Half h : t.bsf) EXPECT_EQ(h, to_half_rtne(x.max_abs() / 7.0));
  EXPECT_THROW(baseline_quantize(x, BaselineMode::per_group(0)), parameter_error);
}

TEST(HgqGemm, SingleDotStats) {
  const Tensor2D a = mixed_tensor(1, 128, 32, 1);
  const Tensor2D w = transpose(mixed_tensor(1, 128, 32, 2));
  const auto r = hgq_gemm(hgq_quantize(a), hgq_quantize(w, HgqConfig{}, GroupAxis::rows));
  EXPECT_EQ(r.stats.fp_accumulations, 1u);
  EXPECT_EQ(r.stats.shift_alignments, 4u);
  EXPECT_EQ(r.stats.int_mac_count, 128u);
  EXPECT_EQ(r.stats.int_accumulations, 4u);

  const auto z = hgq_gemm(hgq_quantize(Tensor2D(1, 128)), hgq_quantize(w, HgqConfig{}, GroupAxis::rows));
  EXPECT_EQ(z.output(0, 0), 0.0f);
  EXPECT_EQ(z.stats, r.stats);
}

TEST(HgqGemm, MatchesDequantizedOracle) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> dim(1, 9);
  for (std::uint64_t trial = 0; trial < 30; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng);
    const std::size_t len = 32 * std::size_t(dim(rng) + (trial == 0 ? 0 : 3));
    const HgqTensor qa = hgq_quantize(mixed_tensor(m, len, 32, trial * 2));
    const HgqTensor qw = hgq_quantize(transpose(mixed_tensor(n, len, 32, trial * 2 + 1)), HgqConfig{}, GroupAxis::rows);
    const Tensor2D got = hgq_gemm(qa, qw).output;
    EXPECT_LE(rel_fro(got, gemm_oracle(qa, qw)), 1e-6) << m << "x" << len << "x" << n;
  }
  const HgqTensor qa = hgq_quantize(mixed_tensor(4, 256, 32, 100));
  const HgqTensor qw = hgq_quantize(mixed_tensor(256, 4, 256, 101), HgqConfig{}, GroupAxis::rows);
  EXPECT_LE(rel_fro(hgq_gemm(qa, qw).output, gemm_oracle(qa, qw)), 1e-6);
}

TEST(HgqGemm, BaselineGemmMatchesOracle) {
  const Tensor2D a = mixed_tensor(5, 256, 64, 7);
  const Tensor2D w = transpose(mixed_tensor(3, 256, 64, 8));
  for (auto mode : {BaselineMode::per_tensor(), BaselineMode::per_vector(), BaselineMode::per_group(32),
                    BaselineMode::per_group(128)}) {
    const HgqTensor qa = baseline_quantize(a, mode);
    const HgqTensor qw = baseline_quantize(w, mode, GroupAxis::rows);
    const auto r = hgq_gemm(qa, qw);
    EXPECT_LE(rel_fro(r.output, gemm_oracle(qa, qw)), 1e-6);
    EXPECT_EQ(r.stats.shift_alignments, 0u);
  }
}

TEST(HgqGemm, ThreadInvariant) {
  const HgqTensor qa = hgq_quantize(mixed_tensor(33, 512, 32, 11));
  const HgqTensor qw = hgq_quantize(mixed_tensor(512, 7, 512, 12), HgqConfig{}, GroupAxis::rows);
  const auto one = hgq_gemm(qa, qw, 1);
  for (unsigned t : {2u, 5u, 16u}) {
    const auto many = hgq_gemm(qa, qw, t);
    EXPECT_EQ(many.output, one.output);
    EXPECT_EQ(many.stats, one.stats);
  }
}

TEST(HgqGemm, FpAccumulationsQuarterOfG32) {
  for (auto [m, len, n] : std::vector<std::array<std::size_t, 3>>{{1, 128, 1}, {3, 512, 5}, {8, 1024, 2}}) {
    const Tensor2D a = mixed_tensor(m, len, 32, len + m);
    const Tensor2D w = transpose(mixed_tensor(n, len, 32, len + n + 1));
    const auto h = hgq_gemm(hgq_quantize(a), hgq_quantize(w, HgqConfig{}, GroupAxis::rows)).stats;
    const auto g = hgq_gemm(baseline_quantize(a, BaselineMode::per_group(32)),
                            baseline_quantize(w, BaselineMode::per_group(32), GroupAxis::rows)).stats;
    EXPECT_EQ(h.fp_accumulations * 4, g.fp_accumulations);
    EXPECT_EQ(h.fp_accumulations, (len / 128) * m * n);
    EXPECT_EQ(h.int_mac_count, g.int_mac_count);
  }
}

TEST(HgqGemm, Errors) {
  const HgqTensor a = hgq_quantize(Tensor2D(2, 128));
  const HgqTensor w = hgq_quantize(Tensor2D(128, 2), HgqConfig{}, GroupAxis::rows);
  EXPECT_THROW(hgq_gemm(a, hgq_quantize(Tensor2D(128, 2), HgqConfig{32, 64, 2, 4}, GroupAxis::rows)), parameter_error);
  EXPECT_THROW(hgq_gemm(w, a), parameter_error);
  EXPECT_THROW(hgq_gemm(a, hgq_quantize(Tensor2D(256, 2), HgqConfig{}, GroupAxis::rows)), shape_error);
  EXPECT_NO_THROW(hgq_gemm(a, w));
}

TEST(HgqGemmStats, MergeByAddition) {
  HgqGemmStats a{1, 2, 3, 4};
  const HgqGemmStats b{10, 20, 30, 40};
  a += b;
  EXPECT_EQ(a, (HgqGemmStats{11, 22, 33, 44}));
}

TEST(Hgq1, GoldenBytes) {
  const HgqTensor q = hgq_quantize(Tensor2D::from_rows({{7.0f, -3.5f, 0.8f, -0.9f}}), HgqConfig{2, 4, 2, 4});
  const std::vector<std::uint8_t> expected = {
      'H', 'G', 'Q', '1',
      2, 0, 0, 0,  4, 0, 0, 0,  2, 0, 0, 0,  4, 0, 0, 0,  // sub, base, shift bits, code bits
      1, 0, 0, 0,  1, 0, 0, 0,  4, 0, 0, 0,               // axis, rows, cols
      0xC7, 0xC3,                                          // codes 7,-4 | 3,-4
      0x08,                                                // shifts 0,2
      0x00, 0x3C,                                          // bsf 1.0
  };
  EXPECT_EQ(encode_hgq(q), expected);
  EXPECT_EQ(decode_hgq(expected), q);
}

TEST(Hgq1, RoundTrip) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const Tensor2D x = mixed_tensor(3 + seed, 160, 32, seed);
    const HgqTensor q = hgq_quantize(x);
    EXPECT_EQ(decode_hgq(encode_hgq(q)), q);
    const HgqTensor r = hgq_quantize(transpose(x), HgqConfig{}, GroupAxis::rows);
    EXPECT_EQ(decode_hgq(encode_hgq(r)), r);
    const HgqTensor b = baseline_quantize(x, BaselineMode::per_group(32));
    EXPECT_EQ(decode_hgq(encode_hgq(b)), b);
  }
  const auto path = std::filesystem::temp_directory_path() / "splitq_test.hgq";
  const HgqTensor q = hgq_quantize(mixed_tensor(2, 64, 32, 1));
  save_hgq(path, q);
  EXPECT_EQ(load_hgq(path), q);
  std::filesystem::remove(path);
}

TEST(Hgq1, CorruptInputs) {
  const HgqTensor q = hgq_quantize(Tensor2D::from_rows({{7.0f, -3.5f, 0.8f, -0.9f}}), HgqConfig{2, 4, 2, 4});
  const auto good = encode_hgq(q);
  auto bad = good;
  bad[32] = 0x88;  // code -8
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad[4] = 3;  // base 4 not a multiple of sub 3
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad[20] = 2;  // axis
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad[36] = 0x7C;  // infinite bsf
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad.pop_back();
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad.push_back(0);
  EXPECT_THROW(decode_hgq(bad), io_error);
  bad = good;
  bad[3] = '2';
  EXPECT_THROW(decode_hgq(bad), io_error);

  HgqTensor wide = hgq_quantize(Tensor2D(1, 32), HgqConfig{32, 32, 0, 8});
  EXPECT_THROW(encode_hgq(wide), parameter_error);
}
