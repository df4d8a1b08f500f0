#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "splitq/cost_model.hpp"
#include "splitq/hgq.hpp"
#include "splitq/svd.hpp"
#include "splitq/svd_mp.hpp"
#include "splitq/synthetic.hpp"

namespace splitq {

struct CheckResult {
  std::string name;
  bool passed{false};
  std::string detail;
};

struct SelftestOptions {
  std::optional<std::filesystem::path> cost_table;
  std::uint64_t seed{2024};
};

struct SelftestSummary {
  std::vector<CheckResult> checks;

  [[nodiscard]] bool passed() const {
    for (const auto& c : checks) {
      if (!c.passed) return false;
    }
    return !checks.empty();
  }
};

// Every 16-bit x 8-bit operand pair through the high-precision slice path.
// Returns the number of pairs that matched the full-width product.
inline std::uint64_t bitslice_exhaustive_matches() {
  std::uint64_t matches = 0;
  for (int a = -32768; a <= 32767; ++a) {
    for (int w = -128; w <= 127; ++w) {
      const std::int32_t got =
          bitslice_mac(static_cast<std::int16_t>(a), static_cast<std::int8_t>(w), SliceMode::high_precision);
      matches += got == a * w ? 1u : 0u;
    }
  }
  return matches;
}

// Random base groups with mixed magnitudes and injected outliers.
inline Tensor2D hgq_stress_tensor(std::size_t groups, std::size_t group_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_int_distribution<int> decade(-3, 3);
  std::uniform_int_distribution<std::size_t> pick(0, group_len - 1);
  Tensor2D t(groups, group_len);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t s0 = 0; s0 < group_len; s0 += 32) {
      const double scale = std::pow(10.0, decade(rng));
      for (std::size_t i = s0; i < std::min(group_len, s0 + 32); ++i) t(g, i) = static_cast<float>(unit(rng) * scale);
    }
    if (g % 3 == 0) t(g, pick(rng)) *= 100.0f;
  }
  return t;
}

// Counts elements violating the code/shift range or the reconstruction
// bound |x - dq| <= 0.5 * s_sub + 2^-11 * m_base.
inline std::uint64_t hgq_violations(const Tensor2D& x, const HgqTensor& q) {
  std::uint64_t bad = 0;
  const int max_code = q.config.max_code();
  for (auto c : q.codes) bad += (c < -max_code || c > max_code) ? 1u : 0u;
  for (auto d : q.shift) bad += d > q.config.max_shift() ? 1u : 0u;
  const Tensor2D dq = hgq_dequantize(q);
  const std::size_t len = q.length();
  for (std::size_t v = 0; v < q.vectors(); ++v) {
    for (std::size_t b = 0; b < q.base_groups(); ++b) {
      const std::size_t begin = b * q.config.base_group;
      const std::size_t end = std::min(len, begin + q.config.base_group);
      double m_base = 0.0;
      for (std::size_t i = begin; i < end; ++i) m_base = std::max(m_base, std::fabs(static_cast<double>(x(v, i))));
      for (std::size_t i = begin; i < end; ++i) {
        const double err = std::fabs(static_cast<double>(x(v, i)) - dq(v, i));
        const double bound = 0.5 * sub_scale(q, v, i) + std::ldexp(m_base, -11);
        bad += err > bound * (1.0 + 1e-12) ? 1u : 0u;
      }
    }
  }
  return bad;
}

inline SelftestSummary selftest(const SelftestOptions& opt = {}) {
  SelftestSummary out;
  auto run = [&](const std::string& name, const std::function<CheckResult()>& fn) {
    try {
      CheckResult r = fn();
      r.name = name;
      out.checks.push_back(std::move(r));
    } catch (const std::exception& e) {
      out.checks.push_back(CheckResult{name, false, std::string("exception: ") + e.what()});
    }
  };

  run("bitslice_exhaustive", [] {
    const std::uint64_t matches = bitslice_exhaustive_matches();
    return CheckResult{"", matches == (1ull << 24), std::to_string(matches) + " of 16777216 pairs exact"};
  });

  run("hgq_range_roundtrip", [&] {
    const Tensor2D x = hgq_stress_tensor(7813, 128, opt.seed);
    const HgqTensor q = hgq_quantize(x, HgqConfig{}, GroupAxis::cols);
    const std::uint64_t bad = hgq_violations(x, q);
    return CheckResult{"", bad == 0, std::to_string(x.size()) + " elements, " + std::to_string(bad) + " violations"};
  });

  run("svd_oracle_64x64", [&] {
    SyntheticSpec spec{64, 64, opt.seed, 0, 1.0, 1.0};
    const Tensor2D w = gen_synthetic(spec);
    const ThinSvd full = thin_svd(w);
    const DecomposedWeight d = decompose(w, 16);
    double energy = 0.0;
    for (double s : full.sigma) energy += s * s;
    const double fro = frobenius_norm(w);
    const double energy_err = std::fabs(energy - fro * fro) / (fro * fro);
    const double tail = tail_norm(full.sigma, 16);
    const double tail_err = std::fabs(frobenius_norm(d.residual) - tail) / tail;
    const double recon = max_abs_difference(add(matmul_ref(d.factors.l1, d.factors.l2), d.residual), w);
    const bool ok = full.converged && energy_err < 1e-9 && tail_err < 1e-6 && recon <= 1e-4 * w.max_abs();
    return CheckResult{"", ok, "tail rel err " + std::to_string(tail_err) + ", max recon err " + std::to_string(recon)};
  });

  run("fused_gemm_oracle", [&] {
    SyntheticSpec as{8, 512, opt.seed + 1, 8, 50.0, 1.0};
    SyntheticSpec ws{512, 8, opt.seed + 2, 0, 1.0, 0.5};
    const Tensor2D a = gen_synthetic(as);
    const Tensor2D w = gen_synthetic(ws);
    const HgqTensor qa = hgq_quantize(a, HgqConfig{}, GroupAxis::cols);
    const HgqTensor qw = hgq_quantize(w, HgqConfig{}, GroupAxis::rows);
    const Tensor2D fused = hgq_gemm(qa, qw).output;
    const Tensor2D ref = matmul_ref(hgq_dequantize(qa), hgq_dequantize(qw));
    const double rel_hgq = frobenius_distance(fused, ref) / frobenius_norm(ref);

    std::vector<std::size_t> sens(128);
    for (std::size_t i = 0; i < sens.size(); ++i) sens[i] = i;
    const MpLayout layout = build_mp_layout(sens, 512);
    const AlignedActivations aa = align_activations(a, layout);
    const QuantizedLowRank qlr = quantize_lowrank_weights(w, layout);
    const Tensor2D mp = mp_gemm(aa, qlr).output;
    const Tensor2D mp_ref = matmul_ref(dequantize_activations(aa), dequantize_lowrank_weights(qlr));
    const double rel_mp = frobenius_distance(mp, mp_ref) / frobenius_norm(mp_ref);
    return CheckResult{"", rel_hgq <= 1e-6 && rel_mp <= 1e-6,
                       "hgq rel err " + std::to_string(rel_hgq) + ", mp rel err " + std::to_string(rel_mp)};
  });

  run("fp_accumulation_ratio", [&] {
    SyntheticSpec as{4, 512, opt.seed + 3, 0, 1.0, 1.0};
    SyntheticSpec ws{512, 4, opt.seed + 4, 0, 1.0, 1.0};
    const Tensor2D a = gen_synthetic(as);
    const Tensor2D w = gen_synthetic(ws);
    const auto hgq = hgq_gemm(hgq_quantize(a, HgqConfig{}, GroupAxis::cols),
                              hgq_quantize(w, HgqConfig{}, GroupAxis::rows)).stats;
    const auto g32 = hgq_gemm(baseline_quantize(a, BaselineMode::per_group(32), GroupAxis::cols),
                              baseline_quantize(w, BaselineMode::per_group(32), GroupAxis::rows)).stats;
    return CheckResult{"", hgq.fp_accumulations * 4 == g32.fp_accumulations,
                       std::to_string(hgq.fp_accumulations) + " vs " + std::to_string(g32.fp_accumulations)};
  });

  run("cost_table", [&] {
    const CostTable t = opt.cost_table ? load_cost_table(*opt.cost_table) : CostTable::defaults();
    t.validate();
    return CheckResult{"", true, std::to_string(t.entries().size()) + " entries valid"};
  });

  return out;
}

}  // namespace splitq
