#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitq/cost_model.hpp"
#include "splitq/half.hpp"
#include "splitq/hgq.hpp"
#include "splitq/svd.hpp"
#include "splitq/svd_mp.hpp"
#include "splitq/synthetic.hpp"
#include "splitq/tensor.hpp"
#include "splitq/tensor_io.hpp"

namespace splitq {

// Synthetic layer used when no tensor files are given. The leading
// `salient_channels` input channels carry an outlier gain that is shared
// between the operands: activation columns get gain^activation_share and
// weight rows gain^(1 - activation_share). A share of 0.5 is the balanced
// split a per-channel smoothing migration produces; 1.0 leaves every outlier
// in the activations.
struct SyntheticLayer {
  std::size_t tokens{64};
  std::size_t d_in{256};
  std::size_t d_out{256};
  std::size_t salient_channels{8};
  double salient_gain{100.0};
  double activation_share{0.5};
  double base_std{1.0};

  [[nodiscard]] double activation_gain() const { return std::pow(salient_gain, activation_share); }
  [[nodiscard]] double weight_gain() const { return std::pow(salient_gain, 1.0 - activation_share); }
};

inline const std::vector<std::string>& all_scenarios() {
  static const std::vector<std::string> names = {
      "fp32",
      "int4_per_tensor", "int4_g128", "int4_g64", "int4_g32", "hgq",
      "int4_per_tensor_svd", "int4_g128_svd", "int4_g64_svd", "int4_g32_svd", "hgq_svd",
      "fp16_lowrank", "int16_8_lowrank", "int8_4_lowrank",
  };
  return names;
}

struct RunConfig {
  std::optional<std::filesystem::path> weight;
  std::optional<std::filesystem::path> input;
  std::optional<std::filesystem::path> calibration;
  std::optional<SyntheticLayer> synthetic;
  std::size_t rank{kDefaultRank};
  HgqConfig hgq{};
  std::size_t l1_sensitive{kDefaultL1Sensitive};
  std::size_t l2_sensitive{kDefaultL2Sensitive};
  std::vector<std::string> scenarios{all_scenarios()};
  std::optional<std::filesystem::path> cost_table;
  std::uint64_t seed{1};
  std::optional<std::filesystem::path> report;
  SigmaPlacement sigma_placement{SigmaPlacement::split};
  unsigned threads{1};

  void validate() const {
    if (rank < 1) throw parameter_error("rank must be >= 1");
    hgq.validate();
    if (!synthetic && (!weight || !input)) {
      throw parameter_error("config needs either 'synthetic' or both 'weight' and 'input'");
    }
    std::set<std::string> seen;
    for (const auto& s : scenarios) {
      if (std::find(all_scenarios().begin(), all_scenarios().end(), s) == all_scenarios().end()) {
        throw parameter_error("unknown scenario '" + s + "'");
      }
      if (!seen.insert(s).second) throw parameter_error("scenario '" + s + "' listed twice");
    }
    if (threads == 0) throw parameter_error("threads must be >= 1");
  }
};

inline std::string to_string(SigmaPlacement p) { return p == SigmaPlacement::split ? "split" : "into_l2"; }

inline SigmaPlacement sigma_placement_from_string(const std::string& s) {
  if (s == "split") return SigmaPlacement::split;
  if (s == "into_l2") return SigmaPlacement::into_l2;
  throw parameter_error("sigma_placement must be 'split' or 'into_l2', got '" + s + "'");
}

inline HgqConfig hgq_config_from_json(const nlohmann::json& j) {
  HgqConfig c;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number_unsigned()) throw parameter_error("hgq." + k + " must be a non-negative integer");
    if (k == "sub_group") c.sub_group = v.get<std::size_t>();
    else if (k == "base_group") c.base_group = v.get<std::size_t>();
    else if (k == "shift_bits") c.shift_bits = v.get<std::size_t>();
    else if (k == "code_bits") c.code_bits = v.get<std::size_t>();
    else throw parameter_error("unknown hgq key '" + k + "'");
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const HgqConfig& c) {
  return {{"sub_group", c.sub_group}, {"base_group", c.base_group},
          {"shift_bits", c.shift_bits}, {"code_bits", c.code_bits}};
}

inline nlohmann::json to_json(const SyntheticLayer& s) {
  return {{"tokens", s.tokens}, {"d_in", s.d_in}, {"d_out", s.d_out},
          {"salient_channels", s.salient_channels}, {"salient_gain", s.salient_gain},
          {"activation_share", s.activation_share}, {"base_std", s.base_std}};
}

namespace detail {

template <typename T>
T json_get(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw parameter_error("config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

// Relative paths resolve against `base_dir` (the config file's directory).
inline RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  if (!j.is_object()) throw parameter_error("run config must be a JSON object");
  RunConfig c;
  auto path_of = [&](const std::string& key) {
    std::filesystem::path p = detail::json_get<std::string>(j, key);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  for (const auto& [k, v] : j.items()) {
    if (k == "weight") c.weight = path_of(k);
    else if (k == "input") c.input = path_of(k);
    else if (k == "calibration") c.calibration = path_of(k);
    else if (k == "cost_table") c.cost_table = path_of(k);
    else if (k == "report") c.report = path_of(k);
    else if (k == "rank") c.rank = detail::json_get<std::size_t>(j, k);
    else if (k == "l1_sensitive") c.l1_sensitive = detail::json_get<std::size_t>(j, k);
    else if (k == "l2_sensitive") c.l2_sensitive = detail::json_get<std::size_t>(j, k);
    else if (k == "seed") c.seed = detail::json_get<std::uint64_t>(j, k);
    else if (k == "threads") c.threads = detail::json_get<unsigned>(j, k);
    else if (k == "scenarios") c.scenarios = detail::json_get<std::vector<std::string>>(j, k);
    else if (k == "sigma_placement") c.sigma_placement = sigma_placement_from_string(detail::json_get<std::string>(j, k));
    else if (k == "hgq") c.hgq = hgq_config_from_json(v);
    else if (k == "synthetic") {
      SyntheticLayer s;
      for (const auto& [sk, sv] : v.items()) {
        if (sk == "tokens") s.tokens = detail::json_get<std::size_t>(v, sk);
        else if (sk == "d_in") s.d_in = detail::json_get<std::size_t>(v, sk);
        else if (sk == "d_out") s.d_out = detail::json_get<std::size_t>(v, sk);
        else if (sk == "salient_channels") s.salient_channels = detail::json_get<std::size_t>(v, sk);
        else if (sk == "salient_gain") s.salient_gain = detail::json_get<double>(v, sk);
        else if (sk == "base_std") s.base_std = detail::json_get<double>(v, sk);
        else if (sk == "activation_share") s.activation_share = detail::json_get<double>(v, sk);
        else throw parameter_error("unknown synthetic key '" + sk + "'");
      }
      if (!(s.activation_share >= 0.0 && s.activation_share <= 1.0)) {
        throw parameter_error("synthetic.activation_share must be in [0, 1]");
      }
      c.synthetic = s;
    } else {
      throw parameter_error("unknown config key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

struct LayerInputs {
  Tensor2D weight;       // d_in x d_out
  Tensor2D input;        // tokens x d_in
  Tensor2D calibration;  // rows x d_in
};

inline LayerInputs synthesize_layer(const SyntheticLayer& s, std::uint64_t seed) {
  SyntheticSpec xs{s.tokens, s.d_in, seed, s.salient_channels, s.activation_gain(), s.base_std};
  SyntheticSpec ws{s.d_out, s.d_in, seed ^ 0x9E3779B97F4A7C15ull, s.salient_channels, s.weight_gain(),
                   s.base_std};
  Tensor2D x = gen_synthetic(xs);
  Tensor2D w = transpose(gen_synthetic(ws));
  Tensor2D calib = x;
  return LayerInputs{std::move(w), std::move(x), std::move(calib)};
}

inline LayerInputs load_layer_inputs(const RunConfig& cfg) {
  if (cfg.synthetic && !cfg.weight) return synthesize_layer(*cfg.synthetic, cfg.seed);
  Tensor2D w = load_tensor(*cfg.weight);
  Tensor2D x = load_tensor(*cfg.input);
  if (x.cols() != w.rows()) {
    throw shape_error(cfg.input->string() + ": input is " + shape_str(x) + ", expected " +
                      std::to_string(w.rows()) + " columns to match weight " + cfg.weight->string() +
                      " (" + shape_str(w) + ")");
  }
  Tensor2D calib = cfg.calibration ? load_tensor(*cfg.calibration) : x;
  if (calib.cols() != w.rows()) {
    throw shape_error(cfg.calibration->string() + ": calibration is " + shape_str(calib) +
                      ", expected " + std::to_string(w.rows()) + " columns");
  }
  return LayerInputs{std::move(w), std::move(x), std::move(calib)};
}

// Offline state of one decomposed linear layer: rank-k factors quantized for
// the mixed-precision path and the HGQ-quantized residual.
struct PreparedLayer {
  DecomposedWeight decomposition;
  SaliencyReport saliency;
  QuantizedLowRank l1q;
  QuantizedLowRank l2q;
  HgqTensor residual_q;
};

inline PreparedLayer prepare_layer(const Tensor2D& weight, const Tensor2D& calibration, std::size_t rank,
                                   const HgqConfig& hgq_cfg = {},
                                   std::size_t n_l1 = kDefaultL1Sensitive,
                                   std::size_t n_l2 = kDefaultL2Sensitive,
                                   SigmaPlacement placement = SigmaPlacement::split) {
  DecomposedWeight dec = decompose(weight, rank, placement);
  SaliencyReport sal = analyze_saliency(calibration, rank, n_l1, n_l2);
  QuantizedLowRank l1q = quantize_lowrank_weights(dec.factors.l1, build_mp_layout(sal.l1_sensitive, weight.rows()));
  QuantizedLowRank l2q = quantize_lowrank_weights(dec.factors.l2, build_mp_layout(sal.l2_sensitive, rank));
  HgqTensor rq = hgq_quantize(dec.residual, hgq_cfg, GroupAxis::rows);
  return PreparedLayer{std::move(dec), std::move(sal), std::move(l1q), std::move(l2q), std::move(rq)};
}

struct DecomposedOutput {
  Tensor2D output;
  Tensor2D lowrank;
  Tensor2D residual;
  CostCounters counters;
};

// y = lowrank_forward(x) + hgq_gemm(hgq_quantize(x), residual_q), summed in FP32.
inline DecomposedOutput forward_decomposed(const Tensor2D& x, const PreparedLayer& layer, unsigned threads = 1) {
  LowRankResult lr = lowrank_forward(x, layer.l1q, layer.l2q, threads);
  HgqGemmResult res = hgq_gemm(hgq_quantize(x, layer.residual_q.config, GroupAxis::cols), layer.residual_q, threads);
  CostCounters c = counters_from(lr.stats) + counters_from(res.stats);
  c.add(event::quantize_op, lr.aligned_elements + x.size());
  Tensor2D y = add(lr.output, res.output);
  return DecomposedOutput{std::move(y), std::move(lr.output), std::move(res.output), std::move(c)};
}

struct ScenarioResult {
  std::string name;
  double mse{0.0};
  double max_rel_error{0.0};
  CostCounters counters;
  ScenarioReport cost;
};

struct LayerReport {
  nlohmann::json meta;  // config echo, shapes, decomposition summary
  std::map<std::string, ScenarioResult> scenarios;
  std::map<std::string, double> lowrank_errors;  // relative Frobenius error of the low-rank path alone
  std::optional<LowRankComparison> lowrank_costs;
  std::optional<HgqComparison> hgq_vs_g32;
  std::map<std::string, bool> verdicts;
};

// max |y - ref| / max |ref|.
inline double max_relative_error(const Tensor2D& y, const Tensor2D& ref) {
  const double diff = max_abs_difference(y, ref);
  const double scale = ref.max_abs();
  if (scale == 0.0) return diff == 0.0 ? 0.0 : INFINITY;
  return diff / scale;
}

namespace detail {

enum class ResidualMode { per_tensor, g128, g64, g32, hgq };
enum class LowRankMode { none, svd_mp, fp16, int16_8, int8_4 };

struct ScenarioSpec {
  bool reference{false};
  ResidualMode residual{ResidualMode::hgq};
  LowRankMode lowrank{LowRankMode::none};
};

inline ScenarioSpec scenario_spec(const std::string& name) {
  static const std::map<std::string, ScenarioSpec> table = {
      {"fp32", {true, ResidualMode::hgq, LowRankMode::none}},
      {"int4_per_tensor", {false, ResidualMode::per_tensor, LowRankMode::none}},
      {"int4_g128", {false, ResidualMode::g128, LowRankMode::none}},
      {"int4_g64", {false, ResidualMode::g64, LowRankMode::none}},
      {"int4_g32", {false, ResidualMode::g32, LowRankMode::none}},
      {"hgq", {false, ResidualMode::hgq, LowRankMode::none}},
      {"int4_per_tensor_svd", {false, ResidualMode::per_tensor, LowRankMode::svd_mp}},
      {"int4_g128_svd", {false, ResidualMode::g128, LowRankMode::svd_mp}},
      {"int4_g64_svd", {false, ResidualMode::g64, LowRankMode::svd_mp}},
      {"int4_g32_svd", {false, ResidualMode::g32, LowRankMode::svd_mp}},
      {"hgq_svd", {false, ResidualMode::hgq, LowRankMode::svd_mp}},
      {"fp16_lowrank", {false, ResidualMode::hgq, LowRankMode::fp16}},
      {"int16_8_lowrank", {false, ResidualMode::hgq, LowRankMode::int16_8}},
      {"int8_4_lowrank", {false, ResidualMode::hgq, LowRankMode::int8_4}},
  };
  const auto it = table.find(name);
  if (it == table.end()) throw parameter_error("unknown scenario '" + name + "'");
  return it->second;
}

inline const char* mode_name(ResidualMode m) {
  switch (m) {
    case ResidualMode::per_tensor: return "per_tensor";
    case ResidualMode::g128: return "g128";
    case ResidualMode::g64: return "g64";
    case ResidualMode::g32: return "g32";
    case ResidualMode::hgq: return "hgq";
  }
  return "?";
}

inline std::pair<HgqTensor, HgqTensor> quantize_pair(const Tensor2D& x, const Tensor2D& w, ResidualMode mode,
                                                     const HgqConfig& hgq_cfg) {
  switch (mode) {
    case ResidualMode::per_tensor:
      return {baseline_quantize(x, BaselineMode::per_tensor(), GroupAxis::cols),
              baseline_quantize(w, BaselineMode::per_tensor(), GroupAxis::rows)};
    case ResidualMode::g128:
    case ResidualMode::g64:
    case ResidualMode::g32: {
      const std::size_t g = mode == ResidualMode::g128 ? 128 : mode == ResidualMode::g64 ? 64 : 32;
      return {baseline_quantize(x, BaselineMode::per_group(g), GroupAxis::cols),
              baseline_quantize(w, BaselineMode::per_group(g), GroupAxis::rows)};
    }
    case ResidualMode::hgq:
      return {hgq_quantize(x, hgq_cfg, GroupAxis::cols), hgq_quantize(w, hgq_cfg, GroupAxis::rows)};
  }
  throw parameter_error("bad residual mode");
}

struct PathOutput {
  Tensor2D output;
  CostCounters counters;
};

// Low-rank path emulated in binary16: operands and the intermediate are
// rounded to half, products accumulate in double.
inline PathOutput fp16_lowrank(const Tensor2D& x, const LowRankFactors& f, unsigned threads) {
  auto to_half_tensor = [](const Tensor2D& t) {
    Tensor2D h(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.size(); ++i) h.data()[i] = to_float(to_half_rtne(t.data()[i]));
    return h;
  };
  Tensor2D h = to_half_tensor(matmul_ref(to_half_tensor(x), to_half_tensor(f.l1), threads));
  Tensor2D y = matmul_ref(h, to_half_tensor(f.l2), threads);
  CostCounters c;
  c.add(event::fp16_mac, static_cast<std::uint64_t>(x.rows()) * x.cols() * f.rank +
                             static_cast<std::uint64_t>(x.rows()) * f.rank * f.l2.cols());
  return PathOutput{std::move(y), std::move(c)};
}

inline PathOutput int_lowrank(const Tensor2D& x, const LowRankFactors& f, const MpLayout& l1_layout,
                              const MpLayout& l2_layout, unsigned threads) {
  QuantizedLowRank l1q = quantize_lowrank_weights(f.l1, l1_layout);
  QuantizedLowRank l2q = quantize_lowrank_weights(f.l2, l2_layout);
  LowRankResult r = lowrank_forward(x, l1q, l2q, threads);
  CostCounters c = counters_from(r.stats);
  c.add(event::quantize_op, r.aligned_elements);
  return PathOutput{std::move(r.output), std::move(c)};
}

inline double relative_error(const Tensor2D& y, const Tensor2D& ref) {
  const double n = frobenius_norm(ref);
  const double d = frobenius_distance(y, ref);
  if (n == 0.0) return d == 0.0 ? 0.0 : INFINITY;
  return d / n;
}

inline nlohmann::json index_json(const std::vector<std::size_t>& v) {
  nlohmann::json j = nlohmann::json::array();
  for (std::size_t i : v) j.push_back(i);
  return j;
}

}  // namespace detail

// Executes every scenario named in cfg on already-loaded tensors.
inline LayerReport run_layer(const RunConfig& cfg, const LayerInputs& in) {
  cfg.validate();
  const Tensor2D& x = in.input;
  const Tensor2D& w = in.weight;
  if (x.cols() != w.rows()) {
    throw shape_error("input " + shape_str(x) + " does not match weight " + shape_str(w));
  }
  const CostTable table = cfg.cost_table ? load_cost_table(*cfg.cost_table) : CostTable::defaults();
  table.validate();
  const unsigned threads = cfg.threads;
  const Tensor2D ref = matmul_ref(x, w, threads);

  LayerReport report;
  report.meta["config"] = {
      {"rank", cfg.rank}, {"hgq", to_json(cfg.hgq)}, {"l1_sensitive", cfg.l1_sensitive},
      {"l2_sensitive", cfg.l2_sensitive}, {"seed", cfg.seed}, {"sigma_placement", to_string(cfg.sigma_placement)},
      {"scenarios", cfg.scenarios}, {"cost_table", to_json(table)}};
  if (cfg.synthetic && !cfg.weight) report.meta["config"]["synthetic"] = to_json(*cfg.synthetic);
  report.meta["shapes"] = {{"input", {x.rows(), x.cols()}}, {"weight", {w.rows(), w.cols()}}};

  bool need_svd = false;
  std::set<detail::LowRankMode> lowrank_modes;
  std::set<detail::ResidualMode> plain_modes;
  std::set<detail::ResidualMode> residual_modes;
  for (const auto& name : cfg.scenarios) {
    const auto spec = detail::scenario_spec(name);
    if (spec.reference) continue;
    if (spec.lowrank == detail::LowRankMode::none) {
      plain_modes.insert(spec.residual);
    } else {
      need_svd = true;
      lowrank_modes.insert(spec.lowrank);
      residual_modes.insert(spec.residual);
    }
  }
  // Cost comparisons always need these variants when any SVD path runs.
  if (need_svd) {
    lowrank_modes.insert({detail::LowRankMode::svd_mp, detail::LowRankMode::fp16,
                          detail::LowRankMode::int16_8, detail::LowRankMode::int8_4});
  }

  std::optional<DecomposedWeight> dec;
  std::optional<SaliencyReport> sal;
  if (need_svd) {
    dec = decompose(w, cfg.rank, cfg.sigma_placement);
    sal = analyze_saliency(in.calibration, cfg.rank, cfg.l1_sensitive, cfg.l2_sensitive);
    nlohmann::json sv = nlohmann::json::array();
    for (double s : dec->factors.singular_values) sv.push_back(s);
    report.meta["decomposition"] = {
        {"rank", cfg.rank}, {"singular_values", sv},
        {"weight_max_abs", w.max_abs()}, {"residual_max_abs", dec->residual.max_abs()},
        {"l1_sensitive", detail::index_json(sal->l1_sensitive)},
        {"l2_sensitive", detail::index_json(sal->l2_sensitive)}};
  }

  std::map<detail::ResidualMode, detail::PathOutput> plain_out;
  for (auto mode : plain_modes) {
    auto [qa, qw] = detail::quantize_pair(x, w, mode, cfg.hgq);
    HgqGemmResult r = hgq_gemm(qa, qw, threads);
    CostCounters c = counters_from(r.stats);
    c.add(event::quantize_op, x.size());
    plain_out.emplace(mode, detail::PathOutput{std::move(r.output), std::move(c)});
  }

  std::map<detail::ResidualMode, detail::PathOutput> residual_out;
  std::map<detail::LowRankMode, detail::PathOutput> lowrank_out;
  if (need_svd) {
    for (auto mode : residual_modes) {
      auto [qa, qw] = detail::quantize_pair(x, dec->residual, mode, cfg.hgq);
      HgqGemmResult r = hgq_gemm(qa, qw, threads);
      CostCounters c = counters_from(r.stats);
      c.add(event::quantize_op, x.size());
      residual_out.emplace(mode, detail::PathOutput{std::move(r.output), std::move(c)});
    }
    const LowRankFactors& f = dec->factors;
    for (auto mode : lowrank_modes) {
      switch (mode) {
        case detail::LowRankMode::svd_mp:
          lowrank_out.emplace(mode, detail::int_lowrank(x, f, build_mp_layout(sal->l1_sensitive, w.rows()),
                                                        build_mp_layout(sal->l2_sensitive, cfg.rank), threads));
          break;
        case detail::LowRankMode::int16_8:
          lowrank_out.emplace(mode, detail::int_lowrank(x, f, all_sensitive_layout(w.rows()),
                                                        all_sensitive_layout(cfg.rank), threads));
          break;
        case detail::LowRankMode::int8_4:
          lowrank_out.emplace(mode, detail::int_lowrank(x, f, no_sensitive_layout(w.rows()),
                                                        no_sensitive_layout(cfg.rank), threads));
          break;
        case detail::LowRankMode::fp16:
          lowrank_out.emplace(mode, detail::fp16_lowrank(x, f, threads));
          break;
        case detail::LowRankMode::none:
          break;
      }
    }
    const Tensor2D lowrank_ref = matmul_ref(matmul_ref(x, f.l1, threads), f.l2, threads);
    static const std::map<detail::LowRankMode, std::string> names = {
        {detail::LowRankMode::svd_mp, "svd_mp"}, {detail::LowRankMode::fp16, "fp16"},
        {detail::LowRankMode::int16_8, "int16_8"}, {detail::LowRankMode::int8_4, "int8_4"}};
    for (const auto& [mode, out] : lowrank_out) {
      report.lowrank_errors[names.at(mode)] = detail::relative_error(out.output, lowrank_ref);
    }
    report.lowrank_costs = compare_lowrank(lowrank_out.at(detail::LowRankMode::fp16).counters,
                                           lowrank_out.at(detail::LowRankMode::int16_8).counters,
                                           lowrank_out.at(detail::LowRankMode::svd_mp).counters, table);
  }

  for (const auto& name : cfg.scenarios) {
    const auto spec = detail::scenario_spec(name);
    ScenarioResult s;
    s.name = name;
    if (spec.reference) {
      s.mse = mean_squared_error(ref, ref);
      s.max_rel_error = max_relative_error(ref, ref);
    } else if (spec.lowrank == detail::LowRankMode::none) {
      const auto& out = plain_out.at(spec.residual);
      s.mse = mean_squared_error(out.output, ref);
      s.max_rel_error = max_relative_error(out.output, ref);
      s.counters = out.counters;
    } else {
      const auto& res = residual_out.at(spec.residual);
      const auto& lr = lowrank_out.at(spec.lowrank);
      const Tensor2D y = add(lr.output, res.output);
      s.mse = mean_squared_error(y, ref);
      s.max_rel_error = max_relative_error(y, ref);
      s.counters = lr.counters + res.counters;
    }
    s.cost = estimate(s.counters, table, name);
    report.scenarios.emplace(name, std::move(s));
  }

  if (plain_out.count(detail::ResidualMode::g32) && plain_out.count(detail::ResidualMode::hgq)) {
    report.hgq_vs_g32 = compare_hgq(plain_out.at(detail::ResidualMode::g32).counters,
                                    plain_out.at(detail::ResidualMode::hgq).counters, table);
  }

  // Accuracy-ordering verdicts over whichever scenarios ran.
  auto mse_of = [&](const std::string& n) -> std::optional<double> {
    const auto it = report.scenarios.find(n);
    if (it == report.scenarios.end()) return std::nullopt;
    return it->second.mse;
  };
  auto verdict = [&](const std::string& key, const std::string& a, const std::string& b, bool strict) {
    const auto ma = mse_of(a);
    const auto mb = mse_of(b);
    if (ma && mb) report.verdicts[key] = strict ? *ma > *mb : *ma >= *mb;
  };
  for (const std::string suffix : {"", "_svd"}) {
    const std::string tag = suffix.empty() ? "nosvd" : "svd";
    verdict(tag + ".per_tensor_gt_g128", "int4_per_tensor" + suffix, "int4_g128" + suffix, true);
    verdict(tag + ".g128_gt_hgq", "int4_g128" + suffix, "hgq" + suffix, true);
    verdict(tag + ".hgq_ge_g32", "hgq" + suffix, "int4_g32" + suffix, false);
  }
  for (const std::string base : {"int4_per_tensor", "int4_g128", "int4_g64", "int4_g32", "hgq"}) {
    verdict("svd_improves." + base, base, base + "_svd", true);
  }
  if (report.lowrank_errors.count("svd_mp")) {
    report.verdicts["lowrank.svd_mp_lt_int8_4"] = report.lowrank_errors["svd_mp"] < report.lowrank_errors["int8_4"];
    report.verdicts["lowrank.svd_mp_gt_int16_8"] = report.lowrank_errors["svd_mp"] > report.lowrank_errors["int16_8"];
  }
  if (report.lowrank_costs) report.verdicts["lowrank.energy_ordering"] = report.lowrank_costs->ordering_holds;
  if (report.hgq_vs_g32) report.verdicts["hgq.fp_accumulations_quartered"] = report.hgq_vs_g32->fp_quarter_holds;
  return report;
}

inline LayerReport run_decomposed_layer(const RunConfig& cfg) {
  cfg.validate();
  return run_layer(cfg, load_layer_inputs(cfg));
}

// The quantizer comparison on its own: fp32 and every residual quantizer with
// and without decomposition, leaving out the low-rank precision variants.
inline LayerReport run_baselines(RunConfig cfg) {
  std::erase_if(cfg.scenarios, [](const std::string& s) { return s.ends_with("_lowrank"); });
  return run_decomposed_layer(cfg);
}

inline nlohmann::json to_json(const LayerReport& r) {
  nlohmann::json scenarios = nlohmann::json::object();
  for (const auto& [name, s] : r.scenarios) {
    scenarios[name] = {{"mse", s.mse}, {"max_rel_error", s.max_rel_error},
                       {"counters", to_json(s.counters)}, {"cost", to_json(s.cost)}};
  }
  nlohmann::json j = r.meta;
  j["format"] = "splitq-layer-report/1";
  j["scenarios"] = scenarios;
  nlohmann::json lowrank = nlohmann::json::object();
  for (const auto& [k, v] : r.lowrank_errors) lowrank["relative_error"][k] = v;
  if (r.lowrank_costs) lowrank["costs"] = to_json(*r.lowrank_costs);
  j["lowrank"] = lowrank;
  j["hgq_vs_g32"] = r.hgq_vs_g32 ? to_json(*r.hgq_vs_g32) : nlohmann::json(nullptr);
  j["verdicts"] = r.verdicts;
  return j;
}

inline std::string report_text(const LayerReport& r) { return to_json(r).dump(2) + "\n"; }

}  // namespace splitq
