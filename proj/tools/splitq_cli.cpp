// Command-line front end: decompose, quantize, run, selftest, synth, cost.
//
// Exit status: 0 success, 1 validation failure, 2 I/O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "splitq/splitq.hpp"

namespace fs = std::filesystem;
using namespace splitq;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path.string());
  out << text;
  if (!out) throw io_error("short write to " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path.string() + ": " + e.what());
  }
}

struct DecomposeArgs {
  std::string weight;
  std::size_t rank{kDefaultRank};
  std::string out;
  std::string calib;
  std::string sigma{"split"};
  std::size_t l1_sensitive{kDefaultL1Sensitive};
  std::size_t l2_sensitive{kDefaultL2Sensitive};
};

int cmd_decompose(const DecomposeArgs& a) {
  const Tensor2D w = load_tensor(a.weight);
  const DecomposedWeight d = decompose(w, a.rank, sigma_placement_from_string(a.sigma));
  const fs::path dir(a.out);
  fs::create_directories(dir);

  std::vector<float> sv(d.factors.singular_values.begin(), d.factors.singular_values.end());
  save_tensor(dir / "l1.svt", d.factors.l1);
  save_tensor(dir / "l2.svt", d.factors.l2);
  save_tensor(dir / "residual.svt", d.residual);
  save_tensor(dir / "singular_values.svt", Tensor2D(1, sv.size(), sv));

  nlohmann::json manifest = {
      {"format", "splitq-decomposition/1"},
      {"rank", a.rank},
      {"sigma_placement", a.sigma},
      {"shape", {w.rows(), w.cols()}},
      {"l1", "l1.svt"},
      {"l2", "l2.svt"},
      {"residual", "residual.svt"},
      {"singular_values", "singular_values.svt"},
      {"l2_sensitive", l2_sensitive_indices(a.rank, a.l2_sensitive)},
      {"l1_sensitive", nullptr},
  };
  if (!a.calib.empty()) {
    const Tensor2D calib = load_tensor(a.calib);
    if (calib.cols() != w.rows()) {
      throw shape_error(a.calib + ": calibration is " + shape_str(calib) + ", expected " +
                        std::to_string(w.rows()) + " columns");
    }
    const auto l1s = identify_l1_sensitive(calib, a.l1_sensitive);
    manifest["l1_sensitive"] = l1s;
    save_lowrank(dir / "l1.smp", quantize_lowrank_weights(d.factors.l1, build_mp_layout(l1s, w.rows())));
    save_lowrank(dir / "l2.smp", quantize_lowrank_weights(
                                     d.factors.l2, build_mp_layout(l2_sensitive_indices(a.rank, a.l2_sensitive), a.rank)));
    manifest["l1_quantized"] = "l1.smp";
    manifest["l2_quantized"] = "l2.smp";
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "rank " << a.rank << " decomposition of " << shape_str(w) << " written to " << dir.string() << "\n";
  return kExitOk;
}

struct QuantizeArgs {
  std::string in;
  std::string mode{"hgq"};
  std::size_t sub{32};
  std::size_t base{128};
  std::size_t shift_bits{2};
  std::string axis{"rows"};
  std::string out;
  std::string dequant;
};

int cmd_quantize(const QuantizeArgs& a) {
  const Tensor2D x = load_tensor(a.in);
  GroupAxis axis;
  if (a.axis == "rows") axis = GroupAxis::rows;
  else if (a.axis == "cols") axis = GroupAxis::cols;
  else throw parameter_error("axis must be 'rows' or 'cols'");

  HgqTensor q;
  if (a.mode == "hgq") {
    q = hgq_quantize(x, HgqConfig{a.sub, a.base, a.shift_bits, 4}, axis);
  } else if (a.mode == "per_tensor") {
    q = baseline_quantize(x, BaselineMode::per_tensor(), axis);
  } else if (a.mode == "per_vector") {
    q = baseline_quantize(x, BaselineMode::per_vector(), axis);
  } else if (a.mode.size() > 1 && a.mode[0] == 'g') {
    std::size_t g = 0;
    try {
      g = std::stoul(a.mode.substr(1));
    } catch (const std::exception&) {
      throw parameter_error("bad group mode '" + a.mode + "'");
    }
    q = baseline_quantize(x, BaselineMode::per_group(g), axis);
  } else {
    throw parameter_error("mode must be hgq, per_tensor, per_vector or g<N>");
  }
  save_hgq(a.out, q);
  const Tensor2D dq = hgq_dequantize(q);
  if (!a.dequant.empty()) save_tensor(a.dequant, dq);
  std::cout << a.mode << " quantized " << shape_str(x) << " -> " << a.out << " (mse " << mean_squared_error(dq, x)
            << ")\n";
  return kExitOk;
}

int cmd_run(const std::string& config, const std::string& report_path, std::optional<unsigned> threads) {
  RunConfig cfg = load_run_config(config);
  if (threads) cfg.threads = *threads;
  if (!report_path.empty()) cfg.report = fs::path(report_path);
  const LayerReport report = run_decomposed_layer(cfg);
  const std::string text = report_text(report);
  if (cfg.report) {
    write_text(*cfg.report, text);
    std::cout << "report written to " << cfg.report->string() << "\n";
  } else {
    std::cout << text;
  }
  return kExitOk;
}

int cmd_selftest(const std::string& cost_table) {
  SelftestOptions opt;
  if (!cost_table.empty()) {
    opt.cost_table = fs::path(cost_table);
    load_cost_table(*opt.cost_table).validate();
  }
  const SelftestSummary s = selftest(opt);
  for (const auto& c : s.checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
  }
  std::cout << (s.passed() ? "selftest passed" : "selftest FAILED") << "\n";
  return s.passed() ? kExitOk : kExitValidation;
}

int cmd_synth(const SyntheticSpec& spec, bool transposed, const std::string& out) {
  Tensor2D t = gen_synthetic(spec);
  if (transposed) t = transpose(t);
  save_tensor(out, t);
  std::cout << "wrote " << shape_str(t) << " tensor to " << out << "\n";
  return kExitOk;
}

int cmd_cost(const std::string& counters, const std::string& table, const std::string& name) {
  const CostTable t = table.empty() ? CostTable::defaults() : load_cost_table(table);
  t.validate();
  const CostCounters c = counters_from_json(read_json(counters));
  std::cout << to_json(estimate(c, t, name)).dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank + residual quantized linear-layer toolkit"};
  app.require_subcommand(1);

  DecomposeArgs dec;
  auto* decompose_cmd = app.add_subcommand("decompose", "Split a weight into rank-k factors and a residual");
  decompose_cmd->add_option("--weight", dec.weight, "Weight tensor (SVT1, d_in x d_out)")->required();
  decompose_cmd->add_option("--rank", dec.rank, "Retained rank k");
  decompose_cmd->add_option("--out", dec.out, "Output directory")->required();
  decompose_cmd->add_option("--calib", dec.calib, "Calibration activations (SVT1); enables SMP1 output");
  decompose_cmd->add_option("--sigma", dec.sigma, "Singular value placement: split | into_l2");
  decompose_cmd->add_option("--l1-sensitive", dec.l1_sensitive, "Sensitive L1 input channels");
  decompose_cmd->add_option("--l2-sensitive", dec.l2_sensitive, "Sensitive L2 input channels");

  QuantizeArgs qa;
  auto* quantize_cmd = app.add_subcommand("quantize", "Quantize a tensor to HGQ1");
  quantize_cmd->add_option("--in", qa.in, "Input tensor (SVT1)")->required();
  quantize_cmd->add_option("--mode", qa.mode, "hgq | per_tensor | per_vector | g<N>");
  quantize_cmd->add_option("--sub", qa.sub, "HGQ sub-group size");
  quantize_cmd->add_option("--base", qa.base, "HGQ base-group size");
  quantize_cmd->add_option("--shift-bits", qa.shift_bits, "HGQ shift width");
  quantize_cmd->add_option("--axis", qa.axis, "Grouping axis: rows (weights) | cols (activations)");
  quantize_cmd->add_option("--out", qa.out, "Output file (HGQ1)")->required();
  quantize_cmd->add_option("--dequant", qa.dequant, "Also write the dequantized tensor (SVT1)");

  std::string run_config;
  std::string run_report;
  std::optional<unsigned> run_threads;
  auto* run_cmd = app.add_subcommand("run", "Run a decomposed layer and its baselines");
  run_cmd->add_option("--config", run_config, "Run configuration (JSON)")->required();
  run_cmd->add_option("--report", run_report, "Report path (JSON); stdout when omitted");
  run_cmd->add_option("--threads", run_threads, "Worker threads (does not change results)");

  std::string selftest_table;
  auto* selftest_cmd = app.add_subcommand("selftest", "Exhaustive and randomized internal checks");
  selftest_cmd->add_option("--cost-table", selftest_table, "Cost table to validate (JSON)");

  SyntheticSpec synth;
  bool synth_transposed = false;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic outlier tensor");
  synth_cmd->add_option("--rows", synth.rows);
  synth_cmd->add_option("--cols", synth.cols);
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--salient", synth.salient_channels);
  synth_cmd->add_option("--gain", synth.salient_gain);
  synth_cmd->add_option("--std", synth.base_std);
  synth_cmd->add_flag("--transpose", synth_transposed, "Put salient channels on rows");
  synth_cmd->add_option("--out", synth_out)->required();

  std::string cost_counters;
  std::string cost_table;
  std::string cost_name;
  auto* cost_cmd = app.add_subcommand("cost", "Estimate energy/area for event counters");
  cost_cmd->add_option("--counters", cost_counters, "Counters (JSON object of event -> count)")->required();
  cost_cmd->add_option("--table", cost_table, "Cost table (JSON)");
  cost_cmd->add_option("--name", cost_name, "Scenario name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*decompose_cmd) return cmd_decompose(dec);
    if (*quantize_cmd) return cmd_quantize(qa);
    if (*run_cmd) return cmd_run(run_config, run_report, run_threads);
    if (*selftest_cmd) return cmd_selftest(selftest_table);
    if (*synth_cmd) return cmd_synth(synth, synth_transposed, synth_out);
    if (*cost_cmd) return cmd_cost(cost_counters, cost_table, cost_name);
  } catch (const io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const splitq::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
