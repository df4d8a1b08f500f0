#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "splitq/error.hpp"
#include "splitq/hgq.hpp"
#include "splitq/svd_mp.hpp"

namespace splitq {

// Event kinds understood by the default table.
namespace event {
inline constexpr const char* int4_mac = "int4_mac";
inline constexpr const char* int8x4_mac = "int8x4_mac";
inline constexpr const char* int16x8_slice_pass = "int16x8_slice_pass";
inline constexpr const char* fp16_mac = "fp16_mac";
inline constexpr const char* fp_accumulate = "fp_accumulate";
inline constexpr const char* int_shift_accumulate = "int_shift_accumulate";
inline constexpr const char* quantize_op = "quantize_op";
}  // namespace event

struct UnitCost {
  double energy{0.0};
  double area{0.0};

  friend bool operator==(const UnitCost&, const UnitCost&) = default;
};

// Per-event cost in units of one INT4 x INT4 MAC.
//
// Two entries are measured ratios: an FP accumulation (scale multiply of a
// wide partial sum plus FP add) costs 67.5x the energy and 49.3x the area of
// an INT4 MAC. Integer multipliers follow a partial-product model, N x M bits
// costing N*M/16 units, so one 8x4 slice pass is 2.0 and a full 16x8
// product, issued as four passes, is 8.0. An FP16 MAC is equated with the FP
// accumulation ratio. Shift-adds and quantization steps cost one unit.
class CostTable {
 public:
  CostTable() = default;
  explicit CostTable(std::map<std::string, UnitCost> entries) : entries_(std::move(entries)) {}

  static CostTable defaults() {
    return CostTable({
        {event::int4_mac, {1.0, 1.0}},
        {event::int8x4_mac, {2.0, 2.0}},
        {event::int16x8_slice_pass, {2.0, 2.0}},
        {event::fp16_mac, {67.5, 49.3}},
        {event::fp_accumulate, {67.5, 49.3}},
        {event::int_shift_accumulate, {1.0, 1.0}},
        {event::quantize_op, {1.0, 1.0}},
    });
  }

  [[nodiscard]] const std::map<std::string, UnitCost>& entries() const noexcept { return entries_; }

  [[nodiscard]] const UnitCost& at(const std::string& kind) const {
    const auto it = entries_.find(kind);
    if (it == entries_.end()) throw parameter_error("cost table has no entry for event '" + kind + "'");
    return it->second;
  }

  void set(const std::string& kind, UnitCost c) { entries_[kind] = c; }

  // Every entry must be finite and strictly positive.
  void validate() const {
    if (entries_.empty()) throw parameter_error("cost table is empty");
    for (const auto& [kind, c] : entries_) {
      if (!(std::isfinite(c.energy) && c.energy > 0.0 && std::isfinite(c.area) && c.area > 0.0)) {
        throw parameter_error("cost table entry '" + kind + "' must have positive finite energy and area");
      }
    }
  }

  friend bool operator==(const CostTable&, const CostTable&) = default;

 private:
  std::map<std::string, UnitCost> entries_;
};

// JSON form: {"<event>": {"energy": e, "area": a}, ...}. Entries override the
// defaults; kinds not in the defaults are added.
inline CostTable cost_table_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw parameter_error("cost table JSON must be an object");
  CostTable t = CostTable::defaults();
  for (const auto& [kind, v] : j.items()) {
    if (!v.is_object() || !v.contains("energy") || !v.contains("area") ||
        !v["energy"].is_number() || !v["area"].is_number()) {
      throw parameter_error("cost table entry '" + kind + "' needs numeric energy and area");
    }
    t.set(kind, UnitCost{v["energy"].get<double>(), v["area"].get<double>()});
  }
  t.validate();
  return t;
}

inline nlohmann::json to_json(const CostTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [kind, c] : t.entries()) j[kind] = {{"energy", c.energy}, {"area", c.area}};
  return j;
}

inline CostTable load_cost_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open cost table " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw io_error(path.string() + ": " + e.what());
  }
  return cost_table_from_json(j);
}

// Event tallies. Merging is plain addition per kind.
struct CostCounters {
  std::map<std::string, std::uint64_t> counts;

  CostCounters& add(const std::string& kind, std::uint64_t n) {
    if (n != 0) counts[kind] += n;
    return *this;
  }

  [[nodiscard]] std::uint64_t get(const std::string& kind) const {
    const auto it = counts.find(kind);
    return it == counts.end() ? 0 : it->second;
  }

  [[nodiscard]] bool empty() const noexcept { return counts.empty(); }

  CostCounters& operator+=(const CostCounters& o) {
    for (const auto& [k, n] : o.counts) add(k, n);
    return *this;
  }
  friend CostCounters operator+(CostCounters a, const CostCounters& b) { return a += b; }
  friend bool operator==(const CostCounters&, const CostCounters&) = default;
};

inline CostCounters counters_from(const HgqGemmStats& s) {
  CostCounters c;
  c.add(event::int4_mac, s.int_mac_count);
  c.add(event::int_shift_accumulate, s.shift_alignments);
  c.add(event::fp_accumulate, s.fp_accumulations);
  return c;
}

inline CostCounters counters_from(const MpGemmStats& s) {
  CostCounters c;
  c.add(event::int16x8_slice_pass, s.slice_passes);
  c.add(event::int8x4_mac, s.low_precision_macs);
  c.add(event::int_shift_accumulate, s.lane_alignments);
  c.add(event::fp_accumulate, s.fp_scalings);
  return c;
}

inline nlohmann::json to_json(const CostCounters& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, n] : c.counts) j[k] = n;
  return j;
}

inline CostCounters counters_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw parameter_error("counters JSON must be an object");
  CostCounters c;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number_unsigned()) throw parameter_error("counter '" + k + "' must be a non-negative integer");
    c.add(k, v.get<std::uint64_t>());
  }
  return c;
}

struct BreakdownEntry {
  std::uint64_t count{0};
  double energy{0.0};
  double area{0.0};
};

struct ScenarioReport {
  std::string name;
  double total_energy{0.0};
  double total_area{0.0};  // area-time proxy: sum of count x unit area
  std::map<std::string, BreakdownEntry> breakdown;
};

inline ScenarioReport estimate(const CostCounters& counters, const CostTable& table,
                               std::string name = {}) {
  ScenarioReport r;
  r.name = std::move(name);
  for (const auto& [kind, n] : counters.counts) {
    const UnitCost& unit = table.at(kind);
    const double count = static_cast<double>(n);
    BreakdownEntry e{n, count * unit.energy, count * unit.area};
    r.total_energy += e.energy;
    r.total_area += e.area;
    r.breakdown.emplace(kind, e);
  }
  return r;
}

inline nlohmann::json to_json(const ScenarioReport& r) {
  nlohmann::json breakdown = nlohmann::json::object();
  for (const auto& [k, e] : r.breakdown) {
    breakdown[k] = {{"count", e.count}, {"energy", e.energy}, {"area", e.area}};
  }
  return {{"name", r.name},
          {"total_energy", r.total_energy},
          {"total_area", r.total_area},
          {"breakdown", breakdown}};
}

// num / den, or nothing when the denominator is zero.
inline std::optional<double> safe_ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

inline nlohmann::json to_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

struct HgqComparison {
  ScenarioReport baseline;
  ScenarioReport hgq;
  std::optional<double> energy_ratio;
  std::optional<double> area_ratio;
  std::optional<double> fp_accumulate_ratio;
  // hgq fp_accumulate * 4 == baseline fp_accumulate, exactly.
  bool fp_quarter_holds{false};
  // INT4 MAC totals differ, so the two counters do not describe one workload.
  bool workload_mismatch{false};
};

// Reference savings of the hierarchical scheme against G32, kept for
// side-by-side display; they depend on synthesis data not reproduced here.
inline constexpr double kRefHgqEnergySavings = 0.361;
inline constexpr double kRefHgqAreaSavings = 0.200;
inline constexpr double kRefHgqFpReplaced = 0.75;

inline HgqComparison compare_hgq(const CostCounters& baseline_g32, const CostCounters& hgq,
                                 const CostTable& table) {
  HgqComparison c;
  c.baseline = estimate(baseline_g32, table, "g32");
  c.hgq = estimate(hgq, table, "hgq");
  c.energy_ratio = safe_ratio(c.hgq.total_energy, c.baseline.total_energy);
  c.area_ratio = safe_ratio(c.hgq.total_area, c.baseline.total_area);
  const std::uint64_t fp_base = baseline_g32.get(event::fp_accumulate);
  const std::uint64_t fp_hgq = hgq.get(event::fp_accumulate);
  c.fp_accumulate_ratio = safe_ratio(static_cast<double>(fp_hgq), static_cast<double>(fp_base));
  c.fp_quarter_holds = fp_base > 0 && fp_hgq * 4 == fp_base;
  c.workload_mismatch = baseline_g32.get(event::int4_mac) != hgq.get(event::int4_mac);
  return c;
}

inline nlohmann::json savings_json(const std::optional<double>& ratio) {
  return ratio ? nlohmann::json(1.0 - *ratio) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const HgqComparison& c) {
  return {{"baseline", to_json(c.baseline)},
          {"hgq", to_json(c.hgq)},
          {"energy_ratio", to_json(c.energy_ratio)},
          {"area_ratio", to_json(c.area_ratio)},
          {"energy_savings", savings_json(c.energy_ratio)},
          {"area_savings", savings_json(c.area_ratio)},
          {"fp_accumulate_ratio", to_json(c.fp_accumulate_ratio)},
          {"fp_quarter_holds", c.fp_quarter_holds},
          {"workload_mismatch", c.workload_mismatch},
          {"reference", {{"energy_savings", kRefHgqEnergySavings},
                         {"area_savings", kRefHgqAreaSavings},
                         {"fp_accumulations_replaced", kRefHgqFpReplaced}}}};
}

struct PairRatio {
  std::optional<double> energy;
  std::optional<double> area;
  // (energy x area) of the denominator over that of the numerator.
  std::optional<double> efficiency_gain;
};

inline PairRatio pair_ratio(const ScenarioReport& num, const ScenarioReport& den) {
  return PairRatio{safe_ratio(num.total_energy, den.total_energy),
                   safe_ratio(num.total_area, den.total_area),
                   safe_ratio(den.total_energy * den.total_area, num.total_energy * num.total_area)};
}

inline nlohmann::json to_json(const PairRatio& p) {
  return {{"energy", to_json(p.energy)}, {"area", to_json(p.area)},
          {"efficiency_gain", to_json(p.efficiency_gain)}};
}

struct LowRankComparison {
  ScenarioReport fp16;
  ScenarioReport int16_8;
  ScenarioReport svd_mp;
  PairRatio svd_mp_vs_int16_8;
  PairRatio svd_mp_vs_fp16;
  PairRatio int16_8_vs_fp16;
  // energy(svd_mp) < energy(int16_8) < energy(fp16), strictly.
  bool ordering_holds{false};
};

// Reference figures for the mixed-precision low-rank path.
inline constexpr double kRefMpEnergyReductionVsInt16_8 = 0.42;
inline constexpr double kRefMpAreaReductionVsInt16_8 = 0.33;
inline constexpr double kRefMpEnergyShareVsFp16 = 0.25;
inline constexpr double kRefMpAreaShareVsFp16 = 0.54;
inline constexpr double kRefMpEfficiencyGainVsInt16_8 = 2.05;

inline LowRankComparison compare_lowrank(const CostCounters& fp16, const CostCounters& int16_8,
                                         const CostCounters& svd_mp, const CostTable& table) {
  LowRankComparison c;
  c.fp16 = estimate(fp16, table, "fp16_lowrank");
  c.int16_8 = estimate(int16_8, table, "int16_8_lowrank");
  c.svd_mp = estimate(svd_mp, table, "svd_mp_lowrank");
  c.svd_mp_vs_int16_8 = pair_ratio(c.svd_mp, c.int16_8);
  c.svd_mp_vs_fp16 = pair_ratio(c.svd_mp, c.fp16);
  c.int16_8_vs_fp16 = pair_ratio(c.int16_8, c.fp16);
  c.ordering_holds = c.svd_mp.total_energy < c.int16_8.total_energy &&
                     c.int16_8.total_energy < c.fp16.total_energy;
  return c;
}

inline nlohmann::json to_json(const LowRankComparison& c) {
  return {{"fp16", to_json(c.fp16)},
          {"int16_8", to_json(c.int16_8)},
          {"svd_mp", to_json(c.svd_mp)},
          {"svd_mp_vs_int16_8", to_json(c.svd_mp_vs_int16_8)},
          {"svd_mp_vs_fp16", to_json(c.svd_mp_vs_fp16)},
          {"int16_8_vs_fp16", to_json(c.int16_8_vs_fp16)},
          {"ordering_holds", c.ordering_holds},
          {"reference", {{"energy_reduction_vs_int16_8", kRefMpEnergyReductionVsInt16_8},
                         {"area_reduction_vs_int16_8", kRefMpAreaReductionVsInt16_8},
                         {"energy_share_vs_fp16", kRefMpEnergyShareVsFp16},
                         {"area_share_vs_fp16", kRefMpAreaShareVsFp16},
                         {"efficiency_gain_vs_int16_8", kRefMpEfficiencyGainVsInt16_8}}}};
}

}  // namespace splitq
