// SPDX-License-Identifier: Apache-2.0
//
// Parameter counting, analytic FLOP model, and wall-clock latency of dense vs.
// split FFN forward passes.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "hhsplit/compress.hpp"
#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/linalg.hpp"
#include "hhsplit/plan.hpp"
#include "hhsplit/profiler.hpp"
#include "hhsplit/rng.hpp"

namespace hhsplit {

// ---------------------------------------------------------------------------
// Parameters

/// fp32-equivalent size of a rows x cols quantized matrix: packed weight bits
/// plus one scale and one zero per group.
inline double quantized_params(Index rows, Index cols, unsigned bits, Index group_size) {
  if (rows == 0 || cols == 0) return 0.0;
  const double groups = static_cast<double>(rows) * static_cast<double>((cols + group_size - 1) / group_size);
  return static_cast<double>(rows) * static_cast<double>(cols) * bits / 32.0 + 2.0 * groups;
}

struct LayerParams {
  double dense_ffn = 0.0;
  double compressed_ffn = 0.0;
  double mha_equiv = 0.0;
};

struct ParamReport {
  Index d = 0;
  Index d_ff = 0;
  Index layers = 0;
  Index heavy_hitters = 0;  // per layer
  Index tail_rank = 0;      // per layer, lowrank mode
  CompressionPlan plan;
  LayerParams per_layer;
  double dense_ffn_total = 0.0;
  double compressed_ffn_total = 0.0;
  double mha_equiv_total = 0.0;
  /// saved / (mha + dense). Negative if the plan grows the FFN.
  double reduction_frac_total = 0.0;
};

/// Closed-form parameter budget of `layers` identical FFN layers under `plan`.
/// Attention enters only as a 4 d^2 per-layer reference for the total.
inline ParamReport count_params(Index d, Index d_ff, Index layers, const CompressionPlan& plan) {
  if (d == 0 || d_ff == 0 || layers == 0) throw RangeError("count_params: dimensions must be positive");
  plan.validate();
  ParamReport rep;
  rep.d = d;
  rep.d_ff = d_ff;
  rep.layers = layers;
  rep.plan = plan;
  const Index k = std::min(d_ff, fraction_count(plan.keep_frac, d_ff));
  const Index m = d_ff - k;
  rep.heavy_hitters = k;
  const double dd = static_cast<double>(d);

  rep.per_layer.dense_ffn = 2.0 * dd * static_cast<double>(d_ff);
  rep.per_layer.mha_equiv = 4.0 * dd * dd;
  if (plan.mode == CompressionMode::kLowRank) {
    rep.tail_rank = tail_rank(d, m, plan.rank_frac);
    rep.per_layer.compressed_ffn = 2.0 * dd * static_cast<double>(k);
    if (m > 0) rep.per_layer.compressed_ffn += 2.0 * static_cast<double>(rep.tail_rank) * (dd + static_cast<double>(m));
  } else {
    rep.per_layer.compressed_ffn = quantized_params(k, d, plan.hh_bits, plan.group_size) +
                                   quantized_params(d, k, plan.hh_bits, plan.group_size) +
                                   quantized_params(m, d, plan.tail_bits, plan.group_size) +
                                   quantized_params(d, m, plan.tail_bits, plan.group_size);
  }
  const double l = static_cast<double>(layers);
  rep.dense_ffn_total = rep.per_layer.dense_ffn * l;
  rep.compressed_ffn_total = rep.per_layer.compressed_ffn * l;
  rep.mha_equiv_total = rep.per_layer.mha_equiv * l;
  rep.reduction_frac_total =
      (rep.dense_ffn_total - rep.compressed_ffn_total) / (rep.mha_equiv_total + rep.dense_ffn_total);
  return rep;
}

inline double parameter_count(const FfnLayer& layer) {
  return static_cast<double>(layer.up().size() + layer.down().size());
}

namespace detail {

inline double block_params(const DenseBlock& b) { return static_cast<double>(b.up.size() + b.down.size()); }
inline double block_params(const LowRankBlock& b) {
  return static_cast<double>(b.up.left.size() + b.up.right.size() + b.down.left.size() + b.down.right.size());
}
inline double block_params(const QuantizedBlock& b) {
  auto one = [](const QuantizedMatrix& q) { return quantized_params(q.rows(), q.cols(), q.bits(), q.group_size()); };
  return one(b.up_t) + one(b.down_t);
}

}  // namespace detail

/// Stored size of a split layer in fp32 equivalents.
inline double parameter_count(const SplitFfn& s) {
  auto f = [](const auto& b) { return detail::block_params(b); };
  return std::visit(f, s.head) + std::visit(f, s.tail);
}

// ---------------------------------------------------------------------------
// FLOPs

struct FlopReport {
  double dense = 0.0;
  double split = 0.0;
  double ratio = 1.0;  // dense / split
};

/// Two flops per multiply-add; activation cost excluded. Quant mode runs
/// dense-shaped products, so its split count equals the dense count.
inline FlopReport count_flops(Index d, Index d_ff, Index s, const CompressionPlan& plan) {
  if (d == 0 || d_ff == 0 || s == 0) throw RangeError("count_flops: dimensions must be positive");
  plan.validate();
  const double dd = static_cast<double>(d), ss = static_cast<double>(s);
  FlopReport f;
  f.dense = 4.0 * ss * dd * static_cast<double>(d_ff);
  if (plan.mode == CompressionMode::kLowRank) {
    const Index k = std::min(d_ff, fraction_count(plan.keep_frac, d_ff));
    const Index m = d_ff - k;
    f.split = 4.0 * ss * dd * static_cast<double>(k);
    if (m > 0) f.split += 4.0 * ss * static_cast<double>(tail_rank(d, m, plan.rank_frac)) * (dd + static_cast<double>(m));
  } else {
    f.split = f.dense;
  }
  f.ratio = f.dense / f.split;
  return f;
}

// ---------------------------------------------------------------------------
// Equal-budget comparison (protected vs. uniform low rank)

/// Rank whose uniform factorization of U and V is closest to `budget` params.
inline Index matched_uniform_rank(Index d, Index d_ff, double budget) {
  const double per_rank = 2.0 * static_cast<double>(d + d_ff);
  const auto r = static_cast<Index>(std::llround(budget / per_rank));
  return std::clamp<Index>(r, 1, std::min(d, d_ff));
}

struct BudgetComparison {
  double protected_params = 0.0;
  double uniform_params = 0.0;
  Index uniform_rank = 0;
  CompressionQuality protected_quality;
  CompressionQuality uniform_quality;
};

/// Compares the protected low-rank split against low rank applied to every
/// neuron at (nearly) the same parameter count. Throws RangeError when the
/// budgets cannot be matched within `tolerance` (relative).
inline BudgetComparison compare_lowrank_at_equal_budget(const FfnLayer& layer, const HeavyHitterSet& hh,
                                                        double rank_frac, std::span<const DenseMatrix> calib,
                                                        double tolerance = 0.01) {
  const SplitFfn protected_split = compress_lowrank(split_ffn(layer, hh), rank_frac);
  BudgetComparison cmp;
  cmp.protected_params = parameter_count(protected_split);
  cmp.uniform_rank = matched_uniform_rank(layer.d_model(), layer.d_ff(), cmp.protected_params);
  const SplitFfn uniform = compress_lowrank_uniform(layer, cmp.uniform_rank);
  cmp.uniform_params = parameter_count(uniform);
  const double gap = std::abs(cmp.uniform_params - cmp.protected_params) / cmp.protected_params;
  if (gap > tolerance) {
    throw RangeError("compare_lowrank_at_equal_budget: budgets differ by " + std::to_string(100.0 * gap) +
                     "% (protected " + std::to_string(cmp.protected_params) + ", uniform " +
                     std::to_string(cmp.uniform_params) + ")");
  }
  cmp.protected_quality = eval_compression(layer, protected_split, calib);
  cmp.uniform_quality = eval_compression(layer, uniform, calib);
  return cmp;
}

// ---------------------------------------------------------------------------
// Latency

struct TimingStats {
  double median_ms = 0.0;
  double q1_ms = 0.0;
  double q3_ms = 0.0;
  Index repeats = 0;
  Index warmup = 0;

  double iqr_ms() const noexcept { return q3_ms - q1_ms; }
};

inline constexpr Index kMinRepeats = 11;
inline constexpr Index kMinWarmup = 3;

namespace detail {

/// Linear-interpolated quantile of sorted samples.
inline double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<Index>(std::floor(pos));
  const Index hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// Times `fn` `repeats` times after `warmup` untimed calls. `Clock` follows
/// the std::chrono clock interface.
template <class Clock = std::chrono::steady_clock, class Fn>
TimingStats time_repeated(Fn&& fn, Index repeats, Index warmup = kMinWarmup) {
  if (repeats < kMinRepeats) {
    throw RangeError("benchmark: need at least " + std::to_string(kMinRepeats) + " repeats, got " +
                     std::to_string(repeats));
  }
  warmup = std::max(warmup, kMinWarmup);
  for (Index i = 0; i < warmup; ++i) fn();
  std::vector<double> ticks;
  ticks.reserve(repeats);
  for (Index i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    ticks.push_back(static_cast<double>((t1 - t0).count()));
  }
  std::sort(ticks.begin(), ticks.end());
  const double median_ticks = detail::quantile(ticks, 0.5);
  if (median_ticks < 50.0) {
    throw MeasurementError("benchmark: median of " + std::to_string(median_ticks) +
                           " timer ticks is below the 50-tick resolution floor");
  }
  constexpr double ms_per_tick = 1e3 * Clock::period::num / static_cast<double>(Clock::period::den);
  TimingStats t;
  t.median_ms = median_ticks * ms_per_tick;
  t.q1_ms = detail::quantile(ticks, 0.25) * ms_per_tick;
  t.q3_ms = detail::quantile(ticks, 0.75) * ms_per_tick;
  t.repeats = repeats;
  t.warmup = warmup;
  return t;
}

inline TimingStats benchmark_forward(const FfnLayer& layer, const DenseMatrix& x, Index repeats,
                                     Index warmup = kMinWarmup) {
  volatile float sink = 0.0f;
  return time_repeated([&] { sink = ffn_forward(layer, x).data()[0]; }, repeats, warmup);
}

inline TimingStats benchmark_forward(const SplitFfn& split, const DenseMatrix& x, Index repeats,
                                     Index warmup = kMinWarmup) {
  volatile float sink = 0.0f;
  return time_repeated([&] { sink = split_forward(split, x).data()[0]; }, repeats, warmup);
}

/// Fixed benchmark input: (batch * seq) x d standard normal tokens.
inline DenseMatrix benchmark_input(Index batch, Index seq, Index d, std::uint64_t seed) {
  Xoshiro256ss rng(seed);
  DenseMatrix x(batch * seq, d);
  for (float& v : x.data()) v = static_cast<float>(rng.normal());
  return x;
}

struct LatencyConfig {
  Index batch = 8;
  Index seq = 128;
  Index d = 768;
  Index d_ff = 3072;
  CompressionPlan plan;
  Index threads = 1;
  Index repeats = kMinRepeats;
  std::string hardware;

  bool operator==(const LatencyConfig&) const = default;
};

/// Share of end-to-end latency spent in the FFN when estimating whole-model
/// speedup from an FFN-only measurement.
inline constexpr double kFfnLatencyShare = 2.0 / 3.0;

inline double estimated_end_to_end_speedup(double ffn_speedup) {
  return 1.0 / ((1.0 - kFfnLatencyShare) + kFfnLatencyShare / ffn_speedup);
}

struct LatencyReport {
  LatencyConfig config;
  double baseline_ms = 0.0;
  double baseline_iqr_ms = 0.0;
  double split_ms = 0.0;
  double split_iqr_ms = 0.0;
  double speedup = 0.0;
  double est_end_to_end_speedup = 0.0;  // estimate, FFN assumed 2/3 of latency
  double params_dense = 0.0;
  double params_split = 0.0;
  double reduction_frac = 0.0;  // 1 - params_split / params_dense, FFN only

  bool operator==(const LatencyReport&) const = default;
};

/// Benchmarks the dense layer against its compressed split on one shared input.
inline LatencyReport compare_latency(const FfnLayer& layer, const SplitFfn& split, const LatencyConfig& config,
                                     std::uint64_t input_seed = 0) {
  if (layer.d_model() != config.d || layer.d_ff() != config.d_ff) {
    throw ShapeError("compare_latency: layer shape does not match config");
  }
  const DenseMatrix x = benchmark_input(config.batch, config.seq, config.d, input_seed);
  const std::size_t saved_threads = thread_count();
  set_thread_count(config.threads);
  TimingStats base, comp;
  try {
    base = benchmark_forward(layer, x, config.repeats);
    comp = benchmark_forward(split, x, config.repeats);
  } catch (...) {
    set_thread_count(saved_threads);
    throw;
  }
  set_thread_count(saved_threads);

  LatencyReport r;
  r.config = config;
  r.baseline_ms = base.median_ms;
  r.baseline_iqr_ms = base.iqr_ms();
  r.split_ms = comp.median_ms;
  r.split_iqr_ms = comp.iqr_ms();
  r.speedup = r.baseline_ms / r.split_ms;
  r.est_end_to_end_speedup = estimated_end_to_end_speedup(r.speedup);
  r.params_dense = parameter_count(layer);
  r.params_split = parameter_count(split);
  r.reduction_frac = 1.0 - r.params_split / r.params_dense;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json latency_config_to_json(const LatencyConfig& c) {
  return {{"batch", c.batch},     {"seq", c.seq},         {"d", c.d},
          {"d_ff", c.d_ff},       {"plan", plan_to_json(c.plan)},
          {"threads", c.threads}, {"repeats", c.repeats}, {"hardware", c.hardware}};
}

inline nlohmann::json report_to_json(const LatencyReport& r) {
  return {{"config", latency_config_to_json(r.config)},
          {"baseline_ms", r.baseline_ms},
          {"baseline_iqr_ms", r.baseline_iqr_ms},
          {"split_ms", r.split_ms},
          {"split_iqr_ms", r.split_iqr_ms},
          {"speedup", r.speedup},
          {"est_end_to_end_speedup", r.est_end_to_end_speedup},
          {"params_dense", r.params_dense},
          {"params_split", r.params_split},
          {"reduction_frac", r.reduction_frac}};
}

inline LatencyReport report_from_json(const nlohmann::json& j) {
  try {
    LatencyReport r;
    const auto& c = j.at("config");
    r.config.batch = c.at("batch").get<Index>();
    r.config.seq = c.at("seq").get<Index>();
    r.config.d = c.at("d").get<Index>();
    r.config.d_ff = c.at("d_ff").get<Index>();
    r.config.plan = plan_from_json(c.at("plan"));
    r.config.threads = c.at("threads").get<Index>();
    r.config.repeats = c.at("repeats").get<Index>();
    r.config.hardware = c.at("hardware").get<std::string>();
    r.baseline_ms = j.at("baseline_ms").get<double>();
    r.baseline_iqr_ms = j.at("baseline_iqr_ms").get<double>();
    r.split_ms = j.at("split_ms").get<double>();
    r.split_iqr_ms = j.at("split_iqr_ms").get<double>();
    r.speedup = j.at("speedup").get<double>();
    r.est_end_to_end_speedup = j.at("est_end_to_end_speedup").get<double>();
    r.params_dense = j.at("params_dense").get<double>();
    r.params_split = j.at("params_split").get<double>();
    r.reduction_frac = j.at("reduction_frac").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("latency report: ") + e.what());
  }
}

inline nlohmann::json reports_to_json(std::span<const LatencyReport> reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) arr.push_back(report_to_json(r));
  return {{"version", 1}, {"reports", arr}};
}

inline std::vector<LatencyReport> reports_from_json(const nlohmann::json& j) {
  std::vector<LatencyReport> out;
  try {
    for (const auto& r : j.at("reports")) out.push_back(report_from_json(r));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("latency reports: ") + e.what());
  }
  return out;
}

inline constexpr const char* kCsvHeader =
    "batch,seq,d,d_ff,mode,keep_frac,rank_frac,hh_bits,tail_bits,group_size,threads,repeats,hardware,"
    "baseline_ms,baseline_iqr_ms,split_ms,split_iqr_ms,speedup,est_end_to_end_speedup,"
    "params_dense,params_split,reduction_frac";

namespace detail {

inline std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

inline std::string reports_to_csv(std::span<const LatencyReport> reports) {
  if (reports.empty()) throw RangeError("reports_to_csv: no reports");
  using detail::csv_number;
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& r : reports) {
    const auto& c = r.config;
    os << c.batch << ',' << c.seq << ',' << c.d << ',' << c.d_ff << ',' << to_string(c.plan.mode) << ','
       << csv_number(c.plan.keep_frac) << ',' << csv_number(c.plan.rank_frac) << ',' << c.plan.hh_bits << ','
       << c.plan.tail_bits << ',' << c.plan.group_size << ',' << c.threads << ',' << c.repeats << ','
       << detail::csv_quote(c.hardware) << ',' << csv_number(r.baseline_ms) << ',' << csv_number(r.baseline_iqr_ms)
       << ',' << csv_number(r.split_ms) << ',' << csv_number(r.split_iqr_ms) << ',' << csv_number(r.speedup) << ','
       << csv_number(r.est_end_to_end_speedup) << ',' << csv_number(r.params_dense) << ','
       << csv_number(r.params_split) << ',' << csv_number(r.reduction_frac) << '\n';
  }
  return os.str();
}

enum class ReportFormat { kJson, kCsv };

inline void emit_report(std::span<const LatencyReport> reports, ReportFormat format, const std::string& path) {
  if (reports.empty()) throw RangeError("emit_report: no reports");
  const std::string body = format == ReportFormat::kCsv ? reports_to_csv(reports) : reports_to_json(reports).dump(2) + "\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("emit_report: cannot open '" + path + "' for writing");
  out << body;
  out.flush();
  if (!out) throw IoError("emit_report: write to '" + path + "' failed");
}

inline nlohmann::json param_report_to_json(const ParamReport& r) {
  return {{"d", r.d},
          {"d_ff", r.d_ff},
          {"layers", r.layers},
          {"plan", plan_to_json(r.plan)},
          {"heavy_hitters_per_layer", r.heavy_hitters},
          {"tail_rank", r.tail_rank},
          {"per_layer",
           {{"dense_ffn", r.per_layer.dense_ffn},
            {"compressed_ffn", r.per_layer.compressed_ffn},
            {"mha_equiv", r.per_layer.mha_equiv}}},
          {"dense_ffn_total", r.dense_ffn_total},
          {"compressed_ffn_total", r.compressed_ffn_total},
          {"mha_equiv_total", r.mha_equiv_total},
          {"reduction_frac", r.reduction_frac_total}};
}

}  // namespace hhsplit
