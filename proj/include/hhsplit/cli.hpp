// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: gen-model, gen-calib, profile, split, compress, eval,
// bench, params. Exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric or
// measurement failure. Diagnostics go to `err`; JSON results to `out` (or
// --out where the subcommand writes a file).
#pragma once

#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hhsplit/bench.hpp"
#include "hhsplit/compress.hpp"
#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/io.hpp"
#include "hhsplit/plan.hpp"
#include "hhsplit/profiler.hpp"

namespace hhsplit::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Config {
  std::string model_path;
  std::string calib_path;
  std::string stats_path;
  std::string split_path;
  std::string out_path;
  CompressionPlan plan;
  std::string mode = "lowrank";
  Index d = 768;
  Index d_ff = 3072;
  Index layers = 1;
  Index batch = 8;
  Index seq = 128;
  Index n_heavy = 0;
  double heavy_scale = 10.0;
  Index tokens = 128;
  Index batches = 64;
  std::uint64_t seed = 0;
  Index repeats = kMinRepeats;
  Index threads = 0;  // 0: HH_SPLIT_THREADS or 1
  std::string format = "json";
  std::string quant_path = "fused";
  std::string hardware;
  double ablate_frac = 0.0;
};

inline std::string host_description() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        auto name = line.substr(colon + 1);
        name.erase(0, name.find_first_not_of(' '));
        return name;
      }
    }
  }
  return "unknown";
}

namespace detail {

inline void emit_json(const nlohmann::json& j, const Config& cfg, std::ostream& out, bool to_file) {
  const std::string text = j.dump(2) + "\n";
  if (to_file && !cfg.out_path.empty()) {
    write_file(cfg.out_path, text);
  } else {
    out << text;
  }
}

inline void add_plan_flags(CLI::App* sub, Config& cfg, bool with_mode) {
  if (with_mode) {
    sub->add_option("--mode", cfg.mode, "Compression mode: lowrank or quant")
        ->check(CLI::IsMember({"lowrank", "quant"}));
  }
  sub->add_option("--keep-frac", cfg.plan.keep_frac, "Heavy-hitter fraction per layer (default: top 25%)")
      ->check(CLI::Range(0.0, 1.0));
  sub->add_option("--rank-frac", cfg.plan.rank_frac, "Tail rank as a fraction of full rank (default 10%)")
      ->check(CLI::Range(0.0, 1.0));
  sub->add_option("--hh-bits", cfg.plan.hh_bits, "Heavy-hitter bit-width in quant mode (default 8)")
      ->check(CLI::Range(2u, 8u));
  sub->add_option("--tail-bits", cfg.plan.tail_bits, "Tail bit-width in quant mode (default 3)")
      ->check(CLI::Range(2u, 8u));
  sub->add_option("--group-size", cfg.plan.group_size, "Quantization group size (default 128)")
      ->check(CLI::PositiveNumber);
}

inline nlohmann::json resolved(const Config& cfg, const std::string& sub) {
  nlohmann::json j = {{"subcommand", sub}, {"plan", plan_to_json(cfg.plan)}, {"seed", cfg.seed},
                      {"threads", thread_count()}};
  auto put_if = [&](const char* key, const std::string& v) {
    if (!v.empty()) j[key] = v;
  };
  put_if("model", cfg.model_path);
  put_if("calib", cfg.calib_path);
  put_if("stats", cfg.stats_path);
  put_if("split", cfg.split_path);
  put_if("out", cfg.out_path);
  return j;
}

inline int cmd_gen_model(const Config& cfg, std::ostream& out) {
  std::vector<FfnLayer> layers;
  nlohmann::json planted = nlohmann::json::array();
  for (Index l = 0; l < cfg.layers; ++l) {
    auto m = gen_synthetic_model(cfg.d, cfg.d_ff, cfg.n_heavy, cfg.heavy_scale, cfg.seed + l);
    planted.push_back(m.planted);
    layers.push_back(std::move(m.layer));
  }
  nlohmann::json meta = {{"generator", {{"d", cfg.d}, {"d_ff", cfg.d_ff}, {"n_heavy", cfg.n_heavy},
                                        {"heavy_scale", cfg.heavy_scale}, {"seed", cfg.seed}}},
                         {"planted", planted}};
  save_checkpoint(cfg.out_path, model_to_checkpoint(layers, meta));
  auto config = resolved(cfg, "gen-model");
  config["d"] = cfg.d;
  config["d_ff"] = cfg.d_ff;
  config["layers"] = cfg.layers;
  config["n_heavy"] = cfg.n_heavy;
  config["heavy_scale"] = cfg.heavy_scale;
  emit_json({{"config", config}, {"planted", planted}, {"path", cfg.out_path}}, cfg, out, false);
  return kOk;
}

inline int cmd_gen_calib(const Config& cfg, std::ostream& out) {
  const auto batches = gen_calibration(cfg.tokens, cfg.d, cfg.batches, cfg.seed);
  save_checkpoint(cfg.out_path,
                  calib_to_checkpoint(batches, {{"tokens", cfg.tokens}, {"d", cfg.d}, {"seed", cfg.seed}}));
  auto config = resolved(cfg, "gen-calib");
  config["tokens"] = cfg.tokens;
  config["d"] = cfg.d;
  config["batches"] = cfg.batches;
  emit_json({{"config", config}, {"path", cfg.out_path}}, cfg, out, false);
  return kOk;
}

inline int cmd_profile(const Config& cfg, std::ostream& out) {
  const auto layers = model_from_checkpoint(load_checkpoint(cfg.model_path));
  const auto calib = calib_from_checkpoint(load_checkpoint(cfg.calib_path));
  if (calib.empty()) throw EmptyCalibrationError("profile: calibration file has no batches");
  std::vector<NeuronStats> stats;
  nlohmann::json report = nlohmann::json::array();
  for (Index l = 0; l < layers.size(); ++l) {
    stats.push_back(profile_layer(layers[l], l, calib));
    const auto rep = importance(stats.back());
    nlohmann::json entry = {{"layer_index", l},
                            {"tokens_seen", stats.back().tokens_seen},
                            {"sorted_order", rep.sorted_order},
                            {"norm_distribution", norm_distribution(rep)}};
    if (cfg.ablate_frac > 0.0) {
      entry["ablation"] = {
          {"frac", cfg.ablate_frac},
          {"top_residual", ablate_and_measure(layers[l], rep, cfg.ablate_frac, AblationSide::kTop, calib)},
          {"bottom_residual", ablate_and_measure(layers[l], rep, cfg.ablate_frac, AblationSide::kBottom, calib)}};
    }
    report.push_back(std::move(entry));
  }
  save_stats(cfg.out_path, stats);
  emit_json({{"config", resolved(cfg, "profile")}, {"layers", report}}, cfg, out, false);
  return kOk;
}

inline int cmd_split(const Config& cfg, std::ostream& out) {
  const auto layers = model_from_checkpoint(load_checkpoint(cfg.model_path));
  const auto stats = load_stats(cfg.stats_path);
  if (stats.size() != layers.size()) {
    throw ShapeError("split: stats cover " + std::to_string(stats.size()) + " layers, model has " +
                     std::to_string(layers.size()));
  }
  std::vector<SplitFfn> splits;
  nlohmann::json info = nlohmann::json::array();
  for (Index l = 0; l < layers.size(); ++l) {
    if (stats[l].d_ff() != layers[l].d_ff()) {
      throw ShapeError("split: stats for layer " + std::to_string(l) + " track " + std::to_string(stats[l].d_ff()) +
                       " neurons, model layer has " + std::to_string(layers[l].d_ff()));
    }
    const auto hh = select_heavy_hitters(importance(stats[l]), cfg.plan.keep_frac);
    splits.push_back(split_ffn(layers[l], hh));
    info.push_back({{"layer", l}, {"heavy_hitters", hh.indices()}, {"tail_neurons", splits.back().tail_neurons()}});
  }
  save_checkpoint(cfg.out_path, split_to_checkpoint(splits, {{"plan", plan_to_json(cfg.plan)}}));
  emit_json({{"config", resolved(cfg, "split")}, {"layers", info}}, cfg, out, false);
  return kOk;
}

inline int cmd_compress(const Config& cfg, std::ostream& out) {
  const auto splits = splits_from_checkpoint(load_checkpoint(cfg.split_path));
  std::vector<SplitFfn> compressed;
  nlohmann::json info = nlohmann::json::array();
  for (Index l = 0; l < splits.size(); ++l) {
    compressed.push_back(compress(splits[l], cfg.plan));
    nlohmann::json e = {{"layer", l},
                        {"params_before", parameter_count(splits[l])},
                        {"params_after", parameter_count(compressed.back())}};
    if (const auto* t = std::get_if<LowRankBlock>(&compressed.back().tail)) e["tail_rank"] = t->up.rank();
    info.push_back(std::move(e));
  }
  save_checkpoint(cfg.out_path, split_to_checkpoint(compressed, {{"plan", plan_to_json(cfg.plan)}}));
  emit_json({{"config", resolved(cfg, "compress")}, {"layers", info}}, cfg, out, false);
  return kOk;
}

inline int cmd_eval(const Config& cfg, std::ostream& out) {
  const auto layers = model_from_checkpoint(load_checkpoint(cfg.model_path));
  const auto splits = splits_from_checkpoint(load_checkpoint(cfg.split_path));
  const auto calib = calib_from_checkpoint(load_checkpoint(cfg.calib_path));
  if (layers.size() != splits.size()) throw ShapeError("eval: model and split have different layer counts");
  const QuantPath path = cfg.quant_path == "reference" ? QuantPath::kReference : QuantPath::kFused;
  nlohmann::json info = nlohmann::json::array();
  double mse_sum = 0.0, rel_sum = 0.0;
  for (Index l = 0; l < layers.size(); ++l) {
    const auto q = eval_compression(layers[l], splits[l], calib, path);
    info.push_back({{"layer", l}, {"mse", q.mse}, {"rel_err", q.rel_err}, {"params", parameter_count(splits[l])},
                    {"params_dense", parameter_count(layers[l])}});
    mse_sum += q.mse;
    rel_sum += q.rel_err;
  }
  const double n = layers.empty() ? 1.0 : static_cast<double>(layers.size());
  auto config = resolved(cfg, "eval");
  config["quant_path"] = cfg.quant_path;
  emit_json({{"config", config}, {"layers", info}, {"mean_mse", mse_sum / n}, {"mean_rel_err", rel_sum / n}}, cfg, out,
            true);
  return kOk;
}

inline int cmd_bench(const Config& cfg, std::ostream& out) {
  const auto model = gen_synthetic_model(cfg.d, cfg.d_ff, cfg.n_heavy, cfg.heavy_scale, cfg.seed);
  const auto calib = gen_calibration(cfg.seq, cfg.d, 1, cfg.seed + 1);
  const auto hh = select_heavy_hitters(importance(profile_layer(model.layer, 0, calib)), cfg.plan.keep_frac);
  const SplitFfn split = compress(split_ffn(model.layer, hh), cfg.plan);

  LatencyConfig lc;
  lc.batch = cfg.batch;
  lc.seq = cfg.seq;
  lc.d = cfg.d;
  lc.d_ff = cfg.d_ff;
  lc.plan = cfg.plan;
  lc.threads = thread_count();
  lc.repeats = cfg.repeats;
  lc.hardware = cfg.hardware.empty() ? host_description() : cfg.hardware;
  const std::vector<LatencyReport> reports{compare_latency(model.layer, split, lc, cfg.seed + 2)};

  const auto format = cfg.format == "csv" ? ReportFormat::kCsv : ReportFormat::kJson;
  if (!cfg.out_path.empty()) {
    emit_report(reports, format, cfg.out_path);
  } else if (format == ReportFormat::kCsv) {
    out << reports_to_csv(reports);
    return kOk;
  }
  const auto flops = count_flops(cfg.d, cfg.d_ff, cfg.batch * cfg.seq, cfg.plan);
  auto doc = reports_to_json(reports);
  doc["config"] = resolved(cfg, "bench");
  doc["flops"] = {{"dense", flops.dense}, {"split", flops.split}, {"ratio", flops.ratio}};
  doc["note"] = "est_end_to_end_speedup assumes the FFN is 2/3 of whole-model latency";
  out << doc.dump(2) << "\n";
  return kOk;
}

inline int cmd_params(const Config& cfg, std::ostream& out) {
  const auto rep = count_params(cfg.d, cfg.d_ff, cfg.layers, cfg.plan);
  auto doc = param_report_to_json(rep);
  auto config = resolved(cfg, "params");
  config["d"] = cfg.d;
  config["d_ff"] = cfg.d_ff;
  config["layers"] = cfg.layers;
  doc["config"] = config;
  emit_json(doc, cfg, out, true);
  return kOk;
}

}  // namespace detail

/// Parses argv and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Config cfg;
  CLI::App app{"Heavy-hitter aware FFN split and compression"};
  app.require_subcommand(1);
  app.add_option("--threads", cfg.threads, "Worker threads (default: HH_SPLIT_THREADS or 1)");

  auto* gen_model = app.add_subcommand("gen-model", "Generate a Gaussian FFN model with planted heavy hitters");
  gen_model->add_option("--d", cfg.d, "Hidden dimension")->check(CLI::PositiveNumber);
  gen_model->add_option("--dff", cfg.d_ff, "FFN hidden dimension")->check(CLI::PositiveNumber);
  gen_model->add_option("--layers", cfg.layers, "Layer count")->check(CLI::PositiveNumber);
  gen_model->add_option("--n-heavy", cfg.n_heavy, "Planted heavy hitters per layer");
  gen_model->add_option("--heavy-scale", cfg.heavy_scale, "Scale of planted U columns (> 1)");
  gen_model->add_option("--seed", cfg.seed, "Generator seed (layer l uses seed + l)");
  gen_model->add_option("--out", cfg.out_path, "Output .hhckpt")->required();

  auto* gen_calib = app.add_subcommand("gen-calib", "Generate Gaussian calibration batches");
  gen_calib->add_option("--tokens", cfg.tokens, "Tokens per batch")->check(CLI::PositiveNumber);
  gen_calib->add_option("--d", cfg.d, "Hidden dimension")->check(CLI::PositiveNumber);
  gen_calib->add_option("--batches", cfg.batches, "Batch count (default 64)");
  gen_calib->add_option("--seed", cfg.seed, "Generator seed");
  gen_calib->add_option("--out", cfg.out_path, "Output .hhckpt")->required();

  auto* profile = app.add_subcommand("profile", "Accumulate neuron statistics over calibration data");
  profile->add_option("--model", cfg.model_path, "Model .hhckpt")->required();
  profile->add_option("--calib", cfg.calib_path, "Calibration .hhckpt")->required();
  profile->add_option("--out", cfg.out_path, "Output stats JSON")->required();
  profile->add_option("--ablate-frac", cfg.ablate_frac, "Also report top/bottom ablation residuals at this fraction")
      ->check(CLI::Range(0.0, 1.0));

  auto* split = app.add_subcommand("split", "Split each layer along its heavy hitters");
  split->add_option("--model", cfg.model_path, "Model .hhckpt")->required();
  split->add_option("--stats", cfg.stats_path, "Stats JSON from profile")->required();
  split->add_option("--out", cfg.out_path, "Output split .hhckpt")->required();
  detail::add_plan_flags(split, cfg, false);

  auto* compress_cmd = app.add_subcommand("compress", "Compress the tail (lowrank) or quantize (quant)");
  compress_cmd->add_option("--split", cfg.split_path, "Split .hhckpt")->required();
  compress_cmd->add_option("--out", cfg.out_path, "Output .hhckpt")->required();
  detail::add_plan_flags(compress_cmd, cfg, true);

  auto* eval = app.add_subcommand("eval", "Forward error of a split/compressed model against the original");
  eval->add_option("--model", cfg.model_path, "Model .hhckpt")->required();
  eval->add_option("--split", cfg.split_path, "Split or compressed .hhckpt")->required();
  eval->add_option("--calib", cfg.calib_path, "Calibration .hhckpt")->required();
  eval->add_option("--quant-path", cfg.quant_path, "Quantized forward path")
      ->check(CLI::IsMember({"fused", "reference"}));
  eval->add_option("--out", cfg.out_path, "Write JSON result here instead of stdout");

  auto* bench = app.add_subcommand("bench", "Dense vs. compressed FFN latency");
  bench->add_option("--d", cfg.d, "Hidden dimension (default 768)")->check(CLI::PositiveNumber);
  bench->add_option("--dff", cfg.d_ff, "FFN hidden dimension (default 3072)")->check(CLI::PositiveNumber);
  bench->add_option("--batch", cfg.batch, "Batch size")->check(CLI::PositiveNumber);
  bench->add_option("--seq", cfg.seq, "Sequence length")->check(CLI::PositiveNumber);
  bench->add_option("--n-heavy", cfg.n_heavy, "Planted heavy hitters in the synthetic layer");
  bench->add_option("--heavy-scale", cfg.heavy_scale, "Scale of planted U columns (> 1)");
  bench->add_option("--repeats", cfg.repeats, "Timed repetitions (>= 11)");
  bench->add_option("--seed", cfg.seed, "Seed for weights and input");
  bench->add_option("--format", cfg.format, "Report format")->check(CLI::IsMember({"json", "csv"}));
  bench->add_option("--hardware", cfg.hardware, "Hardware description recorded in the report");
  bench->add_option("--out", cfg.out_path, "Report file");
  detail::add_plan_flags(bench, cfg, true);

  auto* params = app.add_subcommand("params", "Closed-form parameter counts");
  params->add_option("--d", cfg.d, "Hidden dimension")->check(CLI::PositiveNumber);
  params->add_option("--dff", cfg.d_ff, "FFN hidden dimension")->check(CLI::PositiveNumber);
  params->add_option("--layers", cfg.layers, "Layer count (default 1)")->check(CLI::PositiveNumber);
  params->add_option("--out", cfg.out_path, "Write JSON result here instead of stdout");
  detail::add_plan_flags(params, cfg, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  const std::size_t saved_threads = thread_count();
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  cfg.plan.mode = parse_mode(cfg.mode);

  const std::vector<std::pair<CLI::App*, std::function<int(const Config&, std::ostream&)>>> table{
      {gen_model, detail::cmd_gen_model}, {gen_calib, detail::cmd_gen_calib}, {profile, detail::cmd_profile},
      {split, detail::cmd_split},         {compress_cmd, detail::cmd_compress}, {eval, detail::cmd_eval},
      {bench, detail::cmd_bench},         {params, detail::cmd_params}};
  int code = kUsage;
  try {
    for (const auto& [sub, fn] : table) {
      if (sub->parsed()) code = fn(cfg, out);
    }
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    code = kNumeric;
  } catch (const MeasurementError& e) {
    err << "error: " << e.what() << "\n";
    code = kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    code = kData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    code = kData;
  }
  set_thread_count(saved_threads);
  return code;
}

}  // namespace hhsplit::cli
