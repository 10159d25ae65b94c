// SPDX-License-Identifier: Apache-2.0
//
// Calibration-based neuron importance.
//
// Removing neuron j from an FFN changes its output by exactly
//   ||act(X U_{:,j})||_F^2 * ||V_{j,:}||_F^2,
// so the importance of j is the mean per-token activation energy times the
// squared norm of its down-projection row.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/linalg.hpp"

namespace hhsplit {

struct NeuronStats {
  Index layer_index = 0;
  std::vector<double> act_norm_sq;    // per neuron, summed over all calibration tokens
  std::vector<double> v_row_norm_sq;  // per neuron, ||V_{j,:}||^2
  Index tokens_seen = 0;

  Index d_ff() const noexcept { return act_norm_sq.size(); }
  bool operator==(const NeuronStats&) const = default;
};

struct ImportanceReport {
  Index layer_index = 0;
  std::vector<double> scores;
  std::vector<Index> sorted_order;  // descending score, ties by ascending index

  Index d_ff() const noexcept { return scores.size(); }
};

/// Empty statistics for `layer`; the down-projection row norms are filled in.
inline NeuronStats make_stats(const FfnLayer& layer, Index layer_index) {
  NeuronStats st;
  st.layer_index = layer_index;
  st.act_norm_sq.assign(layer.d_ff(), 0.0);
  st.v_row_norm_sq.resize(layer.d_ff());
  for (Index j = 0; j < layer.d_ff(); ++j) {
    double acc = 0.0;
    for (float v : layer.down().row(j)) acc += static_cast<double>(v) * v;
    st.v_row_norm_sq[j] = acc;
  }
  return st;
}

/// Adds one calibration batch. Rows are folded in one at a time, so splitting
/// a batch in two gives bit-identical totals.
inline void accumulate(NeuronStats& stats, const FfnLayer& layer, const DenseMatrix& x) {
  if (stats.d_ff() != layer.d_ff() || stats.v_row_norm_sq.size() != layer.d_ff()) {
    throw ShapeError("accumulate: stats track " + std::to_string(stats.d_ff()) + " neurons, layer has " +
                     std::to_string(layer.d_ff()));
  }
  detail::check_input(x, layer.d_model(), "accumulate");
  const DenseMatrix h = activate(layer.activation(), matmul(x, layer.up()));
  for (Index i = 0; i < h.rows(); ++i) {
    auto row = h.row(i);
    for (Index j = 0; j < h.cols(); ++j) stats.act_norm_sq[j] += static_cast<double>(row[j]) * row[j];
  }
  stats.tokens_seen += x.rows();
}

inline NeuronStats profile_layer(const FfnLayer& layer, Index layer_index, std::span<const DenseMatrix> calib) {
  NeuronStats st = make_stats(layer, layer_index);
  for (const auto& batch : calib) accumulate(st, layer, batch);
  return st;
}

inline ImportanceReport importance(const NeuronStats& stats) {
  if (stats.tokens_seen == 0) {
    throw EmptyCalibrationError("importance: layer " + std::to_string(stats.layer_index) +
                                " has seen no calibration tokens");
  }
  if (stats.v_row_norm_sq.size() != stats.act_norm_sq.size()) {
    throw ShapeError("importance: act_norm_sq and v_row_norm_sq lengths differ");
  }
  ImportanceReport rep;
  rep.layer_index = stats.layer_index;
  rep.scores.resize(stats.d_ff());
  const double tokens = static_cast<double>(stats.tokens_seen);
  for (Index j = 0; j < stats.d_ff(); ++j) rep.scores[j] = (stats.act_norm_sq[j] / tokens) * stats.v_row_norm_sq[j];
  rep.sorted_order.resize(stats.d_ff());
  std::iota(rep.sorted_order.begin(), rep.sorted_order.end(), Index{0});
  std::stable_sort(rep.sorted_order.begin(), rep.sorted_order.end(),
                   [&](Index a, Index b) { return rep.scores[a] > rep.scores[b]; });
  return rep;
}

/// floor(frac * n), tolerant of representation error such as 0.29 * 100.
inline Index fraction_count(double frac, Index n) {
  const double raw = frac * static_cast<double>(n);
  return static_cast<Index>(std::floor(raw + 1e-9 * std::max(1.0, raw)));
}

inline HeavyHitterSet select_heavy_hitters(const ImportanceReport& rep, double keep_frac) {
  if (!(keep_frac >= 0.0 && keep_frac <= 1.0)) {
    throw RangeError("select_heavy_hitters: keep_frac " + std::to_string(keep_frac) + " not in [0, 1]");
  }
  const Index k = std::min(rep.d_ff(), fraction_count(keep_frac, rep.d_ff()));
  std::vector<Index> chosen(rep.sorted_order.begin(), rep.sorted_order.begin() + static_cast<std::ptrdiff_t>(k));
  return HeavyHitterSet(rep.layer_index, std::move(chosen), rep.d_ff());
}

enum class AblationSide { kTop, kBottom };

/// Removes the floor(frac * d_ff) highest- or lowest-scoring neurons and
/// returns the mean per-token squared output residual over `calib`.
inline double ablate_and_measure(const FfnLayer& layer, const ImportanceReport& rep, double frac, AblationSide which,
                                 std::span<const DenseMatrix> calib) {
  if (!(frac > 0.0 && frac < 1.0)) throw RangeError("ablate_and_measure: frac must be in (0, 1)");
  if (calib.empty()) throw EmptyCalibrationError("ablate_and_measure: no calibration batches");
  if (rep.d_ff() != layer.d_ff()) throw ShapeError("ablate_and_measure: report does not match layer");
  const Index n = fraction_count(frac, layer.d_ff());
  if (n == 0) {
    throw DegenerateAblationError("ablate_and_measure: frac " + std::to_string(frac) + " of " +
                                  std::to_string(layer.d_ff()) + " neurons removes nothing");
  }
  std::vector<Index> victims;
  if (which == AblationSide::kTop) {
    victims.assign(rep.sorted_order.begin(), rep.sorted_order.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    victims.assign(rep.sorted_order.end() - static_cast<std::ptrdiff_t>(n), rep.sorted_order.end());
  }
  const FfnLayer ablated = remove_neurons(layer, victims);
  double residual = 0.0;
  Index tokens = 0;
  for (const auto& x : calib) {
    residual += output_residual_sq(layer, ablated, x);
    tokens += x.rows();
  }
  return tokens == 0 ? 0.0 : residual / static_cast<double>(tokens);
}

/// Scores in descending order (the long-tail plot).
inline std::vector<double> norm_distribution(const ImportanceReport& rep) {
  std::vector<double> out;
  out.reserve(rep.d_ff());
  for (Index j : rep.sorted_order) out.push_back(rep.scores[j]);
  return out;
}

// ---------------------------------------------------------------------------
// JSON: {version, layer_index, d_ff, tokens_seen, act_norm_sq, v_row_norm_sq}

inline constexpr int kStatsVersion = 1;

inline nlohmann::json stats_to_json(const NeuronStats& st) {
  return {{"version", kStatsVersion},          {"layer_index", st.layer_index},
          {"d_ff", st.d_ff()},                 {"tokens_seen", st.tokens_seen},
          {"act_norm_sq", st.act_norm_sq},     {"v_row_norm_sq", st.v_row_norm_sq}};
}

inline NeuronStats stats_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kStatsVersion) {
      throw FormatError("stats: unsupported version " + j.at("version").dump());
    }
    NeuronStats st;
    st.layer_index = j.at("layer_index").get<Index>();
    st.tokens_seen = j.at("tokens_seen").get<Index>();
    st.act_norm_sq = j.at("act_norm_sq").get<std::vector<double>>();
    st.v_row_norm_sq = j.at("v_row_norm_sq").get<std::vector<double>>();
    const auto d_ff = j.at("d_ff").get<Index>();
    if (st.act_norm_sq.size() != d_ff || st.v_row_norm_sq.size() != d_ff) {
      throw FormatError("stats: array lengths do not match d_ff " + std::to_string(d_ff));
    }
    for (Index i = 0; i < d_ff; ++i) {
      if (!(st.act_norm_sq[i] >= 0.0) || !(st.v_row_norm_sq[i] >= 0.0)) {
        throw FormatError("stats: negative or NaN norm at neuron " + std::to_string(i));
      }
    }
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats: ") + e.what());
  }
}

}  // namespace hhsplit
