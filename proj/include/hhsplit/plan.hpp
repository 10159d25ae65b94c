// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "hhsplit/errors.hpp"
#include "hhsplit/linalg.hpp"

namespace hhsplit {

enum class CompressionMode { kLowRank, kQuant };

inline std::string to_string(CompressionMode m) { return m == CompressionMode::kLowRank ? "lowrank" : "quant"; }

inline CompressionMode parse_mode(const std::string& s) {
  if (s == "lowrank") return CompressionMode::kLowRank;
  if (s == "quant") return CompressionMode::kQuant;
  throw RangeError("unknown compression mode '" + s + "' (expected lowrank or quant)");
}

/// Everything that determines a compressed FFN. Defaults: keep the top 25% of
/// neurons, tail rank 10% of full rank, 8-bit heavy hitters, 3-bit tail,
/// quantization groups of 128.
struct CompressionPlan {
  CompressionMode mode = CompressionMode::kLowRank;
  double keep_frac = 0.25;
  double rank_frac = 0.10;
  unsigned hh_bits = 8;
  unsigned tail_bits = 3;
  Index group_size = 128;

  void validate() const {
    auto frac_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
    if (!frac_ok(keep_frac)) throw RangeError("plan: keep_frac " + std::to_string(keep_frac) + " not in [0, 1]");
    if (!frac_ok(rank_frac)) throw RangeError("plan: rank_frac " + std::to_string(rank_frac) + " not in [0, 1]");
    if (hh_bits < 2 || hh_bits > 8) throw RangeError("plan: hh_bits " + std::to_string(hh_bits) + " not in [2, 8]");
    if (tail_bits < 2 || tail_bits > 8) {
      throw RangeError("plan: tail_bits " + std::to_string(tail_bits) + " not in [2, 8]");
    }
    if (group_size < 1) throw RangeError("plan: group_size must be >= 1");
  }

  bool operator==(const CompressionPlan&) const = default;
};

/// Tail rank: floor(rank_frac * min(d, m)), at least 1. Full rank is taken
/// over the tail matrices, which share min(d, m).
inline Index tail_rank(Index d, Index tail_neurons, double rank_frac) {
  const Index full = std::min(d, tail_neurons);
  const double raw = rank_frac * static_cast<double>(full);
  const auto r = static_cast<Index>(std::floor(raw + 1e-9 * std::max(1.0, raw)));
  return std::clamp<Index>(r, 1, std::max<Index>(full, 1));
}

inline nlohmann::json plan_to_json(const CompressionPlan& p) {
  return {{"mode", to_string(p.mode)}, {"keep_frac", p.keep_frac}, {"rank_frac", p.rank_frac},
          {"hh_bits", p.hh_bits},      {"tail_bits", p.tail_bits}, {"group_size", p.group_size}};
}

inline CompressionPlan plan_from_json(const nlohmann::json& j) {
  try {
    CompressionPlan p;
    p.mode = parse_mode(j.at("mode").get<std::string>());
    p.keep_frac = j.at("keep_frac").get<double>();
    p.rank_frac = j.at("rank_frac").get<double>();
    p.hh_bits = j.at("hh_bits").get<unsigned>();
    p.tail_bits = j.at("tail_bits").get<unsigned>();
    p.group_size = j.at("group_size").get<Index>();
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("plan: ") + e.what());
  }
}

}  // namespace hhsplit
