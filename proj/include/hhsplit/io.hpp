// SPDX-License-Identifier: Apache-2.0
//
// .hhckpt checkpoint files and seeded synthetic data.
//
// Layout: one line of JSON header terminated by '\n', then the payload.
//   {"version":1,"dtype":"f32","kind":...,"meta":{...},
//    "tensors":[{"name","rows","cols","byte_offset"[,"dtype","bits","group_size"]}]}
// byte_offset is relative to the first payload byte. Tensors are contiguous,
// in header order, with no gaps and nothing after the last one.
//   f32 tensor:        rows*cols little-endian IEEE-754 floats, row-major.
//   "q<b>g<g>" tensor: rows * ceil(cols*b/8) packed code bytes (LSB first,
//                      each row byte aligned), then rows*ceil(cols/g) f32
//                      scales, then as many f32 zeros.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <regex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/linalg.hpp"
#include "hhsplit/profiler.hpp"
#include "hhsplit/quant.hpp"
#include "hhsplit/rng.hpp"

namespace hhsplit {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointExtension = ".hhckpt";

using Tensor = std::variant<DenseMatrix, QuantizedMatrix>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::string kind;  // "model", "split" or "calib"
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.tensor;
    throw FormatError("checkpoint: missing tensor '" + name + "'");
  }
  bool contains(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
  }
};

inline std::string quant_dtype_tag(unsigned bits, Index group_size) {
  return "q" + std::to_string(bits) + "g" + std::to_string(group_size);
}

namespace detail {

inline const std::regex& tensor_name_pattern() {
  static const std::regex re(R"(^(ffn\.[0-9]+\.(U|V|U1|V1|U2|V2|U2\.left|U2\.right|V2\.left|V2\.right)|calib\.[0-9]+)$)");
  return re;
}

inline Index tensor_bytes(const Tensor& t) {
  if (const auto* d = std::get_if<DenseMatrix>(&t)) return d->size() * 4;
  const auto& q = std::get<QuantizedMatrix>(t);
  return q.rows() * q.row_bytes() + 2 * q.group_count() * 4;
}

inline void put_f32(std::string& out, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFFu));
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(u);
}

inline void put_f32s(std::string& out, std::span<const float> v) {
  for (float f : v) put_f32(out, f);
}

inline std::vector<float> get_f32s(const unsigned char* p, Index n) {
  std::vector<float> v(n);
  for (Index i = 0; i < n; ++i) v[i] = get_f32(p + 4 * i);
  return v;
}

}  // namespace detail

/// Encodes a checkpoint to its exact file bytes.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json entries = nlohmann::json::array();
  std::set<std::string> names;
  std::string payload;
  for (const auto& nt : ckpt.tensors) {
    if (!std::regex_match(nt.name, detail::tensor_name_pattern())) {
      throw FormatError("checkpoint: invalid tensor name '" + nt.name + "'");
    }
    if (!names.insert(nt.name).second) throw FormatError("checkpoint: duplicate tensor name '" + nt.name + "'");
    nlohmann::json e = {{"name", nt.name}, {"byte_offset", payload.size()}};
    if (const auto* d = std::get_if<DenseMatrix>(&nt.tensor)) {
      e["rows"] = d->rows();
      e["cols"] = d->cols();
      detail::put_f32s(payload, d->data());
    } else {
      const auto& q = std::get<QuantizedMatrix>(nt.tensor);
      e["rows"] = q.rows();
      e["cols"] = q.cols();
      e["dtype"] = quant_dtype_tag(q.bits(), q.group_size());
      e["bits"] = q.bits();
      e["group_size"] = q.group_size();
      payload.append(reinterpret_cast<const char*>(q.packed().data()), q.packed().size());
      detail::put_f32s(payload, q.scales());
      detail::put_f32s(payload, q.zeros());
    }
    entries.push_back(std::move(e));
  }
  const nlohmann::json header = {{"version", kCheckpointVersion},
                                 {"dtype", "f32"},
                                 {"kind", ckpt.kind},
                                 {"meta", ckpt.meta},
                                 {"tensors", entries}};
  std::string out = header.dump();
  out.push_back('\n');
  out += payload;
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  const auto newline = bytes.find('\n');
  if (newline == std::string_view::npos) throw FormatError("checkpoint: no header terminator found");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header at byte 0: ") + e.what());
  }
  const Index payload_start = newline + 1;
  const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + payload_start;
  const Index payload_size = bytes.size() - payload_start;

  Checkpoint ckpt;
  try {
    if (!header.is_object()) throw FormatError("checkpoint: header is not a JSON object");
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    if (header.at("dtype").get<std::string>() != "f32") throw FormatError("checkpoint: unsupported dtype");
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");

    std::set<std::string> names;
    Index expected_offset = 0;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      if (!std::regex_match(name, detail::tensor_name_pattern())) {
        throw FormatError("checkpoint: invalid tensor name '" + name + "'");
      }
      if (!names.insert(name).second) throw FormatError("checkpoint: duplicate tensor name '" + name + "'");
      const auto rows = e.at("rows").get<Index>();
      const auto cols = e.at("cols").get<Index>();
      const auto offset = e.at("byte_offset").get<Index>();
      if (offset < expected_offset) {
        throw FormatError("checkpoint: tensor '" + name + "' at byte offset " + std::to_string(offset) +
                          " overlaps the previous tensor ending at " + std::to_string(expected_offset));
      }
      if (offset > expected_offset) {
        throw FormatError("checkpoint: gap before tensor '" + name + "' (byte offset " + std::to_string(offset) +
                          ", expected " + std::to_string(expected_offset) + ")");
      }
      if (cols != 0 && rows > 8 * payload_size / cols) {
        throw FormatError("checkpoint: tensor '" + name + "' at byte offset " + std::to_string(offset) +
                          " claims " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " elements, more than the " + std::to_string(payload_size) + "-byte payload holds");
      }
      const unsigned char* p = payload + offset;
      const std::string dtype = e.contains("dtype") ? e.at("dtype").get<std::string>() : "f32";
      Index need = 0;
      if (dtype == "f32") {
        need = rows * cols * 4;
        if (offset + need > payload_size) {
          throw FormatError("checkpoint: truncated payload: tensor '" + name + "' needs bytes [" +
                            std::to_string(offset) + ", " + std::to_string(offset + need) + ") of payload, only " +
                            std::to_string(payload_size) + " present");
        }
        ckpt.tensors.push_back({name, DenseMatrix(rows, cols, detail::get_f32s(p, rows * cols))});
      } else {
        const auto bits = e.at("bits").get<unsigned>();
        const auto group = e.at("group_size").get<Index>();
        if (dtype != quant_dtype_tag(bits, group)) {
          throw FormatError("checkpoint: tensor '" + name + "' dtype '" + dtype + "' disagrees with bits/group_size");
        }
        if (bits < 2 || bits > 8 || group < 1) throw FormatError("checkpoint: tensor '" + name + "' has bad bits/group");
        const Index row_bytes = (cols * bits + 7) / 8;
        const Index groups = rows * ((cols + group - 1) / group);
        need = rows * row_bytes + 2 * groups * 4;
        if (offset + need > payload_size) {
          throw FormatError("checkpoint: truncated payload: tensor '" + name + "' needs bytes [" +
                            std::to_string(offset) + ", " + std::to_string(offset + need) + ") of payload, only " +
                            std::to_string(payload_size) + " present");
        }
        std::vector<std::uint8_t> packed(p, p + rows * row_bytes);
        auto scales = detail::get_f32s(p + rows * row_bytes, groups);
        auto zeros = detail::get_f32s(p + rows * row_bytes + groups * 4, groups);
        try {
          ckpt.tensors.push_back({name, QuantizedMatrix::from_parts(rows, cols, bits, group, std::move(packed),
                                                                    std::move(scales), std::move(zeros))});
        } catch (const FormatError& err) {
          throw FormatError("checkpoint: tensor '" + name + "' at payload byte offset " + std::to_string(offset) +
                            ": " + err.what());
        }
      }
      expected_offset = offset + need;
    }
    if (expected_offset != payload_size) {
      throw FormatError("checkpoint: " + std::to_string(payload_size - expected_offset) +
                        " trailing bytes after the last tensor (payload byte offset " +
                        std::to_string(expected_offset) + ")");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ckpt;
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Typed views

inline std::string layer_tensor(Index layer, const char* part) {
  return "ffn." + std::to_string(layer) + "." + part;
}

namespace detail {

inline const DenseMatrix& dense_at(const Checkpoint& c, const std::string& name) {
  const auto* d = std::get_if<DenseMatrix>(&c.at(name));
  if (d == nullptr) throw FormatError("checkpoint: tensor '" + name + "' is quantized, expected f32");
  return *d;
}

inline const QuantizedMatrix& quant_at(const Checkpoint& c, const std::string& name) {
  const auto* q = std::get_if<QuantizedMatrix>(&c.at(name));
  if (q == nullptr) throw FormatError("checkpoint: tensor '" + name + "' is f32, expected quantized");
  return *q;
}

inline void expect_kind(const Checkpoint& c, const char* kind) {
  if (c.kind != kind) throw FormatError("checkpoint: expected kind '" + std::string(kind) + "', found '" + c.kind + "'");
}

}  // namespace detail

inline Checkpoint model_to_checkpoint(std::span<const FfnLayer> layers, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.kind = "model";
  c.meta = std::move(meta);
  c.meta["layers"] = layers.size();
  for (Index l = 0; l < layers.size(); ++l) {
    c.tensors.push_back({layer_tensor(l, "U"), layers[l].up()});
    c.tensors.push_back({layer_tensor(l, "V"), layers[l].down()});
  }
  return c;
}

inline std::vector<FfnLayer> model_from_checkpoint(const Checkpoint& c) {
  detail::expect_kind(c, "model");
  std::vector<FfnLayer> layers;
  try {
    const auto n = c.meta.at("layers").get<Index>();
    for (Index l = 0; l < n; ++l) {
      layers.emplace_back(detail::dense_at(c, layer_tensor(l, "U")), detail::dense_at(c, layer_tensor(l, "V")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model checkpoint meta: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("model checkpoint: ") + e.what());
  }
  return layers;
}

inline Checkpoint split_to_checkpoint(std::span<const SplitFfn> splits, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.kind = "split";
  c.meta = std::move(meta);
  nlohmann::json layers = nlohmann::json::array();
  for (Index l = 0; l < splits.size(); ++l) {
    const auto& s = splits[l];
    nlohmann::json info = {{"layer", l},
                           {"d_model", s.d_model},
                           {"original_dff", s.original_dff},
                           {"hh_layer_index", s.hh.layer_index()},
                           {"heavy_hitters", s.hh.indices()},
                           {"activation", "gelu"}};
    if (const auto* h = std::get_if<DenseBlock>(&s.head)) {
      info["head"] = "dense";
      c.tensors.push_back({layer_tensor(l, "U1"), h->up});
      c.tensors.push_back({layer_tensor(l, "V1"), h->down});
    } else {
      const auto& q = std::get<QuantizedBlock>(s.head);
      info["head"] = "quantized";
      c.tensors.push_back({layer_tensor(l, "U1"), q.up_t});
      c.tensors.push_back({layer_tensor(l, "V1"), q.down_t});
    }
    if (const auto* t = std::get_if<DenseBlock>(&s.tail)) {
      info["tail"] = "dense";
      c.tensors.push_back({layer_tensor(l, "U2"), t->up});
      c.tensors.push_back({layer_tensor(l, "V2"), t->down});
    } else if (const auto* t = std::get_if<LowRankBlock>(&s.tail)) {
      info["tail"] = "lowrank";
      c.tensors.push_back({layer_tensor(l, "U2.left"), t->up.left});
      c.tensors.push_back({layer_tensor(l, "U2.right"), t->up.right});
      c.tensors.push_back({layer_tensor(l, "V2.left"), t->down.left});
      c.tensors.push_back({layer_tensor(l, "V2.right"), t->down.right});
    } else {
      const auto& q = std::get<QuantizedBlock>(s.tail);
      info["tail"] = "quantized";
      c.tensors.push_back({layer_tensor(l, "U2"), q.up_t});
      c.tensors.push_back({layer_tensor(l, "V2"), q.down_t});
    }
    layers.push_back(std::move(info));
  }
  c.meta["split_layers"] = std::move(layers);
  return c;
}

inline std::vector<SplitFfn> splits_from_checkpoint(const Checkpoint& c) {
  detail::expect_kind(c, "split");
  std::vector<SplitFfn> out;
  try {
    for (const auto& info : c.meta.at("split_layers")) {
      const auto l = info.at("layer").get<Index>();
      SplitFfn s;
      s.d_model = info.at("d_model").get<Index>();
      s.original_dff = info.at("original_dff").get<Index>();
      try {
        s.hh = HeavyHitterSet(info.at("hh_layer_index").get<Index>(),
                              info.at("heavy_hitters").get<std::vector<Index>>(), s.original_dff);
      } catch (const IndexError& e) {
        throw FormatError(std::string("split checkpoint: ") + e.what());
      }
      const auto head = info.at("head").get<std::string>();
      if (head == "dense") {
        s.head = DenseBlock{detail::dense_at(c, layer_tensor(l, "U1")), detail::dense_at(c, layer_tensor(l, "V1"))};
      } else if (head == "quantized") {
        s.head = QuantizedBlock{detail::quant_at(c, layer_tensor(l, "U1")), detail::quant_at(c, layer_tensor(l, "V1"))};
      } else {
        throw FormatError("split checkpoint: unknown head form '" + head + "'");
      }
      const auto tail = info.at("tail").get<std::string>();
      if (tail == "dense") {
        s.tail = DenseBlock{detail::dense_at(c, layer_tensor(l, "U2")), detail::dense_at(c, layer_tensor(l, "V2"))};
      } else if (tail == "lowrank") {
        s.tail = LowRankBlock{
            {detail::dense_at(c, layer_tensor(l, "U2.left")), detail::dense_at(c, layer_tensor(l, "U2.right"))},
            {detail::dense_at(c, layer_tensor(l, "V2.left")), detail::dense_at(c, layer_tensor(l, "V2.right"))}};
      } else if (tail == "quantized") {
        s.tail = QuantizedBlock{detail::quant_at(c, layer_tensor(l, "U2")), detail::quant_at(c, layer_tensor(l, "V2"))};
      } else {
        throw FormatError("split checkpoint: unknown tail form '" + tail + "'");
      }
      if (s.head_neurons() != s.hh.size() || s.head_neurons() + s.tail_neurons() != s.original_dff) {
        throw FormatError("split checkpoint: layer " + std::to_string(l) +
                          " neuron counts disagree with heavy-hitter set and original d_ff");
      }
      out.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split checkpoint meta: ") + e.what());
  }
  return out;
}

inline Checkpoint calib_to_checkpoint(std::span<const DenseMatrix> batches, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint c;
  c.kind = "calib";
  c.meta = std::move(meta);
  c.meta["batches"] = batches.size();
  for (Index b = 0; b < batches.size(); ++b) c.tensors.push_back({"calib." + std::to_string(b), batches[b]});
  return c;
}

inline std::vector<DenseMatrix> calib_from_checkpoint(const Checkpoint& c) {
  detail::expect_kind(c, "calib");
  std::vector<DenseMatrix> out;
  try {
    const auto n = c.meta.at("batches").get<Index>();
    for (Index b = 0; b < n; ++b) out.push_back(detail::dense_at(c, "calib." + std::to_string(b)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("calibration checkpoint meta: ") + e.what());
  }
  return out;
}

// Stats live in JSON: {"version":1,"layers":[<per-layer stats document>...]}.

inline std::string stats_to_string(std::span<const NeuronStats> stats) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& s : stats) layers.push_back(stats_to_json(s));
  return nlohmann::json{{"version", kStatsVersion}, {"layers", layers}}.dump() + "\n";
}

inline std::vector<NeuronStats> stats_from_string(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats: malformed JSON: ") + e.what());
  }
  std::vector<NeuronStats> out;
  try {
    if (j.at("version").get<int>() != kStatsVersion) throw FormatError("stats: unsupported version");
    for (const auto& l : j.at("layers")) out.push_back(stats_from_json(l));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("stats: ") + e.what());
  }
  return out;
}

inline void save_stats(const std::string& path, std::span<const NeuronStats> stats) {
  write_file(path, stats_to_string(stats));
}

inline std::vector<NeuronStats> load_stats(const std::string& path) { return stats_from_string(read_file(path)); }

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticModel {
  FfnLayer layer;
  std::vector<Index> planted;  // ascending
};

/// Gaussian FFN (std 1/sqrt(d)) with `n_heavy` planted heavy hitters: their U
/// columns are scaled by heavy_scale and V rows by sqrt(heavy_scale).
///
/// Draw order: U row-major, V row-major (one normal() each), then a partial
/// Fisher-Yates over [0, d_ff) using below() picks the planted neurons.
inline SyntheticModel gen_synthetic_model(Index d, Index d_ff, Index n_heavy, double heavy_scale, std::uint64_t seed) {
  if (d == 0 || d_ff == 0) throw RangeError("gen_synthetic_model: dimensions must be positive");
  if (n_heavy > d_ff) {
    throw RangeError("gen_synthetic_model: n_heavy " + std::to_string(n_heavy) + " exceeds d_ff " +
                     std::to_string(d_ff));
  }
  if (!(heavy_scale > 1.0)) throw RangeError("gen_synthetic_model: heavy_scale must be > 1");
  Xoshiro256ss rng(seed);
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
  DenseMatrix up(d, d_ff), down(d_ff, d);
  for (float& v : up.data()) v = static_cast<float>(rng.normal() * std_dev);
  for (float& v : down.data()) v = static_cast<float>(rng.normal() * std_dev);

  std::vector<Index> perm(d_ff);
  std::iota(perm.begin(), perm.end(), Index{0});
  for (Index i = 0; i < n_heavy; ++i) std::swap(perm[i], perm[i + rng.below(d_ff - i)]);
  std::vector<Index> planted(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_heavy));
  std::sort(planted.begin(), planted.end());

  const auto col_scale = static_cast<float>(heavy_scale);
  const auto row_scale = static_cast<float>(std::sqrt(heavy_scale));
  for (Index j : planted) {
    for (Index r = 0; r < d; ++r) up(r, j) *= col_scale;
    for (float& v : down.row(j)) v *= row_scale;
  }
  return {FfnLayer(std::move(up), std::move(down)), std::move(planted)};
}

/// `batches` matrices of s_tokens x d standard normal entries from one stream.
inline std::vector<DenseMatrix> gen_calibration(Index s_tokens, Index d, Index batches, std::uint64_t seed) {
  if (batches > 0 && (s_tokens == 0 || d == 0)) throw RangeError("gen_calibration: sizes must be positive");
  Xoshiro256ss rng(seed);
  std::vector<DenseMatrix> out;
  out.reserve(batches);
  for (Index b = 0; b < batches; ++b) {
    DenseMatrix x(s_tokens, d);
    for (float& v : x.data()) v = static_cast<float>(rng.normal());
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace hhsplit
