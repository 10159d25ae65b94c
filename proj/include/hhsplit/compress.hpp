// SPDX-License-Identifier: Apache-2.0
//
// Asymmetric compression of a split FFN: the heavy-hitter head gets more
// resources than the tail.
//   lowrank: head kept in fp32, tail U2 and V2 each replaced by a truncated SVD.
//   quant:   head RTN-quantized at hh_bits, tail at tail_bits.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <variant>

#include "hhsplit/errors.hpp"
#include "hhsplit/ffn.hpp"
#include "hhsplit/linalg.hpp"
#include "hhsplit/plan.hpp"
#include "hhsplit/quant.hpp"

namespace hhsplit {

namespace detail {

inline const DenseBlock& dense_tail(const SplitFfn& s, const char* what) {
  const auto* tail = std::get_if<DenseBlock>(&s.tail);
  if (tail == nullptr) throw RangeError(std::string(what) + ": tail is already compressed");
  return *tail;
}

inline QuantizedBlock quantize_block(const DenseBlock& b, unsigned bits, Index group_size) {
  return QuantizedBlock{quantize_matrix(transpose(b.up), bits, group_size),
                        quantize_matrix(transpose(b.down), bits, group_size)};
}

}  // namespace detail

/// Replaces the dense tail by rank-r factors of U2 and V2, r = tail_rank(d, m,
/// rank_frac). The head is carried over untouched.
inline SplitFfn compress_lowrank(const SplitFfn& s, double rank_frac) {
  const DenseBlock& tail = detail::dense_tail(s, "compress_lowrank");
  if (tail.neurons() == 0) {
    throw NothingToCompressError("compress_lowrank: tail is empty (every neuron is a heavy hitter)");
  }
  if (!(rank_frac >= 0.0 && rank_frac <= 1.0)) throw RangeError("compress_lowrank: rank_frac not in [0, 1]");
  const Index r = tail_rank(s.d_model, tail.neurons(), rank_frac);
  SplitFfn out = s;
  out.tail = LowRankBlock{truncated_svd(tail.up, r), truncated_svd(tail.down, r)};
  return out;
}

/// Quantizes head and tail with groups along each product's reduction
/// dimension. An empty tail stays empty.
inline SplitFfn compress_quant(const SplitFfn& s, const CompressionPlan& plan) {
  plan.validate();
  const DenseBlock& tail = detail::dense_tail(s, "compress_quant");
  const auto* head = std::get_if<DenseBlock>(&s.head);
  if (head == nullptr) throw RangeError("compress_quant: head is already quantized");
  SplitFfn out = s;
  out.head = detail::quantize_block(*head, plan.hh_bits, plan.group_size);
  if (tail.neurons() > 0) out.tail = detail::quantize_block(tail, plan.tail_bits, plan.group_size);
  return out;
}

/// Applies the plan to an already split layer.
inline SplitFfn compress(const SplitFfn& s, const CompressionPlan& plan) {
  plan.validate();
  return plan.mode == CompressionMode::kLowRank ? compress_lowrank(s, plan.rank_frac) : compress_quant(s, plan);
}

/// Baseline without protection: every neuron goes into a rank-r tail.
inline SplitFfn compress_lowrank_uniform(const FfnLayer& layer, Index rank) {
  const SplitFfn all_tail = split_ffn(layer, HeavyHitterSet(0, {}, layer.d_ff()));
  const auto& tail = std::get<DenseBlock>(all_tail.tail);
  SplitFfn out = all_tail;
  out.tail = LowRankBlock{truncated_svd(tail.up, rank), truncated_svd(tail.down, rank)};
  return out;
}

/// Baseline without protection: every neuron quantized at `bits`.
inline SplitFfn compress_quant_uniform(const FfnLayer& layer, unsigned bits, Index group_size) {
  const SplitFfn all_tail = split_ffn(layer, HeavyHitterSet(0, {}, layer.d_ff()));
  SplitFfn out = all_tail;
  out.tail = detail::quantize_block(std::get<DenseBlock>(all_tail.tail), bits, group_size);
  return out;
}

struct CompressionQuality {
  double mse = 0.0;      // mean over all output elements
  double rel_err = 0.0;  // ||ref - out||_F / ||ref||_F over all batches
};

inline CompressionQuality eval_compression(const FfnLayer& original, const SplitFfn& compressed,
                                           std::span<const DenseMatrix> calib, QuantPath path = QuantPath::kFused) {
  if (calib.empty()) throw EmptyCalibrationError("eval_compression: no calibration batches");
  if (compressed.d_model != original.d_model() || compressed.original_dff != original.d_ff()) {
    throw ShapeError("eval_compression: compressed layer does not match the original shape");
  }
  double diff_sq = 0.0, ref_sq = 0.0;
  Index elements = 0;
  for (const auto& x : calib) {
    const DenseMatrix ref = ffn_forward(original, x);
    const DenseMatrix out = split_forward(compressed, x, path);
    for (Index i = 0; i < ref.size(); ++i) {
      const double r = ref.data()[i];
      const double e = r - out.data()[i];
      diff_sq += e * e;
      ref_sq += r * r;
    }
    elements += ref.size();
  }
  CompressionQuality q;
  q.mse = elements == 0 ? 0.0 : diff_sq / static_cast<double>(elements);
  q.rel_err = ref_sq > 0.0 ? std::sqrt(diff_sq / ref_sq) : std::sqrt(diff_sq);
  return q;
}

}  // namespace hhsplit
