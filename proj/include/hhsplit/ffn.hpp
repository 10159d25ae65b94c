// SPDX-License-Identifier: Apache-2.0
//
// Feed-forward block FFN(X) = act(X U) V and its split along a heavy-hitter
// neuron set: FFN = FFN_head(X) + FFN_tail(X), where the head keeps the
// heavy-hitter columns of U / rows of V and the tail holds the rest.
#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hhsplit/errors.hpp"
#include "hhsplit/linalg.hpp"
#include "hhsplit/quant.hpp"

namespace hhsplit {

enum class Activation { kGelu };

inline DenseMatrix activate(Activation, const DenseMatrix& x) { return gelu(x); }

class FfnLayer {
 public:
  FfnLayer() = default;

  /// up: d x d_ff, down: d_ff x d.
  FfnLayer(DenseMatrix up, DenseMatrix down, Activation activation = Activation::kGelu)
      : up_(std::move(up)), down_(std::move(down)), activation_(activation) {
    if (up_.cols() != down_.rows() || up_.rows() != down_.cols()) {
      throw ShapeError("FfnLayer: up is " + std::to_string(up_.rows()) + "x" + std::to_string(up_.cols()) +
                       ", down is " + std::to_string(down_.rows()) + "x" + std::to_string(down_.cols()));
    }
  }

  const DenseMatrix& up() const noexcept { return up_; }
  const DenseMatrix& down() const noexcept { return down_; }
  Activation activation() const noexcept { return activation_; }
  Index d_model() const noexcept { return up_.rows(); }
  Index d_ff() const noexcept { return up_.cols(); }

 private:
  DenseMatrix up_;
  DenseMatrix down_;
  Activation activation_ = Activation::kGelu;
};

/// Heavy-hitter neuron indices of one layer, sorted ascending and unique.
class HeavyHitterSet {
 public:
  HeavyHitterSet() = default;

  HeavyHitterSet(Index layer_index, std::vector<Index> indices, Index d_ff)
      : layer_index_(layer_index), indices_(std::move(indices)) {
    detail::check_index_list(indices_, d_ff, "HeavyHitterSet");
    std::sort(indices_.begin(), indices_.end());
  }

  Index layer_index() const noexcept { return layer_index_; }
  const std::vector<Index>& indices() const noexcept { return indices_; }
  Index size() const noexcept { return indices_.size(); }
  bool operator==(const HeavyHitterSet&) const = default;

 private:
  Index layer_index_ = 0;
  std::vector<Index> indices_;
};

// ---------------------------------------------------------------------------
// Sub-FFN representations. Quantized weights are stored transposed (output
// major) so quantization groups run along the reduction dimension.

struct DenseBlock {
  DenseMatrix up;    // d x n
  DenseMatrix down;  // n x d
  Index neurons() const noexcept { return up.cols(); }
};

struct LowRankBlock {
  LowRankFactors up;    // approximates d x n
  LowRankFactors down;  // approximates n x d
  Index neurons() const noexcept { return up.cols(); }
};

struct QuantizedBlock {
  QuantizedMatrix up_t;    // (d x n)^T, groups along d
  QuantizedMatrix down_t;  // (n x d)^T, groups along n
  Index neurons() const noexcept { return up_t.rows(); }
};

using HeadForm = std::variant<DenseBlock, QuantizedBlock>;
using TailForm = std::variant<DenseBlock, LowRankBlock, QuantizedBlock>;

struct SplitFfn {
  HeadForm head;
  TailForm tail;
  HeavyHitterSet hh;
  Index d_model = 0;
  Index original_dff = 0;
  Activation activation = Activation::kGelu;

  Index head_neurons() const {
    return std::visit([](const auto& b) { return b.neurons(); }, head);
  }
  Index tail_neurons() const {
    return std::visit([](const auto& b) { return b.neurons(); }, tail);
  }
};

/// Quantized blocks can run either dequantize-then-dense (reference) or the
/// fused dequantizing product (fast).
enum class QuantPath { kReference, kFused };

namespace detail {

inline void check_input(const DenseMatrix& x, Index d, const char* what) {
  if (x.cols() != d) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(x.cols()) + " columns, model expects " +
                     std::to_string(d));
  }
}

inline DenseMatrix block_forward(const DenseBlock& b, const DenseMatrix& x, Activation act, QuantPath) {
  return matmul(activate(act, matmul(x, b.up)), b.down);
}

inline DenseMatrix block_forward(const LowRankBlock& b, const DenseMatrix& x, Activation act, QuantPath) {
  const DenseMatrix h = activate(act, matmul(matmul(x, b.up.left), b.up.right));
  return matmul(matmul(h, b.down.left), b.down.right);
}

inline DenseMatrix block_forward(const QuantizedBlock& b, const DenseMatrix& x, Activation act, QuantPath path) {
  if (path == QuantPath::kReference) {
    const DenseMatrix up = transpose(dequantize(b.up_t));
    const DenseMatrix down = transpose(dequantize(b.down_t));
    return matmul(activate(act, matmul(x, up)), down);
  }
  return matmul_quantized(activate(act, matmul_quantized(x, b.up_t)), b.down_t);
}

}  // namespace detail

inline DenseMatrix ffn_forward(const FfnLayer& layer, const DenseMatrix& x) {
  detail::check_input(x, layer.d_model(), "ffn_forward");
  return matmul(activate(layer.activation(), matmul(x, layer.up())), layer.down());
}

/// Sum over neurons j of act(x U_{:,j}) V_{j,:}, accumulated term by term in
/// double. Independent of matmul; used as a reference.
inline DenseMatrix ffn_forward_rank_one_sum(const FfnLayer& layer, const DenseMatrix& x) {
  detail::check_input(x, layer.d_model(), "ffn_forward_rank_one_sum");
  const Index s = x.rows(), d = layer.d_model();
  std::vector<double> acc(s * d, 0.0);
  std::vector<double> h(s);
  for (Index j = 0; j < layer.d_ff(); ++j) {
    for (Index i = 0; i < s; ++i) {
      double pre = 0.0;
      for (Index p = 0; p < d; ++p) pre += static_cast<double>(x(i, p)) * layer.up()(p, j);
      h[i] = gelu_scalar(pre);
    }
    auto vrow = layer.down().row(j);
    for (Index i = 0; i < s; ++i)
      for (Index k = 0; k < d; ++k) acc[i * d + k] += h[i] * vrow[k];
  }
  DenseMatrix out(s, d);
  for (Index i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<float>(acc[i]);
  return out;
}

/// Forward pass with no intermediate rounding to float. Output residuals
/// between two layers are measured with this path so that removing a weak
/// neuron is not lost to cancellation.
inline std::vector<double> ffn_forward_f64(const FfnLayer& layer, const DenseMatrix& x) {
  detail::check_input(x, layer.d_model(), "ffn_forward_f64");
  const Index s = x.rows(), d = layer.d_model(), n = layer.d_ff();
  std::vector<double> h(n), out(s * d, 0.0);
  for (Index i = 0; i < s; ++i) {
    std::fill(h.begin(), h.end(), 0.0);
    auto xr = x.row(i);
    for (Index p = 0; p < d; ++p) {
      const double xv = xr[p];
      auto urow = layer.up().row(p);
      for (Index j = 0; j < n; ++j) h[j] += xv * urow[j];
    }
    double* o = out.data() + i * d;
    for (Index j = 0; j < n; ++j) {
      const double a = gelu_scalar(h[j]);
      auto vrow = layer.down().row(j);
      for (Index k = 0; k < d; ++k) o[k] += a * vrow[k];
    }
  }
  return out;
}

/// Squared Frobenius norm of FFN_a(x) - FFN_b(x), evaluated in double.
inline double output_residual_sq(const FfnLayer& a, const FfnLayer& b, const DenseMatrix& x) {
  const auto ya = ffn_forward_f64(a, x);
  const auto yb = ffn_forward_f64(b, x);
  if (ya.size() != yb.size()) throw ShapeError("output_residual_sq: layers differ in d_model");
  double acc = 0.0;
  for (Index i = 0; i < ya.size(); ++i) acc += (ya[i] - yb[i]) * (ya[i] - yb[i]);
  return acc;
}

/// Splits a layer along hh with a dense tail; no weight value changes.
inline SplitFfn split_ffn(const FfnLayer& layer, const HeavyHitterSet& hh) {
  const auto& keep = hh.indices();
  detail::check_index_list(keep, layer.d_ff(), "split_ffn");
  const auto rest = complement(keep, layer.d_ff());
  SplitFfn s;
  s.head = DenseBlock{select_columns(layer.up(), keep), select_rows(layer.down(), keep)};
  s.tail = DenseBlock{select_columns(layer.up(), rest), select_rows(layer.down(), rest)};
  s.hh = hh;
  s.d_model = layer.d_model();
  s.original_dff = layer.d_ff();
  s.activation = layer.activation();
  return s;
}

inline DenseMatrix split_forward(const SplitFfn& s, const DenseMatrix& x, QuantPath path = QuantPath::kFused) {
  detail::check_input(x, s.d_model, "split_forward");
  const bool has_head = s.head_neurons() > 0;
  const bool has_tail = s.tail_neurons() > 0;
  if (!has_head && !has_tail) return DenseMatrix(x.rows(), s.d_model);
  auto run = [&](const auto& block) { return detail::block_forward(block, x, s.activation, path); };
  if (!has_tail) return std::visit(run, s.head);
  if (!has_head) return std::visit(run, s.tail);
  return add(std::visit(run, s.head), std::visit(run, s.tail));
}

/// Drops the given neurons (U columns and V rows).
inline FfnLayer remove_neurons(const FfnLayer& layer, std::span<const Index> idx) {
  const auto rest = complement(idx, layer.d_ff());
  return FfnLayer(select_columns(layer.up(), rest), select_rows(layer.down(), rest), layer.activation());
}

}  // namespace hhsplit
