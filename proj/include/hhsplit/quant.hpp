// SPDX-License-Identifier: Apache-2.0
//
// Group-wise round-to-nearest (RTN) weight quantization with bit-packed codes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "hhsplit/errors.hpp"
#include "hhsplit/linalg.hpp"

namespace hhsplit {

/// Asymmetric min-anchored RTN quantization of a rows x cols matrix.
///
/// Groups of `group_size` consecutive elements run along each row (the final
/// group of a row may be shorter). Each group has one f32 scale and one f32
/// real-valued zero point; an element dequantizes to code * scale + zero.
/// Codes are packed LSB-first into bytes; each row starts on a byte boundary
/// and unused trailing bits of a row must be zero.
class QuantizedMatrix {
 public:
  QuantizedMatrix() = default;

  /// Assembles a matrix from raw parts, validating every size and the row padding.
  static QuantizedMatrix from_parts(Index rows, Index cols, unsigned bits, Index group_size,
                                    std::vector<std::uint8_t> packed, std::vector<float> scales,
                                    std::vector<float> zeros) {
    QuantizedMatrix q;
    q.rows_ = rows;
    q.cols_ = cols;
    q.bits_ = bits;
    q.group_size_ = group_size;
    q.packed_ = std::move(packed);
    q.scales_ = std::move(scales);
    q.zeros_ = std::move(zeros);
    q.validate();
    return q;
  }

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  unsigned bits() const noexcept { return bits_; }
  Index group_size() const noexcept { return group_size_; }
  Index groups_per_row() const noexcept { return (cols_ + group_size_ - 1) / group_size_; }
  Index row_bytes() const noexcept { return (cols_ * bits_ + 7) / 8; }
  Index group_count() const noexcept { return rows_ * groups_per_row(); }

  const std::vector<std::uint8_t>& packed() const noexcept { return packed_; }
  const std::vector<float>& scales() const noexcept { return scales_; }
  const std::vector<float>& zeros() const noexcept { return zeros_; }

  float scale(Index r, Index group) const noexcept { return scales_[r * groups_per_row() + group]; }
  float zero(Index r, Index group) const noexcept { return zeros_[r * groups_per_row() + group]; }

  std::uint32_t code(Index r, Index c) const noexcept {
    const std::uint8_t* row = packed_.data() + r * row_bytes();
    const Index bit = c * bits_;
    // Up to 8 bits starting anywhere in a byte span at most two bytes.
    std::uint32_t word = row[bit / 8];
    if ((bit % 8) + bits_ > 8) word |= static_cast<std::uint32_t>(row[bit / 8 + 1]) << 8;
    return (word >> (bit % 8)) & ((1u << bits_) - 1u);
  }

  /// Unpacks row r into `out` (length cols) as float codes.
  void unpack_row(Index r, std::span<float> out) const noexcept {
    for (Index c = 0; c < cols_; ++c) out[c] = static_cast<float>(code(r, c));
  }

  bool operator==(const QuantizedMatrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_ && bits_ == other.bits_ &&
           group_size_ == other.group_size_ && packed_ == other.packed_ &&
           bit_equal_floats(scales_, other.scales_) && bit_equal_floats(zeros_, other.zeros_);
  }

  void validate() const {
    if (bits_ < 2 || bits_ > 8) throw FormatError("quantized matrix: bits " + std::to_string(bits_) + " not in [2, 8]");
    if (group_size_ < 1) throw FormatError("quantized matrix: group_size must be >= 1");
    if (packed_.size() != rows_ * row_bytes()) {
      throw FormatError("quantized matrix: packed length " + std::to_string(packed_.size()) + ", expected " +
                        std::to_string(rows_ * row_bytes()));
    }
    if (scales_.size() != group_count() || zeros_.size() != group_count()) {
      throw FormatError("quantized matrix: expected " + std::to_string(group_count()) + " scales and zeros, got " +
                        std::to_string(scales_.size()) + "/" + std::to_string(zeros_.size()));
    }
    const Index used_bits = cols_ * bits_;
    if (used_bits % 8 != 0) {
      const auto pad_mask = static_cast<std::uint8_t>(0xFFu << (used_bits % 8));
      for (Index r = 0; r < rows_; ++r) {
        if (packed_[r * row_bytes() + row_bytes() - 1] & pad_mask) {
          throw FormatError("quantized matrix: row " + std::to_string(r) + " has code bits past column " +
                            std::to_string(cols_) + " (byte offset " +
                            std::to_string(r * row_bytes() + row_bytes() - 1) + ")");
        }
      }
    }
    for (Index g = 0; g < group_count(); ++g) {
      if (!std::isfinite(scales_[g]) || !std::isfinite(zeros_[g]) || !(scales_[g] > 0.0f)) {
        throw FormatError("quantized matrix: group " + std::to_string(g) + " has invalid scale/zero");
      }
    }
  }

 private:
  friend QuantizedMatrix quantize_matrix(const DenseMatrix&, unsigned, Index);

  static bool bit_equal_floats(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }

  Index rows_ = 0;
  Index cols_ = 0;
  unsigned bits_ = 8;
  Index group_size_ = 1;
  std::vector<std::uint8_t> packed_;
  std::vector<float> scales_;
  std::vector<float> zeros_;
};

inline QuantizedMatrix quantize_matrix(const DenseMatrix& w, unsigned bits, Index group_size) {
  if (bits < 2 || bits > 8) throw RangeError("quantize_matrix: bits " + std::to_string(bits) + " not in [2, 8]");
  if (group_size < 1) throw RangeError("quantize_matrix: group_size must be >= 1");

  QuantizedMatrix q;
  q.rows_ = w.rows();
  q.cols_ = w.cols();
  q.bits_ = bits;
  q.group_size_ = group_size;
  q.packed_.assign(q.rows_ * q.row_bytes(), 0);
  q.scales_.resize(q.group_count());
  q.zeros_.resize(q.group_count());

  const std::uint32_t max_code = (1u << bits) - 1u;
  const Index gpr = q.groups_per_row();
  for (Index r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    std::uint8_t* out = q.packed_.data() + r * q.row_bytes();
    for (Index g = 0; g < gpr; ++g) {
      const Index begin = g * group_size;
      const Index end = std::min(w.cols(), begin + group_size);
      const auto [lo, hi] = std::minmax_element(row.begin() + begin, row.begin() + end);
      float scale = 1.0f;
      if (*hi != *lo) {
        scale = static_cast<float>((static_cast<double>(*hi) - *lo) / max_code);
        if (!(scale > 0.0f)) scale = 1.0f;  // span below the smallest subnormal
      }
      const float zero = *lo;
      q.scales_[r * gpr + g] = scale;
      q.zeros_[r * gpr + g] = zero;
      for (Index c = begin; c < end; ++c) {
        const double v = std::round((static_cast<double>(row[c]) - zero) / scale);
        const auto code = static_cast<std::uint32_t>(std::clamp(v, 0.0, static_cast<double>(max_code)));
        const Index bit = c * bits;
        out[bit / 8] |= static_cast<std::uint8_t>(code << (bit % 8));
        if ((bit % 8) + bits > 8) out[bit / 8 + 1] |= static_cast<std::uint8_t>(code >> (8 - bit % 8));
      }
    }
  }
  return q;
}

inline DenseMatrix dequantize(const QuantizedMatrix& q) {
  q.validate();
  DenseMatrix w(q.rows(), q.cols());
  for (Index r = 0; r < q.rows(); ++r) {
    auto row = w.row(r);
    for (Index c = 0; c < q.cols(); ++c) {
      const Index g = c / q.group_size();
      row[c] = static_cast<float>(static_cast<double>(q.code(r, c)) * q.scale(r, g) + q.zero(r, g));
    }
  }
  return w;
}

/// x (s x K) times W, where `wt` holds W^T (N x K) quantized with groups along
/// K. Per group the dequantization is folded into the accumulation:
/// sum_k x_k (c_k s + z) = s * sum_k x_k c_k + z * sum_k x_k.
inline DenseMatrix matmul_quantized(const DenseMatrix& x, const QuantizedMatrix& wt) {
  if (x.cols() != wt.cols()) {
    throw ShapeError("matmul_quantized: input has " + std::to_string(x.cols()) + " columns, weight expects " +
                     std::to_string(wt.cols()));
  }
  const Index s = x.rows(), k = x.cols(), n = wt.rows();
  const Index gs = wt.group_size(), gpr = wt.groups_per_row();
  DenseMatrix y(s, n);
  if (s == 0 || n == 0) return y;

  // Input group sums are shared by every output column.
  std::vector<double> xsum(s * gpr, 0.0);
  for (Index i = 0; i < s; ++i) {
    auto xr = x.row(i);
    for (Index c = 0; c < k; ++c) xsum[i * gpr + c / gs] += xr[c];
  }

  std::vector<float> codes(k);
  for (Index j = 0; j < n; ++j) {
    wt.unpack_row(j, codes);
    for (Index i = 0; i < s; ++i) {
      auto xr = x.row(i);
      double acc = 0.0;
      for (Index g = 0; g < gpr; ++g) {
        const Index begin = g * gs, end = std::min(k, begin + gs);
        double dot = 0.0;
        for (Index c = begin; c < end; ++c) dot += static_cast<double>(xr[c]) * codes[c];
        acc += static_cast<double>(wt.scale(j, g)) * dot + static_cast<double>(wt.zero(j, g)) * xsum[i * gpr + g];
      }
      y(i, j) = static_cast<float>(acc);
    }
  }
  return y;
}

}  // namespace hhsplit
