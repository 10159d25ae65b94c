// SPDX-License-Identifier: Apache-2.0
//
// Dense linear algebra used by the FFN split/compression pipeline.
//
// Storage is always 32-bit float, row-major. Every reduction accumulates in
// 64-bit and runs in a fixed order, so results are bit-identical across runs
// (and across thread counts) on a given platform.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hhsplit/errors.hpp"

namespace hhsplit {

using Index = std::size_t;

class DenseMatrix {
 public:
  DenseMatrix() = default;

  DenseMatrix(Index rows, Index cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

  DenseMatrix(Index rows, Index cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("DenseMatrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const Index r = rows.size();
    const Index c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("DenseMatrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return DenseMatrix(r, c, std::move(data));
  }

  static DenseMatrix identity(Index n) {
    DenseMatrix m(n, n);
    for (Index i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  Index rows() const noexcept { return rows_; }
  Index cols() const noexcept { return cols_; }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float operator()(Index r, Index c) const noexcept { return data_[r * cols_ + c]; }
  float& operator()(Index r, Index c) noexcept { return data_[r * cols_ + c]; }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> row(Index r) const noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<float> row(Index r) noexcept { return {data_.data() + r * cols_, cols_}; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  /// Bitwise equality of shape and payload (distinguishes -0.0f from 0.0f).
  bool bit_equal(const DenseMatrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_ &&
           (data_.empty() ||
            std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
  }

 private:
  Index rows_ = 0;
  Index cols_ = 0;
  std::vector<float> data_;
};

/// left (m x r) times right (r x n) approximates an m x n matrix.
struct LowRankFactors {
  DenseMatrix left;
  DenseMatrix right;

  Index rank() const noexcept { return left.cols(); }
  Index rows() const noexcept { return left.rows(); }
  Index cols() const noexcept { return right.cols(); }
};

// ---------------------------------------------------------------------------
// Threading

namespace detail {

inline std::size_t threads_from_env() {
  if (const char* env = std::getenv("HH_SPLIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

inline std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> n{threads_from_env()};
  return n;
}

}  // namespace detail

/// Worker threads used by matmul. Defaults to HH_SPLIT_THREADS or 1.
inline std::size_t thread_count() { return detail::thread_setting().load(); }
inline void set_thread_count(std::size_t n) { detail::thread_setting().store(std::max<std::size_t>(1, n)); }

// ---------------------------------------------------------------------------
// Elementwise / reductions

inline DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double gelu_scalar(double x) { return 0.5 * x * std::erfc(-x * M_SQRT1_2); }

/// Exact GeLU, x * Phi(x).
inline DenseMatrix gelu(const DenseMatrix& x) {
  DenseMatrix out(x.rows(), x.cols());
  auto src = x.data();
  auto dst = out.data();
  for (Index i = 0; i < src.size(); ++i) dst[i] = static_cast<float>(gelu_scalar(src[i]));
  return out;
}

/// tanh approximation of GeLU. Opt-in only; the pipeline uses gelu().
inline DenseMatrix gelu_tanh(const DenseMatrix& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  DenseMatrix out(x.rows(), x.cols());
  auto src = x.data();
  auto dst = out.data();
  for (Index i = 0; i < src.size(); ++i) {
    const double v = src[i];
    dst[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(kC * (v + 0.044715 * v * v * v))));
  }
  return out;
}

inline double frobenius_norm_sq(const DenseMatrix& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  return acc;
}

inline DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
  DenseMatrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

// ---------------------------------------------------------------------------
// Gather

namespace detail {

inline void check_index_list(std::span<const Index> idx, Index extent, const char* what) {
  std::vector<bool> seen(extent, false);
  for (Index i : idx) {
    if (i >= extent) {
      throw IndexError(std::string(what) + ": index " + std::to_string(i) + " out of range [0, " +
                       std::to_string(extent) + ")");
    }
    if (seen[i]) throw IndexError(std::string(what) + ": duplicate index " + std::to_string(i));
    seen[i] = true;
  }
}

}  // namespace detail

inline DenseMatrix select_columns(const DenseMatrix& a, std::span<const Index> idx) {
  detail::check_index_list(idx, a.cols(), "select_columns");
  DenseMatrix out(a.rows(), idx.size());
  for (Index r = 0; r < a.rows(); ++r) {
    auto src = a.row(r);
    auto dst = out.row(r);
    for (Index c = 0; c < idx.size(); ++c) dst[c] = src[idx[c]];
  }
  return out;
}

inline DenseMatrix select_rows(const DenseMatrix& a, std::span<const Index> idx) {
  detail::check_index_list(idx, a.rows(), "select_rows");
  DenseMatrix out(idx.size(), a.cols());
  for (Index r = 0; r < idx.size(); ++r) {
    auto src = a.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

/// Sorted indices of [0, extent) not present in idx.
inline std::vector<Index> complement(std::span<const Index> idx, Index extent) {
  detail::check_index_list(idx, extent, "complement");
  std::vector<bool> in(extent, false);
  for (Index i : idx) in[i] = true;
  std::vector<Index> out;
  out.reserve(extent - idx.size());
  for (Index i = 0; i < extent; ++i)
    if (!in[i]) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {

inline constexpr Index kPanel = 8;     // output columns per packed B panel
inline constexpr Index kRowGroup = 4;  // rows per register tile
inline constexpr Index kRowChunk = 32; // rows kept hot in cache per sweep over panels

/// B (K x N) repacked into ceil(N/8) panels of K x 8, zero padded.
inline std::vector<float> pack_panels(const DenseMatrix& b) {
  const Index k = b.rows(), n = b.cols();
  const Index panels = (n + kPanel - 1) / kPanel;
  std::vector<float> packed(panels * k * kPanel, 0.0f);
  for (Index p = 0; p < k; ++p) {
    auto row = b.row(p);
    for (Index j = 0; j < n; ++j) packed[(j / kPanel) * k * kPanel + p * kPanel + (j % kPanel)] = row[j];
  }
  return packed;
}

template <Index Rows>
inline void tile_kernel(const float* a, Index lda, const float* panel, Index k, double (&acc)[Rows][kPanel]) {
  for (Index r = 0; r < Rows; ++r)
    for (Index c = 0; c < kPanel; ++c) acc[r][c] = 0.0;
  for (Index p = 0; p < k; ++p) {
    double b[kPanel];
    for (Index c = 0; c < kPanel; ++c) b[c] = panel[p * kPanel + c];
    for (Index r = 0; r < Rows; ++r) {
      const double av = a[r * lda + p];
      for (Index c = 0; c < kPanel; ++c) acc[r][c] += av * b[c];
    }
  }
}

inline void gemm_rows(const DenseMatrix& a, const std::vector<float>& packed, Index n, DenseMatrix& c,
                      Index row_begin, Index row_end) {
  const Index k = a.cols();
  const Index panels = (n + kPanel - 1) / kPanel;
  const float* adata = a.data().data();
  float* cdata = c.data().data();
  for (Index chunk = row_begin; chunk < row_end; chunk += kRowChunk) {
    const Index chunk_end = std::min(row_end, chunk + kRowChunk);
    for (Index pi = 0; pi < panels; ++pi) {
      const float* panel = packed.data() + pi * k * kPanel;
      const Index col0 = pi * kPanel;
      const Index width = std::min(kPanel, n - col0);
      Index i = chunk;
      for (; i + kRowGroup <= chunk_end; i += kRowGroup) {
        double acc[kRowGroup][kPanel];
        tile_kernel<kRowGroup>(adata + i * k, k, panel, k, acc);
        for (Index r = 0; r < kRowGroup; ++r)
          for (Index cc = 0; cc < width; ++cc) cdata[(i + r) * n + col0 + cc] = static_cast<float>(acc[r][cc]);
      }
      for (; i < chunk_end; ++i) {
        double acc[1][kPanel];
        tile_kernel<1>(adata + i * k, k, panel, k, acc);
        for (Index cc = 0; cc < width; ++cc) cdata[i * n + col0 + cc] = static_cast<float>(acc[0][cc]);
      }
    }
  }
}

}  // namespace detail

/// a (m x k) times b (k x n). Each output element is a 64-bit sum over k in
/// ascending order, rounded once to float.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " times " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const Index m = a.rows(), n = b.cols();
  DenseMatrix c(m, n);
  if (m == 0 || n == 0 || a.cols() == 0) return c;
  const auto packed = detail::pack_panels(b);

  // Row ranges split on tile boundaries; the per-element arithmetic is the
  // same whichever thread computes it.
  const Index threads = std::min<Index>(thread_count(), (m + detail::kRowChunk - 1) / detail::kRowChunk);
  if (threads <= 1) {
    detail::gemm_rows(a, packed, n, c, 0, m);
    return c;
  }
  const Index chunks = (m + detail::kRowChunk - 1) / detail::kRowChunk;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (Index t = 0; t < threads; ++t) {
      const Index begin = std::min(m, (chunks * t / threads) * detail::kRowChunk);
      const Index end = std::min(m, (chunks * (t + 1) / threads) * detail::kRowChunk);
      pool.emplace_back([&, begin, end] { detail::gemm_rows(a, packed, n, c, begin, end); });
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition and truncated SVD

namespace detail {

/// Householder reduction of a symmetric matrix to tridiagonal form followed by
/// implicit QL iterations. `a` is n x n row-major and is overwritten; on return
/// `values` holds eigenvalues in descending order and row i of `vectors_t`
/// (n x n, row-major) is the eigenvector of values[i].
inline void symmetric_eigen(std::vector<double>& a, Index n, std::vector<double>& values,
                            std::vector<double>& vectors_t) {
  auto V = [&](Index i, Index j) -> double& { return a[i * n + j]; };
  std::vector<double> d(n), e(n);
  values.assign(n, 0.0);
  vectors_t.assign(n * n, 0.0);
  if (n == 0) return;
  if (n == 1) {
    values[0] = a[0];
    vectors_t[0] = 1.0;
    return;
  }

  // Tridiagonalization.
  for (Index j = 0; j < n; ++j) d[j] = V(n - 1, j);
  for (Index i = n - 1; i > 0; --i) {
    double scale = 0.0, h = 0.0;
    for (Index k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (Index j = 0; j < i; ++j) {
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
        V(j, i) = 0.0;
      }
    } else {
      for (Index k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (Index j = 0; j < i; ++j) e[j] = 0.0;
      for (Index j = 0; j < i; ++j) {
        f = d[j];
        V(j, i) = f;
        g = e[j] + V(j, j) * f;
        for (Index k = j + 1; k <= i - 1; ++k) {
          g += V(k, j) * d[k];
          e[k] += V(k, j) * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (Index j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (Index j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (Index j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (Index k = j; k <= i - 1; ++k) V(k, j) -= (f * e[k] + g * d[k]);
        d[j] = V(i - 1, j);
        V(i, j) = 0.0;
      }
    }
    d[i] = h;
  }
  for (Index i = 0; i + 1 < n; ++i) {
    V(n - 1, i) = V(i, i);
    V(i, i) = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      for (Index k = 0; k <= i; ++k) d[k] = V(k, i + 1) / h;
      for (Index j = 0; j <= i; ++j) {
        double g = 0.0;
        for (Index k = 0; k <= i; ++k) g += V(k, i + 1) * V(k, j);
        for (Index k = 0; k <= i; ++k) V(k, j) -= g * d[k];
      }
    }
    for (Index k = 0; k <= i; ++k) V(k, i + 1) = 0.0;
  }
  for (Index j = 0; j < n; ++j) {
    d[j] = V(n - 1, j);
    V(n - 1, j) = 0.0;
  }
  V(n - 1, n - 1) = 1.0;
  e[0] = 0.0;

  // QL on the transposed basis so each rotation touches two contiguous rows.
  std::vector<double> z(n * n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) z[j * n + i] = V(i, j);

  for (Index i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;
  double f = 0.0, tst1 = 0.0;
  constexpr double eps = 0x1p-52;
  constexpr int kMaxIter = 64;
  for (Index l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    Index m = l;
    while (m < n - 1 && std::abs(e[m]) > eps * tst1) ++m;
    if (m > l) {
      int iter = 0;
      do {
        if (++iter > kMaxIter) {
          throw NumericError("symmetric_eigen: QL iteration did not converge for eigenvalue " +
                             std::to_string(l));
        }
        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (Index i = l + 2; i < n; ++i) d[i] -= h;
        f += h;

        p = d[m];
        double c = 1.0, c2 = 1.0, c3 = 1.0;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (Index ii = m; ii-- > l;) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[ii];
          h = c * p;
          r = std::hypot(p, e[ii]);
          e[ii + 1] = s * r;
          s = e[ii] / r;
          c = p / r;
          p = c * d[ii] - s * g;
          d[ii + 1] = h + s * (c * g + s * d[ii]);
          double* zi = z.data() + ii * n;
          double* zi1 = z.data() + (ii + 1) * n;
          for (Index k = 0; k < n; ++k) {
            const double t = zi1[k];
            zi1[k] = s * zi[k] + c * t;
            zi[k] = c * zi[k] - s * t;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }

  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return d[x] > d[y]; });
  for (Index i = 0; i < n; ++i) {
    values[i] = d[order[i]];
    std::copy_n(z.data() + order[i] * n, n, vectors_t.data() + i * n);
  }
}

/// Gram matrix of the columns of a (a^T a), n x n in double.
inline std::vector<double> column_gram(const DenseMatrix& a) {
  const Index m = a.rows(), n = a.cols();
  std::vector<double> g(n * n, 0.0);
  std::vector<double> row(n);
  for (Index r = 0; r < m; ++r) {
    auto src = a.row(r);
    for (Index j = 0; j < n; ++j) row[j] = src[j];
    for (Index i = 0; i < n; ++i) {
      const double ri = row[i];
      double* gi = g.data() + i * n;
      for (Index j = i; j < n; ++j) gi[j] += ri * row[j];
    }
  }
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < i; ++j) g[i * n + j] = g[j * n + i];
  return g;
}

}  // namespace detail

/// Best rank-r approximation of a in the Frobenius norm.
///
/// Works on the Gram matrix of the narrower side. For a.rows() >= a.cols() the
/// result is (U_r diag(s_r), V_r^T); otherwise (U_r, diag(s_r) V_r^T). Either
/// way one factor has orthonormal columns/rows and left * right is the same
/// truncated reconstruction.
inline LowRankFactors truncated_svd(const DenseMatrix& a, Index r) {
  const Index m = a.rows(), n = a.cols();
  if (r < 1 || r > std::min(m, n)) {
    throw RangeError("truncated_svd: rank " + std::to_string(r) + " outside [1, " +
                     std::to_string(std::min(m, n)) + "]");
  }
  if (!a.all_finite()) throw NumericError("truncated_svd: input has non-finite entries");
  const bool tall = m >= n;
  const DenseMatrix at = tall ? DenseMatrix{} : transpose(a);
  const DenseMatrix& work = tall ? a : at;  // rows >= cols
  const Index wm = work.rows(), wn = work.cols();

  auto gram = detail::column_gram(work);
  std::vector<double> values, vectors_t;
  detail::symmetric_eigen(gram, wn, values, vectors_t);

  // projected = work * V_r, accumulated in double.
  std::vector<double> projected(wm * r, 0.0);
  for (Index i = 0; i < wm; ++i) {
    auto src = work.row(i);
    for (Index q = 0; q < r; ++q) {
      const double* v = vectors_t.data() + q * wn;
      double acc = 0.0;
      for (Index j = 0; j < wn; ++j) acc += static_cast<double>(src[j]) * v[j];
      projected[i * r + q] = acc;
    }
  }

  LowRankFactors f;
  if (tall) {
    f.left = DenseMatrix(m, r);
    f.right = DenseMatrix(r, n);
    for (Index i = 0; i < m; ++i)
      for (Index q = 0; q < r; ++q) f.left(i, q) = static_cast<float>(projected[i * r + q]);
    for (Index q = 0; q < r; ++q)
      for (Index j = 0; j < n; ++j) f.right(q, j) = static_cast<float>(vectors_t[q * wn + j]);
  } else {
    // a = work^T, so a ~ V_r (work V_r)^T.
    f.left = DenseMatrix(m, r);
    f.right = DenseMatrix(r, n);
    for (Index i = 0; i < m; ++i)
      for (Index q = 0; q < r; ++q) f.left(i, q) = static_cast<float>(vectors_t[q * wn + i]);
    for (Index q = 0; q < r; ++q)
      for (Index j = 0; j < n; ++j) f.right(q, j) = static_cast<float>(projected[j * r + q]);
  }
  return f;
}

/// Singular values carried by a factor pair: ||left_{:,q}|| * ||right_{q,:}||.
inline std::vector<double> implied_singular_values(const LowRankFactors& f) {
  std::vector<double> s(f.rank());
  for (Index q = 0; q < f.rank(); ++q) {
    double l = 0.0, r = 0.0;
    for (Index i = 0; i < f.left.rows(); ++i) l += static_cast<double>(f.left(i, q)) * f.left(i, q);
    for (float v : f.right.row(q)) r += static_cast<double>(v) * v;
    s[q] = std::sqrt(l * r);
  }
  return s;
}

inline DenseMatrix reconstruct(const LowRankFactors& f) { return matmul(f.left, f.right); }

}  // namespace hhsplit
