// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "hhsplit/hhsplit.hpp"

namespace hhsplit::testing {

inline DenseMatrix random_matrix(Index rows, Index cols, Xoshiro256ss& rng, double scale = 1.0) {
  DenseMatrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(rng.normal() * scale);
  return m;
}

inline DenseMatrix random_uniform(Index rows, Index cols, Xoshiro256ss& rng, double lo, double hi) {
  DenseMatrix m(rows, cols);
  for (float& v : m.data()) v = static_cast<float>(lo + (hi - lo) * rng.uniform());
  return m;
}

inline FfnLayer random_layer(Index d, Index d_ff, Xoshiro256ss& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return FfnLayer(random_matrix(d, d_ff, rng, s), random_matrix(d_ff, d, rng, s));
}

/// max_i |a_i - b_i| / (1 + ||a||_F): the tolerance convention for outputs.
inline double scaled_max_diff(const DenseMatrix& a, const DenseMatrix& b) {
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a.data()[i]) - b.data()[i]));
  return worst / (1.0 + std::sqrt(frobenius_norm_sq(a)));
}

/// ||a - b||_F / ||a||_F.
inline double rel_frobenius(const DenseMatrix& a, const DenseMatrix& b) {
  double num = 0.0, den = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = double(a.data()[i]) - b.data()[i];
    num += d * d;
    den += double(a.data()[i]) * a.data()[i];
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(a), std::abs(b)); }

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("hhsplit_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace hhsplit::testing
