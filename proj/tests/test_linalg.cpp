// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "test_util.hpp"

namespace hhsplit {
namespace {

using testing::random_matrix;

// erf by its Maclaurin series in long double; accurate for |z| <= 3.
long double erf_series(long double z) {
  long double term = z, sum = z;
  for (int n = 1; n < 200; ++n) {
    term *= -z * z / n;
    const long double add = term / (2 * n + 1);
    sum += add;
    if (std::fabs(add) < 1e-22L) break;
  }
  return sum * 2.0L / std::sqrt(3.14159265358979323846264338327950288L);
}

long double gelu_oracle(long double x) { return 0.5L * x * (1.0L + erf_series(x / std::sqrt(2.0L))); }

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const auto a = DenseMatrix::from_rows({{1.5f, -2.0f}, {0.25f, 7.0f}});
  EXPECT_TRUE(matmul(DenseMatrix::identity(2), a).bit_equal(a));
}

TEST(Matmul, HandExample) {
  const auto a = DenseMatrix::from_rows({{1, 2}, {3, 4}});
  const auto b = DenseMatrix::from_rows({{0}, {1}});
  const auto c = matmul(a, b);
  ASSERT_EQ(c.rows(), 2u);
  ASSERT_EQ(c.cols(), 1u);
  EXPECT_EQ(c(0, 0), 2.0f);
  EXPECT_EQ(c(1, 0), 4.0f);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Xoshiro256ss rng(11);
  const auto a = random_matrix(7, 5, rng);
  const auto b = random_matrix(5, 3, rng);
  const auto c = matmul(a, b);
  for (Index i = 0; i < 7; ++i) {
    for (Index j = 0; j < 3; ++j) {
      double ref = 0.0;
      for (Index p = 0; p < 5; ++p) ref += double(a(i, p)) * b(p, j);
      EXPECT_LE(std::abs(c(i, j) - ref), 1e-6 * std::max(1.0, std::abs(ref)));
    }
  }
}

TEST(Matmul, RaggedShapesAgreeWithOracle) {
  Xoshiro256ss rng(12);
  for (auto [m, k, n] : {std::tuple<Index, Index, Index>{1, 1, 1}, {5, 3, 9}, {37, 19, 17}, {65, 33, 8}}) {
    const auto a = random_matrix(m, k, rng);
    const auto b = random_matrix(k, n, rng);
    const auto c = matmul(a, b);
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) {
        double ref = 0.0;
        for (Index p = 0; p < k; ++p) ref += double(a(i, p)) * b(p, j);
        ASSERT_LE(std::abs(c(i, j) - ref), 1e-6 * std::max(1.0, std::abs(ref)));
      }
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), ShapeError);
}

TEST(Matmul, EmptyInnerDimensionGivesZeros) {
  const auto c = matmul(DenseMatrix(3, 0), DenseMatrix(0, 4));
  EXPECT_EQ(c.rows(), 3u);
  EXPECT_EQ(c.cols(), 4u);
  EXPECT_EQ(frobenius_norm_sq(c), 0.0);
}

TEST(Matmul, ReassociationWithinTolerance) {
  Xoshiro256ss rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_matrix(16, 16, rng);
    const auto b = random_matrix(16, 16, rng);
    const auto c = random_matrix(16, 16, rng);
    const auto left = matmul(matmul(a, b), c);
    const auto right = matmul(a, matmul(b, c));
    EXPECT_LE(testing::rel_frobenius(left, right), 1e-5);
  }
}

TEST(Matmul, ThreadCountDoesNotChangeBits) {
  Xoshiro256ss rng(14);
  const auto a = random_matrix(150, 40, rng);
  const auto b = random_matrix(40, 29, rng);
  const auto saved = thread_count();
  set_thread_count(1);
  const auto single = matmul(a, b);
  set_thread_count(3);
  const auto multi = matmul(a, b);
  set_thread_count(saved);
  EXPECT_TRUE(single.bit_equal(multi));
  EXPECT_TRUE(single.bit_equal(matmul(a, b)));
}

TEST(Gelu, KnownValues) {
  const auto out = gelu(DenseMatrix::from_rows({{0.0f, 10.0f, 1.0f}}));
  EXPECT_EQ(out(0, 0), 0.0f);
  EXPECT_NEAR(out(0, 1), 10.0, 1e-6);
  EXPECT_NEAR(out(0, 2), 0.841345, 1e-5);
}

TEST(Gelu, MatchesSeriesOracleWithinContract) {
  DenseMatrix x(1, 601);
  for (Index i = 0; i < x.cols(); ++i) x(0, i) = static_cast<float>(-3.0 + 0.01 * static_cast<double>(i));
  const auto out = gelu(x);
  for (Index i = 0; i < x.cols(); ++i) {
    const long double ref = gelu_oracle(x(0, i));
    EXPECT_LE(std::fabs(out(0, i) - ref), 1e-6L * (1.0L + std::fabs(x(0, i)))) << "x=" << x(0, i);
  }
}

TEST(Gelu, TailsApproachIdentityAndZero) {
  const auto out = gelu(DenseMatrix::from_rows({{8.0f, -8.0f, 6.0f, -6.0f}}));
  EXPECT_NEAR(out(0, 0), 8.0, 1e-6 * 9);
  EXPECT_NEAR(out(0, 1), 0.0, 1e-6 * 9);
  EXPECT_NEAR(out(0, 2), 6.0, 1e-6 * 7);
  EXPECT_NEAR(out(0, 3), 0.0, 1e-6 * 7);
}

// GeLU has a single minimum near x = -0.7518: nonincreasing before it and
// nondecreasing after it on a 10^4-point grid over [-8, 8].
TEST(Gelu, UnimodalOnGrid) {
  constexpr Index n = 10000;
  DenseMatrix x(1, n);
  for (Index i = 0; i < n; ++i) x(0, i) = static_cast<float>(-8.0 + 16.0 * static_cast<double>(i) / (n - 1));
  const auto y = gelu(x);
  Index argmin = 0;
  for (Index i = 1; i < n; ++i)
    if (y(0, i) < y(0, argmin)) argmin = i;
  EXPECT_NEAR(x(0, argmin), -0.7518, 2e-3);
  for (Index i = 1; i <= argmin; ++i) ASSERT_LE(y(0, i), y(0, i - 1)) << "x=" << x(0, i);
  for (Index i = argmin + 1; i < n; ++i) ASSERT_GE(y(0, i), y(0, i - 1)) << "x=" << x(0, i);
}

TEST(Gelu, TanhFormIsCloseButOptIn) {
  Xoshiro256ss rng(15);
  const auto x = random_matrix(4, 32, rng);
  EXPECT_LE(testing::scaled_max_diff(gelu(x), gelu_tanh(x)), 1e-3);
}

TEST(FrobeniusNormSq, Basics) {
  EXPECT_EQ(frobenius_norm_sq(DenseMatrix(3, 3)), 0.0);
  EXPECT_EQ(frobenius_norm_sq(DenseMatrix::from_rows({{3, 4}})), 25.0);
}

TEST(FrobeniusNormSq, MatchesNaiveSum) {
  Xoshiro256ss rng(16);
  const auto a = random_matrix(4, 4, rng);
  long double ref = 0.0L;
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) ref += static_cast<long double>(a(i, j)) * a(i, j);
  EXPECT_LE(std::fabs(frobenius_norm_sq(a) - ref) / ref, 1e-9L);
}

// Discarded spectrum sum from an independent eigensolver on A^T A.
double discarded_energy_oracle(const DenseMatrix& a, Index r) {
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) m(i, j) = a(i, j);
  const Eigen::MatrixXd gram = m.cols() <= m.rows() ? Eigen::MatrixXd(m.transpose() * m) : Eigen::MatrixXd(m * m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const auto& ev = es.eigenvalues();  // ascending
  double tail = 0.0;
  for (Index i = 0; i + r < static_cast<Index>(ev.size()); ++i) tail += std::max(0.0, ev(i));
  return tail;
}

double reconstruction_error_sq(const DenseMatrix& a, const LowRankFactors& f) {
  const auto rec = matmul(f.left, f.right);
  double e = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = double(a.data()[i]) - rec.data()[i];
    e += d * d;
  }
  return e;
}

TEST(TruncatedSvd, RankOneIsExact) {
  Xoshiro256ss rng(17);
  const auto u = random_matrix(9, 1, rng);
  const auto v = random_matrix(1, 6, rng);
  const auto a = matmul(u, v);
  const auto f = truncated_svd(a, 1);
  EXPECT_EQ(f.rank(), 1u);
  EXPECT_LE(std::sqrt(reconstruction_error_sq(a, f)), 1e-5 * std::sqrt(frobenius_norm_sq(a)));
}

TEST(TruncatedSvd, FullRankIdentityIsExact) {
  const auto a = DenseMatrix::identity(3);
  const auto f = truncated_svd(a, 3);
  EXPECT_LE(std::sqrt(reconstruction_error_sq(a, f)), 1e-5 * std::sqrt(3.0));
}

TEST(TruncatedSvd, ErrorMatchesDiscardedSpectrum) {
  Xoshiro256ss rng(18);
  const auto a = random_matrix(20, 12, rng);
  const auto f = truncated_svd(a, 4);
  const double oracle = discarded_energy_oracle(a, 4);
  EXPECT_LE(testing::rel_diff(reconstruction_error_sq(a, f), oracle), 1e-4);
}

TEST(TruncatedSvd, WideMatricesUseTheOtherGram) {
  Xoshiro256ss rng(19);
  const auto a = random_matrix(10, 31, rng);
  for (Index r : {1u, 3u, 9u}) {
    const auto f = truncated_svd(a, r);
    EXPECT_EQ(f.left.rows(), 10u);
    EXPECT_EQ(f.right.cols(), 31u);
    EXPECT_LE(testing::rel_diff(reconstruction_error_sq(a, f), discarded_energy_oracle(a, r)), 1e-4);
  }
}

TEST(TruncatedSvd, InvalidRankThrows) {
  const DenseMatrix a(4, 3);
  EXPECT_THROW(truncated_svd(a, 0), RangeError);
  EXPECT_THROW(truncated_svd(a, 4), RangeError);
  DenseMatrix bad(4, 3);
  bad(1, 2) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(truncated_svd(bad, 2), NumericError);
}

TEST(TruncatedSvd, SingularValuesNonincreasing) {
  Xoshiro256ss rng(20);
  for (auto [m, n] : {std::pair<Index, Index>{30, 12}, {12, 30}, {25, 25}}) {
    const auto f = truncated_svd(random_matrix(m, n, rng), std::min(m, n));
    const auto s = implied_singular_values(f);
    for (Index i = 1; i < s.size(); ++i) EXPECT_LE(s[i], s[i - 1] * (1 + 1e-6));
  }
}

TEST(TruncatedSvd, BeatsRandomFactorsOfSameRank) {
  Xoshiro256ss rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_matrix(18, 14, rng);
    const Index r = 1 + static_cast<Index>(rng.below(6));
    const double best = reconstruction_error_sq(a, truncated_svd(a, r));
    const LowRankFactors random{random_matrix(18, r, rng), random_matrix(r, 14, rng)};
    EXPECT_LE(best, reconstruction_error_sq(a, random));
  }
}

TEST(TruncatedSvd, Deterministic) {
  Xoshiro256ss rng(22);
  const auto a = random_matrix(40, 17, rng);
  const auto f1 = truncated_svd(a, 5);
  const auto f2 = truncated_svd(a, 5);
  EXPECT_TRUE(f1.left.bit_equal(f2.left));
  EXPECT_TRUE(f1.right.bit_equal(f2.right));
}

TEST(Select, AllColumnsInOrderIsIdentity) {
  Xoshiro256ss rng(23);
  const auto a = random_matrix(3, 5, rng);
  const std::vector<Index> idx{0, 1, 2, 3, 4};
  EXPECT_TRUE(select_columns(a, idx).bit_equal(a));
  EXPECT_TRUE(select_rows(a, std::vector<Index>{0, 1, 2}).bit_equal(a));
}

TEST(Select, ReordersAndDrops) {
  const auto a = DenseMatrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const auto s = select_columns(a, std::vector<Index>{2, 0});
  EXPECT_TRUE(s.bit_equal(DenseMatrix::from_rows({{3, 1}, {6, 4}})));
  const auto r = select_rows(a, std::vector<Index>{1});
  EXPECT_TRUE(r.bit_equal(DenseMatrix::from_rows({{4, 5, 6}})));
}

TEST(Select, InvalidIndicesThrow) {
  const DenseMatrix a(2, 3);
  EXPECT_THROW(select_columns(a, std::vector<Index>{3}), IndexError);
  EXPECT_THROW(select_columns(a, std::vector<Index>{1, 1}), IndexError);
  EXPECT_THROW(select_rows(a, std::vector<Index>{2}), IndexError);
}

TEST(Select, ComplementPartitionReassemblesBitExactly) {
  Xoshiro256ss rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(12));
    const auto a = random_matrix(4, n, rng);
    std::vector<Index> idx;
    for (Index j = 0; j < n; ++j)
      if (rng.below(2) == 1) idx.push_back(j);
    const auto rest = complement(idx, n);
    ASSERT_EQ(idx.size() + rest.size(), n);
    const auto left = select_columns(a, idx);
    const auto right = select_columns(a, rest);
    DenseMatrix rebuilt(4, n);
    for (Index i = 0; i < 4; ++i) {
      for (Index c = 0; c < idx.size(); ++c) rebuilt(i, idx[c]) = left(i, c);
      for (Index c = 0; c < rest.size(); ++c) rebuilt(i, rest[c]) = right(i, c);
    }
    EXPECT_TRUE(rebuilt.bit_equal(a));
  }
}

TEST(DenseMatrix, RejectsWrongDataLength) {
  EXPECT_THROW(DenseMatrix(2, 2, std::vector<float>(3)), ShapeError);
}

}  // namespace
}  // namespace hhsplit
