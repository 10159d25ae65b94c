// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

namespace hhsplit {
namespace {

using testing::random_layer;
using testing::random_matrix;

SplitFfn random_split(Index d, Index dff, Index k, Xoshiro256ss& rng) {
  std::vector<Index> hh(k);
  std::iota(hh.begin(), hh.end(), Index{0});
  return split_ffn(random_layer(d, dff, rng), HeavyHitterSet(0, hh, dff));
}

TEST(Plan, DefaultsAndValidation) {
  const CompressionPlan p;
  EXPECT_EQ(p.mode, CompressionMode::kLowRank);
  EXPECT_EQ(p.keep_frac, 0.25);
  EXPECT_EQ(p.rank_frac, 0.10);
  EXPECT_EQ(p.hh_bits, 8u);
  EXPECT_EQ(p.tail_bits, 3u);
  EXPECT_EQ(p.group_size, 128u);
  EXPECT_NO_THROW(p.validate());
  for (auto mutate : std::vector<void (*)(CompressionPlan&)>{
           [](CompressionPlan& q) { q.keep_frac = 1.01; }, [](CompressionPlan& q) { q.rank_frac = -0.5; },
           [](CompressionPlan& q) { q.hh_bits = 1; }, [](CompressionPlan& q) { q.tail_bits = 9; },
           [](CompressionPlan& q) { q.group_size = 0; }}) {
    CompressionPlan q;
    mutate(q);
    EXPECT_THROW(q.validate(), RangeError);
  }
}

TEST(Plan, JsonRoundTrip) {
  CompressionPlan p;
  p.mode = CompressionMode::kQuant;
  p.keep_frac = 0.125;
  p.group_size = 64;
  EXPECT_EQ(plan_from_json(nlohmann::json::parse(plan_to_json(p).dump())), p);
  EXPECT_THROW(parse_mode("svd"), RangeError);
  auto bad = plan_to_json(p);
  bad.erase("hh_bits");
  EXPECT_THROW(plan_from_json(bad), FormatError);
}

TEST(TailRank, BertBaseShape) {
  EXPECT_EQ(tail_rank(768, 3072 - 768, 0.10), 76u);
  EXPECT_EQ(tail_rank(768, 100, 0.0), 1u);
  EXPECT_EQ(tail_rank(64, 200, 1.0), 64u);
}

TEST(CompressLowRank, FullRankReconstructsTail) {
  Xoshiro256ss rng(81);
  const auto s = random_split(8, 32, 8, rng);
  const auto c = compress_lowrank(s, 1.0);
  const auto& dense = std::get<DenseBlock>(s.tail);
  const auto& lr = std::get<LowRankBlock>(c.tail);
  EXPECT_EQ(lr.up.rank(), 8u);
  EXPECT_LE(testing::rel_frobenius(dense.up, reconstruct(lr.up)), 1e-4);
  EXPECT_LE(testing::rel_frobenius(dense.down, reconstruct(lr.down)), 1e-4);
}

TEST(CompressLowRank, RecoversPlantedRank) {
  Xoshiro256ss rng(82);
  const Index d = 20, m = 40;
  const auto up = matmul(random_matrix(d, 3, rng), random_matrix(3, m, rng));
  const auto down = matmul(random_matrix(m, 3, rng), random_matrix(3, d, rng));
  const auto s = split_ffn(FfnLayer(up, down), HeavyHitterSet(0, {}, m));
  const auto c = compress_lowrank(s, 0.15);  // floor(0.15 * 20) = 3
  const auto& lr = std::get<LowRankBlock>(c.tail);
  ASSERT_EQ(lr.up.rank(), 3u);
  EXPECT_LE(testing::rel_frobenius(up, reconstruct(lr.up)), 1e-4);
  EXPECT_LE(testing::rel_frobenius(down, reconstruct(lr.down)), 1e-4);
}

TEST(CompressLowRank, HeadIsBitIdentical) {
  Xoshiro256ss rng(83);
  const auto s = random_split(16, 64, 16, rng);
  const auto c = compress_lowrank(s, 0.25);
  const auto& a = std::get<DenseBlock>(s.head);
  const auto& b = std::get<DenseBlock>(c.head);
  EXPECT_TRUE(a.up.bit_equal(b.up));
  EXPECT_TRUE(a.down.bit_equal(b.down));
  EXPECT_EQ(c.hh, s.hh);
  EXPECT_EQ(std::get<LowRankBlock>(c.tail).up.rank(), 4u);
}

TEST(CompressLowRank, ErrorsOnEmptyOrCompressedTail) {
  Xoshiro256ss rng(84);
  const auto full = random_split(4, 8, 8, rng);
  EXPECT_THROW(compress_lowrank(full, 0.1), NothingToCompressError);
  const auto c = compress_lowrank(random_split(4, 8, 2, rng), 0.5);
  EXPECT_THROW(compress_lowrank(c, 0.5), RangeError);
}

TEST(CompressLowRank, ForwardErrorShrinksWithRank) {
  Xoshiro256ss rng(85);
  const auto layer = random_layer(32, 128, rng);
  const auto s = split_ffn(layer, HeavyHitterSet(0, {0, 1, 2, 3}, 128));
  const std::vector<DenseMatrix> calib{random_matrix(16, 32, rng)};
  double prev = std::numeric_limits<double>::infinity();
  for (double rf : {0.1, 0.25, 0.5, 0.75, 1.0}) {
    const double err = eval_compression(layer, compress_lowrank(s, rf), calib).rel_err;
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LE(prev, 1e-4);
}

TEST(CompressQuant, QuantizesHeadAndTailWithPlanBits) {
  Xoshiro256ss rng(86);
  const auto s = random_split(16, 64, 16, rng);
  CompressionPlan plan;
  plan.mode = CompressionMode::kQuant;
  plan.group_size = 8;
  const auto c = compress(s, plan);
  const auto& head = std::get<QuantizedBlock>(c.head);
  const auto& tail = std::get<QuantizedBlock>(c.tail);
  EXPECT_EQ(head.up_t.bits(), 8u);
  EXPECT_EQ(head.down_t.bits(), 8u);
  EXPECT_EQ(tail.up_t.bits(), 3u);
  EXPECT_EQ(tail.down_t.bits(), 3u);
  // Stored transposed: groups run along the reduction dimension of each product.
  EXPECT_EQ(head.up_t.rows(), 16u);
  EXPECT_EQ(head.up_t.cols(), 16u);
  EXPECT_EQ(tail.up_t.rows(), 48u);
  EXPECT_EQ(tail.up_t.cols(), 16u);
  EXPECT_EQ(tail.down_t.rows(), 16u);
  EXPECT_EQ(tail.down_t.cols(), 48u);
  EXPECT_EQ(tail.down_t.group_size(), 8u);
}

TEST(CompressQuant, EmptyTailOnlyQuantizesHead) {
  Xoshiro256ss rng(87);
  const auto s = random_split(8, 16, 16, rng);
  CompressionPlan plan;
  plan.mode = CompressionMode::kQuant;
  const auto c = compress_quant(s, plan);
  EXPECT_TRUE(std::holds_alternative<QuantizedBlock>(c.head));
  EXPECT_EQ(c.tail_neurons(), 0u);
  const auto x = random_matrix(3, 8, rng);
  EXPECT_EQ(split_forward(c, x).rows(), 3u);
}

TEST(CompressQuant, UniformEightBitStaysWithinAggregatedBound) {
  Xoshiro256ss rng(88);
  const auto layer = random_layer(16, 64, rng);
  const auto s = split_ffn(layer, HeavyHitterSet(0, {5, 9, 33}, 64));
  CompressionPlan plan;
  plan.mode = CompressionMode::kQuant;
  plan.tail_bits = 8;
  plan.group_size = 16;
  const auto c = compress_quant(s, plan);
  const auto x = random_matrix(4, 16, rng);
  const auto y = ffn_forward(layer, x);
  const auto yq = split_forward(c, x);

  // Bound each output by propagating the per-weight error bound through both
  // products (GeLU is 1.13-Lipschitz).
  const auto& hb = std::get<QuantizedBlock>(c.head);
  const auto& tb = std::get<QuantizedBlock>(c.tail);
  const auto hu = transpose(dequantize(hb.up_t)), hv = transpose(dequantize(hb.down_t));
  const auto tu = transpose(dequantize(tb.up_t)), tv = transpose(dequantize(tb.down_t));
  const auto& dh = std::get<DenseBlock>(s.head);
  const auto& dt = std::get<DenseBlock>(s.tail);
  auto max_abs_diff = [](const DenseMatrix& a, const DenseMatrix& b) {
    double m = 0.0;
    for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
    return m;
  };
  auto max_abs = [](const DenseMatrix& a) {
    double m = 0.0;
    for (float v : a.data()) m = std::max(m, double(std::abs(v)));
    return m;
  };
  const double eu = std::max(max_abs_diff(dh.up, hu), max_abs_diff(dt.up, tu));
  const double ev = std::max(max_abs_diff(dh.down, hv), max_abs_diff(dt.down, tv));
  double bound = 0.0;
  for (Index i = 0; i < x.rows(); ++i) {
    double xl1 = 0.0;
    for (float v : x.row(i)) xl1 += std::abs(v);
    const auto h = gelu(matmul(select_rows(x, std::vector<Index>{i}), layer.up()));
    const double hmax = max_abs(h) + 1.13 * xl1 * eu;
    bound = std::max(bound, 64.0 * (1.13 * xl1 * eu * (max_abs(layer.down()) + ev) + hmax * ev));
  }
  EXPECT_LE(max_abs_diff(y, yq), bound + 1e-5);
  EXPECT_LE(testing::rel_frobenius(y, yq), 0.05);
}

TEST(CompressQuant, ReferenceAndFusedPathsAgree) {
  Xoshiro256ss rng(89);
  const auto layer = random_layer(64, 256, rng);
  CompressionPlan plan;
  plan.mode = CompressionMode::kQuant;
  plan.group_size = 32;
  const auto c = compress_quant(split_ffn(layer, HeavyHitterSet(0, {1, 50, 100, 200}, 256)), plan);
  const auto x = random_matrix(8, 64, rng);
  EXPECT_LE(testing::rel_frobenius(split_forward(c, x, QuantPath::kReference), split_forward(c, x, QuantPath::kFused)),
            1e-5);
}

TEST(CompressQuant, ProtectingPlantedHeavyHittersBeatsInvertedPlan) {
  const auto model = gen_synthetic_model(64, 256, 8, 10.0, 5);
  const auto calib = gen_calibration(64, 64, 4, 6);
  const auto rep = importance(profile_layer(model.layer, 0, calib));
  const auto s = split_ffn(model.layer, select_heavy_hitters(rep, 0.25));
  CompressionPlan good;
  good.mode = CompressionMode::kQuant;
  CompressionPlan inverted = good;
  inverted.hh_bits = 3;
  inverted.tail_bits = 8;
  const double mse_good = eval_compression(model.layer, compress_quant(s, good), calib).mse;
  const double mse_inv = eval_compression(model.layer, compress_quant(s, inverted), calib).mse;
  EXPECT_LT(mse_good, mse_inv);
}

TEST(CompressLowRankUniform, UsesEveryNeuron) {
  Xoshiro256ss rng(90);
  const auto layer = random_layer(16, 64, rng);
  const auto c = compress_lowrank_uniform(layer, 5);
  EXPECT_EQ(c.head_neurons(), 0u);
  EXPECT_EQ(c.tail_neurons(), 64u);
  EXPECT_EQ(std::get<LowRankBlock>(c.tail).up.rank(), 5u);
}

TEST(EvalCompression, ExactSplitHasZeroError) {
  Xoshiro256ss rng(91);
  const auto layer = random_layer(8, 32, rng);
  const std::vector<DenseMatrix> calib{random_matrix(5, 8, rng)};
  const auto q = eval_compression(layer, split_ffn(layer, HeavyHitterSet(0, {}, 32)), calib);
  EXPECT_EQ(q.mse, 0.0);
  EXPECT_EQ(q.rel_err, 0.0);
  EXPECT_THROW(eval_compression(layer, split_ffn(layer, HeavyHitterSet(0, {}, 32)), {}), EmptyCalibrationError);
  EXPECT_THROW(eval_compression(random_layer(8, 16, rng), split_ffn(layer, HeavyHitterSet(0, {}, 32)), calib),
               ShapeError);
}

}  // namespace
}  // namespace hhsplit
