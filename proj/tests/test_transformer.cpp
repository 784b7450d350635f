#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "vtn/transformer.hpp"

using namespace vtn;
using namespace vtn::nn;
using vtn::testing::gradcheck;
using vtn::testing::random_tensor;

namespace {

BlockConfig small_block(std::size_t heads = 2) { return {8, heads, 16, 2, 0.1}; }

Tensord permute_rows(const Tensord& x, const std::vector<std::size_t>& perm) {
  std::vector<double> v;
  for (std::size_t r : perm)
    for (std::size_t c = 0; c < x.cols(); ++c) v.push_back(x.at(r, c));
  return Tensord(x.rows(), x.cols(), std::move(v));
}

void expect_rows_stochastic(const AttentionMap& m) {
  for (std::size_t q = 0; q < m.queries; ++q) {
    double s = 0;
    for (std::size_t k = 0; k < m.keys; ++k) {
      EXPECT_GE(m.at(q, k), 0.0);
      s += m.at(q, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

}  // namespace

TEST(Attention, SingleKeyReturnsValue) {
  Tensord q(1, 3, {0.2, -1.0, 4.0}), k(1, 3, {1.0, 2.0, 3.0}), v(1, 2, {5.0, -6.0});
  const auto r = scaled_dot_attention(q, k, v);
  EXPECT_DOUBLE_EQ(r.weights.item(), 1.0);
  EXPECT_DOUBLE_EQ(r.output.at(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(r.output.at(0, 1), -6.0);
}

TEST(Attention, SaturatesOnAlignedKey) {
  Tensord k(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensord v(3, 2, {1, 2, 3, 4, 5, 6});
  Tensord q(1, 3, {0, 200, 0});
  const auto r = scaled_dot_attention(q, k, v);
  EXPECT_NEAR(r.output.at(0, 0), 3.0, 1e-9);
  EXPECT_NEAR(r.output.at(0, 1), 4.0, 1e-9);
}

TEST(Attention, MaskLeavesOnlyVisibleKeys) {
  std::mt19937_64 rng(1);
  auto q = random_tensor(3, 4, rng, -1, 1, false), k = random_tensor(3, 4, rng, -1, 1, false);
  auto v = random_tensor(3, 2, rng, -1, 1, false);
  const auto mask = AttentionMask::causal(3);
  const auto r = scaled_dot_attention(q, k, v, &mask);
  EXPECT_DOUBLE_EQ(r.weights.at(0, 0), 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) EXPECT_LE(r.weights.at(i, j), 1e-9);
  EXPECT_THROW(scaled_dot_attention(q, Tensord(3, 5), v), ShapeError);
}

TEST(Attention, UsesRootDkScaling) {
  Tensord q(1, 4, {1, 1, 1, 1}), k(2, 4, {1, 1, 1, 1, 0, 0, 0, 0}), v(2, 1, {1, 0});
  const auto r = scaled_dot_attention(q, k, v);
  // scores 4/2 = 2 and 0
  EXPECT_NEAR(r.weights.at(0, 0), std::exp(2.0) / (std::exp(2.0) + 1.0), 1e-15);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 5; ++i) {
    auto q = random_tensor(4, 3, rng), k = random_tensor(4, 3, rng), v = random_tensor(4, 2, rng);
    const auto mask = AttentionMask::causal(4);
    EXPECT_LT(gradcheck({q, k, v}, [&](const auto& t) { return scaled_dot_attention(t[0], t[1], t[2], &mask).output; },
                        rng),
              1e-4);
  }
}

TEST(MultiHead, SingleHeadIsProjectedAttention) {
  std::mt19937_64 rng(3);
  MultiHeadAttention<double> mha(small_block(1), rng);
  auto x = random_tensor(5, 8, rng, -1, 1, false);
  const auto got = mha(x, x);
  const auto ref = mha.wo(scaled_dot_attention(mha.wq(x), mha.wk(x), mha.wv(x)).output);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.values()[i], ref.values()[i], 1e-12);
}

TEST(MultiHead, ShapesAndStochasticRows) {
  std::mt19937_64 rng(4);
  MultiHeadAttention<double> mha(small_block(4), rng);
  auto x = random_tensor(6, 8, rng, -1, 1, false);
  std::vector<AttentionMap> maps;
  const auto y = mha(x, x, nullptr, &maps);
  EXPECT_EQ(y.shape(), x.shape());
  ASSERT_EQ(maps.size(), 4u);
  for (const auto& m : maps) expect_rows_stochastic(m);
  EXPECT_THROW(mha(Tensord(2, 7), Tensord(2, 7)), ShapeError);
  EXPECT_THROW((MultiHeadAttention<double>(BlockConfig{8, 3, 16, 1, 0.1}, rng)), ValidationError);
}

TEST(MultiHead, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  MultiHeadAttention<double> mha(small_block(2), rng);
  auto x = random_tensor(4, 8, rng);
  const auto mask = AttentionMask::causal(4);
  EXPECT_LT(gradcheck({x, mha.wq.weight, mha.wv.bias, mha.wo.weight},
                      [&](const auto& t) { return mha(t[0], t[0], &mask); }, rng),
            1e-4);
}

TEST(Ffn, PositionWiseAndBiasPath) {
  std::mt19937_64 rng(6);
  PointwiseFFN<double> ffn(small_block(), rng);
  auto x = random_tensor(5, 8, rng, -1, 1, false);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto a = ffn(permute_rows(x, perm)), b = permute_rows(ffn(x), perm);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(a.values()[i], b.values()[i]);

  for (auto* t : {&ffn.in.weight, &ffn.out.weight}) std::fill(t->values().begin(), t->values().end(), 0.0);
  std::fill(ffn.out.bias.values().begin(), ffn.out.bias.values().end(), 0.25);
  const auto y = ffn(x);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ffn, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  PointwiseFFN<double> ffn(small_block(), rng);
  auto x = random_tensor(3, 8, rng);
  EXPECT_LT(gradcheck({x, ffn.in.weight, ffn.out.bias}, [&](const auto& t) { return ffn(t[0]); }, rng), 1e-4);
}

TEST(EncoderBlock, ShapesForAllLengths) {
  std::mt19937_64 rng(8);
  EncoderBlock<double> block(small_block(), rng);
  for (std::size_t n = 1; n <= 64; ++n) {
    auto x = random_tensor(n, 8, rng, -1, 1, false);
    EXPECT_EQ(block(x, nullptr, {}).shape(), x.shape());
  }
}

TEST(EncoderBlock, UnmaskedIsPermutationEquivariant) {
  std::mt19937_64 rng(9);
  BlockStack<double> stack(small_block(), rng);
  auto x = random_tensor(7, 8, rng, -1, 1, false);
  std::vector<std::size_t> perm(7);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto a = stack(permute_rows(x, perm), nullptr, {});
  const auto b = permute_rows(stack(x, nullptr, {}), perm);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(EncoderBlock, CausalOutputIgnoresFuturePositions) {
  std::mt19937_64 rng(10);
  BlockStack<float> stack({16, 4, 32, 3, 0.1}, rng);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + trial % 9;
    std::vector<float> v(n * 16);
    for (auto& e : v) e = u(rng);
    const auto mask = AttentionMask::causal(n);
    const auto base = stack(Tensorf(n, 16, v), &mask, {});
    const std::size_t t = static_cast<std::size_t>(trial) % (n - 1);
    for (std::size_t i = (t + 1) * 16; i < v.size(); ++i) v[i] = u(rng) * 10;
    const auto perturbed = stack(Tensorf(n, 16, v), &mask, {});
    for (std::size_t i = 0; i < (t + 1) * 16; ++i) ASSERT_EQ(base.values()[i], perturbed.values()[i]);
  }
}

TEST(EncoderBlock, DropoutOnlyInTraining) {
  std::mt19937_64 rng(11);
  EncoderBlock<double> block(small_block(), rng);
  auto x = random_tensor(4, 8, rng, -1, 1, false);
  const auto a = block(x, nullptr, {}), b = block(x, nullptr, {});
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  std::mt19937_64 drop_rng(1);
  const auto c = block(x, nullptr, {true, &drop_rng, nullptr});
  EXPECT_FALSE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
}

TEST(EncoderBlock, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  EncoderBlock<double> block(small_block(), rng);
  auto x = random_tensor(4, 8, rng);
  const auto mask = AttentionMask::causal(4);
  EXPECT_LT(gradcheck({x, block.norm1.gain, block.ffn.in.weight, block.attention.wk.weight},
                      [&](const auto& t) { return block(t[0], &mask, {}); }, rng),
            1e-4);
}

TEST(BlockStack, RecordsEveryLayerAndHead) {
  std::mt19937_64 rng(13);
  BlockConfig cfg{16, 4, 32, 4, 0.1};
  BlockStack<double> stack(cfg, rng);
  AttentionRecord rec;
  auto x = random_tensor(5, 16, rng, -1, 1, false);
  stack(x, nullptr, {false, nullptr, &rec});
  ASSERT_EQ(rec.layers.size(), 4u);
  EXPECT_EQ(rec.map_count(), 16u);
  for (const auto& layer : rec.layers)
    for (const auto& m : layer) expect_rows_stochastic(m);
  const auto j = rec.to_json();
  EXPECT_EQ(j.size(), 4u);
  EXPECT_EQ(j[0].size(), 4u);
  EXPECT_EQ(j[0][0].size(), 5u);
  EXPECT_EQ(j[0][0][0].size(), 5u);
}
