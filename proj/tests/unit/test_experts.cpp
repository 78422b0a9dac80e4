#include <gtest/gtest.h>

#include <cmath>

#include "promoe/error.hpp"
#include "promoe/experts.hpp"

using namespace promoe;

namespace {

ExpertFFN<double> random_expert(std::size_t d, std::size_t inner, std::uint64_t key) {
  Rng r(3, Stream::kInit, key);
  return make_expert<double>("e", d, inner, r);
}

Array<double> randn(Shape s, std::uint64_t key) {
  Rng r(4, Stream::kTest, key);
  Array<double> a(std::move(s));
  for (auto& v : a.vec()) v = r.normal();
  return a;
}

double gelu_ref(double x) { return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x))); }

}  // namespace

TEST(Expert, ZeroWeightsZeroOutput) {
  auto e = random_expert(4, 8, 1);
  for (auto* p : {&e.w1, &e.b1, &e.w2, &e.b2}) p->value.fill(0.0);
  Tape<double> t;
  auto y = expert_forward(e, t.constant(randn({3, 4}, 1))).value();
  for (double v : y.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Expert, IdentityConstructionReproducesInput) {
  const std::size_t d = 3, inner = 6;
  auto e = random_expert(d, inner, 2);
  e.activation = FfnActivation::kIdentity;
  e.w1.value.fill(0.0);
  e.w2.value.fill(0.0);
  e.b1.value.fill(0.0);
  e.b2.value.fill(0.0);
  for (std::size_t i = 0; i < d; ++i) {
    e.w1.value.at(i, i) = 2.0;  // w1 = [2I | 0]
    e.w2.value.at(i, i) = 0.5;  // w2 = [0.5I ; 0]
  }
  Tape<double> t;
  const auto x = randn({5, d}, 2);
  auto y = expert_forward(e, t.constant(x)).value();
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Expert, MatchesDenseTwoLayerOracle) {
  const std::size_t d = 5, inner = 7, n = 4;
  auto e = random_expert(d, inner, 3);
  Rng r(1, Stream::kTest);
  for (auto& v : e.b1.value.vec()) v = r.normal();
  for (auto& v : e.b2.value.vec()) v = r.normal();
  const auto x = randn({n, d}, 3);
  Tape<double> t;
  auto y = expert_forward(e, t.constant(x)).value();
  for (std::size_t row = 0; row < n; ++row) {
    std::vector<double> h(inner);
    for (std::size_t j = 0; j < inner; ++j) {
      double s = e.b1.value[j];
      for (std::size_t i = 0; i < d; ++i) s += x.at(row, i) * e.w1.value.at(i, j);
      h[j] = gelu_ref(s);
    }
    for (std::size_t o = 0; o < d; ++o) {
      double s = e.b2.value[o];
      for (std::size_t j = 0; j < inner; ++j) s += h[j] * e.w2.value.at(j, o);
      EXPECT_NEAR(y.at(row, o), s, 1e-6);
    }
  }
}

TEST(Expert, RowPermutationEquivariant) {
  auto e = random_expert(4, 8, 4);
  const auto x = randn({3, 4}, 4);
  Array<double> xp({3, 4});
  const std::size_t perm[] = {2, 0, 1};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) xp.at(r, c) = x.at(perm[r], c);
  Tape<double> t;
  auto y = expert_forward(e, t.constant(x)).value();
  auto yp = expert_forward(e, t.constant(xp)).value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(yp.at(r, c), y.at(perm[r], c));
}

TEST(Expert, WrongInputShapeThrows) {
  auto e = random_expert(4, 8, 5);
  Tape<double> t;
  EXPECT_THROW(expert_forward(e, t.constant(Array<double>({3, 5}))), ShapeError);
}

TEST(Expert, ParamCountFormula) {
  auto e = random_expert(6, 10, 6);
  EXPECT_EQ(e.param_count(), 6u * 10 + 10 + 10 * 6 + 6);
}

TEST(Segmentation, FactorTwoRule) { EXPECT_EQ(segmented_inner(64, 2), 128u); }
TEST(Segmentation, ThreeRoutedPlusShared) { EXPECT_EQ(segmented_inner(64, 4), 64u); }
TEST(Segmentation, IndivisibleThrows) {
  EXPECT_THROW(segmented_inner(5, 3), ConfigError);
  EXPECT_THROW(segmented_inner(64, 0), ConfigError);
}

TEST(Segmentation, PoolSharesDimensions) {
  auto pool = make_segmented_pool<float>(32, 12, 1, 1, 2, 7);
  EXPECT_EQ(pool.standard.size(), 12u);
  EXPECT_EQ(pool.shared.size(), 1u);
  EXPECT_EQ(pool.unconditional.size(), 1u);
  for (const auto* group : {&pool.standard, &pool.shared, &pool.unconditional})
    for (const auto& e : *group) {
      EXPECT_EQ(e.dim(), 32u);
      EXPECT_EQ(e.inner(), 64u);
    }
}

TEST(Segmentation, PoolInitIsSeeded) {
  auto a = make_segmented_pool<float>(16, 3, 1, 1, 2, 9);
  auto b = make_segmented_pool<float>(16, 3, 1, 1, 2, 9);
  auto c = make_segmented_pool<float>(16, 3, 1, 1, 2, 10);
  EXPECT_EQ(a.standard[2].w1.value, b.standard[2].w1.value);
  EXPECT_NE(a.standard[2].w1.value, c.standard[2].w1.value);
  EXPECT_NE(a.standard[0].w1.value, a.standard[1].w1.value);
}

TEST(Parity, WideModelArithmetic) {
  // One shared plus one routed expert at D = 768 against the dense 4D FFN.
  EXPECT_EQ(activated_weight_params(768, 1, 1, 2), 2u * (2 * 768 * 1536));
  EXPECT_EQ(dense_weight_params(768), 2u * 768 * 3072);
  EXPECT_EQ(activated_weight_params(768, 1, 1, 2), dense_weight_params(768));
}

TEST(Parity, CountingFunctionAcrossSizes) {
  for (std::size_t d : {32u, 64u, 128u}) {
    for (std::size_t n_act : {1u, 2u, 4u}) {
      const std::size_t shared = n_act >= 2 ? 1 : 0;
      const std::size_t k = n_act - shared;
      auto pool = make_segmented_pool<float>(d, std::max<std::size_t>(k, 4), shared, 1, n_act, 1);
      EXPECT_EQ(activated_weight_params(pool, k), dense_weight_params(d)) << "D " << d << " n_act " << n_act;
    }
  }
}
