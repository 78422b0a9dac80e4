#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "promoe/error.hpp"
#include "promoe/moe_layer.hpp"

using namespace promoe;

namespace {

Array<double> forward(oracle::LayerCase& c, bool train = false) {
  Tape<double> t;
  return promoe_forward(t.constant(c.x), c.part, c.pool, c.proto, c.cfg, train).output.value();
}

std::vector<double> row(const Array<double>& a, std::size_t i) {
  const std::size_t d = a.dim(1);
  return {a.vec().begin() + static_cast<std::ptrdiff_t>(i * d), a.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * d)};
}

}  // namespace

TEST(LayerConfig, CodeRoundTrip) {
  auto c = ProMoELayerConfig::from_code("E14A1S1U1");
  EXPECT_EQ(c.n_experts, 12u);
  EXPECT_EQ(c.top_k, 1u);
  EXPECT_EQ(c.n_shared, 1u);
  EXPECT_EQ(c.n_uncond, 1u);
  EXPECT_EQ(c.code(), "E14A1S1U1");
  EXPECT_EQ(ProMoELayerConfig::from_code("E14A3S1N1").top_k, 3u);
  EXPECT_THROW(ProMoELayerConfig::from_code("E2A1S1U1"), ConfigError);
  EXPECT_THROW(ProMoELayerConfig::from_code("bogus"), ConfigError);
}

TEST(LayerConfig, Validation) {
  ProMoELayerConfig c;
  c.top_k = 13;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.rcl.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ProMoE, AllUnconditionalUsesOnlyUncondAndShared) {
  auto c = oracle::random_layer_case(1);
  c.part = partition_from_batch_mask(std::vector<std::uint8_t>(c.part.batch, 0), c.part.length);
  Tape<double> t;
  auto res = promoe_forward(t.constant(c.x), c.part, c.pool, c.proto, c.cfg, true);
  const auto y = res.output.value();
  for (std::size_t i = 0; i < c.x.dim(0); ++i) {
    auto want = std::vector<double>(c.x.dim(1), 0.0);
    for (const auto& e : c.pool.shared) oracle::axpy(want, 1.0, oracle::expert(e, row(c.x, i)));
    for (const auto& e : c.pool.unconditional) oracle::axpy(want, 1.0, oracle::expert(e, row(c.x, i)));
    const auto got = row(y, i);
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[j], want[j], 1e-12);
  }
  c.proto.p.zero_grad();
  t.backward(add(sum(res.output), res.aux_loss));
  for (double g : c.proto.p.grad.vec()) EXPECT_EQ(g, 0.0);
}

TEST(ProMoE, SingleExpertReduction) {
  ProMoELayerConfig cfg;
  cfg.n_experts = 1;
  cfg.top_k = 1;
  cfg.n_shared = 0;
  cfg.n_uncond = 0;
  auto pool = make_segmented_pool<double>(4, 1, 0, 0, 1, 3);
  auto proto = make_prototypes<double>(1, 4, 1.0, 3, 9);
  Rng r(3, Stream::kTest);
  Array<double> x({5, 4});
  for (auto& v : x.vec()) v = r.normal();
  auto part = partition_from_batch_mask(std::vector<std::uint8_t>(5, 1), 1);
  Tape<double> t;
  auto y = promoe_forward(t.constant(x), part, pool, proto, cfg, false).output.value();
  for (std::size_t i = 0; i < 5; ++i) {
    double dot = 0, xn = 0, pn = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      dot += x.at(i, j) * proto.p.value.at(0, j);
      xn += x.at(i, j) * x.at(i, j);
      pn += proto.p.value.at(0, j) * proto.p.value.at(0, j);
    }
    const double gate = dot / (std::sqrt(xn) * std::sqrt(pn));
    const auto e = oracle::expert(pool.standard[0], row(x, i));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(i, j), gate * e[j], 1e-7);
  }
}

TEST(ProMoE, MatchesPerTokenLoopOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto c = oracle::random_layer_case(seed);
    EXPECT_LT(oracle::max_abs_diff(forward(c), oracle::promoe_loop(c)), 1e-12) << "seed " << seed << " " << c.cfg.code();
  }
}

TEST(ProMoE, BranchIsolation) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto c = oracle::random_layer_case(100 + seed);
    const auto base = forward(c);
    auto perturbed = c;
    for (auto& e : perturbed.pool.standard)
      for (auto& v : e.w1.value.vec()) v += 0.5;
    for (auto& v : perturbed.proto.p.value.vec()) v *= -1.0;
    const auto ys = forward(perturbed);
    perturbed = c;
    for (auto& e : perturbed.pool.unconditional)
      for (auto& v : e.w2.value.vec()) v += 0.5;
    const auto yu = forward(perturbed);
    const std::size_t d = c.x.dim(1);
    for (std::size_t i = 0; i < c.x.dim(0); ++i)
      for (std::size_t j = 0; j < d; ++j) {
        if (c.part.mask_uncond[i]) {
          EXPECT_EQ(ys.at(i, j), base.at(i, j));
        } else {
          EXPECT_EQ(yu.at(i, j), base.at(i, j));
        }
      }
  }
}

TEST(ProMoE, SharedExpertAdditivity) {
  std::uint64_t seed = 7;
  auto c = oracle::random_layer_case(seed);
  while (c.pool.shared.empty()) c = oracle::random_layer_case(++seed);
  const auto full = forward(c);
  auto no_shared = c;
  for (auto& e : no_shared.pool.shared) e.for_each_parameter([](Parameter<double>& p) { p.value.fill(0.0); });
  const auto branch = forward(no_shared);
  for (std::size_t i = 0; i < c.x.dim(0); ++i) {
    auto shared = std::vector<double>(c.x.dim(1), 0.0);
    for (const auto& e : c.pool.shared) oracle::axpy(shared, 1.0, oracle::expert(e, row(c.x, i)));
    for (std::size_t j = 0; j < c.x.dim(1); ++j) EXPECT_NEAR(full.at(i, j) - shared[j], branch.at(i, j), 1e-12);
  }
}

TEST(ProMoE, GradientsReachExactlyTheUsedExperts) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto c = oracle::random_layer_case(200 + seed);
    Tape<double> t;
    auto res = promoe_forward(t.constant(c.x), c.part, c.pool, c.proto, c.cfg, true);
    c.pool.for_each_parameter([](Parameter<double>& p) { p.zero_grad(); });
    c.proto.p.zero_grad();
    t.backward(add(sum(mul(res.output, res.output)), res.aux_loss));
    std::vector<bool> used(c.cfg.n_experts, false);
    for (auto e : res.log->gating.indices) used[e] = true;
    auto norm = [](const ExpertFFN<double>& e) {
      double s = 0;
      for (const auto* p : {&e.w1, &e.b1, &e.w2, &e.b2})
        for (double g : p->grad.vec()) s += g * g;
      return s;
    };
    for (std::size_t e = 0; e < c.cfg.n_experts; ++e) {
      if (used[e]) {
        EXPECT_GT(norm(c.pool.standard[e]), 0.0) << "seed " << seed << " expert " << e;
      } else {
        EXPECT_EQ(norm(c.pool.standard[e]), 0.0) << "seed " << seed << " expert " << e;
      }
    }
    for (const auto& e : c.pool.unconditional) {
      if (c.part.n_uncond() > 0) {
        EXPECT_GT(norm(e), 0.0);
      } else {
        EXPECT_EQ(norm(e), 0.0);
      }
    }
    // A lone softmax-gated expert always gets gate 1, so no score gradient.
    const bool constant_gate = c.cfg.n_experts == 1 && c.cfg.activation == ScoreActivation::kSoftmax;
    if (c.part.n_cond() > 0 && !constant_gate) {
      double pg = 0;
      for (double g : c.proto.p.grad.vec()) pg += g * g;
      EXPECT_GT(pg, 0.0) << "seed " << seed;
    }
  }
}

TEST(ProMoE, Deterministic) {
  auto c = oracle::random_layer_case(9);
  EXPECT_EQ(forward(c, true), forward(c, true));
}

TEST(ProMoE, LogCoversConditionalTokens) {
  auto c = oracle::random_layer_case(10);
  Tape<double> t;
  auto res = promoe_forward(t.constant(c.x), c.part, c.pool, c.proto, c.cfg, false);
  ASSERT_TRUE(res.log.has_value());
  EXPECT_EQ(res.log->token_ids.size(), c.part.n_cond());
  EXPECT_EQ(res.log->gating.n, c.part.n_cond());
  for (auto id : res.log->token_ids) EXPECT_TRUE(c.part.mask_cond[id]);
}

TEST(ProMoE, RclOnlyInTraining) {
  auto c = oracle::random_layer_case(11);
  c.part = partition_from_batch_mask(std::vector<std::uint8_t>(c.part.batch, 1), c.part.length);
  Tape<double> t;
  auto eval = promoe_forward(t.constant(c.x), c.part, c.pool, c.proto, c.cfg, false);
  EXPECT_EQ(eval.aux_loss.value()[0], 0.0);
}

TEST(ProMoE, ShapeMismatchThrows) {
  auto c = oracle::random_layer_case(12);
  Tape<double> t;
  EXPECT_THROW(promoe_forward(t.constant(Array<double>({c.x.dim(0) + 1, c.x.dim(1)})), c.part, c.pool, c.proto,
                              c.cfg, false),
               ShapeError);
}

TEST(TokenChoice, OneExpertGateOne) {
  auto pool = make_segmented_pool<double>(4, 1, 0, 0, 1, 5);
  Parameter<double> w("router", Array<double>({4, 1}, {0.3, -0.1, 0.2, 0.7}));
  Rng r(5, Stream::kTest);
  Array<double> x({3, 4});
  for (auto& v : x.vec()) v = r.normal();
  Tape<double> t;
  auto res = tc_moe_forward(t.constant(x), pool, w, 1, false);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(res.log->gating.gate(i, 0), 1.0);
    const auto e = oracle::expert(pool.standard[0], row(x, i));
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(res.output.value().at(i, j), e[j], 1e-12);
  }
}

TEST(TokenChoice, ZeroRouterTiesToExpertZero) {
  auto pool = make_segmented_pool<double>(4, 3, 0, 0, 1, 6);
  Parameter<double> w("router", Array<double>({4, 3}));
  Tape<double> t;
  auto res = tc_moe_forward(t.constant(Array<double>({2, 4}, 1.0)), pool, w, 1, false);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(res.log->gating.index(i, 0), 0u);
    EXPECT_NEAR(res.log->gating.gate(i, 0), 1.0 / 3.0, 1e-15);
  }
}

TEST(TokenChoice, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng r(seed, Stream::kTest, 77);
    const std::size_t d = 6, ne = 2 + r.below(4), k = 1 + r.below(2), n = 1 + r.below(20);
    auto pool = make_segmented_pool<double>(d, ne, 1, 0, k + 1, seed);
    Parameter<double> w("router", Array<double>({d, ne}));
    for (auto& v : w.value.vec()) v = r.normal();
    Array<double> x({n, d});
    for (auto& v : x.vec()) v = r.normal();
    Tape<double> t;
    auto y = tc_moe_forward(t.constant(x), pool, w, k, false).output.value();
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> logits(ne), p(ne);
      for (std::size_t e = 0; e < ne; ++e)
        for (std::size_t j = 0; j < d; ++j) logits[e] += x.at(i, j) * w.value.at(j, e);
      double z = 0, m = *std::max_element(logits.begin(), logits.end());
      for (std::size_t e = 0; e < ne; ++e) z += (p[e] = std::exp(logits[e] - m));
      for (auto& v : p) v /= z;
      std::vector<std::size_t> order(ne);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] > p[b]; });
      auto want = oracle::expert(pool.shared[0], row(x, i));
      for (std::size_t s = 0; s < k; ++s) oracle::axpy(want, p[order[s]], oracle::expert(pool.standard[order[s]], row(x, i)));
      for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(y.at(i, j), want[j], 1e-12);
    }
  }
}

TEST(Variant, ParseRoundTrip) {
  for (auto v : {LayerVariant::kDense, LayerVariant::kProMoE, LayerVariant::kTokenChoice, LayerVariant::kKMeans,
                 LayerVariant::kClassifier})
    EXPECT_EQ(parse_layer_variant(to_string(v)), v);
  EXPECT_THROW(parse_layer_variant("ec_moe"), ConfigError);
}
