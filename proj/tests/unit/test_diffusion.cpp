#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "promoe/diffusion.hpp"
#include "promoe/error.hpp"

using namespace promoe;

namespace {

Array<double> randn(Shape s, std::uint64_t key) { return gaussian<double>(s, 12, Stream::kTest, key); }

// A denoiser that knows x0: RF velocity eps - x0 reconstructed from x_t, or
// DDPM eps reconstructed from x_t.
Denoiser<double> perfect(const Array<double>& x0, const Schedule& s) {
  return [x0, s](const Array<double>& x, std::span<const double> t, std::span<const int>, const std::vector<std::uint8_t>&) {
    Array<double> out(x.shape());
    const std::size_t per = x.size() / t.size();
    for (std::size_t b = 0; b < t.size(); ++b) {
      const double a = s.alpha(t[b]), sg = s.sigma(t[b]);
      for (std::size_t i = 0; i < per; ++i) {
        const std::size_t k = b * per + i;
        const double x0k = x0[k % x0.size()];
        const double eps = (x[k] - a * x0k) / sg;
        out[k] = s.kind == Objective::kRF ? eps - x0k : eps;
      }
    }
    return out;
  };
}

}  // namespace

TEST(Schedule, RectifiedFlowEndpoints) {
  const auto s = Schedule::rf();
  EXPECT_EQ(s.alpha(0), 1.0);
  EXPECT_EQ(s.sigma(0), 0.0);
  EXPECT_EQ(s.alpha(1), 0.0);
  EXPECT_EQ(s.sigma(1), 1.0);
  EXPECT_THROW(s.check_time(1.5), ConfigError);
}

TEST(Schedule, DdpmMonotoneAndVariancePreserving) {
  const auto s = Schedule::ddpm();
  ASSERT_EQ(s.alpha_bar.size(), 1000u);
  EXPECT_NEAR(s.betas.front(), 1e-4, 1e-15);
  EXPECT_NEAR(s.betas.back(), 2e-2, 1e-15);
  for (std::size_t t = 1; t < 1000; ++t) {
    EXPECT_LT(s.alpha(t), s.alpha(t - 1));
    EXPECT_GT(s.sigma(t), s.sigma(t - 1));
  }
  for (std::size_t t = 0; t < 1000; t += 37) EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t), 1.0, 1e-12);
  EXPECT_THROW(s.check_time(1000), ConfigError);
  EXPECT_THROW(s.check_time(2.5), ConfigError);
}

TEST(AddNoise, RectifiedFlowAnchors) {
  const auto s = Schedule::rf();
  const auto x0 = randn({3, 4}, 1), eps = randn({3, 4}, 2);
  const std::vector<double> t0(3, 0.0), t1(3, 1.0);
  EXPECT_EQ(add_noise(x0, eps, t0, s), x0);
  EXPECT_EQ(add_noise(x0, eps, t1, s), eps);
  const std::vector<double> half{0.5};
  EXPECT_EQ(add_noise(Array<double>({1}, {2.0}), Array<double>({1}, {0.0}), half, s)[0], 1.0);
}

TEST(AddNoise, MarginalVarianceMonteCarlo) {
  for (auto kind : {Objective::kRF, Objective::kDDPM}) {
    const auto s = Schedule::for_objective(kind);
    const double t = kind == Objective::kRF ? 0.3 : 400.0;
    const std::size_t n = 10000;
    const auto x0 = randn({n}, 3);  // Var(x0) = 1
    Array<double> x0s = x0;
    for (auto& v : x0s.vec()) v *= 0.5;  // Var = 0.25
    const auto eps = randn({n}, 4);
    const std::vector<double> tt(n, t);
    const auto xt = add_noise(x0s.reshaped({n, 1}), eps.reshaped({n, 1}), tt, s);
    double m = 0, v = 0;
    for (double e : xt.vec()) m += e / n;
    for (double e : xt.vec()) v += (e - m) * (e - m) / n;
    const double want = s.alpha(t) * s.alpha(t) * 0.25 + s.sigma(t) * s.sigma(t);
    EXPECT_NEAR(v, want, 0.02 * want) << to_string(kind);
    EXPECT_NEAR(std::sqrt(v), std::sqrt(want), 0.01 * std::sqrt(want));
  }
}

TEST(Timesteps, LogitNormalMedianAndMean) {
  auto t = sample_timesteps(TimestepSampling::kLogitNormal, 100000, 1);
  double m = 0;
  for (double v : t) {
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
    m += v / t.size();
  }
  EXPECT_GT(m, 0.48);
  EXPECT_LT(m, 0.52);
  std::nth_element(t.begin(), t.begin() + 50000, t.end());
  EXPECT_NEAR(t[50000], 0.5, 0.01);
}

TEST(Timesteps, UniformKolmogorovSmirnov) {
  auto t = sample_timesteps(TimestepSampling::kUniform, 100000, 2);
  std::sort(t.begin(), t.end());
  double ks = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double n = static_cast<double>(t.size());
    ks = std::max({ks, std::abs((i + 1) / n - t[i]), std::abs(t[i] - i / n)});
  }
  EXPECT_LT(ks, 0.01);
}

TEST(Timesteps, DdpmIndicesInRange) {
  auto t = sample_timestep_indices(1000, 5000, 3);
  for (double v : t) {
    EXPECT_EQ(v, std::floor(v));
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1000.0);
  }
  EXPECT_EQ(sample_timestep_indices(1000, 8, 3, 5), sample_timestep_indices(1000, 8, 3, 5));
  EXPECT_NE(sample_timestep_indices(1000, 8, 3, 5), sample_timestep_indices(1000, 8, 3, 6));
}

TEST(Timesteps, ParseRoundTrip) {
  for (auto k : {TimestepSampling::kUniform, TimestepSampling::kLogitNormal})
    EXPECT_EQ(parse_timestep_sampling(to_string(k)), k);
  EXPECT_THROW(parse_timestep_sampling("cosine"), ConfigError);
}

TEST(Cfg, Anchors) {
  const auto c = randn({2, 3}, 5), u = randn({2, 3}, 6);
  const auto at1 = cfg_combine(c, u, 1.0), at0 = cfg_combine(c, u, 0.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(at1[i], c[i], 1e-15);
    EXPECT_EQ(at0[i], u[i]);
  }
  for (double w : {-1.0, 0.3, 1.5, 4.0}) {
    const auto same = cfg_combine(c, c, w);
    for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(same[i], c[i], 1e-15);
  }
  const auto half = cfg_combine(c, u, 0.5), two = cfg_combine(c, u, 2.0);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_NEAR(half[i], 0.5 * (c[i] + u[i]), 1e-15);
    EXPECT_NEAR(two[i], 2 * c[i] - u[i], 1e-14);
  }
  EXPECT_THROW(cfg_combine(c, randn({3, 2}, 7), 1.5), ShapeError);
}

TEST(Cfg, ScaleOneNeverDuplicatesTheBatch) {
  std::size_t calls = 0;
  Denoiser<double> fn = [&](const Array<double>& x, std::span<const double> t, std::span<const int> labels,
                            const std::vector<std::uint8_t>& mask) {
    ++calls;
    EXPECT_EQ(x.dim(0), 3u);
    EXPECT_EQ(t.size(), 3u);
    for (int l : labels) EXPECT_NE(l, 9);
    for (auto m : mask) EXPECT_EQ(m, 1);
    return Array<double>(x.shape());
  };
  const std::vector<int> labels{0, 1, 2};
  SamplerConfig sc;
  sc.steps = 4;
  rf_euler_sample(fn, labels, {1, 2, 2}, sc, 9, 0);
  EXPECT_EQ(calls, 4u);
}

TEST(Cfg, GuidedBatchCarriesMaskAndNullLabels) {
  Denoiser<double> fn = [&](const Array<double>& x, std::span<const double>, std::span<const int> labels,
                            const std::vector<std::uint8_t>& mask) {
    EXPECT_EQ(x.dim(0), 4u);
    EXPECT_EQ(mask, (std::vector<std::uint8_t>{1, 1, 0, 0}));
    EXPECT_EQ(labels[2], 9);
    EXPECT_EQ(labels[3], 9);
    Array<double> out(x.shape());
    for (std::size_t b = 0; b < 4; ++b) out[b] = mask[b] ? 1.0 : 0.0;
    return out;
  };
  const std::vector<int> labels{3, 4};
  const std::vector<double> t{0.5, 0.5};
  auto y = guided_prediction(fn, Array<double>({2, 1}), t, labels, 1.5, 9);
  EXPECT_EQ(y[0], 1.5);
  EXPECT_EQ(y[1], 1.5);
}

TEST(RfSampler, OneStepPerfectOracleRecoversX0) {
  const auto s = Schedule::rf();
  const auto x0 = randn({1, 2, 2}, 8);
  SamplerConfig sc;
  sc.steps = 1;
  const std::vector<int> labels{0};
  auto x = rf_euler_sample(perfect(x0, s), labels, {1, 2, 2}, sc, 9, 3);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x[i], x0[i], 1e-12);
}

TEST(RfSampler, OneStepClosedForm) {
  // v(x) = a * x: one Euler step from t=1 gives x1 - a * x1.
  Denoiser<double> lin = [](const Array<double>& x, std::span<const double>, std::span<const int>,
                            const std::vector<std::uint8_t>&) {
    Array<double> v = x;
    for (auto& e : v.vec()) e *= 0.3;
    return v;
  };
  SamplerConfig sc;
  sc.steps = 1;
  const std::vector<int> labels{0, 1};
  const auto x1 = gaussian<double>({2, 1, 2, 2}, 5, Stream::kSampler, 0);
  auto x = rf_euler_sample(lin, labels, {1, 2, 2}, sc, 9, 5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], 0.7 * x1[i], 1e-14);
}

TEST(RfSampler, RefinementOnLinearModelWithinTruncationBound) {
  // dx/dt = a x integrates exactly to x1 * exp(-a); Euler with n steps gives
  // x1 (1 - a/n)^n. Doubling steps moves the answer toward the exact value by
  // less than the one-step error.
  const double a = 0.8;
  Denoiser<double> lin = [a](const Array<double>& x, std::span<const double>, std::span<const int>,
                             const std::vector<std::uint8_t>&) {
    Array<double> v = x;
    for (auto& e : v.vec()) e *= a;
    return v;
  };
  const std::vector<int> labels{0};
  const auto x1 = gaussian<double>({1, 1, 1, 3}, 6, Stream::kSampler, 0);
  double prev_err = INFINITY;
  for (std::size_t n : {1u, 2u, 4u, 8u, 16u}) {
    SamplerConfig sc;
    sc.steps = n;
    auto x = rf_euler_sample(lin, labels, {1, 1, 3}, sc, 9, 6);
    SamplerConfig sc2 = sc;
    sc2.steps = 2 * n;
    auto x2 = rf_euler_sample(lin, labels, {1, 1, 3}, sc2, 9, 6);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_NEAR(x[i], x1[i] * std::pow(1 - a / n, n), 1e-12);
      const double one_step_bound = std::abs(x1[i]) * std::abs(std::exp(-a) - (1 - a));
      EXPECT_LT(std::abs(x2[i] - x[i]), one_step_bound);
    }
    const double err = std::abs(x[0] - x1[0] * std::exp(-a));
    EXPECT_LT(err, prev_err);
    prev_err = err;
  }
}

TEST(RfSampler, PureGivenSeed) {
  Denoiser<double> lin = [](const Array<double>& x, std::span<const double> t, std::span<const int>,
                            const std::vector<std::uint8_t>&) {
    Array<double> v = x;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(v[i]) * t[0];
    return v;
  };
  SamplerConfig sc;
  sc.steps = 7;
  sc.cfg_scale = 1.5;
  const std::vector<int> labels{1, 2};
  EXPECT_EQ(rf_euler_sample(lin, labels, {1, 2, 2}, sc, 9, 4), rf_euler_sample(lin, labels, {1, 2, 2}, sc, 9, 4));
  EXPECT_NE(rf_euler_sample(lin, labels, {1, 2, 2}, sc, 9, 4), rf_euler_sample(lin, labels, {1, 2, 2}, sc, 9, 5));
}

TEST(DdpmSampler, RespacedIndices) {
  EXPECT_EQ(respaced_indices(1000, 1), (std::vector<std::size_t>{999}));
  const auto idx = respaced_indices(1000, 50);
  ASSERT_EQ(idx.size(), 50u);
  EXPECT_EQ(idx.front(), 999u);
  EXPECT_EQ(idx.back(), 0u);
  for (std::size_t i = 1; i < idx.size(); ++i) EXPECT_LT(idx[i], idx[i - 1]);
  EXPECT_EQ(respaced_indices(1000, 1000).size(), 1000u);
}

TEST(DdpmSampler, SingleStepPerfectOracleRecoversX0) {
  // One step from the top of a T=1 chain: the final step adds no noise, so
  // the posterior mean equals x0 exactly when eps is known.
  const auto s = Schedule::ddpm(1);
  const auto x0 = randn({1, 2, 2}, 9);
  SamplerConfig sc;
  sc.steps = 1;
  sc.objective = Objective::kDDPM;
  const std::vector<int> labels{0};
  auto x = ddpm_sample(perfect(x0, s), s, labels, {1, 2, 2}, sc, 9, 1);
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x[i], x0[i], 1e-9);
}

TEST(DdpmSampler, PerfectOracleOnFullChainLandsOnX0) {
  const auto s = Schedule::ddpm();
  const auto x0 = randn({1, 2, 2}, 10);
  SamplerConfig sc;
  sc.steps = 25;
  sc.objective = Objective::kDDPM;
  const std::vector<int> labels{0};
  for (bool det : {false, true}) {
    sc.deterministic = det;
    auto x = ddpm_sample(perfect(x0, s), s, labels, {1, 2, 2}, sc, 9, 1);
    for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(x[i], x0[i], 1e-6) << "deterministic " << det;
  }
}

TEST(DdpmSampler, DeterministicVariantIgnoresNoiseDraws) {
  const auto s = Schedule::ddpm();
  Denoiser<double> zero = [](const Array<double>& x, std::span<const double>, std::span<const int>,
                             const std::vector<std::uint8_t>&) { return Array<double>(x.shape()); };
  SamplerConfig sc;
  sc.steps = 10;
  sc.objective = Objective::kDDPM;
  sc.deterministic = true;
  const std::vector<int> labels{0, 1};
  const auto a = ddpm_sample(zero, s, labels, {1, 2, 2}, sc, 9, 3);
  EXPECT_EQ(a, ddpm_sample(zero, s, labels, {1, 2, 2}, sc, 9, 3));
  sc.deterministic = false;
  EXPECT_NE(a, ddpm_sample(zero, s, labels, {1, 2, 2}, sc, 9, 3));
}

TEST(SamplerConfig, Validation) {
  SamplerConfig sc;
  sc.steps = 0;
  EXPECT_THROW(sc.validate(), ConfigError);
}
