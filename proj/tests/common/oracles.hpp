#pragma once
// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "promoe/moe_layer.hpp"
#include "promoe/rng.hpp"

namespace promoe::oracle {

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

template <typename T>
std::vector<double> expert(const ExpertFFN<T>& e, const std::vector<double>& x) {
  const std::size_t d = e.dim(), h = e.inner();
  std::vector<double> hid(h), out(d);
  for (std::size_t j = 0; j < h; ++j) {
    double s = e.b1.value[j];
    for (std::size_t i = 0; i < d; ++i) s += x[i] * static_cast<double>(e.w1.value.at(i, j));
    hid[j] = e.activation == FfnActivation::kGelu ? gelu(s) : s;
  }
  for (std::size_t o = 0; o < d; ++o) {
    double s = e.b2.value[o];
    for (std::size_t j = 0; j < h; ++j) s += hid[j] * static_cast<double>(e.w2.value.at(j, o));
    out[o] = s;
  }
  return out;
}

inline void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

/// One token through the ProMoE layer: shared experts always, then either the
/// unconditional experts or prototype-scored top-K standard experts.
template <typename T>
std::vector<double> promoe_token(const std::vector<double>& x, bool unconditional, const ExpertPool<T>& pool,
                                 const Prototypes<T>& proto, const ProMoELayerConfig& cfg) {
  std::vector<double> y(x.size(), 0.0);
  for (const auto& e : pool.shared) axpy(y, 1.0, expert(e, x));
  if (unconditional) {
    for (const auto& e : pool.unconditional) axpy(y, 1.0, expert(e, x));
    return y;
  }
  const std::size_t ne = proto.count(), d = proto.dim();
  double xn = 0.0;
  for (double v : x) xn += v * v;
  xn = std::max(std::sqrt(xn), 1e-8);
  std::vector<double> s(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    double pn = 0.0, dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double p = proto.p.value.at(e, j);
      pn += p * p;
      dot += x[j] * p;
    }
    s[e] = cfg.alpha * dot / (xn * std::max(std::sqrt(pn), 1e-8));
  }
  if (cfg.activation == ScoreActivation::kSigmoid) {
    for (auto& v : s) v = 1.0 / (1.0 + std::exp(-v));
  } else if (cfg.activation == ScoreActivation::kSoftmax) {
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (auto& v : s) z += (v = std::exp(v - m));
    for (auto& v : s) v /= z;
  }
  std::vector<std::size_t> order(ne);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  for (std::size_t k = 0; k < cfg.top_k; ++k) axpy(y, s[order[k]], expert(pool.standard[order[k]], x));
  return y;
}

/// Random ProMoE layer and mixed batch: B <= 8, L <= 16, N_E <= 6, K in {1, 2}.
struct LayerCase {
  ProMoELayerConfig cfg;
  ExpertPool<double> pool;
  Prototypes<double> proto;
  TokenPartition part;
  Array<double> x;  // (B*L) x D
};

inline LayerCase random_layer_case(std::uint64_t seed) {
  Rng r(seed, Stream::kTest, 4242);
  LayerCase c;
  c.cfg.n_experts = 1 + r.below(6);
  c.cfg.top_k = std::min<std::size_t>(1 + r.below(2), c.cfg.n_experts);
  c.cfg.n_shared = r.below(2);
  c.cfg.n_uncond = 1 + r.below(2);
  const ScoreActivation acts[] = {ScoreActivation::kIdentity, ScoreActivation::kSigmoid, ScoreActivation::kSoftmax};
  c.cfg.activation = acts[r.below(3)];
  c.cfg.alpha = 0.5 + r.uniform();
  const std::size_t d = 6 * (1 + r.below(2));
  const std::size_t b = 1 + r.below(8), l = 1 + r.below(16);
  c.pool = make_segmented_pool<double>(d, c.cfg.n_experts, c.cfg.n_shared, c.cfg.n_uncond, c.cfg.n_act(), seed, 500);
  // Nonzero biases so every term of the expert is exercised.
  c.pool.for_each_parameter([&](Parameter<double>& p) {
    if (p.value.rank() == 1)
      for (auto& v : p.value.vec()) v = 0.1 * r.normal();
  });
  c.proto = make_prototypes<double>(c.cfg.n_experts, d, c.cfg.alpha, seed, 600);
  std::vector<std::uint8_t> cond(b);
  for (auto& v : cond) v = r.uniform() < 0.7;
  c.part = partition_from_batch_mask(cond, l);
  c.x = Array<double>({b * l, d});
  for (auto& v : c.x.vec()) v = r.normal();
  return c;
}

/// Per-token loop over a LayerCase; returns [(B*L) x D].
inline Array<double> promoe_loop(const LayerCase& c) {
  const std::size_t n = c.x.dim(0), d = c.x.dim(1);
  Array<double> out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> xi(c.x.vec().begin() + static_cast<std::ptrdiff_t>(i * d),
                           c.x.vec().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    const auto yi = promoe_token(xi, c.part.mask_uncond[i] != 0, c.pool, c.proto, c.cfg);
    std::copy(yi.begin(), yi.end(), out.vec().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

inline double max_abs_diff(const Array<double>& a, const Array<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline std::vector<double> unit(const double* v, std::size_t d) {
  double n = 0;
  for (std::size_t i = 0; i < d; ++i) n += v[i] * v[i];
  n = std::max(std::sqrt(n), 1e-8);
  std::vector<double> u(v, v + d);
  for (auto& e : u) e /= n;
  return u;
}

// Independent double loop: centroids of active experts, then InfoNCE over them.
inline double rcl_loop(const Array<double>& x, const std::vector<std::size_t>& idx, std::size_t k,
                       const Array<double>& p, double tau) {
  const std::size_t n = x.dim(0), d = x.dim(1), ne = p.dim(0);
  std::vector<std::vector<double>> sum(ne, std::vector<double>(d, 0.0));
  std::vector<std::size_t> cnt(ne, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t e = idx[i * k + s];
      ++cnt[e];
      for (std::size_t j = 0; j < d; ++j) sum[e][j] += x.at(i, j);
    }
  std::vector<std::size_t> active;
  for (std::size_t e = 0; e < ne; ++e)
    if (cnt[e] > 0) active.push_back(e);
  if (active.size() <= 1) return 0.0;
  double loss = 0.0;
  for (std::size_t a : active) {
    const auto pa = unit(&p.vec()[a * d], d);
    double num = 0, den = 0;
    for (std::size_t b : active) {
      std::vector<double> m(d);
      for (std::size_t j = 0; j < d; ++j) m[j] = sum[b][j] / static_cast<double>(cnt[b]);
      const auto mb = unit(m.data(), d);
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += pa[j] * mb[j];
      const double e = std::exp(dot / tau);
      den += e;
      if (a == b) num = e;
    }
    loss += -std::log(num / den);
  }
  return loss / static_cast<double>(active.size());
}

}  // namespace promoe::oracle
