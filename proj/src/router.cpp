#include "promoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace promoe {

ScoreActivation parse_score_activation(const std::string& s) {
  if (s == "identity") return ScoreActivation::kIdentity;
  if (s == "sigmoid") return ScoreActivation::kSigmoid;
  if (s == "softmax") return ScoreActivation::kSoftmax;
  throw ConfigError("unknown activation '" + s + "' (identity|sigmoid|softmax)");
}

std::string to_string(ScoreActivation a) {
  switch (a) {
    case ScoreActivation::kIdentity: return "identity";
    case ScoreActivation::kSigmoid: return "sigmoid";
    case ScoreActivation::kSoftmax: return "softmax";
  }
  return "identity";
}

template <typename T>
Prototypes<T> make_prototypes(std::size_t n_experts, std::size_t dim, T alpha, std::uint64_t seed,
                              std::uint64_t init_key, const std::string& name) {
  Rng rng(seed, Stream::kInit, init_key);
  Array<T> p({n_experts, dim});
  for (std::size_t i = 0; i < n_experts; ++i) {
    double ss = 0.0;
    std::vector<double> row(dim);
    for (auto& v : row) {
      v = rng.normal();
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss);
    for (std::size_t j = 0; j < dim; ++j) p.at(i, j) = static_cast<T>(row[j] * inv);
  }
  return Prototypes<T>{Parameter<T>(name, std::move(p)), alpha};
}

TokenPartition partition_by_condition(std::span<const int> labels, int null_label, std::size_t length) {
  TokenPartition part;
  part.batch = labels.size();
  part.length = length;
  part.mask_uncond.resize(labels.size() * length);
  part.mask_cond.resize(labels.size() * length);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const std::uint8_t u = labels[b] == null_label ? 1 : 0;
    for (std::size_t l = 0; l < length; ++l) {
      part.mask_uncond[b * length + l] = u;
      part.mask_cond[b * length + l] = 1 - u;
    }
  }
  return part;
}

TokenPartition partition_from_batch_mask(std::span<const std::uint8_t> conditioned, std::size_t length) {
  std::vector<int> labels(conditioned.size());
  for (std::size_t b = 0; b < conditioned.size(); ++b) labels[b] = conditioned[b] ? 0 : 1;
  return partition_by_condition(labels, 1, length);
}

std::vector<double> GatingResult::dense() const {
  std::vector<double> d(n * n_experts, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t s = 0; s < k; ++s) d[r * n_experts + index(r, s)] = gate(r, s);
  return d;
}

template <typename T>
Var<T> prototype_scores(Var<T> x, Var<T> prototypes, T alpha) {
  if (x.value().rank() != 2 || prototypes.value().rank() != 2 || x.dim(1) != prototypes.dim(1)) {
    throw ShapeError("prototype_scores: tokens " + shape_str(x.shape()) + " vs prototypes " +
                     shape_str(prototypes.shape()));
  }
  Var<T> z = matmul_nt(l2_normalize(x, 1), l2_normalize(prototypes, 1));
  return alpha == T{1} ? z : scale(z, alpha);
}

template <typename T>
Var<T> activate(Var<T> z, ScoreActivation kind) {
  switch (kind) {
    case ScoreActivation::kIdentity: return z;
    case ScoreActivation::kSigmoid: return sigmoid(z);
    case ScoreActivation::kSoftmax: return softmax(z, z.value().rank() - 1);
  }
  return z;
}

template <typename T>
GatingResult topk_gate(const Array<T>& scores, std::size_t k) {
  if (scores.rank() != 2) throw ShapeError("topk_gate: expected 2-D scores, got " + shape_str(scores.shape()));
  const std::size_t n = scores.dim(0), ne = scores.dim(1);
  if (k < 1 || k > ne) {
    throw ConfigError("topk_gate: K = " + std::to_string(k) + " outside [1, " + std::to_string(ne) + "]");
  }
  GatingResult g;
  g.n = n;
  g.k = k;
  g.n_experts = ne;
  g.gates.resize(n * k);
  g.indices.resize(n * k);
  g.scores.assign(scores.data().begin(), scores.data().end());
  std::vector<std::uint8_t> taken(ne);
  for (std::size_t r = 0; r < n; ++r) {
    std::fill(taken.begin(), taken.end(), 0);
    for (std::size_t s = 0; s < k; ++s) {
      std::size_t best = ne;
      for (std::size_t e = 0; e < ne; ++e) {
        if (taken[e]) continue;
        if (best == ne || scores.at(r, e) > scores.at(r, best)) best = e;
      }
      taken[best] = 1;
      g.indices[r * k + s] = best;
      g.gates[r * k + s] = static_cast<double>(scores.at(r, best));
    }
  }
  return g;
}

template <typename T>
Var<T> linear_router_scores(Var<T> x, Var<T> w) {
  return matmul(x, w);
}

template <typename T>
KMeansState<T> kmeans_init(const Array<T>& tokens, std::size_t n_clusters, Rng& rng) {
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (n < n_clusters) {
    throw ConfigError("kmeans_init: " + std::to_string(n) + " tokens for " + std::to_string(n_clusters) + " centroids");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < n_clusters; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  KMeansState<T> st;
  st.centroids = Array<T>({n_clusters, d});
  st.counts.assign(n_clusters, 0);
  for (std::size_t c = 0; c < n_clusters; ++c)
    std::copy_n(tokens.ptr() + order[c] * d, d, st.centroids.ptr() + c * d);
  return st;
}

template <typename T>
Array<T> kmeans_distances(const Array<T>& tokens, const KMeansState<T>& state) {
  const std::size_t n = tokens.dim(0), d = tokens.dim(1), k = state.centroids.dim(0);
  if (state.centroids.dim(1) != d) throw ShapeError("kmeans: token width does not match centroids");
  Array<T> dist({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      T acc{0};
      for (std::size_t j = 0; j < d; ++j) {
        const T diff = tokens.at(i, j) - state.centroids.at(c, j);
        acc += diff * diff;
      }
      dist.at(i, c) = acc;
    }
  return dist;
}

template <typename T>
std::vector<std::size_t> kmeans_assign(const Array<T>& tokens, const KMeansState<T>& state) {
  const Array<T> dist = kmeans_distances(tokens, state);
  const std::size_t n = dist.dim(0), k = dist.dim(1);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (dist.at(i, c) < dist.at(i, best)) best = c;
    idx[i] = best;
  }
  return idx;
}

template <typename T>
KMeansState<T> kmeans_update(const Array<T>& tokens, const std::vector<std::size_t>& indices, KMeansState<T> state) {
  const std::size_t d = tokens.dim(1), k = state.centroids.dim(0);
  std::vector<double> acc(k * d, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t c = indices[i];
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) acc[c * d + j] += static_cast<double>(tokens.at(i, j));
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t j = 0; j < d; ++j)
      state.centroids.at(c, j) = static_cast<T>(acc[c * d + j] / static_cast<double>(counts[c]));
  }
  state.counts = std::move(counts);
  return state;
}

template <typename T>
double kmeans_objective(const Array<T>& tokens, const std::vector<std::size_t>& indices, const KMeansState<T>& state) {
  const std::size_t d = tokens.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < indices.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = static_cast<double>(tokens.at(i, j)) - static_cast<double>(state.centroids.at(indices[i], j));
      total += diff * diff;
    }
  return total;
}

template <typename T>
ClassifierRouting<T> classifier_route(Var<T> x, std::size_t batch, std::size_t length, Var<T> w) {
  if (x.value().rank() != 2 || x.dim(0) != batch * length || w.value().rank() != 2 || w.dim(0) != x.dim(1)) {
    throw ShapeError("classifier_route: tokens " + shape_str(x.shape()) + ", weights " + shape_str(w.shape()));
  }
  Array<T> pool({batch, batch * length});
  const T inv = T{1} / static_cast<T>(length);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < length; ++l) pool.at(b, b * length + l) = inv;
  Var<T> pooled = matmul(x.tape->constant(std::move(pool)), x);
  Var<T> scores = matmul(pooled, w);
  const auto& s = scores.value();
  std::vector<std::size_t> idx(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.dim(1); ++c)
      if (s.at(b, c) > s.at(b, best)) best = c;
    idx[b] = best;
  }
  return {scores, std::move(idx)};
}

#define PROMOE_INSTANTIATE(T)                                                                                 \
  template Prototypes<T> make_prototypes<T>(std::size_t, std::size_t, T, std::uint64_t, std::uint64_t,         \
                                            const std::string&);                                              \
  template Var<T> prototype_scores<T>(Var<T>, Var<T>, T);                                                     \
  template Var<T> activate<T>(Var<T>, ScoreActivation);                                                       \
  template GatingResult topk_gate<T>(const Array<T>&, std::size_t);                                           \
  template Var<T> linear_router_scores<T>(Var<T>, Var<T>);                                                    \
  template KMeansState<T> kmeans_init<T>(const Array<T>&, std::size_t, Rng&);                                 \
  template Array<T> kmeans_distances<T>(const Array<T>&, const KMeansState<T>&);                              \
  template std::vector<std::size_t> kmeans_assign<T>(const Array<T>&, const KMeansState<T>&);                 \
  template KMeansState<T> kmeans_update<T>(const Array<T>&, const std::vector<std::size_t>&, KMeansState<T>); \
  template double kmeans_objective<T>(const Array<T>&, const std::vector<std::size_t>&, const KMeansState<T>&); \
  template ClassifierRouting<T> classifier_route<T>(Var<T>, std::size_t, std::size_t, Var<T>);
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe
