#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "promoe/ops.hpp"
#include "promoe/rng.hpp"

namespace promoe {

enum class ScoreActivation { kIdentity, kSigmoid, kSoftmax };

ScoreActivation parse_score_activation(const std::string& s);
std::string to_string(ScoreActivation a);

/// Learnable prototypes, one row per standard expert. Rows are not kept
/// unit-norm; scoring normalizes them.
template <typename T>
struct Prototypes {
  Parameter<T> p;  // N_E x D
  T alpha = T{1};

  std::size_t count() const { return p.value.dim(0); }
  std::size_t dim() const { return p.value.dim(1); }
};

/// Unit-norm Gaussian rows drawn from (seed, kInit, init_key).
template <typename T>
Prototypes<T> make_prototypes(std::size_t n_experts, std::size_t dim, T alpha, std::uint64_t seed,
                              std::uint64_t init_key, const std::string& name = "prototypes");

/// Conditional / unconditional token masks over a flattened [B*L] token axis.
struct TokenPartition {
  std::size_t batch = 0;
  std::size_t length = 0;
  Mask mask_uncond;
  Mask mask_cond;

  std::size_t n_uncond() const { return mask_count(mask_uncond); }
  std::size_t n_cond() const { return mask_count(mask_cond); }
};

/// Samples whose label equals `null_label` become unconditional tokens.
TokenPartition partition_by_condition(std::span<const int> labels, int null_label, std::size_t length);
/// Inference-time form: `conditioned[b] != 0` marks samples that receive conditioning.
TokenPartition partition_from_batch_mask(std::span<const std::uint8_t> conditioned, std::size_t length);

/// Sparse top-K gating over n tokens and N_E experts. Row-major n x K.
struct GatingResult {
  std::size_t n = 0;
  std::size_t k = 0;
  std::size_t n_experts = 0;
  std::vector<double> gates;
  std::vector<std::size_t> indices;
  std::vector<double> scores;  // n x N_E affinity scores S

  std::size_t index(std::size_t row, std::size_t slot) const { return indices[row * k + slot]; }
  double gate(std::size_t row, std::size_t slot) const { return gates[row * k + slot]; }
  /// Dense n x N_E gating tensor with zeros outside the selected entries.
  std::vector<double> dense() const;
};

/// Z = alpha * normalize(x) * normalize(P)^T, x: [n x D], P: [N_E x D].
template <typename T>
Var<T> prototype_scores(Var<T> x, Var<T> prototypes, T alpha);

template <typename T>
Var<T> activate(Var<T> z, ScoreActivation kind);

/// Per row, the K largest scores; ties go to the lowest expert index.
/// ConfigError unless 1 <= K <= N_E.
template <typename T>
GatingResult topk_gate(const Array<T>& scores, std::size_t k);

/// x[n x D] * w[D x N_E]
template <typename T>
Var<T> linear_router_scores(Var<T> x, Var<T> w);

template <typename T>
struct KMeansState {
  Array<T> centroids;  // N_E x D
  std::vector<std::size_t> counts;

  bool initialized() const { return !centroids.empty(); }
};

/// Centroids are N_E distinct token rows chosen with `rng`.
template <typename T>
KMeansState<T> kmeans_init(const Array<T>& tokens, std::size_t n_clusters, Rng& rng);
/// Squared Euclidean distances, n x N_E.
template <typename T>
Array<T> kmeans_distances(const Array<T>& tokens, const KMeansState<T>& state);
/// Nearest centroid per token, ties to the lowest index.
template <typename T>
std::vector<std::size_t> kmeans_assign(const Array<T>& tokens, const KMeansState<T>& state);
/// Replaces each centroid that received tokens with their mean; others stay put.
template <typename T>
KMeansState<T> kmeans_update(const Array<T>& tokens, const std::vector<std::size_t>& indices, KMeansState<T> state);
/// Total within-cluster squared distance.
template <typename T>
double kmeans_objective(const Array<T>& tokens, const std::vector<std::size_t>& indices, const KMeansState<T>& state);

template <typename T>
struct ClassifierRouting {
  Var<T> scores;                     // B x N_c
  std::vector<std::size_t> indices;  // B
};

/// Average-pools x[(B*L) x D] over each sample's L tokens, scores with w[D x N_c]
/// and routes every token of a sample to the argmax expert.
template <typename T>
ClassifierRouting<T> classifier_route(Var<T> x, std::size_t batch, std::size_t length, Var<T> w);

/// One layer's routing decisions, kept for metrics and exports.
struct RoutingLog {
  std::size_t layer = 0;
  TokenPartition partition;
  /// Flattened token id (b * L + l) of each routed row of `gating`.
  std::vector<std::size_t> token_ids;
  GatingResult gating;
};

}  // namespace promoe
