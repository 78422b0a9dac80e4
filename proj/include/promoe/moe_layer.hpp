#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promoe/experts.hpp"
#include "promoe/losses.hpp"
#include "promoe/router.hpp"

namespace promoe {

/// Which module occupies a block's FFN slot.
enum class LayerVariant { kDense, kProMoE, kTokenChoice, kKMeans, kClassifier };

LayerVariant parse_layer_variant(const std::string& s);
std::string to_string(LayerVariant v);

struct ProMoELayerConfig {
  std::size_t n_experts = 12;  // standard (routed) experts
  std::size_t top_k = 1;
  std::size_t n_shared = 1;
  std::size_t n_uncond = 1;
  ScoreActivation activation = ScoreActivation::kIdentity;
  double alpha = 1.0;
  RCLConfig rcl;
  /// Adds the importance x load auxiliary loss (ablation only).
  bool load_balance = false;
  double lb_weight = 0.01;

  /// Experts active per token, shared included; sets the segmentation factor.
  std::size_t n_act() const { return n_shared + top_k; }
  /// E{total}A{K}S{shared}U{uncond}
  std::string code() const;
  /// Parses the E/A/S/U code; the routed pool gets total - shared - uncond experts.
  static ProMoELayerConfig from_code(const std::string& code);
  void validate() const;
};

template <typename T>
struct LayerOutput {
  Var<T> output;
  Var<T> aux_loss;
  double rcl = 0.0;
  double lb = 0.0;
  double cls = 0.0;
  std::optional<RoutingLog> log;
};

/// Full ProMoE layer on flattened tokens x[(B*L) x D]:
/// unconditional tokens go through the unconditional experts, conditional
/// tokens through prototypical top-K routing, and every token through the
/// shared experts. aux_loss = lambda_RCL * RCL (+ LB when enabled) in training.
/// `fixed` replaces the top-K selection (gates are still read from S).
template <typename T>
LayerOutput<T> promoe_forward(Var<T> x, const TokenPartition& part, ExpertPool<T>& pool, Prototypes<T>& proto,
                              const ProMoELayerConfig& cfg, bool train, const GatingResult* fixed = nullptr);

template <typename T>
LayerOutput<T> promoe_forward(Var<T> x, std::span<const int> labels, int null_label, std::size_t length,
                              ExpertPool<T>& pool, Prototypes<T>& proto, const ProMoELayerConfig& cfg, bool train);

/// Token-choice baseline: softmax(x * W_r), top-K, gate-weighted experts plus
/// shared experts. Optional load-balance auxiliary loss.
template <typename T>
LayerOutput<T> tc_moe_forward(Var<T> x, ExpertPool<T>& pool, Parameter<T>& router_w, std::size_t k, bool train,
                              bool load_balance = false, double lb_weight = 0.01, const GatingResult* fixed = nullptr);

/// Sends row r of x to standard expert `assignment[r]` with unit gate.
template <typename T>
Var<T> dispatch_hard(Var<T> x, const std::vector<std::size_t>& assignment, ExpertPool<T>& pool);

/// Per-call inputs of an FFN slot beyond the token matrix.
struct LayerContext {
  const TokenPartition* partition = nullptr;
  std::span<const int> superclass;  // per sample; -1 for unlabeled
  bool train = false;
  std::size_t batch = 0;
  std::size_t length = 0;
};

/// The FFN position of one transformer block, whatever variant occupies it.
template <typename T>
class FeedForwardSlot {
 public:
  FeedForwardSlot(LayerVariant variant, const ProMoELayerConfig& cfg, std::size_t dim, std::size_t n_superclasses,
                  std::uint64_t seed, std::uint64_t init_key, const std::string& prefix);

  LayerOutput<T> forward(Var<T> x, const LayerContext& ctx);

  void for_each_parameter(const std::function<void(Parameter<T>&)>& fn);

  LayerVariant variant() const { return variant_; }
  const ProMoELayerConfig& config() const { return cfg_; }
  ExpertPool<T>& pool() { return pool_; }
  const ExpertPool<T>& pool() const { return pool_; }
  Prototypes<T>& prototypes() { return proto_; }
  Parameter<T>& router_weights() { return router_w_; }
  KMeansState<T>& kmeans() { return kmeans_; }

 private:
  LayerVariant variant_;
  ProMoELayerConfig cfg_;
  ExpertPool<T> pool_;
  Prototypes<T> proto_;
  Parameter<T> router_w_;
  KMeansState<T> kmeans_;
  std::uint64_t seed_;
  std::uint64_t init_key_;
};

}  // namespace promoe
