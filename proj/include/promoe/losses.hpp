#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "promoe/ops.hpp"

namespace promoe {

enum class Objective { kDDPM, kRF };

Objective parse_objective(const std::string& s);
std::string to_string(Objective o);

struct RCLConfig {
  double tau = 0.07;
  double lambda_rcl = 1.0;
  /// When set, centroids are computed from a detached copy of the tokens so
  /// the loss only moves prototypes.
  bool detach_centroids = true;
};

/// DDPM: eps. Rectified flow: eps - x0.
template <typename T>
Array<T> make_target(Objective kind, const Array<T>& x0, const Array<T>& eps);

/// Mean squared error over all elements.
template <typename T>
Var<T> diffusion_loss(Var<T> pred, Var<T> target);

/// Routing contrastive loss over the experts that received at least one token.
/// `indices` is row-major n_c x k. Returns an exact constant 0 when n_c == 0.
template <typename T>
Var<T> rcl_loss(Var<T> tokens, std::span<const std::size_t> indices, std::size_t k, Var<T> prototypes,
                const RCLConfig& cfg);

/// N_E * sum_e f_e * P_e with f_e the share of routing slots sent to e
/// (normalized by K) and P_e the mean softmax probability of e.
template <typename T>
Var<T> load_balance_loss(Var<T> logits, std::span<const std::size_t> indices, std::size_t k);

/// Mean cross-entropy of softmax(scores) against integer labels.
template <typename T>
Var<T> routing_cls_loss(Var<T> scores, std::span<const int> labels);

/// diff + lambda_rcl * rcl
template <typename T>
Var<T> total_loss(Var<T> diff, Var<T> rcl, const RCLConfig& cfg);

}  // namespace promoe
