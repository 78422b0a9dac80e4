#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "promoe/ops.hpp"
#include "promoe/rng.hpp"

namespace promoe {

enum class FfnActivation { kGelu, kIdentity };

/// Two-layer feed-forward expert: w2 * act(w1 * x + b1) + b2, applied row-wise.
template <typename T>
struct ExpertFFN {
  Parameter<T> w1;  // D x d_inner
  Parameter<T> b1;  // d_inner
  Parameter<T> w2;  // d_inner x D
  Parameter<T> b2;  // D
  FfnActivation activation = FfnActivation::kGelu;

  std::size_t dim() const { return w1.value.dim(0); }
  std::size_t inner() const { return w1.value.dim(1); }
  std::size_t weight_params() const { return 2 * dim() * inner(); }
  std::size_t param_count() const { return weight_params() + inner() + dim(); }

  void for_each_parameter(const std::function<void(Parameter<T>&)>& fn) {
    fn(w1);
    fn(b1);
    fn(w2);
    fn(b2);
  }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
template <typename T>
ExpertFFN<T> make_expert(const std::string& name, std::size_t dim, std::size_t inner, Rng& rng,
                         FfnActivation act = FfnActivation::kGelu);

/// Applies `e` to x[n x D]. Throws ShapeError when x is not [n x D].
template <typename T>
Var<T> expert_forward(ExpertFFN<T>& e, Var<T> x);

template <typename T>
struct ExpertPool {
  std::vector<ExpertFFN<T>> standard;
  std::vector<ExpertFFN<T>> shared;
  std::vector<ExpertFFN<T>> unconditional;

  std::size_t dim() const;
  std::size_t inner() const;
  void for_each_parameter(const std::function<void(Parameter<T>&)>& fn);
};

/// Pool whose experts all use inner dimension 4D / n_act, so that n_act
/// activated experts together match one dense FFN of inner dimension 4D.
/// Each expert draws from its own init stream: (seed, kInit, init_key + slot).
template <typename T>
ExpertPool<T> make_segmented_pool(std::size_t dim, std::size_t n_experts, std::size_t n_shared,
                                  std::size_t n_uncond, std::size_t n_act, std::uint64_t seed,
                                  std::uint64_t init_key = 0, const std::string& prefix = "");

/// Inner dimension under fine-grained segmentation; ConfigError when 4D is not
/// divisible by n_act or n_act == 0.
std::size_t segmented_inner(std::size_t dim, std::size_t n_act);

/// Weight-matrix parameters of the dense baseline FFN (inner dimension 4D).
std::size_t dense_weight_params(std::size_t dim);

/// Weight-matrix parameters touched by one conditional token: all shared
/// experts plus K routed standard experts.
template <typename T>
std::size_t activated_weight_params(const ExpertPool<T>& pool, std::size_t top_k);

/// Same count from sizes alone (no allocation).
std::size_t activated_weight_params(std::size_t dim, std::size_t n_shared, std::size_t top_k, std::size_t n_act);

template <typename T>
std::size_t total_params(const ExpertPool<T>& pool);

}  // namespace promoe
