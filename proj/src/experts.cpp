#include "promoe/experts.hpp"

#include <cmath>

namespace promoe {

namespace {

template <typename T>
Array<T> uniform_fan_in(Shape shape, std::size_t fan_in, Rng& rng) {
  Array<T> a(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : a.vec()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  return a;
}

}  // namespace

template <typename T>
ExpertFFN<T> make_expert(const std::string& name, std::size_t dim, std::size_t inner, Rng& rng, FfnActivation act) {
  ExpertFFN<T> e;
  e.w1 = Parameter<T>(name + ".w1", uniform_fan_in<T>({dim, inner}, dim, rng));
  e.b1 = Parameter<T>(name + ".b1", Array<T>({inner}));
  e.w2 = Parameter<T>(name + ".w2", uniform_fan_in<T>({inner, dim}, inner, rng));
  e.b2 = Parameter<T>(name + ".b2", Array<T>({dim}));
  e.activation = act;
  return e;
}

template <typename T>
Var<T> expert_forward(ExpertFFN<T>& e, Var<T> x) {
  if (x.value().rank() != 2 || x.dim(1) != e.dim()) {
    throw ShapeError("expert_forward: input " + shape_str(x.shape()) + " for expert of width " +
                     std::to_string(e.dim()));
  }
  Tape<T>& tape = *x.tape;
  Var<T> h = add(matmul(x, tape.leaf(e.w1)), tape.leaf(e.b1));
  if (e.activation == FfnActivation::kGelu) h = gelu(h);
  return add(matmul(h, tape.leaf(e.w2)), tape.leaf(e.b2));
}

template <typename T>
std::size_t ExpertPool<T>::dim() const {
  for (const auto* group : {&standard, &shared, &unconditional})
    if (!group->empty()) return group->front().dim();
  return 0;
}

template <typename T>
std::size_t ExpertPool<T>::inner() const {
  for (const auto* group : {&standard, &shared, &unconditional})
    if (!group->empty()) return group->front().inner();
  return 0;
}

template <typename T>
void ExpertPool<T>::for_each_parameter(const std::function<void(Parameter<T>&)>& fn) {
  for (auto* group : {&standard, &shared, &unconditional})
    for (auto& e : *group) e.for_each_parameter(fn);
}

std::size_t segmented_inner(std::size_t dim, std::size_t n_act) {
  if (n_act == 0) throw ConfigError("segmented pool: n_act must be >= 1");
  if ((4 * dim) % n_act != 0) {
    throw ConfigError("segmented pool: 4*D = " + std::to_string(4 * dim) + " is not divisible by n_act = " +
                      std::to_string(n_act));
  }
  return 4 * dim / n_act;
}

template <typename T>
ExpertPool<T> make_segmented_pool(std::size_t dim, std::size_t n_experts, std::size_t n_shared, std::size_t n_uncond,
                                  std::size_t n_act, std::uint64_t seed, std::uint64_t init_key,
                                  const std::string& prefix) {
  const std::size_t inner = segmented_inner(dim, n_act);
  ExpertPool<T> pool;
  auto build = [&](std::vector<ExpertFFN<T>>& group, std::size_t count, std::uint64_t slot0, const char* tag) {
    group.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      Rng rng(seed, Stream::kInit, init_key + slot0 + i);
      group.push_back(make_expert<T>(prefix + tag + std::to_string(i), dim, inner, rng));
    }
  };
  build(pool.standard, n_experts, 0, "standard.");
  build(pool.shared, n_shared, 1000, "shared.");
  build(pool.unconditional, n_uncond, 2000, "uncond.");
  return pool;
}

std::size_t dense_weight_params(std::size_t dim) { return 2 * dim * (4 * dim); }

std::size_t activated_weight_params(std::size_t dim, std::size_t n_shared, std::size_t top_k, std::size_t n_act) {
  return (n_shared + top_k) * 2 * dim * segmented_inner(dim, n_act);
}

template <typename T>
std::size_t activated_weight_params(const ExpertPool<T>& pool, std::size_t top_k) {
  std::size_t n = 0;
  for (const auto& e : pool.shared) n += e.weight_params();
  for (std::size_t k = 0; k < top_k && k < pool.standard.size(); ++k) n += pool.standard[k].weight_params();
  return n;
}

template <typename T>
std::size_t total_params(const ExpertPool<T>& pool) {
  std::size_t n = 0;
  for (const auto* group : {&pool.standard, &pool.shared, &pool.unconditional})
    for (const auto& e : *group) n += e.param_count();
  return n;
}

#define PROMOE_INSTANTIATE(T)                                                                                  \
  template struct ExpertPool<T>;                                                                               \
  template ExpertFFN<T> make_expert<T>(const std::string&, std::size_t, std::size_t, Rng&, FfnActivation);    \
  template Var<T> expert_forward<T>(ExpertFFN<T>&, Var<T>);                                                    \
  template ExpertPool<T> make_segmented_pool<T>(std::size_t, std::size_t, std::size_t, std::size_t,            \
                                                std::size_t, std::uint64_t, std::uint64_t, const std::string&); \
  template std::size_t activated_weight_params<T>(const ExpertPool<T>&, std::size_t);                          \
  template std::size_t total_params<T>(const ExpertPool<T>&);
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe
