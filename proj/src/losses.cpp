#include "promoe/losses.hpp"

#include <algorithm>

namespace promoe {

Objective parse_objective(const std::string& s) {
  if (s == "ddpm" || s == "DDPM") return Objective::kDDPM;
  if (s == "rf" || s == "RF") return Objective::kRF;
  throw ConfigError("unknown objective '" + s + "' (ddpm|rf)");
}

std::string to_string(Objective o) { return o == Objective::kDDPM ? "ddpm" : "rf"; }

template <typename T>
Array<T> make_target(Objective kind, const Array<T>& x0, const Array<T>& eps) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("make_target: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (kind == Objective::kDDPM) return eps;
  Array<T> y(eps.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = eps[i] - x0[i];
  return y;
}

template <typename T>
Var<T> diffusion_loss(Var<T> pred, Var<T> target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("diffusion_loss: pred " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  Var<T> d = sub(pred, target);
  return mean(mul(d, d));
}

template <typename T>
Var<T> rcl_loss(Var<T> tokens, std::span<const std::size_t> indices, std::size_t k, Var<T> prototypes,
                const RCLConfig& cfg) {
  if (cfg.tau <= 0.0) throw ConfigError("rcl_loss: tau must be positive");
  Tape<T>& tape = *tokens.tape;
  const std::size_t n = tokens.value().rank() == 2 ? tokens.dim(0) : 0;
  if (n == 0) return tape.constant(Array<T>::scalar(T{0}));
  if (indices.size() != n * k) throw ShapeError("rcl_loss: indices do not match n_c x K");
  const std::size_t n_experts = prototypes.dim(0);

  // Token membership per expert (a token counts once even if listed twice).
  std::vector<std::vector<std::size_t>> members(n_experts);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t e = indices[r * k + s];
      if (e >= n_experts) throw ContractError("rcl_loss: expert index out of range");
      if (members[e].empty() || members[e].back() != r) members[e].push_back(r);
    }
  std::vector<std::size_t> active;
  for (std::size_t e = 0; e < n_experts; ++e)
    if (!members[e].empty()) active.push_back(e);
  const std::size_t na = active.size();

  Array<T> avg({na, n});
  for (std::size_t a = 0; a < na; ++a) {
    const T w = T{1} / static_cast<T>(members[active[a]].size());
    for (auto r : members[active[a]]) avg.at(a, r) = w;
  }
  Var<T> x = cfg.detach_centroids ? tape.constant(tokens.value()) : tokens;
  Var<T> centroids = matmul(tape.constant(std::move(avg)), x);
  Var<T> protos = index_rows(prototypes, active);
  Var<T> sim = scale(matmul_nt(l2_normalize(protos, 1), l2_normalize(centroids, 1)), static_cast<T>(1.0 / cfg.tau));
  std::vector<std::size_t> diag(na);
  for (std::size_t a = 0; a < na; ++a) diag[a] = a;
  return scale(mean(pick(log_softmax(sim, 1), diag, diag)), T{-1});
}

template <typename T>
Var<T> load_balance_loss(Var<T> logits, std::span<const std::size_t> indices, std::size_t k) {
  Tape<T>& tape = *logits.tape;
  const std::size_t n = logits.dim(0), ne = logits.dim(1);
  if (n == 0) return tape.constant(Array<T>::scalar(T{0}));
  if (indices.size() != n * k) throw ShapeError("load_balance_loss: indices do not match n x K");
  Array<T> frac({ne});
  for (auto e : indices) frac[e] += T{1} / static_cast<T>(n * k);
  Array<T> row_mean({1, n}, T{1} / static_cast<T>(n));
  Var<T> p_mean = matmul(tape.constant(std::move(row_mean)), softmax(logits, 1));
  return scale(sum(mul(p_mean, tape.constant(std::move(frac)))), static_cast<T>(ne));
}

template <typename T>
Var<T> routing_cls_loss(Var<T> scores, std::span<const int> labels) {
  const std::size_t b = scores.dim(0), nc = scores.dim(1);
  if (labels.size() != b) throw ShapeError("routing_cls_loss: label count does not match scores");
  if (b == 0) return scores.tape->constant(Array<T>::scalar(T{0}));
  std::vector<std::size_t> rows(b), cols(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= nc) {
      throw ContractError("routing_cls_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(nc) + ")");
    }
    rows[i] = i;
    cols[i] = static_cast<std::size_t>(labels[i]);
  }
  return scale(mean(pick(log_softmax(scores, 1), rows, cols)), T{-1});
}

template <typename T>
Var<T> total_loss(Var<T> diff, Var<T> rcl, const RCLConfig& cfg) {
  if (cfg.lambda_rcl == 0.0) return diff;
  return add(diff, scale(rcl, static_cast<T>(cfg.lambda_rcl)));
}

#define PROMOE_INSTANTIATE(T)                                                                                   \
  template Array<T> make_target<T>(Objective, const Array<T>&, const Array<T>&);                                \
  template Var<T> diffusion_loss<T>(Var<T>, Var<T>);                                                            \
  template Var<T> rcl_loss<T>(Var<T>, std::span<const std::size_t>, std::size_t, Var<T>, const RCLConfig&);     \
  template Var<T> load_balance_loss<T>(Var<T>, std::span<const std::size_t>, std::size_t);                      \
  template Var<T> routing_cls_loss<T>(Var<T>, std::span<const int>);                                            \
  template Var<T> total_loss<T>(Var<T>, Var<T>, const RCLConfig&);
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe
