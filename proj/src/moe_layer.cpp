#include "promoe/moe_layer.hpp"

#include <regex>

namespace promoe {

LayerVariant parse_layer_variant(const std::string& s) {
  if (s == "dense") return LayerVariant::kDense;
  if (s == "promoe") return LayerVariant::kProMoE;
  if (s == "tc_moe") return LayerVariant::kTokenChoice;
  if (s == "kmeans_router") return LayerVariant::kKMeans;
  if (s == "cls_router") return LayerVariant::kClassifier;
  throw ConfigError("unknown variant '" + s + "' (promoe|dense|tc_moe|kmeans_router|cls_router)");
}

std::string to_string(LayerVariant v) {
  switch (v) {
    case LayerVariant::kDense: return "dense";
    case LayerVariant::kProMoE: return "promoe";
    case LayerVariant::kTokenChoice: return "tc_moe";
    case LayerVariant::kKMeans: return "kmeans_router";
    case LayerVariant::kClassifier: return "cls_router";
  }
  return "promoe";
}

std::string ProMoELayerConfig::code() const {
  return "E" + std::to_string(n_experts + n_shared + n_uncond) + "A" + std::to_string(top_k) + "S" +
         std::to_string(n_shared) + "U" + std::to_string(n_uncond);
}

ProMoELayerConfig ProMoELayerConfig::from_code(const std::string& code) {
  static const std::regex re(R"(E(\d+)A(\d+)S(\d+)[UN](\d+))");
  std::smatch m;
  if (!std::regex_match(code, m, re)) throw ConfigError("bad expert code '" + code + "' (want E#A#S#U#)");
  const auto total = std::stoul(m[1]);
  ProMoELayerConfig cfg;
  cfg.top_k = std::stoul(m[2]);
  cfg.n_shared = std::stoul(m[3]);
  cfg.n_uncond = std::stoul(m[4]);
  if (total < cfg.n_shared + cfg.n_uncond + 1) throw ConfigError("expert code '" + code + "' leaves no routed experts");
  cfg.n_experts = total - cfg.n_shared - cfg.n_uncond;
  cfg.validate();
  return cfg;
}

void ProMoELayerConfig::validate() const {
  if (n_experts == 0) throw ConfigError("layer config: need at least one standard expert");
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("layer config: K = " + std::to_string(top_k) + " must lie in [1, N_E = " +
                      std::to_string(n_experts) + "]");
  }
  if (alpha <= 0.0) throw ConfigError("layer config: alpha must be positive");
  if (rcl.tau <= 0.0) throw ConfigError("layer config: tau must be positive");
}

namespace {

template <typename T>
void check_pool(const ExpertPool<T>& pool, std::size_t dim, std::size_t n_standard, const char* who) {
  if (pool.standard.size() < n_standard) {
    throw ConfigError(std::string(who) + ": pool has " + std::to_string(pool.standard.size()) +
                      " standard experts, config needs " + std::to_string(n_standard));
  }
  if (pool.dim() != dim) {
    throw ConfigError(std::string(who) + ": pool width " + std::to_string(pool.dim()) + " vs token width " +
                      std::to_string(dim));
  }
}

// Gate-weighted sum over the experts each row was routed to.
template <typename T>
Var<T> dispatch_gated(Var<T> x, Var<T> scores, const GatingResult& gating, std::vector<ExpertFFN<T>>& experts) {
  Tape<T>& tape = *x.tape;
  const std::size_t n = x.dim(0), d = x.dim(1);
  Var<T> out = tape.constant(Array<T>({n, d}));
  for (std::size_t e = 0; e < experts.size(); ++e) {
    Mask routed(n, 0);
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t s = 0; s < gating.k; ++s)
        if (gating.index(r, s) == e) {
          routed[r] = 1;
          rows.push_back(r);
          break;
        }
    if (rows.empty()) continue;
    Var<T> gate = pick(scores, rows, std::vector<std::size_t>(rows.size(), e));
    Var<T> y = scale_rows(expert_forward(experts[e], gather_rows(x, routed)), gate);
    out = scatter_rows(out, routed, add(gather_rows(out, routed), y));
  }
  return out;
}

template <typename T>
Var<T> add_shared(Var<T> out, Var<T> x, ExpertPool<T>& pool) {
  for (auto& e : pool.shared) out = add(out, expert_forward(e, x));
  return out;
}

template <typename T>
Var<T> zero_scalar(Tape<T>& tape) {
  return tape.constant(Array<T>::scalar(T{0}));
}

}  // namespace

template <typename T>
LayerOutput<T> promoe_forward(Var<T> x, const TokenPartition& part, ExpertPool<T>& pool, Prototypes<T>& proto,
                              const ProMoELayerConfig& cfg, bool train, const GatingResult* fixed) {
  Tape<T>& tape = *x.tape;
  if (x.value().rank() != 2 || x.dim(0) != part.mask_cond.size()) {
    throw ShapeError("promoe_forward: tokens " + shape_str(x.shape()) + " vs partition over " +
                     std::to_string(part.mask_cond.size()) + " tokens");
  }
  const std::size_t d = x.dim(1);
  check_pool(pool, d, cfg.n_experts, "promoe_forward");
  if (proto.count() != cfg.n_experts || proto.dim() != d) throw ConfigError("promoe_forward: prototype shape mismatch");

  LayerOutput<T> res;
  Var<T> out = tape.constant(Array<T>(x.shape()));
  Var<T> aux = zero_scalar(tape);

  // Unconditional tokens: sum of unconditional experts.
  const std::size_t n_u = part.n_uncond();
  if (n_u > 0 && !pool.unconditional.empty()) {
    Var<T> xu = gather_rows(x, part.mask_uncond);
    Var<T> ou = expert_forward(pool.unconditional[0], xu);
    for (std::size_t k = 1; k < pool.unconditional.size(); ++k) ou = add(ou, expert_forward(pool.unconditional[k], xu));
    out = scatter_rows(out, part.mask_uncond, ou);
  }

  // Conditional tokens: prototypical routing.
  RoutingLog log;
  log.partition = part;
  const std::size_t n_c = part.n_cond();
  if (n_c > 0) {
    Var<T> xc = gather_rows(x, part.mask_cond);
    Var<T> protos = tape.leaf(proto.p);
    Var<T> scores = activate(prototype_scores(xc, protos, static_cast<T>(cfg.alpha)), cfg.activation);
    GatingResult gating = fixed ? *fixed : topk_gate(scores.value(), cfg.top_k);
    if (gating.n != n_c || gating.k != cfg.top_k) throw ConfigError("promoe_forward: fixed routing has wrong shape");
    Var<T> oc = dispatch_gated(xc, scores, gating, pool.standard);
    out = scatter_rows(out, part.mask_cond, oc);
    if (train) {
      Var<T> rcl = rcl_loss(xc, gating.indices, gating.k, protos, cfg.rcl);
      res.rcl = static_cast<double>(rcl.value()[0]);
      if (cfg.rcl.lambda_rcl != 0.0) aux = add(aux, scale(rcl, static_cast<T>(cfg.rcl.lambda_rcl)));
      if (cfg.load_balance) {
        Var<T> lb = load_balance_loss(scores, gating.indices, gating.k);
        res.lb = static_cast<double>(lb.value()[0]);
        aux = add(aux, scale(lb, static_cast<T>(cfg.lb_weight)));
      }
    }
    for (std::size_t i = 0; i < part.mask_cond.size(); ++i)
      if (part.mask_cond[i]) log.token_ids.push_back(i);
    log.gating = std::move(gating);
  }

  res.output = add_shared(out, x, pool);
  res.aux_loss = aux;
  res.log = std::move(log);
  return res;
}

template <typename T>
LayerOutput<T> promoe_forward(Var<T> x, std::span<const int> labels, int null_label, std::size_t length,
                              ExpertPool<T>& pool, Prototypes<T>& proto, const ProMoELayerConfig& cfg, bool train) {
  const TokenPartition part = partition_by_condition(labels, null_label, length);
  return promoe_forward(x, part, pool, proto, cfg, train);
}

template <typename T>
LayerOutput<T> tc_moe_forward(Var<T> x, ExpertPool<T>& pool, Parameter<T>& router_w, std::size_t k, bool train,
                              bool load_balance, double lb_weight, const GatingResult* fixed) {
  Tape<T>& tape = *x.tape;
  if (x.value().rank() != 2) throw ShapeError("tc_moe_forward: expected [n x D] tokens");
  const std::size_t n = x.dim(0);
  check_pool(pool, x.dim(1), router_w.value.dim(1), "tc_moe_forward");

  LayerOutput<T> res;
  Var<T> aux = zero_scalar(tape);
  Var<T> out = tape.constant(Array<T>(x.shape()));
  RoutingLog log;
  log.partition = partition_by_condition(std::vector<int>(n, 0), -1, 1);
  if (n > 0) {
    Var<T> logits = linear_router_scores(x, tape.leaf(router_w));
    Var<T> probs = softmax(logits, 1);
    GatingResult gating = fixed ? *fixed : topk_gate(probs.value(), k);
    out = dispatch_gated(x, probs, gating, pool.standard);
    if (train && load_balance) {
      Var<T> lb = load_balance_loss(logits, gating.indices, gating.k);
      res.lb = static_cast<double>(lb.value()[0]);
      aux = add(aux, scale(lb, static_cast<T>(lb_weight)));
    }
    for (std::size_t i = 0; i < n; ++i) log.token_ids.push_back(i);
    log.gating = std::move(gating);
  }
  res.output = add_shared(out, x, pool);
  res.aux_loss = aux;
  res.log = std::move(log);
  return res;
}

template <typename T>
Var<T> dispatch_hard(Var<T> x, const std::vector<std::size_t>& assignment, ExpertPool<T>& pool) {
  Tape<T>& tape = *x.tape;
  const std::size_t n = x.dim(0);
  if (assignment.size() != n) throw ShapeError("dispatch_hard: one expert id per row required");
  Var<T> out = tape.constant(Array<T>(x.shape()));
  for (std::size_t e = 0; e < pool.standard.size(); ++e) {
    Mask routed(n, 0);
    bool any = false;
    for (std::size_t r = 0; r < n; ++r)
      if (assignment[r] == e) {
        routed[r] = 1;
        any = true;
      }
    if (!any) continue;
    out = scatter_rows(out, routed, expert_forward(pool.standard[e], gather_rows(x, routed)));
  }
  return out;
}

namespace {

GatingResult unit_gating(const std::vector<std::size_t>& assignment, std::size_t n_experts) {
  GatingResult g;
  g.n = assignment.size();
  g.k = 1;
  g.n_experts = n_experts;
  g.indices = assignment;
  g.gates.assign(assignment.size(), 1.0);
  return g;
}

}  // namespace

template <typename T>
FeedForwardSlot<T>::FeedForwardSlot(LayerVariant variant, const ProMoELayerConfig& cfg, std::size_t dim,
                                    std::size_t n_superclasses, std::uint64_t seed, std::uint64_t init_key,
                                    const std::string& prefix)
    : variant_(variant), cfg_(cfg), seed_(seed), init_key_(init_key) {
  switch (variant) {
    case LayerVariant::kDense:
      pool_ = make_segmented_pool<T>(dim, 0, 1, 0, 1, seed, init_key, prefix + "dense.");
      break;
    case LayerVariant::kProMoE:
      cfg_.validate();
      pool_ = make_segmented_pool<T>(dim, cfg.n_experts, cfg.n_shared, cfg.n_uncond, cfg.n_act(), seed, init_key,
                                     prefix);
      proto_ = make_prototypes<T>(cfg.n_experts, dim, static_cast<T>(cfg.alpha), seed, init_key + 3000,
                                  prefix + "prototypes");
      break;
    case LayerVariant::kTokenChoice: {
      cfg_.validate();
      pool_ = make_segmented_pool<T>(dim, cfg.n_experts, cfg.n_shared, 0, cfg.n_act(), seed, init_key, prefix);
      Rng rng(seed, Stream::kInit, init_key + 3000);
      Array<T> w({dim, cfg.n_experts});
      for (auto& v : w.vec()) v = static_cast<T>(0.02 * rng.normal());
      router_w_ = Parameter<T>(prefix + "router.w", std::move(w));
      break;
    }
    case LayerVariant::kKMeans:
      cfg_.validate();
      cfg_.top_k = 1;
      pool_ = make_segmented_pool<T>(dim, cfg.n_experts, cfg.n_shared, 0, cfg.n_shared + 1, seed, init_key, prefix);
      break;
    case LayerVariant::kClassifier: {
      if (n_superclasses == 0) throw ConfigError("cls_router: need at least one superclass");
      cfg_.n_experts = n_superclasses;
      cfg_.top_k = 1;
      pool_ = make_segmented_pool<T>(dim, n_superclasses, cfg.n_shared, 0, cfg.n_shared + 1, seed, init_key, prefix);
      Rng rng(seed, Stream::kInit, init_key + 3000);
      Array<T> w({dim, n_superclasses});
      for (auto& v : w.vec()) v = static_cast<T>(0.02 * rng.normal());
      router_w_ = Parameter<T>(prefix + "classifier.w", std::move(w));
      break;
    }
  }
}

template <typename T>
LayerOutput<T> FeedForwardSlot<T>::forward(Var<T> x, const LayerContext& ctx) {
  Tape<T>& tape = *x.tape;
  switch (variant_) {
    case LayerVariant::kDense: {
      LayerOutput<T> res;
      res.output = expert_forward(pool_.shared[0], x);
      res.aux_loss = zero_scalar(tape);
      return res;
    }
    case LayerVariant::kProMoE:
      if (ctx.partition == nullptr) throw ContractError("promoe slot: token partition required");
      return promoe_forward(x, *ctx.partition, pool_, proto_, cfg_, ctx.train);
    case LayerVariant::kTokenChoice:
      return tc_moe_forward(x, pool_, router_w_, cfg_.top_k, ctx.train, cfg_.load_balance, cfg_.lb_weight);
    case LayerVariant::kKMeans: {
      const Array<T> tokens = x.value();
      if (!kmeans_.initialized()) {
        Rng rng(seed_, Stream::kKMeans, init_key_);
        kmeans_ = kmeans_init(tokens, cfg_.n_experts, rng);
      }
      const auto assignment = kmeans_assign(tokens, kmeans_);
      LayerOutput<T> res;
      res.output = add_shared(dispatch_hard(x, assignment, pool_), x, pool_);
      res.aux_loss = zero_scalar(tape);
      RoutingLog log;
      log.partition = partition_by_condition(std::vector<int>(x.dim(0), 0), -1, 1);
      for (std::size_t i = 0; i < x.dim(0); ++i) log.token_ids.push_back(i);
      log.gating = unit_gating(assignment, cfg_.n_experts);
      res.log = std::move(log);
      if (ctx.train) kmeans_ = kmeans_update(tokens, assignment, std::move(kmeans_));
      return res;
    }
    case LayerVariant::kClassifier: {
      auto routing = classifier_route(x, ctx.batch, ctx.length, tape.leaf(router_w_));
      std::vector<std::size_t> assignment(x.dim(0));
      for (std::size_t b = 0; b < ctx.batch; ++b)
        for (std::size_t l = 0; l < ctx.length; ++l) assignment[b * ctx.length + l] = routing.indices[b];
      LayerOutput<T> res;
      res.output = add_shared(dispatch_hard(x, assignment, pool_), x, pool_);
      res.aux_loss = zero_scalar(tape);
      if (ctx.train && !ctx.superclass.empty()) {
        std::vector<std::size_t> rows;
        std::vector<int> labels;
        for (std::size_t b = 0; b < ctx.batch; ++b)
          if (ctx.superclass[b] >= 0) {
            rows.push_back(b);
            labels.push_back(ctx.superclass[b]);
          }
        if (!rows.empty()) {
          Var<T> ce = routing_cls_loss(index_rows(routing.scores, rows), std::span<const int>(labels));
          res.cls = static_cast<double>(ce.value()[0]);
          res.aux_loss = ce;
        }
      }
      RoutingLog log;
      log.partition = partition_by_condition(std::vector<int>(x.dim(0), 0), -1, 1);
      for (std::size_t i = 0; i < x.dim(0); ++i) log.token_ids.push_back(i);
      log.gating = unit_gating(assignment, cfg_.n_experts);
      res.log = std::move(log);
      return res;
    }
  }
  throw ContractError("unreachable layer variant");
}

template <typename T>
void FeedForwardSlot<T>::for_each_parameter(const std::function<void(Parameter<T>&)>& fn) {
  pool_.for_each_parameter(fn);
  if (variant_ == LayerVariant::kProMoE) fn(proto_.p);
  if (variant_ == LayerVariant::kTokenChoice || variant_ == LayerVariant::kClassifier) fn(router_w_);
}

#define PROMOE_INSTANTIATE(T)                                                                                     \
  template LayerOutput<T> promoe_forward<T>(Var<T>, const TokenPartition&, ExpertPool<T>&, Prototypes<T>&,          \
                                            const ProMoELayerConfig&, bool, const GatingResult*);                  \
  template LayerOutput<T> promoe_forward<T>(Var<T>, std::span<const int>, int, std::size_t, ExpertPool<T>&,         \
                                            Prototypes<T>&, const ProMoELayerConfig&, bool);                       \
  template LayerOutput<T> tc_moe_forward<T>(Var<T>, ExpertPool<T>&, Parameter<T>&, std::size_t, bool, bool, double, \
                                            const GatingResult*);                                                  \
  template Var<T> dispatch_hard<T>(Var<T>, const std::vector<std::size_t>&, ExpertPool<T>&);                       \
  template class FeedForwardSlot<T>;
PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)
#undef PROMOE_INSTANTIATE

}  // namespace promoe
