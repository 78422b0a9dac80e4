#include "promoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "promoe/backbone.hpp"
#include "promoe/losses.hpp"
#include "promoe/moe_layer.hpp"
#include "promoe/ops.hpp"
#include "promoe/rng.hpp"

namespace promoe {

namespace {

double norm_rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  const double den = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / den;
}

Array<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  Array<double> a(std::move(s));
  for (auto& v : a.vec()) v = scale * rng.normal();
  return a;
}

Array<double> rand_positive(Shape s, Rng& rng) {
  Array<double> a(std::move(s));
  for (auto& v : a.vec()) v = 0.5 + rng.uniform();
  return a;
}

// Fixed random projection so that every output coordinate influences the loss.
Var<double> project(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  Rng rng(seed, Stream::kTest, 777);
  return sum(mul(y, tape.constant(randn(y.shape(), rng))));
}

}  // namespace

GradcheckResult check_gradients(const std::string& name, const std::vector<Array<double>>& inputs,
                                const LossBuilder& loss, double tol, double h) {
  std::vector<Array<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& a : inputs) vars.push_back(tape.variable(a));
    Var<double> l = loss(tape, vars);
    tape.backward(l);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&](const std::vector<Array<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& a : xs) vars.push_back(tape.constant(a));
    return loss(tape, vars).value()[0];
  };

  GradcheckResult res{name, 0.0, 0, tol};
  std::vector<Array<double>> xs = inputs;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    std::vector<double> numeric(xs[t].size());
    for (std::size_t i = 0; i < xs[t].size(); ++i) {
      const double orig = xs[t][i];
      xs[t][i] = orig + h;
      const double up = eval(xs);
      xs[t][i] = orig - h;
      const double down = eval(xs);
      xs[t][i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    res.coordinates += numeric.size();
    res.max_rel_error = std::max(res.max_rel_error, norm_rel_error(analytic[t].vec(), numeric));
  }
  return res;
}

GradcheckResult check_parameter_gradients(const std::string& name, const std::vector<Parameter<double>*>& params,
                                          const std::function<Var<double>(Tape<double>&)>& loss, double tol,
                                          double h) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  std::vector<Array<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  auto eval = [&] {
    Tape<double> tape;
    return loss(tape).value()[0];
  };

  GradcheckResult res{name, 0.0, 0, tol};
  for (std::size_t t = 0; t < params.size(); ++t) {
    Array<double>& w = params[t]->value;
    std::vector<double> numeric(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = eval();
      w[i] = orig - h;
      const double down = eval();
      w[i] = orig;
      numeric[i] = (up - down) / (2.0 * h);
    }
    res.coordinates += numeric.size();
    res.max_rel_error = std::max(res.max_rel_error, norm_rel_error(analytic[t].vec(), numeric));
  }
  for (auto* p : params) p->zero_grad();
  return res;
}

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, const std::string& scope) {
  Rng rng(seed, Stream::kTest, 1);
  std::vector<GradcheckResult> out;
  auto op = [&](const std::string& name, std::vector<Array<double>> inputs, const LossBuilder& fn) {
    out.push_back(check_gradients(name, inputs, fn));
  };
  const std::uint64_t ps = seed;

  op("matmul", {randn({3, 4}, rng), randn({4, 5}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, matmul(v[0], v[1]), ps); });
  op("matmul_nt", {randn({3, 4}, rng), randn({5, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, matmul_nt(v[0], v[1]), ps); });
  op("bmm", {randn({2, 3, 4}, rng), randn({2, 4, 2}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, bmm(v[0], v[1]), ps); });
  op("bmm_transposed", {randn({2, 3, 4}, rng), randn({2, 5, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, bmm(v[0], v[1], true), ps); });
  op("transpose", {randn({3, 4}, rng)}, [&](Tape<double>& t, const auto& v) { return project(t, transpose(v[0]), ps); });
  op("reshape", {randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, reshape(v[0], {2, 6}), ps); });
  op("reindex", {randn({2, 3}, rng)}, [&](Tape<double>& t, const auto& v) {
    return project(t, reindex(v[0], {4}, std::vector<std::size_t>{5, 0, 0, 3}), ps);
  });
  op("add", {randn({3, 4}, rng), randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, add(v[0], v[1]), ps); });
  op("add_broadcast_row", {randn({3, 4}, rng), randn({4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, add(v[0], v[1]), ps); });
  op("add_scalar", {randn({3, 4}, rng), randn({}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, add(v[0], v[1]), ps); });
  op("sub", {randn({3, 4}, rng), randn({4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, sub(v[0], v[1]), ps); });
  op("mul", {randn({3, 4}, rng), randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, mul(v[0], v[1]), ps); });
  op("mul_broadcast_row", {randn({3, 4}, rng), randn({4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, mul(v[0], v[1]), ps); });
  op("scale", {randn({3, 4}, rng)}, [&](Tape<double>& t, const auto& v) { return project(t, scale(v[0], 2.5), ps); });
  op("sum", {randn({3, 4}, rng)}, [&](Tape<double>&, const auto& v) { return sum(v[0]); });
  op("mean", {randn({3, 4}, rng)}, [&](Tape<double>&, const auto& v) { return mul(mean(v[0]), mean(v[0])); });
  op("exp", {randn({3, 4}, rng, 0.5)}, [&](Tape<double>& t, const auto& v) { return project(t, exp(v[0]), ps); });
  op("log", {rand_positive({3, 4}, rng)}, [&](Tape<double>& t, const auto& v) { return project(t, log(v[0]), ps); });
  op("sigmoid", {randn({3, 4}, rng)}, [&](Tape<double>& t, const auto& v) { return project(t, sigmoid(v[0]), ps); });
  op("gelu", {randn({3, 4}, rng, 2.0)}, [&](Tape<double>& t, const auto& v) { return project(t, gelu(v[0]), ps); });
  op("softmax_axis1", {randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, softmax(v[0], 1), ps); });
  op("softmax_axis0", {randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, softmax(v[0], 0), ps); });
  op("log_softmax", {randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, log_softmax(v[0], 1), ps); });
  op("layer_norm", {randn({3, 6}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, layer_norm(v[0], 1), ps); });
  op("l2_normalize", {randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, l2_normalize(v[0], 1), ps); });
  const Mask mask{1, 0, 1, 1, 0};
  op("gather_rows", {randn({5, 3}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, gather_rows(v[0], mask), ps); });
  op("scatter_rows", {randn({5, 3}, rng), randn({3, 3}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, scatter_rows(v[0], mask, v[1]), ps); });
  op("index_rows", {randn({4, 3}, rng)}, [&](Tape<double>& t, const auto& v) {
    return project(t, index_rows(v[0], std::vector<std::size_t>{3, 0, 3, 1, 2}), ps);
  });
  op("pick", {randn({4, 3}, rng)}, [&](Tape<double>& t, const auto& v) {
    return project(t, pick(v[0], std::vector<std::size_t>{0, 2, 3}, std::vector<std::size_t>{1, 1, 0}), ps);
  });
  op("scale_rows", {randn({4, 3}, rng), randn({4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, scale_rows(v[0], v[1]), ps); });

  // Losses.
  op("diffusion_loss", {randn({2, 1, 3, 3}, rng), randn({2, 1, 3, 3}, rng)},
     [&](Tape<double>&, const auto& v) { return diffusion_loss(v[0], v[1]); });
  {
    const std::vector<std::size_t> idx{0, 2, 2, 1, 0, 2};  // n=6, K=1, three active experts
    RCLConfig cfg;
    cfg.detach_centroids = false;
    op("rcl_loss", {randn({6, 4}, rng), randn({4, 4}, rng)},
       [=](Tape<double>&, const auto& v) { return rcl_loss(v[0], idx, 1, v[1], cfg); });
    const std::vector<std::size_t> idx2{0, 1, 2, 3, 1, 0, 3, 2};  // n=4, K=2
    op("rcl_loss_top2", {randn({4, 4}, rng), randn({5, 4}, rng)},
       [=](Tape<double>&, const auto& v) { return rcl_loss(v[0], idx2, 2, v[1], cfg); });
    RCLConfig detached;
    const Array<double> tokens = randn({6, 4}, rng);
    op("rcl_loss_detached", {randn({4, 4}, rng)}, [=](Tape<double>& t, const auto& v) {
      return rcl_loss(t.constant(tokens), idx, 1, v[0], detached);
    });
    op("load_balance_loss", {randn({6, 4}, rng)},
       [=](Tape<double>&, const auto& v) { return load_balance_loss(v[0], idx, 1); });
    const std::vector<int> labels{2, 0, 1, 2};
    op("routing_cls_loss", {randn({4, 3}, rng)},
       [=](Tape<double>&, const auto& v) { return routing_cls_loss(v[0], std::span<const int>(labels)); });
  }
  op("prototype_scores", {randn({5, 4}, rng), randn({3, 4}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, prototype_scores(v[0], v[1], 1.0), ps); });
  op("activate_sigmoid", {randn({5, 3}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, activate(v[0], ScoreActivation::kSigmoid), ps); });
  op("activate_softmax", {randn({5, 3}, rng)},
     [&](Tape<double>& t, const auto& v) { return project(t, activate(v[0], ScoreActivation::kSoftmax), ps); });

  if (scope == "ops") return out;

  // Composed layers with routing frozen at the decisions of the unperturbed forward.
  {
    const std::size_t D = 6, B = 3, L = 4;
    ProMoELayerConfig cfg;
    cfg.n_experts = 4;
    cfg.top_k = 2;
    cfg.activation = ScoreActivation::kSigmoid;
    cfg.rcl.detach_centroids = false;
    auto pool = make_segmented_pool<double>(D, cfg.n_experts, cfg.n_shared, cfg.n_uncond, cfg.n_act(), seed, 50);
    auto proto = make_prototypes<double>(cfg.n_experts, D, 1.0, seed, 60);
    const std::vector<int> with_null{1, 7, 2};  // 7 is the null label
    const TokenPartition part = partition_by_condition(with_null, 7, L);
    const Array<double> x0 = randn({B * L, D}, rng);
    const Array<double> target = randn({B * L, D}, rng);
    GatingResult fixed;
    {
      Tape<double> t;
      fixed = promoe_forward(t.constant(x0), part, pool, proto, cfg, true).log->gating;
    }
    auto loss = [&](Tape<double>& t, Var<double> x) {
      auto res = promoe_forward(x, part, pool, proto, cfg, true, &fixed);
      return add(diffusion_loss(res.output, t.constant(target)), res.aux_loss);
    };
    auto r = check_gradients("promoe_forward+mse (input)", {x0},
                             [&](Tape<double>& t, const auto& v) { return loss(t, v[0]); }, 1e-3);
    out.push_back(r);
    std::vector<Parameter<double>*> params;
    pool.for_each_parameter([&](Parameter<double>& p) { params.push_back(&p); });
    params.push_back(&proto.p);
    out.push_back(check_parameter_gradients("promoe_forward+mse (parameters)", params,
                                            [&](Tape<double>& t) { return loss(t, t.constant(x0)); }, 1e-3));
  }
  {
    const std::size_t D = 6;
    ProMoELayerConfig cfg;
    cfg.n_experts = 3;
    cfg.top_k = 2;
    auto pool = make_segmented_pool<double>(D, cfg.n_experts, cfg.n_shared, 0, cfg.n_act(), seed, 70);
    Rng wr(seed, Stream::kTest, 71);
    Parameter<double> router("router", randn({D, cfg.n_experts}, wr, 0.5));
    const Array<double> x0 = randn({6, D}, rng);
    GatingResult fixed;
    {
      Tape<double> t;
      fixed = tc_moe_forward(t.constant(x0), pool, router, cfg.top_k, true, true, 0.01).log->gating;
    }
    std::vector<Parameter<double>*> params;
    pool.for_each_parameter([&](Parameter<double>& p) { params.push_back(&p); });
    params.push_back(&router);
    out.push_back(check_parameter_gradients(
        "tc_moe_forward+lb (parameters)", params,
        [&](Tape<double>& t) {
          auto res = tc_moe_forward(t.constant(x0), pool, router, cfg.top_k, true, true, 0.01, &fixed);
          return add(project(t, res.output, ps), res.aux_loss);
        },
        1e-3));
  }
  {
    // Whole backbone on a tiny dense config: attention, conditioning and head.
    MiniDiTConfig mc;
    mc.image_size = 4;
    mc.patch_size = 2;
    mc.hidden = 8;
    mc.heads = 2;
    mc.depth = 1;
    mc.num_classes = 3;
    mc.num_superclasses = 1;
    mc.variant = LayerVariant::kDense;
    MiniDiT<double> model(mc, seed);
    // Head weights start at zero; give them values so upstream gradients are nonzero.
    Rng hr(seed, Stream::kTest, 90);
    for (auto* p : model.parameters()) {
      if (p->name.rfind("head.", 0) == 0) p->value = randn(p->value.shape(), hr, 0.3);
    }
    const Array<double> x = randn({2, 1, 4, 4}, rng);
    const Array<double> target = randn({2, 1, 4, 4}, rng);
    const std::vector<double> t{120.0, 870.0};
    const std::vector<int> labels{0, 3};
    out.push_back(check_parameter_gradients("mini_dit dense (all parameters)", model.parameters(),
                                            [&](Tape<double>& tape) {
                                              auto o = model.forward(tape, x, t, labels);
                                              return diffusion_loss(o.prediction, tape.constant(target));
                                            }));
  }
  return out;
}

}  // namespace promoe
