#include "promoe/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

#include "promoe/error.hpp"

namespace promoe {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

AblationCell make_cell(const std::string& preset, const std::string& name, RunConfig cfg) {
  cfg.output_dir = (std::filesystem::path(cfg.output_dir) / preset / name).string();
  return {preset, name, std::move(cfg)};
}

}  // namespace

const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names{"activation", "load_balance", "rcl", "lambda", "experts"};
  return names;
}

std::vector<AblationCell> ablation_cells(const std::string& preset, const RunConfig& base) {
  RunConfig b = base;
  b.model.variant = LayerVariant::kProMoE;
  std::vector<AblationCell> cells;
  if (preset == "activation") {
    for (auto a : {ScoreActivation::kIdentity, ScoreActivation::kSigmoid, ScoreActivation::kSoftmax}) {
      RunConfig c = b;
      c.model.layer.activation = a;
      cells.push_back(make_cell(preset, to_string(a), c));
    }
  } else if (preset == "load_balance") {
    for (bool lb : {false, true}) {
      RunConfig c = b;
      c.model.layer.load_balance = lb;
      cells.push_back(make_cell(preset, lb ? "rcl+lb" : "rcl", c));
    }
  } else if (preset == "rcl") {
    for (double lam : {0.0, 1.0}) {
      RunConfig c = b;
      c.model.layer.rcl.lambda_rcl = lam;
      cells.push_back(make_cell(preset, "lambda_" + num(lam), c));
    }
  } else if (preset == "lambda") {
    for (double lam : {1.0, 2.0, 5.0, 10.0}) {
      RunConfig c = b;
      c.model.layer.rcl.lambda_rcl = lam;
      cells.push_back(make_cell(preset, "lambda_" + num(lam), c));
    }
  } else if (preset == "experts") {
    for (int total : {4, 8, 14, 16}) {
      RunConfig c = b;
      const ProMoELayerConfig coded = ProMoELayerConfig::from_code("E" + std::to_string(total) + "A1S1U1");
      c.model.layer.n_experts = coded.n_experts;
      c.model.layer.top_k = coded.top_k;
      c.model.layer.n_shared = coded.n_shared;
      c.model.layer.n_uncond = coded.n_uncond;
      cells.push_back(make_cell(preset, coded.code(), c));
    }
  } else {
    std::string known;
    for (const auto& p : ablation_presets()) known += (known.empty() ? "" : ", ") + p;
    throw ConfigError("unknown ablation preset '" + preset + "' (known: " + known + ")");
  }
  return cells;
}

double tail_mean_entropy(const std::vector<StepRecord>& history, std::size_t window) {
  double s = 0.0;
  std::size_t n = 0;
  for (auto it = history.rbegin(); it != history.rend() && n < window; ++it) {
    if (std::isnan(it->usage_entropy)) continue;
    s += it->usage_entropy;
    ++n;
  }
  return n == 0 ? kNotMeasured : s / static_cast<double>(n);
}

AblationRow run_ablation_cell(const AblationCell& cell, bool verbose) {
  const TrainArtifacts art = train_to_dir(cell.cfg, verbose);
  AblationRow r;
  r.preset = cell.preset;
  r.cell = cell.name;
  r.code = cell.cfg.model.layer.code();
  r.activation = to_string(cell.cfg.model.layer.activation);
  r.lambda_rcl = cell.cfg.model.layer.rcl.lambda_rcl;
  r.load_balance = cell.cfg.model.layer.load_balance;
  r.seed = cell.cfg.seed;
  r.steps = cell.cfg.steps;
  r.tail_loss = tail_mean_loss(art.history);
  r.tail_entropy = tail_mean_entropy(art.history);
  r.final_diversity = kNotMeasured;
  for (auto it = art.history.rbegin(); it != art.history.rend(); ++it) {
    if (!std::isnan(it->diversity)) {
      r.final_diversity = it->diversity;
      break;
    }
  }
  return r;
}

std::string ablation_csv_header() {
  return "preset,cell,code,activation,lambda_rcl,load_balance,seed,steps,tail_loss,tail_entropy,final_diversity";
}

std::string ablation_csv_row(const AblationRow& r) {
  return r.preset + ',' + r.cell + ',' + r.code + ',' + r.activation + ',' + num(r.lambda_rcl) + ',' +
         (r.load_balance ? "1" : "0") + ',' + std::to_string(r.seed) + ',' + std::to_string(r.steps) + ',' +
         num(r.tail_loss) + ',' + num(r.tail_entropy) + ',' + num(r.final_diversity);
}

RoutingSnapshot routing_snapshot(MiniDiT<float>& model, const RunConfig& cfg, std::size_t batch,
                                 std::uint64_t eval_index) {
  RunConfig c = cfg;
  c.sync();
  // Evaluation batches live far past any training step index.
  const std::uint64_t step = (1ull << 62) + eval_index;
  SynthBatch data = generate_batch(c.data, batch, step);
  const Schedule sched = Schedule::for_objective(c.objective);
  const double t_mid = c.objective == Objective::kRF ? 0.5 : static_cast<double>(sched.steps / 2);
  const std::vector<double> t(batch, t_mid);
  const Array<float> eps = gaussian<float>(data.images.shape(), c.seed, Stream::kNoise, step);
  const Array<float> xt = add_noise(data.images, eps, t, sched);
  std::vector<double> tm(batch, sched.model_time(t_mid));

  Tape<float> tape;
  ForwardOptions opts;
  opts.superclass = data.superclass;
  opts.capture_ffn_inputs = true;
  auto out = model.forward(tape, xt, tm, data.labels, opts);
  return {std::move(out.logs), std::move(out.ffn_inputs), std::move(data.labels), std::move(data.superclass)};
}

nlohmann::json routing_metrics(MiniDiT<float>& model, const RunConfig& cfg, const RoutingSnapshot& snap,
                               std::size_t k) {
  nlohmann::json layers = nlohmann::json::array();
  const std::size_t L = cfg.model.tokens();
  std::vector<int> token_super;
  for (int s : snap.superclass) token_super.insert(token_super.end(), L, s);
  for (std::size_t i = 0; i < model.slots().size(); ++i) {
    nlohmann::json layer{{"layer", i}, {"variant", to_string(model.slots()[i].variant())}};
    auto log = std::find_if(snap.logs.begin(), snap.logs.end(), [&](const RoutingLog& l) { return l.layer == i; });
    if (log != snap.logs.end()) {
      const UsageStats u = usage_stats(*log);
      layer["usage_counts"] = u.counts;
      layer["usage_entropy"] = u.entropy;
    }
    if (i < snap.ffn_inputs.size()) {
      std::set<int> distinct(token_super.begin(), token_super.end());
      if (distinct.size() >= 2) {
        const ClusterRatio cr = cluster_ratio(snap.ffn_inputs[i], token_super);
        layer["cluster_ratio"] = {{"inter", cr.inter}, {"intra", cr.intra}, {"ratio", cr.ratio}};
      }
    }
    const auto& pool = model.slots()[i].pool();
    if (pool.standard.size() >= 2) {
      const std::size_t kk = std::min({k, pool.dim(), pool.inner()});
      const DiversityReport d = expert_diversity(pool, kk);
      layer["diversity"] = {{"k", d.k}, {"mean", d.mean}, {"pair_matrix", d.pair_matrix}};
    }
    layers.push_back(std::move(layer));
  }
  return nlohmann::json{{"batch", snap.labels.size()}, {"layers", layers}};
}

}  // namespace promoe
