#include "promoe/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "promoe/error.hpp"

namespace promoe {

namespace {

// Each step allocates and frees the same large buffers; keeping them on the
// heap instead of fresh mmap pages avoids page-fault churn.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
    return true;
  }();
  (void)once;
#endif
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

Array<std::uint64_t> u64_array(const std::vector<std::size_t>& v) {
  return Array<std::uint64_t>({v.size()}, std::vector<std::uint64_t>(v.begin(), v.end()));
}

void copy_into(Parameter<float>& p, const Checkpoint& ckpt, const std::string& key) {
  const Array<float>& a = ckpt.f32(key);
  if (a.shape() != p.value.shape()) {
    throw IoError("incompatible checkpoint: '" + key + "' has shape " + shape_str(a.shape()) + ", model expects " +
                  shape_str(p.value.shape()));
  }
  p.value = a;
}

void save_kmeans(MiniDiT<float>& model, Checkpoint& ckpt) {
  auto& slots = model.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const KMeansState<float>& km = slots[i].kmeans();
    if (!km.initialized()) continue;
    ckpt.tensors["kmeans." + std::to_string(i) + ".centroids"] = km.centroids;
    ckpt.tensors["kmeans." + std::to_string(i) + ".counts"] = u64_array(km.counts);
  }
}

void load_kmeans(MiniDiT<float>& model, const Checkpoint& ckpt) {
  auto& slots = model.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string base = "kmeans." + std::to_string(i) + ".";
    if (!ckpt.has(base + "centroids")) continue;
    KMeansState<float>& km = slots[i].kmeans();
    km.centroids = ckpt.f32(base + "centroids");
    const auto& counts = std::get<Array<std::uint64_t>>(ckpt.tensors.at(base + "counts"));
    km.counts.assign(counts.vec().begin(), counts.vec().end());
  }
}

}  // namespace

Adam::Adam(const OptimizerConfig& cfg, std::vector<Parameter<float>*> params) : cfg_(cfg), params_(std::move(params)) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<float>& p = *params_[i];
    float* w = p.value.ptr();
    const float* g = p.grad.ptr();
    float* m = m_[i].ptr();
    float* v = v_[i].ptr();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double wj = w[j];
      wj -= cfg_.lr * cfg_.weight_decay * wj;
      wj -= cfg_.lr * (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

double ema_decay_at(double decay, bool warmup, std::uint64_t n) {
  if (!warmup) return decay;
  const double x = static_cast<double>(n);
  return std::min(decay, (1.0 + x) / (10.0 + x));
}

void ema_update(const std::vector<Parameter<float>*>& ema, const std::vector<Parameter<float>*>& live, double d) {
  if (ema.size() != live.size()) throw ContractError("ema_update: parameter lists differ in length");
  const double k = 1.0 - d;
  for (std::size_t i = 0; i < ema.size(); ++i) {
    float* e = ema[i]->value.ptr();
    const float* x = live[i]->value.ptr();
    for (std::size_t j = 0; j < ema[i]->value.size(); ++j) {
      e[j] = static_cast<float>(static_cast<double>(e[j]) + k * (static_cast<double>(x[j]) - e[j]));
    }
  }
}

Trainer::Trainer(RunConfig cfg)
    : cfg_([&] {
        cfg.sync();
        cfg.validate();
        return cfg;
      }()),
      schedule_(Schedule::for_objective(cfg_.objective)),
      model_(cfg_.model, cfg_.seed),
      ema_(model_),
      adam_(cfg_.optimizer, model_.parameters()) {
  tune_allocator();
}

StepRecord Trainer::step() {
  const std::size_t B = cfg_.batch_size;
  const std::uint64_t seed = cfg_.seed;
  SynthBatch batch = generate_batch(cfg_.data, B, step_);
  const int null = model_.null_label();
  std::vector<int> labels = apply_label_dropout(batch.labels, cfg_.model.label_dropout_prob, null, seed, step_);
  std::vector<int> superclass = batch.superclass;
  for (std::size_t i = 0; i < B; ++i)
    if (labels[i] == null) superclass[i] = -1;

  const std::vector<double> t = cfg_.objective == Objective::kRF
                                    ? sample_timesteps(cfg_.timesteps, B, seed, step_)
                                    : sample_timestep_indices(schedule_.steps, B, seed, step_);
  const Array<float> eps = gaussian<float>(batch.images.shape(), seed, Stream::kNoise, step_);
  const Array<float> xt = add_noise(batch.images, eps, t, schedule_);
  std::vector<double> tm(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) tm[i] = schedule_.model_time(t[i]);

  Tape<float> tape;
  ForwardOptions opts;
  opts.train = true;
  opts.superclass = superclass;
  auto out = model_.forward(tape, xt, tm, labels, opts);
  Var<float> diff = diffusion_loss(out.prediction, tape.constant(make_target(cfg_.objective, batch.images, eps)));
  Var<float> total = add(diff, out.aux_loss);

  StepRecord rec;
  rec.diff_loss = diff.value()[0];
  rec.rcl_loss = out.rcl;
  rec.lb_loss = out.lb;
  rec.cls_loss = out.cls;
  rec.total = total.value()[0];
  if (!std::isfinite(rec.total)) {
    throw TrainingDiverged("non-finite loss at step " + std::to_string(step_) + " (diff " + fmt(rec.diff_loss) +
                           ", rcl " + fmt(rec.rcl_loss) + ")");
  }
  if (!out.logs.empty()) rec.usage_entropy = usage_stats(out.logs).entropy;

  adam_.zero_grad();
  tape.backward(total);
  adam_.step();
  ema_update(ema_.parameters(), model_.parameters(), ema_decay_at(cfg_.ema_decay, cfg_.ema_warmup, step_));

  ++step_;
  rec.step = step_;
  if (cfg_.diversity_every > 0 && step_ % cfg_.diversity_every == 0) rec.diversity = diversity();
  history_.push_back(rec);
  return rec;
}

void Trainer::run() {
  while (step_ < cfg_.steps) step();
}

MiniDiT<float>& Trainer::ema() {
  for (std::size_t i = 0; i < model_.slots().size(); ++i) ema_.slots()[i].kmeans() = model_.slots()[i].kmeans();
  return ema_;
}

double Trainer::diversity() {
  double sum = 0.0;
  std::size_t layers = 0;
  for (auto& slot : model_.slots()) {
    const auto& pool = slot.pool();
    if (pool.standard.size() < 2) continue;
    const std::size_t k = std::min({cfg_.diversity_k, pool.dim(), pool.inner()});
    sum += expert_diversity(pool, k).mean;
    ++layers;
  }
  return layers == 0 ? kNotMeasured : sum / static_cast<double>(layers);
}

Checkpoint Trainer::checkpoint() {
  Checkpoint ck;
  ck.step = step_;
  ck.config_json = to_json(cfg_).dump(2);
  auto live = model_.parameters();
  auto avg = ema_.parameters();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < live.size(); ++i) {
    const std::string& name = live[i]->name;
    if (!seen.insert(name).second) throw ContractError("checkpoint: duplicate parameter name '" + name + "'");
    ck.tensors["model." + name] = live[i]->value;
    ck.tensors["ema." + name] = avg[i]->value;
    ck.tensors["adam.m." + name] = adam_.first_moments()[i];
    ck.tensors["adam.v." + name] = adam_.second_moments()[i];
  }
  ck.tensors["adam.t"] = Array<std::uint64_t>({1}, std::vector<std::uint64_t>{adam_.steps()});
  save_kmeans(model_, ck);
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  auto live = model_.parameters();
  auto avg = ema_.parameters();
  for (std::size_t i = 0; i < live.size(); ++i) {
    const std::string& name = live[i]->name;
    copy_into(*live[i], ck, "model." + name);
    copy_into(*avg[i], ck, "ema." + name);
    if (ck.has("adam.m." + name)) {
      adam_.first_moments()[i] = ck.f32("adam.m." + name);
      adam_.second_moments()[i] = ck.f32("adam.v." + name);
    }
  }
  if (ck.has("adam.t")) adam_.set_steps(std::get<Array<std::uint64_t>>(ck.tensors.at("adam.t"))[0]);
  load_kmeans(model_, ck);
  step_ = ck.step;
}

double tail_mean_loss(const std::vector<StepRecord>& history, std::size_t window) {
  if (history.empty()) return kNotMeasured;
  const std::size_t n = std::min(window, history.size());
  double s = 0.0;
  for (std::size_t i = history.size() - n; i < history.size(); ++i) s += history[i].diff_loss;
  return s / static_cast<double>(n);
}

void write_metrics_csv(const std::vector<StepRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open metrics file '" + path + "' for writing");
  out << "step,diff_loss,rcl_loss,lb_loss,cls_loss,total,usage_entropy,diversity\n";
  for (const auto& r : history) {
    out << r.step << ',' << fmt(r.diff_loss) << ',' << fmt(r.rcl_loss) << ',' << fmt(r.lb_loss) << ','
        << fmt(r.cls_loss) << ',' << fmt(r.total) << ',' << fmt(r.usage_entropy) << ',' << fmt(r.diversity) << '\n';
  }
  if (!out) throw IoError("write failed for metrics file '" + path + "'");
}

TrainArtifacts train_to_dir(const RunConfig& cfg, bool verbose) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.output_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.output_dir + "': " + ec.message());
  const fs::path dir(cfg.output_dir);

  Trainer trainer(cfg);
  {
    std::ofstream out(dir / "config.json");
    if (!out) throw IoError("cannot write '" + (dir / "config.json").string() + "'");
    out << to_json(trainer.config()).dump(2) << '\n';
  }
  TrainArtifacts art;
  art.metrics_csv = (dir / "metrics.csv").string();
  art.checkpoint = (dir / "ckpt_final.bin").string();
  try {
    while (trainer.steps_done() < trainer.config().steps) {
      const StepRecord r = trainer.step();
      if (verbose && (r.step % 100 == 0 || r.step == trainer.config().steps)) {
        std::cerr << "step " << r.step << " diff " << fmt(r.diff_loss) << " rcl " << fmt(r.rcl_loss) << " total "
                  << fmt(r.total) << '\n';
      }
      if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < trainer.config().steps) {
        save_checkpoint(trainer.checkpoint(), (dir / ("ckpt_" + std::to_string(r.step) + ".bin")).string());
      }
    }
  } catch (const TrainingDiverged& e) {
    write_metrics_csv(trainer.history(), art.metrics_csv);
    nlohmann::json dump{{"error", e.what()}, {"step", trainer.steps_done()}};
    for (auto* p : trainer.model().parameters()) {
      double ss = 0.0;
      bool finite = true;
      for (float v : p->value.vec()) {
        ss += static_cast<double>(v) * v;
        finite = finite && std::isfinite(v);
      }
      dump["param_norms"][p->name] = finite ? nlohmann::json(std::sqrt(ss)) : nlohmann::json("non-finite");
    }
    std::ofstream(dir / "diverged.json") << dump.dump(2) << '\n';
    throw;
  }
  write_metrics_csv(trainer.history(), art.metrics_csv);
  save_checkpoint(trainer.checkpoint(), art.checkpoint);
  art.history = trainer.history();
  return art;
}

MiniDiT<float> model_from_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg) {
  RunConfig c = cfg;
  c.sync();
  c.validate();
  MiniDiT<float> m(c.model, c.seed);
  for (auto* p : m.parameters()) copy_into(*p, ckpt, "ema." + p->name);
  load_kmeans(m, ckpt);
  return m;
}

SampleReport sample_model(MiniDiT<float>& model, const RunConfig& cfg, std::size_t n, double cfg_scale,
                          std::size_t steps, std::uint64_t seed, std::size_t chunk) {
  tune_allocator();
  SampleReport rep;
  rep.n = n;
  rep.cfg_scale = cfg_scale;
  rep.steps = steps;
  rep.objective = cfg.objective;
  const Schedule sched = Schedule::for_objective(cfg.objective);
  SamplerConfig sc = cfg.sampler;
  sc.steps = steps;
  sc.cfg_scale = cfg_scale;
  sc.objective = cfg.objective;
  sc.validate();

  const MiniDiTConfig& mc = model.config();
  const Shape sample_shape{mc.channels, mc.image_size, mc.image_size};
  rep.samples = Array<float>({n, mc.channels, mc.image_size, mc.image_size});
  for (std::size_t i = 0; i < n; ++i) rep.labels.push_back(static_cast<int>(i % mc.num_classes));
  if (n == 0) return rep;

  Denoiser<float> fn = [&](const Array<float>& x, std::span<const double> t, std::span<const int> labels,
                           const std::vector<std::uint8_t>& mask) {
    ++rep.model_calls;
    if (std::find(mask.begin(), mask.end(), 0) != mask.end()) ++rep.masked_calls;
    std::vector<double> tm(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) tm[i] = sched.model_time(t[i]);
    std::vector<RoutingLog> logs;
    Array<float> y = model.denoise(x, tm, labels, &mask, &logs);
    for (const auto& log : logs) {
      rep.uncond_tokens_routed += log.partition.n_uncond();
      rep.cond_tokens_routed += log.token_ids.size();
    }
    return y;
  };

  const std::size_t per = rep.samples.size() / n;
  for (std::size_t start = 0, c = 0; start < n; start += chunk, ++c) {
    const std::size_t len = std::min(chunk, n - start);
    const std::span<const int> labels(rep.labels.data() + start, len);
    const std::uint64_t s = seed + 0x9E3779B97F4A7C15ull * c;
    const Array<float> x = cfg.objective == Objective::kRF
                               ? rf_euler_sample(fn, labels, sample_shape, sc, model.null_label(), s)
                               : ddpm_sample(fn, sched, labels, sample_shape, sc, model.null_label(), s);
    std::copy(x.data().begin(), x.data().end(), rep.samples.ptr() + start * per);
  }
  RunConfig c = cfg;
  c.sync();
  rep.predictions = oracle_classify(rep.samples, c.data);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) hit += rep.predictions[i] == rep.labels[i];
  rep.accuracy = static_cast<double>(hit) / static_cast<double>(n);
  return rep;
}

nlohmann::json report_json(const SampleReport& rep) {
  nlohmann::json per_class = nlohmann::json::object();
  std::map<int, std::pair<std::size_t, std::size_t>> tally;
  for (std::size_t i = 0; i < rep.labels.size(); ++i) {
    auto& [hit, total] = tally[rep.labels[i]];
    hit += rep.predictions[i] == rep.labels[i];
    ++total;
  }
  for (const auto& [label, ht] : tally) {
    per_class[std::to_string(label)] = static_cast<double>(ht.first) / static_cast<double>(ht.second);
  }
  return nlohmann::json{{"n", rep.n},
                        {"cfg_scale", rep.cfg_scale},
                        {"steps", rep.steps},
                        {"objective", to_string(rep.objective)},
                        {"oracle_accuracy", rep.accuracy},
                        {"per_class_accuracy", per_class},
                        {"model_calls", rep.model_calls},
                        {"masked_calls", rep.masked_calls},
                        {"uncond_tokens_routed", rep.uncond_tokens_routed},
                        {"cond_tokens_routed", rep.cond_tokens_routed}};
}

void write_sample_report(const SampleReport& rep, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const fs::path base(dir);
  {
    std::ofstream out(base / "report.json");
    if (!out) throw IoError("cannot write '" + (base / "report.json").string() + "'");
    out << report_json(rep).dump(2) << '\n';
  }
  std::ofstream raw(base / "samples.f32", std::ios::binary | std::ios::trunc);
  if (!raw) throw IoError("cannot write '" + (base / "samples.f32").string() + "'");
  for (float v : rep.samples.vec()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const char b[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                       static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
    raw.write(b, 4);
  }
  std::ofstream idx(base / "samples.csv");
  if (!idx) throw IoError("cannot write '" + (base / "samples.csv").string() + "'");
  idx << "index,label,predicted,byte_offset\n";
  const std::size_t per = rep.n == 0 ? 0 : rep.samples.size() / rep.n;
  for (std::size_t i = 0; i < rep.n; ++i) {
    idx << i << ',' << rep.labels[i] << ',' << rep.predictions[i] << ',' << i * per * 4 << '\n';
  }
}

}  // namespace promoe
