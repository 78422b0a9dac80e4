#include "promoe/config.hpp"

#include <fstream>
#include <set>

#include "promoe/error.hpp"

namespace promoe {

using nlohmann::json;

void RunConfig::sync() {
  data.num_classes = model.num_classes;
  data.num_superclasses = model.num_superclasses;
  data.image_size = model.image_size;
  data.patch_size = model.patch_size;
  data.seed = seed;
  sampler.objective = objective;
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  sampler.validate();
  if (model.channels != 1) throw ConfigError("config: the synthetic data has one channel");
  if (data.num_classes != model.num_classes || data.num_superclasses != model.num_superclasses ||
      data.image_size != model.image_size) {
    throw ConfigError("config: data and model disagree on classes or image size");
  }
  if (batch_size == 0) throw ConfigError("config: batch_size must be positive");
  if (!(optimizer.lr > 0.0)) throw ConfigError("config: optimizer.lr must be positive");
  if (optimizer.beta1 < 0.0 || optimizer.beta1 >= 1.0 || optimizer.beta2 < 0.0 || optimizer.beta2 >= 1.0) {
    throw ConfigError("config: optimizer betas must lie in [0,1)");
  }
  if (optimizer.weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
  if (ema_decay < 0.0 || ema_decay > 1.0) throw ConfigError("config: ema_decay must lie in [0,1]");
}

json to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& l = m.layer;
  return json{
      {"model",
       {{"image_size", m.image_size},
        {"patch_size", m.patch_size},
        {"channels", m.channels},
        {"depth", m.depth},
        {"hidden", m.hidden},
        {"heads", m.heads},
        {"num_classes", m.num_classes},
        {"num_superclasses", m.num_superclasses},
        {"label_dropout_prob", m.label_dropout_prob}}},
      {"variant", to_string(m.variant)},
      {"layer",
       {{"n_experts", l.n_experts},
        {"top_k", l.top_k},
        {"n_shared", l.n_shared},
        {"n_uncond", l.n_uncond},
        {"activation", to_string(l.activation)},
        {"alpha", l.alpha},
        {"tau", l.rcl.tau},
        {"lambda_rcl", l.rcl.lambda_rcl},
        {"load_balance", l.load_balance},
        {"lb_weight", l.lb_weight}}},
      {"objective", to_string(c.objective)},
      {"timesteps", to_string(c.timesteps)},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"ema_decay", c.ema_decay},
      {"ema_warmup", c.ema_warmup},
      {"seed", c.seed},
      {"data",
       {{"amplitude", c.data.amplitude},
        {"base_frequency", c.data.base_frequency},
        {"frequency_step", c.data.frequency_step},
        {"phase", c.data.phase},
        {"noise_std", c.data.noise_std},
        {"hflip", c.data.hflip}}},
      {"sampler",
       {{"steps", c.sampler.steps}, {"cfg_scale", c.sampler.cfg_scale}, {"deterministic", c.sampler.deterministic}}},
      {"diversity_every", c.diversity_every},
      {"diversity_k", c.diversity_k},
      {"checkpoint_every", c.checkpoint_every},
      {"output_dir", c.output_dir},
  };
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("config: unknown key '" + where + key + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + where + key + "': " + e.what());
  }
}

}  // namespace

RunConfig from_json(const json& j, const RunConfig& base) {
  RunConfig c = base;
  check_keys(j,
             {"model", "variant", "layer", "objective", "timesteps", "optimizer", "batch_size", "steps", "ema_decay",
              "ema_warmup", "seed", "data", "sampler", "diversity_every", "diversity_k", "checkpoint_every",
              "output_dir"},
             "");
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m,
               {"image_size", "patch_size", "channels", "depth", "hidden", "heads", "num_classes", "num_superclasses",
                "label_dropout_prob"},
               "model.");
    read(m, "image_size", c.model.image_size, "model.");
    read(m, "patch_size", c.model.patch_size, "model.");
    read(m, "channels", c.model.channels, "model.");
    read(m, "depth", c.model.depth, "model.");
    read(m, "hidden", c.model.hidden, "model.");
    read(m, "heads", c.model.heads, "model.");
    read(m, "num_classes", c.model.num_classes, "model.");
    read(m, "num_superclasses", c.model.num_superclasses, "model.");
    read(m, "label_dropout_prob", c.model.label_dropout_prob, "model.");
  }
  if (j.contains("variant")) c.model.variant = parse_layer_variant(j["variant"].get<std::string>());
  if (j.contains("layer")) {
    const json& l = j["layer"];
    check_keys(l,
               {"code", "n_experts", "top_k", "n_shared", "n_uncond", "activation", "alpha", "tau", "lambda_rcl",
                "load_balance", "lb_weight"},
               "layer.");
    auto& lc = c.model.layer;
    if (l.contains("code")) {
      const ProMoELayerConfig coded = ProMoELayerConfig::from_code(l["code"].get<std::string>());
      lc.n_experts = coded.n_experts;
      lc.top_k = coded.top_k;
      lc.n_shared = coded.n_shared;
      lc.n_uncond = coded.n_uncond;
    }
    read(l, "n_experts", lc.n_experts, "layer.");
    read(l, "top_k", lc.top_k, "layer.");
    read(l, "n_shared", lc.n_shared, "layer.");
    read(l, "n_uncond", lc.n_uncond, "layer.");
    if (l.contains("activation")) lc.activation = parse_score_activation(l["activation"].get<std::string>());
    read(l, "alpha", lc.alpha, "layer.");
    read(l, "tau", lc.rcl.tau, "layer.");
    read(l, "lambda_rcl", lc.rcl.lambda_rcl, "layer.");
    read(l, "load_balance", lc.load_balance, "layer.");
    read(l, "lb_weight", lc.lb_weight, "layer.");
  }
  if (j.contains("objective")) c.objective = parse_objective(j["objective"].get<std::string>());
  if (j.contains("timesteps")) c.timesteps = parse_timestep_sampling(j["timesteps"].get<std::string>());
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    check_keys(o, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer.");
    read(o, "lr", c.optimizer.lr, "optimizer.");
    read(o, "beta1", c.optimizer.beta1, "optimizer.");
    read(o, "beta2", c.optimizer.beta2, "optimizer.");
    read(o, "eps", c.optimizer.eps, "optimizer.");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer.");
  }
  read(j, "batch_size", c.batch_size, "");
  read(j, "steps", c.steps, "");
  read(j, "ema_decay", c.ema_decay, "");
  read(j, "ema_warmup", c.ema_warmup, "");
  read(j, "seed", c.seed, "");
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"amplitude", "base_frequency", "frequency_step", "phase", "noise_std", "hflip"}, "data.");
    read(d, "amplitude", c.data.amplitude, "data.");
    read(d, "base_frequency", c.data.base_frequency, "data.");
    read(d, "frequency_step", c.data.frequency_step, "data.");
    read(d, "phase", c.data.phase, "data.");
    read(d, "noise_std", c.data.noise_std, "data.");
    read(d, "hflip", c.data.hflip, "data.");
  }
  if (j.contains("sampler")) {
    const json& s = j["sampler"];
    check_keys(s, {"steps", "cfg_scale", "deterministic"}, "sampler.");
    read(s, "steps", c.sampler.steps, "sampler.");
    read(s, "cfg_scale", c.sampler.cfg_scale, "sampler.");
    read(s, "deterministic", c.sampler.deterministic, "sampler.");
  }
  read(j, "diversity_every", c.diversity_every, "");
  read(j, "diversity_k", c.diversity_k, "");
  read(j, "checkpoint_every", c.checkpoint_every, "");
  read(j, "output_dir", c.output_dir, "");
  c.sync();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  RunConfig c = from_json(j);
  return c;
}

}  // namespace promoe
