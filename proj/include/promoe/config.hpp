#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

#include "promoe/backbone.hpp"
#include "promoe/data_synth.hpp"
#include "promoe/diffusion.hpp"

namespace promoe {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Everything a training or sampling run depends on. JSON round-trips through
/// to_json / from_json; unknown keys are rejected so typos surface early.
struct RunConfig {
  MiniDiTConfig model;
  Objective objective = Objective::kRF;
  TimestepSampling timesteps = TimestepSampling::kLogitNormal;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::uint64_t steps = 5000;
  double ema_decay = 0.9999;
  /// Use min(ema_decay, (1 + n) / (10 + n)) at update n.
  bool ema_warmup = true;
  std::uint64_t seed = 0;
  SynthSpec data;
  SamplerConfig sampler;
  std::uint64_t diversity_every = 500;
  std::size_t diversity_k = 8;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::string output_dir = "runs/default";

  /// Copies shared fields (class counts, image geometry, seed) into `data`.
  void sync();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Starts from `base` and overrides only the keys present in `j`.
RunConfig from_json(const nlohmann::json& j, const RunConfig& base = {});
RunConfig load_config(const std::string& path);

}  // namespace promoe
