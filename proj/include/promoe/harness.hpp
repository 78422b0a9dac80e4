#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "promoe/checkpoint.hpp"
#include "promoe/config.hpp"
#include "promoe/metrics.hpp"

namespace promoe {

/// Adam with decoupled weight decay. Moments are kept per parameter in the
/// order the parameters were given.
class Adam {
 public:
  Adam(const OptimizerConfig& cfg, std::vector<Parameter<float>*> params);
  void step();
  void zero_grad();
  std::uint64_t steps() const { return t_; }

  std::vector<Array<float>>& first_moments() { return m_; }
  std::vector<Array<float>>& second_moments() { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter<float>*> params_;
  std::vector<Array<float>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Decay used for EMA update number n (0-based).
double ema_decay_at(double decay, bool warmup, std::uint64_t n);
/// ema += (1 - d) * (live - ema), so a constant live value is reproduced exactly.
void ema_update(const std::vector<Parameter<float>*>& ema, const std::vector<Parameter<float>*>& live, double d);

inline constexpr double kNotMeasured = std::numeric_limits<double>::quiet_NaN();

struct StepRecord {
  std::uint64_t step = 0;
  double diff_loss = 0.0;
  double rcl_loss = 0.0;
  double lb_loss = 0.0;
  double cls_loss = 0.0;
  double total = 0.0;
  double usage_entropy = kNotMeasured;
  double diversity = kNotMeasured;
};

/// Raised when the training loss stops being finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  explicit Trainer(RunConfig cfg);
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  /// One optimizer step on a fresh synthetic batch.
  StepRecord step();
  /// Steps until config().steps have been taken.
  void run();

  const RunConfig& config() const { return cfg_; }
  MiniDiT<float>& model() { return model_; }
  /// EMA weights, including a copy of the live k-means state.
  MiniDiT<float>& ema();
  std::uint64_t steps_done() const { return step_; }
  const std::vector<StepRecord>& history() const { return history_; }
  /// Mean pairwise expert subspace similarity over MoE layers; NaN without
  /// at least two standard experts per layer.
  double diversity();

  Checkpoint checkpoint();
  void restore(const Checkpoint& ckpt);

 private:
  RunConfig cfg_;
  Schedule schedule_;
  MiniDiT<float> model_;
  MiniDiT<float> ema_;
  Adam adam_;
  std::uint64_t step_ = 0;
  std::vector<StepRecord> history_;
};

/// Mean of `diff_loss` over the last `window` recorded steps.
double tail_mean_loss(const std::vector<StepRecord>& history, std::size_t window = 100);

void write_metrics_csv(const std::vector<StepRecord>& history, const std::string& path);

struct TrainArtifacts {
  std::string metrics_csv;
  std::string checkpoint;
  std::vector<StepRecord> history;
};

/// Full run with files: config.json, metrics.csv, ckpt_final.bin (and
/// periodic ckpt_<step>.bin). On divergence writes diverged.json and rethrows.
TrainArtifacts train_to_dir(const RunConfig& cfg, bool verbose = false);

struct SampleReport {
  std::size_t n = 0;
  double cfg_scale = 1.0;
  std::size_t steps = 0;
  Objective objective = Objective::kRF;
  double accuracy = 0.0;
  std::vector<int> labels;
  std::vector<int> predictions;
  Array<float> samples;
  std::size_t model_calls = 0;
  /// Calls whose batch mask marked some samples unconditional.
  std::size_t masked_calls = 0;
  /// Unconditional tokens seen by MoE layers across all calls.
  std::size_t uncond_tokens_routed = 0;
  /// Routed (conditional) token count seen by MoE layers.
  std::size_t cond_tokens_routed = 0;
};

/// Class-balanced conditional samples (label i % num_classes) scored with
/// oracle_classify. Runs in chunks of `chunk` samples.
SampleReport sample_model(MiniDiT<float>& model, const RunConfig& cfg, std::size_t n, double cfg_scale,
                          std::size_t steps, std::uint64_t seed, std::size_t chunk = 256);

/// Loads model weights from the EMA entries of a checkpoint.
MiniDiT<float> model_from_checkpoint(const Checkpoint& ckpt, const RunConfig& cfg);

/// report.json, samples.f32 (raw little-endian float32, N x 1 x H x W) and
/// samples.csv (index, label, predicted, byte_offset).
void write_sample_report(const SampleReport& rep, const std::string& dir);
nlohmann::json report_json(const SampleReport& rep);

}  // namespace promoe
