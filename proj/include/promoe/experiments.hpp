#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "promoe/harness.hpp"

namespace promoe {

struct AblationCell {
  std::string preset;
  std::string name;
  RunConfig cfg;
};

/// activation, load_balance, rcl, lambda, experts
const std::vector<std::string>& ablation_presets();

/// Configs for one preset, all sharing `base`'s seed. ConfigError for an
/// unknown preset.
std::vector<AblationCell> ablation_cells(const std::string& preset, const RunConfig& base);

struct AblationRow {
  std::string preset;
  std::string cell;
  std::string code;
  std::string activation;
  double lambda_rcl = 0.0;
  bool load_balance = false;
  std::uint64_t seed = 0;
  std::uint64_t steps = 0;
  double tail_loss = 0.0;      // mean diffusion loss over the final 100 steps
  double tail_entropy = 0.0;   // mean usage entropy over the final 100 steps
  double final_diversity = 0.0;
};

/// Trains the cell into cfg.output_dir and summarizes it.
AblationRow run_ablation_cell(const AblationCell& cell, bool verbose = false);

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& r);

/// Mean of the usage entropy over the final `window` steps that recorded one.
double tail_mean_entropy(const std::vector<StepRecord>& history, std::size_t window = 100);

struct RoutingSnapshot {
  std::vector<RoutingLog> logs;
  /// FFN input tokens per block, [(B*L) x D].
  std::vector<Array<float>> ffn_inputs;
  std::vector<int> labels;
  std::vector<int> superclass;
};

/// One conditional forward pass on a fresh synthetic batch at a fixed noise
/// level (RF t = 0.5, DDPM index T/2). `eval_index` selects the batch.
RoutingSnapshot routing_snapshot(MiniDiT<float>& model, const RunConfig& cfg, std::size_t batch,
                                 std::uint64_t eval_index = 0);

/// Per-layer usage, cluster ratio of FFN inputs by superclass, and expert
/// diversity where a layer has at least two standard experts.
nlohmann::json routing_metrics(MiniDiT<float>& model, const RunConfig& cfg, const RoutingSnapshot& snap,
                               std::size_t k);

}  // namespace promoe
