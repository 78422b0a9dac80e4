// promoe: train, sample, check and inspect toy ProMoE diffusion models.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "promoe/error.hpp"
#include "promoe/experiments.hpp"
#include "promoe/gradcheck.hpp"
#include "promoe/harness.hpp"

namespace fs = std::filesystem;
using namespace promoe;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> steps;
  std::optional<std::string> variant;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--steps", f.steps, "Training steps");
  cmd->add_option("--variant", f.variant, "promoe | dense | tc_moe | kmeans_router | cls_router");
  cmd->add_option("--out", f.out, "Output directory");
}

RunConfig resolve(const CommonFlags& f, const RunConfig& base = {}) {
  RunConfig cfg = f.config.empty() ? base : from_json(nlohmann::json::parse(std::ifstream(f.config)), base);
  if (f.seed) cfg.seed = *f.seed;
  if (f.steps) cfg.steps = *f.steps;
  if (f.variant) cfg.model.variant = parse_layer_variant(*f.variant);
  if (f.out) cfg.output_dir = *f.out;
  cfg.sync();
  cfg.validate();
  return cfg;
}

// The run config embedded in a checkpoint, with command-line overrides on top.
RunConfig config_from_checkpoint(const Checkpoint& ck, const CommonFlags& f) {
  RunConfig base = from_json(nlohmann::json::parse(ck.config_json));
  return resolve(f, base);
}

std::string out_dir(const CommonFlags& f, const std::string& fallback) { return f.out ? *f.out : fallback; }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

int cmd_train(const CommonFlags& f, bool quiet) {
  const RunConfig cfg = resolve(f);
  const TrainArtifacts art = train_to_dir(cfg, !quiet);
  std::printf("steps %llu  tail_loss %.6f\nmetrics %s\ncheckpoint %s\n",
              static_cast<unsigned long long>(cfg.steps), tail_mean_loss(art.history), art.metrics_csv.c_str(),
              art.checkpoint.c_str());
  return 0;
}

int cmd_sample(const CommonFlags& f, const std::string& ckpt_path, std::size_t n, std::optional<double> cfg_scale,
               std::optional<std::size_t> sampler_steps) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const RunConfig cfg = config_from_checkpoint(ck, f);
  MiniDiT<float> model = model_from_checkpoint(ck, cfg);
  const double w = cfg_scale.value_or(cfg.sampler.cfg_scale);
  const std::size_t steps = sampler_steps.value_or(cfg.sampler.steps);
  const SampleReport rep = sample_model(model, cfg, n, w, steps, cfg.seed);
  const std::string dir = out_dir(f, (fs::path(ckpt_path).parent_path() / "samples").string());
  write_sample_report(rep, dir);
  std::printf("n %zu  cfg_scale %.3g  steps %zu  oracle_accuracy %.4f\nreport %s\n", rep.n, rep.cfg_scale,
              rep.steps, rep.accuracy, (fs::path(dir) / "report.json").string().c_str());
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, std::size_t seeds) {
  if (scope != "ops" && scope != "full") throw CLI::ValidationError("--scope", "must be 'ops' or 'full'");
  bool ok = true;
  for (std::uint64_t s = seed; s < seed + seeds; ++s) {
    for (const auto& r : run_gradcheck_suite(s, scope)) {
      ok = ok && r.pass();
      std::printf("%-4s seed %-3llu %-36s coords %-6zu rel_err %.3e (tol %.0e)\n", r.pass() ? "ok" : "FAIL",
                  static_cast<unsigned long long>(s), r.name.c_str(), r.coordinates, r.max_rel_error, r.tolerance);
    }
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? 0 : 1;
}

int cmd_ablate(const CommonFlags& f, const std::string& preset, bool quiet) {
  CommonFlags g = f;
  if (!g.out) g.out = "runs/ablate";
  const RunConfig base = resolve(g);
  std::vector<AblationCell> cells;
  try {
    cells = ablation_cells(preset, base);
  } catch (const ConfigError& e) {
    throw CLI::ValidationError("--preset", e.what());
  }
  ensure_dir(base.output_dir);
  const std::string csv_path = (fs::path(base.output_dir) / (preset + ".csv")).string();
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write '" + csv_path + "'");
  csv << ablation_csv_header() << '\n';
  std::cout << ablation_csv_header() << '\n';
  for (const auto& cell : cells) {
    const std::string row = ablation_csv_row(run_ablation_cell(cell, !quiet));
    csv << row << '\n' << std::flush;
    std::cout << row << '\n' << std::flush;
  }
  return 0;
}

int cmd_metrics(const CommonFlags& f, const std::string& ckpt_path, std::size_t batch, std::size_t k) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const RunConfig cfg = config_from_checkpoint(ck, f);
  MiniDiT<float> model = model_from_checkpoint(ck, cfg);
  const RoutingSnapshot snap = routing_snapshot(model, cfg, batch);
  nlohmann::json j = routing_metrics(model, cfg, snap, k);
  j["checkpoint"] = ckpt_path;
  j["step"] = ck.step;
  const std::string dir = out_dir(f, fs::path(ckpt_path).parent_path().string());
  ensure_dir(dir);
  const std::string path = (fs::path(dir) / "metrics.json").string();
  std::ofstream(path) << j.dump(2) << '\n';
  for (const auto& layer : j["layers"]) {
    std::printf("layer %d", layer["layer"].get<int>());
    if (layer.contains("usage_entropy")) std::printf("  usage_entropy %.4f", layer["usage_entropy"].get<double>());
    if (layer.contains("cluster_ratio")) std::printf("  cluster_ratio %.4f", layer["cluster_ratio"]["ratio"].get<double>());
    if (layer.contains("diversity")) std::printf("  diversity %.4f", layer["diversity"]["mean"].get<double>());
    std::printf("\n");
  }
  std::printf("metrics %s\n", path.c_str());
  return 0;
}

int cmd_export(const CommonFlags& f, const std::string& ckpt_path, std::size_t batch) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const RunConfig cfg = config_from_checkpoint(ck, f);
  MiniDiT<float> model = model_from_checkpoint(ck, cfg);
  const RoutingSnapshot snap = routing_snapshot(model, cfg, batch);
  const std::string dir = out_dir(f, fs::path(ckpt_path).parent_path().string());
  ensure_dir(dir);
  const std::string path = (fs::path(dir) / "assignments.csv").string();
  export_assignments(snap.logs, ck.step, path);
  std::printf("assignments %s (%zu routed layers)\n", path.c_str(), snap.logs.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy ProMoE diffusion transformer: training, sampling and routing diagnostics"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  CommonFlags train_f, sample_f, ablate_f, metrics_f, export_f;

  auto* train = app.add_subcommand("train", "Train a model and write metrics.csv and checkpoints");
  add_common(train, train_f);

  auto* sample = app.add_subcommand("sample", "Sample from a checkpoint's EMA weights and score with the oracle");
  add_common(sample, sample_f);
  std::string sample_ckpt;
  std::size_t n = 256;
  std::optional<double> cfg_scale;
  std::optional<std::size_t> sampler_steps;
  sample->add_option("--checkpoint", sample_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  sample->add_option("-n,--num", n, "Number of samples");
  sample->add_option("--cfg-scale", cfg_scale, "Classifier-free guidance scale");
  sample->add_option("--sampler-steps", sampler_steps, "Sampler steps");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks in double precision");
  std::string scope = "full";
  std::uint64_t grad_seed = 0;
  std::size_t grad_seeds = 1;
  grad->add_option("--scope", scope, "ops | full");
  grad->add_option("--seed", grad_seed, "First seed");
  grad->add_option("--seeds", grad_seeds, "Number of consecutive seeds");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation preset and write one CSV row per cell");
  add_common(ablate, ablate_f);
  std::string preset;
  ablate->add_option("--preset", preset, "activation | load_balance | rcl | lambda | experts")->required();

  auto* metrics = app.add_subcommand("metrics", "Routing usage, cluster ratio and expert diversity of a checkpoint");
  add_common(metrics, metrics_f);
  std::string metrics_ckpt;
  std::size_t metrics_batch = 64, k = 8;
  metrics->add_option("--checkpoint", metrics_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  metrics->add_option("--batch", metrics_batch, "Evaluation batch size");
  metrics->add_option("--k", k, "Singular vectors per expert subspace");

  auto* exp = app.add_subcommand("export-assignments", "Write token-to-expert assignments as CSV");
  add_common(exp, export_f);
  std::string export_ckpt;
  std::size_t export_batch = 64;
  exp->add_option("--checkpoint", export_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  exp->add_option("--batch", export_batch, "Evaluation batch size");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_f, quiet);
    if (*sample) return cmd_sample(sample_f, sample_ckpt, n, cfg_scale, sampler_steps);
    if (*grad) return cmd_gradcheck(scope, grad_seed, grad_seeds);
    if (*ablate) return cmd_ablate(ablate_f, preset, quiet);
    if (*metrics) return cmd_metrics(metrics_f, metrics_ckpt, metrics_batch, k);
    if (*exp) return cmd_export(export_f, export_ckpt, export_batch);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "error: training diverged: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
