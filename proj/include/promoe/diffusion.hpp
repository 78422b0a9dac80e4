#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "promoe/array.hpp"
#include "promoe/losses.hpp"
#include "promoe/rng.hpp"

namespace promoe {

/// x_t = alpha_t * x0 + sigma_t * eps.
/// DDPM: t is an integer index in [0, T); RF: t is continuous in [0, 1].
struct Schedule {
  Objective kind = Objective::kRF;
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  std::vector<double> betas;      // DDPM only
  std::vector<double> alpha_bar;  // DDPM only, cumulative product of (1 - beta)

  static Schedule ddpm(std::size_t steps = 1000, double beta_start = 1e-4, double beta_end = 2e-2);
  static Schedule rf();
  static Schedule for_objective(Objective kind);

  double alpha(double t) const;
  double sigma(double t) const;
  /// Time value fed to the network's sinusoidal embedding: RF maps [0,1] to
  /// [0,1000], DDPM passes the index through.
  double model_time(double t) const;
  /// Throws ConfigError if t is not valid for this schedule.
  void check_time(double t) const;
};

/// Per-sample noising; t has one entry per leading-axis sample.
template <typename T>
Array<T> add_noise(const Array<T>& x0, const Array<T>& eps, std::span<const double> t, const Schedule& schedule);

enum class TimestepSampling { kUniform, kLogitNormal };
TimestepSampling parse_timestep_sampling(const std::string& s);
std::string to_string(TimestepSampling s);

/// Continuous times in (0, 1) drawn from (seed, kTimestep, step).
std::vector<double> sample_timesteps(TimestepSampling kind, std::size_t batch, std::uint64_t seed,
                                     std::uint64_t step = 0);
/// Integer DDPM indices, uniform over [0, T).
std::vector<double> sample_timestep_indices(std::size_t T, std::size_t batch, std::uint64_t seed,
                                            std::uint64_t step = 0);

/// Standard normal tensor drawn from (seed, stream, step).
template <typename T>
Array<T> gaussian(const Shape& shape, std::uint64_t seed, Stream stream, std::uint64_t step = 0);

/// uncond + w * (cond - uncond).
template <typename T>
Array<T> cfg_combine(const Array<T>& pred_cond, const Array<T>& pred_uncond, double w);

struct SamplerConfig {
  std::size_t steps = 50;
  double cfg_scale = 1.0;
  Objective objective = Objective::kRF;
  /// DDPM only: skip the ancestral noise (deterministic eta = 0 update).
  bool deterministic = false;

  void validate() const;
};

/// Network call used by the samplers. `t` is in schedule units (one per
/// sample); `cond_mask` marks samples that take the conditional branch.
template <typename T>
using Denoiser = std::function<Array<T>(const Array<T>& x, std::span<const double> t, std::span<const int> labels,
                                        const std::vector<std::uint8_t>& cond_mask)>;

/// One guided prediction. With w == 1 the batch is evaluated once with every
/// sample conditional. Otherwise the batch is concatenated with a null-label
/// copy, evaluated with mask [1..1, 0..0], and combined.
template <typename T>
Array<T> guided_prediction(const Denoiser<T>& model, const Array<T>& x, std::span<const double> t,
                           std::span<const int> labels, double w, int null_label);

/// Euler integration of the velocity field from t=1 (pure noise) to t=0.
template <typename T>
Array<T> rf_euler_sample(const Denoiser<T>& model, std::span<const int> labels, const Shape& sample_shape,
                         const SamplerConfig& cfg, int null_label, std::uint64_t seed);

/// Ancestral sampling on an evenly respaced subset of the schedule, using the
/// posterior variance of the respaced chain.
template <typename T>
Array<T> ddpm_sample(const Denoiser<T>& model, const Schedule& schedule, std::span<const int> labels,
                     const Shape& sample_shape, const SamplerConfig& cfg, int null_label, std::uint64_t seed);

/// Schedule indices visited by ddpm_sample, highest first.
std::vector<std::size_t> respaced_indices(std::size_t T, std::size_t steps);

}  // namespace promoe
