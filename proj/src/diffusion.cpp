#include "promoe/diffusion.hpp"

#include <cmath>
#include <string>

#include "promoe/error.hpp"
#include "promoe/rng.hpp"

namespace promoe {

Schedule Schedule::ddpm(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw ConfigError("schedule: DDPM needs at least one step");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  Schedule s;
  s.kind = Objective::kDDPM;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(steps);
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - s.betas[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

Schedule Schedule::rf() {
  Schedule s;
  s.kind = Objective::kRF;
  return s;
}

Schedule Schedule::for_objective(Objective kind) { return kind == Objective::kDDPM ? ddpm() : rf(); }

void Schedule::check_time(double t) const {
  if (kind == Objective::kRF) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("schedule: RF time " + std::to_string(t) + " outside [0,1]");
    return;
  }
  if (!(t >= 0.0 && t < static_cast<double>(steps)) || t != std::floor(t)) {
    throw ConfigError("schedule: DDPM index " + std::to_string(t) + " not an integer in [0," +
                      std::to_string(steps) + ")");
  }
}

double Schedule::alpha(double t) const {
  check_time(t);
  if (kind == Objective::kRF) return 1.0 - t;
  return std::sqrt(alpha_bar[static_cast<std::size_t>(t)]);
}

double Schedule::sigma(double t) const {
  check_time(t);
  if (kind == Objective::kRF) return t;
  return std::sqrt(1.0 - alpha_bar[static_cast<std::size_t>(t)]);
}

double Schedule::model_time(double t) const { return kind == Objective::kRF ? 1000.0 * t : t; }

template <typename T>
Array<T> add_noise(const Array<T>& x0, const Array<T>& eps, std::span<const double> t, const Schedule& schedule) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("add_noise: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  if (x0.rank() == 0 || t.size() != x0.dim(0)) throw ShapeError("add_noise: need one time per sample");
  const std::size_t per = x0.size() / x0.dim(0);
  Array<T> out(x0.shape());
  for (std::size_t b = 0; b < t.size(); ++b) {
    const double a = schedule.alpha(t[b]), s = schedule.sigma(t[b]);
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      out[i] = static_cast<T>(a * static_cast<double>(x0[i]) + s * static_cast<double>(eps[i]));
    }
  }
  return out;
}

TimestepSampling parse_timestep_sampling(const std::string& s) {
  if (s == "uniform") return TimestepSampling::kUniform;
  if (s == "logit_normal") return TimestepSampling::kLogitNormal;
  throw ConfigError("unknown timestep sampling '" + s + "' (expected uniform|logit_normal)");
}

std::string to_string(TimestepSampling s) { return s == TimestepSampling::kUniform ? "uniform" : "logit_normal"; }

std::vector<double> sample_timesteps(TimestepSampling kind, std::size_t batch, std::uint64_t seed,
                                     std::uint64_t step) {
  Rng rng(seed, Stream::kTimestep, step);
  std::vector<double> t(batch);
  for (auto& v : t) {
    v = kind == TimestepSampling::kUniform ? rng.uniform() : 1.0 / (1.0 + std::exp(-rng.normal()));
  }
  return t;
}

std::vector<double> sample_timestep_indices(std::size_t T, std::size_t batch, std::uint64_t seed,
                                            std::uint64_t step) {
  Rng rng(seed, Stream::kTimestep, step);
  std::vector<double> t(batch);
  for (auto& v : t) v = static_cast<double>(rng.below(T));
  return t;
}

template <typename T>
Array<T> gaussian(const Shape& shape, std::uint64_t seed, Stream stream, std::uint64_t step) {
  Rng rng(seed, stream, step);
  Array<T> a(shape);
  for (auto& v : a.vec()) v = static_cast<T>(rng.normal());
  return a;
}

template <typename T>
Array<T> cfg_combine(const Array<T>& pred_cond, const Array<T>& pred_uncond, double w) {
  if (pred_cond.shape() != pred_uncond.shape()) {
    throw ShapeError("cfg_combine: " + shape_str(pred_cond.shape()) + " vs " + shape_str(pred_uncond.shape()));
  }
  Array<T> out(pred_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(pred_uncond[i]);
    out[i] = static_cast<T>(u + w * (static_cast<double>(pred_cond[i]) - u));
  }
  return out;
}

void SamplerConfig::validate() const {
  if (steps == 0) throw ConfigError("sampler: steps must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ConfigError("sampler: cfg_scale must be >= 0");
}

template <typename T>
Array<T> guided_prediction(const Denoiser<T>& model, const Array<T>& x, std::span<const double> t,
                           std::span<const int> labels, double w, int null_label) {
  const std::size_t B = labels.size();
  if (w == 1.0) return model(x, t, labels, std::vector<std::uint8_t>(B, 1));

  Shape doubled = x.shape();
  doubled[0] *= 2;
  Array<T> xx(doubled);
  std::copy(x.data().begin(), x.data().end(), xx.ptr());
  std::copy(x.data().begin(), x.data().end(), xx.ptr() + x.size());
  std::vector<double> tt(t.begin(), t.end());
  tt.insert(tt.end(), t.begin(), t.end());
  std::vector<int> yy(labels.begin(), labels.end());
  yy.resize(2 * B, null_label);
  std::vector<std::uint8_t> mask(2 * B, 0);
  std::fill_n(mask.begin(), B, 1);

  Array<T> both = model(xx, tt, yy, mask);
  Array<T> cond(x.shape()), uncond(x.shape());
  std::copy_n(both.ptr(), x.size(), cond.ptr());
  std::copy_n(both.ptr() + x.size(), x.size(), uncond.ptr());
  return cfg_combine(cond, uncond, w);
}

namespace {

Shape batch_shape(std::size_t n, const Shape& sample_shape) {
  Shape s{n};
  s.insert(s.end(), sample_shape.begin(), sample_shape.end());
  return s;
}

}  // namespace

template <typename T>
Array<T> rf_euler_sample(const Denoiser<T>& model, std::span<const int> labels, const Shape& sample_shape,
                         const SamplerConfig& cfg, int null_label, std::uint64_t seed) {
  cfg.validate();
  const std::size_t B = labels.size();
  Array<T> x = gaussian<T>(batch_shape(B, sample_shape), seed, Stream::kSampler, 0);
  if (B == 0) return x;
  const double n = static_cast<double>(cfg.steps);
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    const double t_cur = 1.0 - static_cast<double>(i) / n;
    const double t_next = 1.0 - static_cast<double>(i + 1) / n;
    std::vector<double> t(B, t_cur);
    Array<T> v = guided_prediction(model, x, t, labels, cfg.cfg_scale, null_label);
    const double dt = t_cur - t_next;
    for (std::size_t j = 0; j < x.size(); ++j) {
      x[j] = static_cast<T>(static_cast<double>(x[j]) - dt * static_cast<double>(v[j]));
    }
  }
  return x;
}

std::vector<std::size_t> respaced_indices(std::size_t T, std::size_t steps) {
  if (steps == 0 || steps > T) {
    throw ConfigError("respacing: steps " + std::to_string(steps) + " must be in [1," + std::to_string(T) + "]");
  }
  std::vector<std::size_t> idx(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    // Evenly spaced from T-1 down to 0; a single step lands on T-1.
    const double pos = steps == 1 ? 0.0 : static_cast<double>(k) * static_cast<double>(T - 1) /
                                              static_cast<double>(steps - 1);
    idx[steps - 1 - k] = static_cast<std::size_t>(std::llround(pos));
  }
  if (steps == 1) idx[0] = T - 1;
  return idx;
}

template <typename T>
Array<T> ddpm_sample(const Denoiser<T>& model, const Schedule& schedule, std::span<const int> labels,
                     const Shape& sample_shape, const SamplerConfig& cfg, int null_label, std::uint64_t seed) {
  cfg.validate();
  if (schedule.kind != Objective::kDDPM) throw ConfigError("ddpm_sample: schedule is not DDPM");
  const std::size_t B = labels.size();
  Array<T> x = gaussian<T>(batch_shape(B, sample_shape), seed, Stream::kSampler, 0);
  if (B == 0) return x;
  const std::vector<std::size_t> idx = respaced_indices(schedule.steps, cfg.steps);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double ab = schedule.alpha_bar[idx[k]];
    const double ab_prev = k + 1 < idx.size() ? schedule.alpha_bar[idx[k + 1]] : 1.0;
    std::vector<double> t(B, static_cast<double>(idx[k]));
    Array<T> eps = guided_prediction(model, x, t, labels, cfg.cfg_scale, null_label);

    const double beta = 1.0 - ab / ab_prev;
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
    const bool last = k + 1 == idx.size();
    Array<T> noise;
    if (!cfg.deterministic && !last) noise = gaussian<T>(x.shape(), seed, Stream::kSampler, k + 1);
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double xt = static_cast<double>(x[j]), e = static_cast<double>(eps[j]);
      const double x0 = (xt - std::sqrt(1.0 - ab) * e) / std::sqrt(ab);
      double next;
      if (cfg.deterministic) {
        next = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * e;
      } else {
        next = c0 * x0 + ct * xt;
        if (!last) next += std::sqrt(var) * static_cast<double>(noise[j]);
      }
      x[j] = static_cast<T>(next);
    }
  }
  return x;
}

#define PROMOE_INSTANTIATE(T)                                                                                    \
  template Array<T> add_noise<T>(const Array<T>&, const Array<T>&, std::span<const double>, const Schedule&);    \
  template Array<T> gaussian<T>(const Shape&, std::uint64_t, Stream, std::uint64_t);                             \
  template Array<T> cfg_combine<T>(const Array<T>&, const Array<T>&, double);                                    \
  template Array<T> guided_prediction<T>(const Denoiser<T>&, const Array<T>&, std::span<const double>,           \
                                         std::span<const int>, double, int);                                     \
  template Array<T> rf_euler_sample<T>(const Denoiser<T>&, std::span<const int>, const Shape&,                   \
                                       const SamplerConfig&, int, std::uint64_t);                                \
  template Array<T> ddpm_sample<T>(const Denoiser<T>&, const Schedule&, std::span<const int>, const Shape&,      \
                                   const SamplerConfig&, int, std::uint64_t);

PROMOE_INSTANTIATE(float)
PROMOE_INSTANTIATE(double)

}  // namespace promoe
