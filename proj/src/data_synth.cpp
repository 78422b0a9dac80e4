#include "promoe/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "promoe/error.hpp"
#include "promoe/rng.hpp"

namespace promoe {

void SynthSpec::validate() const {
  if (num_classes == 0 || num_superclasses == 0 || num_classes % num_superclasses != 0) {
    throw ConfigError("data: num_classes " + std::to_string(num_classes) + " not divisible by num_superclasses " +
                      std::to_string(num_superclasses));
  }
  if (patch_size == 0 || image_size % patch_size != 0) throw ConfigError("data: image_size not divisible by patch");
  if (noise_std < 0.0) throw ConfigError("data: noise_std must be >= 0");
}

double SynthSpec::orientation(int label) const {
  return static_cast<double>(superclass_of(label)) * std::numbers::pi / static_cast<double>(num_superclasses);
}

double SynthSpec::frequency(int label) const {
  const int within = label % static_cast<int>(classes_per_superclass());
  return base_frequency + frequency_step * static_cast<double>(within);
}

Array<double> class_template(const SynthSpec& spec, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= spec.num_classes) {
    throw ContractError("class_template: label " + std::to_string(label) + " out of range");
  }
  const std::size_t n = spec.image_size;
  const double c = 0.5 * static_cast<double>(n - 1);
  const double th = spec.orientation(label), f = spec.frequency(label);
  Array<double> img({n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double u = (static_cast<double>(x) - c) * std::cos(th) + (static_cast<double>(y) - c) * std::sin(th);
      img.at(y, x) = spec.amplitude * std::cos(2.0 * std::numbers::pi * f * u / static_cast<double>(n) + spec.phase);
    }
  return img;
}

SynthBatch generate_batch(const SynthSpec& spec, std::size_t batch, std::uint64_t step) {
  spec.validate();
  const std::size_t n = spec.image_size;
  std::vector<Array<double>> templates;
  for (std::size_t k = 0; k < spec.num_classes; ++k) templates.push_back(class_template(spec, static_cast<int>(k)));

  Rng rng(spec.seed, Stream::kData, step);
  SynthBatch out;
  out.images = Array<float>({batch, 1, n, n});
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = static_cast<int>(rng.below(spec.num_classes));
    const bool flip = spec.hflip && rng.uniform() < 0.5;
    out.labels.push_back(y);
    out.superclass.push_back(spec.superclass_of(y));
    const Array<double>& t = templates[static_cast<std::size_t>(y)];
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        double v = t.at(r, flip ? n - 1 - c : c);
        if (spec.noise_std > 0.0) v += spec.noise_std * rng.normal();
        out.images[(b * n + r) * n + c] = static_cast<float>(std::clamp(v, -1.0, 1.0));
      }
  }
  return out;
}

namespace {

// Centers and scales to unit norm; all-zero when the input is constant.
std::vector<double> standardize(const double* v, std::size_t n) {
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += v[i];
  mean /= static_cast<double>(n);
  std::vector<double> z(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = v[i] - mean;
    ss += z[i] * z[i];
  }
  const double norm = std::sqrt(ss);
  for (auto& x : z) x = norm > 0.0 ? x / norm : 0.0;
  return z;
}

}  // namespace

std::vector<int> oracle_classify(const Array<float>& images, const SynthSpec& spec) {
  spec.validate();
  const std::size_t n = spec.image_size, px = n * n;
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != n || images.dim(3) != n) {
    throw ShapeError("oracle_classify: expected [B x 1 x " + std::to_string(n) + " x " + std::to_string(n) +
                     "], got " + shape_str(images.shape()));
  }
  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Array<double> t = class_template(spec, static_cast<int>(k));
    templates.push_back(standardize(t.ptr(), px));
  }
  std::vector<int> pred(images.dim(0));
  std::vector<double> img(px);
  for (std::size_t b = 0; b < pred.size(); ++b) {
    for (std::size_t i = 0; i < px; ++i) img[i] = images[b * px + i];
    const std::vector<double> z = standardize(img.data(), px);
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < templates.size(); ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < px; ++i) s += z[i] * templates[k][i];
      if (s > best_score) {
        best_score = s;
        best = static_cast<int>(k);
      }
    }
    pred[b] = best;
  }
  return pred;
}

double oracle_accuracy(const Array<float>& images, const std::vector<int>& labels, const SynthSpec& spec) {
  if (labels.empty()) return 0.0;
  const std::vector<int> pred = oracle_classify(images, spec);
  if (pred.size() != labels.size()) throw ShapeError("oracle_accuracy: label count does not match batch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace promoe
