#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "promoe/array.hpp"

namespace promoe {

/// Oriented sinusoidal gratings. The superclass picks the orientation
/// theta_s = s * pi / N_c; the class within its superclass picks the spatial
/// frequency (cycles per image width).
struct SynthSpec {
  std::size_t num_classes = 8;
  std::size_t num_superclasses = 4;
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  double amplitude = 0.7;
  double base_frequency = 2.0;
  double frequency_step = 1.5;
  double phase = 0.0;
  double noise_std = 0.1;
  bool hflip = false;
  std::uint64_t seed = 0;

  std::size_t classes_per_superclass() const { return num_classes / num_superclasses; }
  int superclass_of(int label) const { return label / static_cast<int>(classes_per_superclass()); }
  double orientation(int label) const;
  double frequency(int label) const;
  void validate() const;
};

struct SynthBatch {
  Array<float> images;  // B x 1 x H x W, values in [-1, 1]
  std::vector<int> labels;
  std::vector<int> superclass;
};

/// Noise-free pattern of one class, H x W.
Array<double> class_template(const SynthSpec& spec, int label);

/// Pure function of (spec, step). Labels uniform over classes.
SynthBatch generate_batch(const SynthSpec& spec, std::size_t batch, std::uint64_t step);

/// Index of the template with the largest Pearson correlation; ties go to the
/// lowest index. Images with zero variance score 0 against every template.
std::vector<int> oracle_classify(const Array<float>& images, const SynthSpec& spec);

/// Fraction of predictions equal to the labels (0 for an empty batch).
double oracle_accuracy(const Array<float>& images, const std::vector<int>& labels, const SynthSpec& spec);

}  // namespace promoe
