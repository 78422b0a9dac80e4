#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "promoe/moe_layer.hpp"

namespace promoe {

struct MiniDiTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t depth = 4;
  std::size_t hidden = 64;
  std::size_t heads = 1;
  LayerVariant variant = LayerVariant::kProMoE;
  ProMoELayerConfig layer;
  std::size_t num_classes = 8;
  std::size_t num_superclasses = 4;
  double label_dropout_prob = 0.1;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

/// Per-call switches for MiniDiT::forward.
struct ForwardOptions {
  bool train = false;
  /// Inference-time batch mask: nonzero marks samples treated as conditional.
  /// When absent, samples whose label is the null label are unconditional.
  const std::vector<std::uint8_t>* cond_mask = nullptr;
  /// Superclass per sample (-1 when unlabeled); used by the classifier router.
  std::span<const int> superclass;
  /// Keep each block's FFN input tokens (for clustering metrics).
  bool capture_ffn_inputs = false;
};

/// [B x C x H x W] -> [(B*L) x (p*p*C)], tokens in raster order.
template <typename T>
Array<T> patchify(const Array<T>& images, std::size_t patch);
/// Inverse of patchify as a flat index map: image.flat[i] = tokens.flat[map[i]].
std::vector<std::size_t> unpatchify_index(std::size_t batch, std::size_t channels, std::size_t image, std::size_t patch);

/// Sinusoidal features [cos(t f_i), sin(t f_i)], f_i = 10000^(-i / (dim/2)).
template <typename T>
Array<T> timestep_features(std::span<const double> t, std::size_t dim);

/// Small DiT: patch embedding, additive time and class conditioning, pre-LN
/// attention + FFN/MoE blocks, linear head. Label `num_classes` is the null label.
template <typename T>
class MiniDiT {
 public:
  struct Output {
    Var<T> prediction;  // B x C x H x W
    Var<T> aux_loss;
    double rcl = 0.0;
    double lb = 0.0;
    double cls = 0.0;
    std::vector<RoutingLog> logs;
    std::vector<Array<T>> ffn_inputs;
  };

  MiniDiT(const MiniDiTConfig& cfg, std::uint64_t seed);

  /// `t` is in model time units (see Schedule::model_time).
  Output forward(Tape<T>& tape, const Array<T>& x_t, std::span<const double> t, std::span<const int> labels,
                 const ForwardOptions& opts = {});

  /// Inference forward without gradients.
  Array<T> denoise(const Array<T>& x_t, std::span<const double> t, std::span<const int> labels,
                   const std::vector<std::uint8_t>* cond_mask = nullptr, std::vector<RoutingLog>* logs = nullptr);

  void for_each_parameter(const std::function<void(Parameter<T>&)>& fn);
  std::vector<Parameter<T>*> parameters();

  const MiniDiTConfig& config() const { return cfg_; }
  int null_label() const { return static_cast<int>(cfg_.num_classes); }
  std::vector<FeedForwardSlot<T>>& slots() { return ffn_; }
  const std::vector<FeedForwardSlot<T>>& slots() const { return ffn_; }

 private:
  struct Block {
    Parameter<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b;
  };

  Var<T> attention(Tape<T>& tape, Block& blk, Var<T> h, std::size_t batch);

  MiniDiTConfig cfg_;
  Parameter<T> patch_w_, patch_b_;
  Parameter<T> time_w1_, time_b1_, time_w2_, time_b2_;
  Parameter<T> class_embed_;
  std::vector<Block> blocks_;
  std::vector<FeedForwardSlot<T>> ffn_;
  Parameter<T> final_g_, final_b_, head_w_, head_b_;
  Array<T> pos_;  // L x D fixed sinusoidal
};

/// Each label independently replaced by `null_label` with probability `prob`,
/// drawn from (seed, kDropout, step).
std::vector<int> apply_label_dropout(std::span<const int> labels, double prob, int null_label, std::uint64_t seed,
                                     std::uint64_t step = 0);

}  // namespace promoe
