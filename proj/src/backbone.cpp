#include "promoe/backbone.hpp"

#include <cmath>

namespace promoe {

void MiniDiTConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("model: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                      std::to_string(patch_size));
  }
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("model: hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (hidden % 2 != 0) throw ConfigError("model: hidden must be even for sinusoidal embeddings");
  if (num_classes == 0) throw ConfigError("model: num_classes must be positive");
  if (label_dropout_prob < 0.0 || label_dropout_prob > 1.0) throw ConfigError("model: label_dropout_prob outside [0,1]");
  if (variant != LayerVariant::kDense && variant != LayerVariant::kClassifier) layer.validate();
}

template <typename T>
Array<T> patchify(const Array<T>& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) || images.dim(2) % patch != 0) {
    throw ShapeError("patchify: expected square [B x C x H x W] images, got " + shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0), c = images.dim(1), hw = images.dim(2), g = hw / patch;
  const std::size_t pd = patch * patch * c;
  Array<T> tokens({b * g * g, pd});
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
          const std::size_t tok = s * g * g + (y / patch) * g + (x / patch);
          const std::size_t feat = (ch * patch + y % patch) * patch + x % patch;
          tokens[tok * pd + feat] = images[((s * c + ch) * hw + y) * hw + x];
        }
  return tokens;
}

std::vector<std::size_t> unpatchify_index(std::size_t batch, std::size_t channels, std::size_t image,
                                          std::size_t patch) {
  const std::size_t g = image / patch, pd = patch * patch * channels;
  std::vector<std::size_t> map(batch * channels * image * image);
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t y = 0; y < image; ++y)
        for (std::size_t x = 0; x < image; ++x) {
          const std::size_t tok = s * g * g + (y / patch) * g + (x / patch);
          const std::size_t feat = (ch * patch + y % patch) * patch + x % patch;
          map[((s * channels + ch) * image + y) * image + x] = tok * pd + feat;
        }
  return map;
}

template <typename T>
Array<T> timestep_features(std::span<const double> t, std::size_t dim) {
  const std::size_t half = dim / 2;
  Array<T> f({t.size(), dim});
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      f.at(b, i) = static_cast<T>(std::cos(t[b] * freq));
      f.at(b, half + i) = static_cast<T>(std::sin(t[b] * freq));
    }
  return f;
}

namespace {

template <typename T>
Parameter<T> uniform_param(const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed,
                           std::uint64_t key) {
  Rng rng(seed, Stream::kInit, key);
  Array<T> a(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : a.vec()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  return Parameter<T>(name, std::move(a));
}

template <typename T>
Parameter<T> normal_param(const std::string& name, Shape shape, double stddev, std::uint64_t seed, std::uint64_t key) {
  Rng rng(seed, Stream::kInit, key);
  Array<T> a(std::move(shape));
  for (auto& v : a.vec()) v = static_cast<T>(stddev * rng.normal());
  return Parameter<T>(name, std::move(a));
}

template <typename T>
Parameter<T> const_param(const std::string& name, Shape shape, T value) {
  return Parameter<T>(name, Array<T>(std::move(shape), value));
}

template <typename T>
Var<T> affine_norm(Tape<T>& tape, Var<T> h, Parameter<T>& g, Parameter<T>& b) {
  return add(mul(layer_norm(h, 1), tape.leaf(g)), tape.leaf(b));
}

template <typename T>
Var<T> linear(Tape<T>& tape, Var<T> x, Parameter<T>& w, Parameter<T>& b) {
  return add(matmul(x, tape.leaf(w)), tape.leaf(b));
}

// Block-local init keys keep each parameter's stream fixed when depth changes.
constexpr std::uint64_t kBlockKeyStride = 10000;

}  // namespace

template <typename T>
MiniDiT<T>::MiniDiT(const MiniDiTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden, pd = cfg_.patch_dim(), L = cfg_.tokens();
  patch_w_ = uniform_param<T>("patch_embed.w", {pd, d}, pd, seed, 1);
  patch_b_ = const_param<T>("patch_embed.b", {d}, T{0});
  time_w1_ = uniform_param<T>("time_embed.w1", {d, d}, d, seed, 2);
  time_b1_ = const_param<T>("time_embed.b1", {d}, T{0});
  time_w2_ = uniform_param<T>("time_embed.w2", {d, d}, d, seed, 3);
  time_b2_ = const_param<T>("time_embed.b2", {d}, T{0});
  class_embed_ = normal_param<T>("class_embed", {cfg_.num_classes + 1, d}, 0.02, seed, 4);
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const std::uint64_t key = kBlockKeyStride * (i + 1);
    Block blk;
    blk.ln1_g = const_param<T>(p + "ln1.g", {d}, T{1});
    blk.ln1_b = const_param<T>(p + "ln1.b", {d}, T{0});
    blk.qkv_w = uniform_param<T>(p + "attn.qkv.w", {d, 3 * d}, d, seed, key + 1);
    blk.qkv_b = const_param<T>(p + "attn.qkv.b", {3 * d}, T{0});
    blk.proj_w = uniform_param<T>(p + "attn.proj.w", {d, d}, d, seed, key + 2);
    blk.proj_b = const_param<T>(p + "attn.proj.b", {d}, T{0});
    blk.ln2_g = const_param<T>(p + "ln2.g", {d}, T{1});
    blk.ln2_b = const_param<T>(p + "ln2.b", {d}, T{0});
    blocks_.push_back(std::move(blk));
    ffn_.emplace_back(cfg_.variant, cfg_.layer, d, cfg_.num_superclasses, seed, key + 100, p + "ffn.");
  }
  final_g_ = const_param<T>("final_norm.g", {d}, T{1});
  final_b_ = const_param<T>("final_norm.b", {d}, T{0});
  head_w_ = const_param<T>("head.w", {d, pd}, T{0});
  head_b_ = const_param<T>("head.b", {pd}, T{0});

  pos_ = Array<T>({L, d});
  const std::size_t half = d / 2;
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      pos_.at(l, 2 * i) = static_cast<T>(std::sin(static_cast<double>(l) * freq));
      pos_.at(l, 2 * i + 1) = static_cast<T>(std::cos(static_cast<double>(l) * freq));
    }
}

template <typename T>
Var<T> MiniDiT<T>::attention(Tape<T>& tape, Block& blk, Var<T> h, std::size_t batch) {
  const std::size_t d = cfg_.hidden, L = cfg_.tokens(), H = cfg_.heads, dh = d / H;
  Var<T> qkv = linear(tape, affine_norm(tape, h, blk.ln1_g, blk.ln1_b), blk.qkv_w, blk.qkv_b);
  auto split = [&](std::size_t which) {
    std::vector<std::size_t> src(batch * H * L * dh);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t hh = 0; hh < H; ++hh)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t j = 0; j < dh; ++j)
            src[((b * H + hh) * L + l) * dh + j] = (b * L + l) * 3 * d + which * d + hh * dh + j;
    return reindex(qkv, Shape{batch * H, L, dh}, std::move(src));
  };
  Var<T> q = split(0), k = split(1), v = split(2);
  Var<T> att = softmax(scale(bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)))), 2);
  Var<T> o = bmm(att, v);
  std::vector<std::size_t> merge(batch * L * d);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t hh = 0; hh < H; ++hh)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < dh; ++j) merge[(b * L + l) * d + hh * dh + j] = ((b * H + hh) * L + l) * dh + j;
  Var<T> merged = reindex(o, Shape{batch * L, d}, std::move(merge));
  return linear(tape, merged, blk.proj_w, blk.proj_b);
}

template <typename T>
typename MiniDiT<T>::Output MiniDiT<T>::forward(Tape<T>& tape, const Array<T>& x_t, std::span<const double> t,
                                                std::span<const int> labels, const ForwardOptions& opts) {
  const std::size_t B = x_t.rank() == 4 ? x_t.dim(0) : 0;
  const std::size_t L = cfg_.tokens(), d = cfg_.hidden;
  if (x_t.rank() != 4 || x_t.dim(1) != cfg_.channels || x_t.dim(2) != cfg_.image_size ||
      x_t.dim(3) != cfg_.image_size) {
    throw ShapeError("denoise: input " + shape_str(x_t.shape()) + " does not match model image shape");
  }
  if (t.size() != B || labels.size() != B) throw ShapeError("denoise: need one timestep and one label per sample");
  for (int y : labels)
    if (y < 0 || y > null_label()) throw ContractError("denoise: label " + std::to_string(y) + " out of range");

  Var<T> h = linear(tape, tape.constant(patchify(x_t, cfg_.patch_size)), patch_w_, patch_b_);

  // Conditioning: fixed positions plus per-sample time and class embeddings.
  Array<T> pos({B * L, d});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(pos_.ptr(), L * d, pos.ptr() + b * L * d);
  Var<T> temb = linear(tape, gelu(linear(tape, tape.constant(timestep_features<T>(t, d)), time_w1_, time_b1_)),
                       time_w2_, time_b2_);
  std::vector<std::size_t> label_rows(labels.begin(), labels.end());
  Var<T> cond = add(temb, index_rows(tape.leaf(class_embed_), label_rows));
  std::vector<std::size_t> expand(B * L);
  for (std::size_t i = 0; i < B * L; ++i) expand[i] = i / L;
  h = add(add(h, tape.constant(std::move(pos))), index_rows(cond, expand));

  TokenPartition part;
  if (opts.cond_mask != nullptr) {
    if (opts.cond_mask->size() != B) throw ShapeError("denoise: cond_mask must have one entry per sample");
    part = partition_from_batch_mask(*opts.cond_mask, L);
  } else {
    part = partition_by_condition(labels, null_label(), L);
  }
  LayerContext ctx{&part, opts.superclass, opts.train, B, L};

  Output out;
  Var<T> aux = tape.constant(Array<T>::scalar(T{0}));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = add(h, attention(tape, blocks_[i], h, B));
    Var<T> a = affine_norm(tape, h, blocks_[i].ln2_g, blocks_[i].ln2_b);
    if (opts.capture_ffn_inputs) out.ffn_inputs.push_back(a.value());
    LayerOutput<T> f = ffn_[i].forward(a, ctx);
    h = add(h, f.output);
    aux = add(aux, f.aux_loss);
    out.rcl += f.rcl;
    out.lb += f.lb;
    out.cls += f.cls;
    if (f.log) {
      f.log->layer = i;
      out.logs.push_back(std::move(*f.log));
    }
  }
  Var<T> y = linear(tape, affine_norm(tape, h, final_g_, final_b_), head_w_, head_b_);
  out.prediction = reindex(y, x_t.shape(), unpatchify_index(B, cfg_.channels, cfg_.image_size, cfg_.patch_size));
  out.aux_loss = aux;
  return out;
}

template <typename T>
Array<T> MiniDiT<T>::denoise(const Array<T>& x_t, std::span<const double> t, std::span<const int> labels,
                             const std::vector<std::uint8_t>* cond_mask, std::vector<RoutingLog>* logs) {
  Tape<T> tape;
  ForwardOptions opts;
  opts.cond_mask = cond_mask;
  Output out = forward(tape, x_t, t, labels, opts);
  if (logs) *logs = std::move(out.logs);
  return out.prediction.value();
}

template <typename T>
void MiniDiT<T>::for_each_parameter(const std::function<void(Parameter<T>&)>& fn) {
  for (auto* p : {&patch_w_, &patch_b_, &time_w1_, &time_b1_, &time_w2_, &time_b2_, &class_embed_}) fn(*p);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    for (auto* p : {&b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.ln2_g, &b.ln2_b}) fn(*p);
    ffn_[i].for_each_parameter(fn);
  }
  for (auto* p : {&final_g_, &final_b_, &head_w_, &head_b_}) fn(*p);
}

template <typename T>
std::vector<Parameter<T>*> MiniDiT<T>::parameters() {
  std::vector<Parameter<T>*> ps;
  for_each_parameter([&](Parameter<T>& p) { ps.push_back(&p); });
  return ps;
}

std::vector<int> apply_label_dropout(std::span<const int> labels, double prob, int null_label, std::uint64_t seed,
                                     std::uint64_t step) {
  if (prob < 0.0 || prob > 1.0) throw ConfigError("label dropout probability outside [0,1]");
  Rng rng(seed, Stream::kDropout, step);
  std::vector<int> out(labels.begin(), labels.end());
  for (auto& y : out)
    if (rng.uniform() < prob) y = null_label;
  return out;
}

template Array<float> patchify<float>(const Array<float>&, std::size_t);
template Array<double> patchify<double>(const Array<double>&, std::size_t);
template Array<float> timestep_features<float>(std::span<const double>, std::size_t);
template Array<double> timestep_features<double>(std::span<const double>, std::size_t);
template class MiniDiT<float>;
template class MiniDiT<double>;

}  // namespace promoe
