#pragma once

// CCAT: per-slice CNN features -> spatial tokens -> within-slice transformer
// (mean-pooled to one vector per slice) -> between-slice transformer over the
// slice sequence (mean-pooled to one vector per scan) -> three-layer MLP.
//
// Token mixers are pre-norm multi-head attention blocks, or gMLP spatial
// gating blocks when heads == 0.

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "ctscan/augment.hpp"
#include "ctscan/error.hpp"
#include "ctscan/ops.hpp"
#include "ctscan/rng.hpp"
#include "ctscan/sampling.hpp"
#include "ctscan/tensor.hpp"
#include "ctscan/volume.hpp"

namespace ctscan {

inline constexpr double kLeakySlope = 0.01;

/// Spatial size after one 3x3, stride-2, padding-1 convolution.
inline std::size_t conv_stage_output(std::size_t in) { return (in + 2 - 3) / 2 + 1; }

struct CcatConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::vector<std::size_t> backbone_widths{8, 16, 32, 32};
  std::size_t d_model = 128;
  std::size_t heads = 0;  // 0 selects gMLP blocks
  std::size_t depth = 2;  // blocks per transformer
  std::size_t slices = 16;
  std::size_t slice_stride = 2;
  bool spatial_pe = true;
  bool sequence_pe = true;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 32;
  bool standardize_input = true;  // z-score the sampled stack before the backbone

  std::size_t channels() const { return backbone_widths.back(); }
  std::size_t feature_height() const {
    std::size_t h = input_height;
    for (std::size_t i = 0; i < backbone_widths.size(); ++i) h = conv_stage_output(h);
    return h;
  }
  std::size_t feature_width() const {
    std::size_t w = input_width;
    for (std::size_t i = 0; i < backbone_widths.size(); ++i) w = conv_stage_output(w);
    return w;
  }
  std::size_t tokens() const { return feature_height() * feature_width(); }

  void validate() const {
    if (input_height < 1 || input_width < 1) throw ConfigError("ccat: input size must be >= 1");
    if (backbone_widths.empty()) throw ConfigError("ccat: at least one backbone stage required");
    for (std::size_t w : backbone_widths) {
      if (w == 0) throw ConfigError("ccat: backbone widths must be >= 1");
    }
    if (d_model < 2) throw ConfigError("ccat: d_model must be >= 2");
    if (heads != 0 && d_model % heads != 0) {
      throw ConfigError("ccat: d_model (" + std::to_string(d_model) + ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    }
    if (slices < 1) throw ConfigError("ccat: slices (L_s) must be >= 1");
    if (slice_stride < 1) throw ConfigError("ccat: slice stride (L_freq) must be >= 1");
    if (hidden1 < 1 || hidden2 < 1) throw ConfigError("ccat: classifier hidden dims must be >= 1");
  }
};

template <class T>
struct LinearParams {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

template <class T>
struct NormParams {
  Tensor<T> gain;
  Tensor<T> bias;
};

template <class T>
struct ConvParams {
  Tensor<T> kernels;  // [out x in x 3 x 3]
  Tensor<T> bias;
};

template <class T>
struct AttentionBlockParams {
  NormParams<T> norm1;
  LinearParams<T> qkv;  // d -> 3d, packed as [q | k | v]
  LinearParams<T> out;
  NormParams<T> norm2;
  LinearParams<T> ffn_in;  // d -> 4d
  LinearParams<T> ffn_out;
};

template <class T>
struct GmlpBlockParams {
  NormParams<T> norm;
  LinearParams<T> proj_in;   // d -> 4d
  Tensor<T> spatial_weight;  // [n x n] token mixing
  Tensor<T> spatial_bias;    // [n x 1]
  LinearParams<T> proj_out;  // 2d -> d
};

template <class T>
using BlockParams = std::variant<AttentionBlockParams<T>, GmlpBlockParams<T>>;

template <class T>
struct CcatParams {
  std::vector<ConvParams<T>> backbone;
  LinearParams<T> token_proj;  // c -> d
  std::vector<BlockParams<T>> wst;
  std::vector<BlockParams<T>> bst;
  std::array<LinearParams<T>, 3> classifier;
};

// Parameter traversal. `fn(name, tensor&)` may replace the tensor handle.

template <class T, class F>
void visit_parameters(LinearParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + ".weight", p.weight);
  fn(prefix + ".bias", p.bias);
}

template <class T, class F>
void visit_parameters(NormParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + ".gain", p.gain);
  fn(prefix + ".bias", p.bias);
}

template <class T, class F>
void visit_parameters(ConvParams<T>& p, const std::string& prefix, F&& fn) {
  fn(prefix + ".kernels", p.kernels);
  fn(prefix + ".bias", p.bias);
}

template <class T, class F>
void visit_parameters(BlockParams<T>& block, const std::string& prefix, F&& fn) {
  if (auto* a = std::get_if<AttentionBlockParams<T>>(&block)) {
    visit_parameters(a->norm1, prefix + ".attn.norm1", fn);
    visit_parameters(a->qkv, prefix + ".attn.qkv", fn);
    visit_parameters(a->out, prefix + ".attn.out", fn);
    visit_parameters(a->norm2, prefix + ".attn.norm2", fn);
    visit_parameters(a->ffn_in, prefix + ".attn.ffn_in", fn);
    visit_parameters(a->ffn_out, prefix + ".attn.ffn_out", fn);
  } else {
    auto& g = std::get<GmlpBlockParams<T>>(block);
    visit_parameters(g.norm, prefix + ".gmlp.norm", fn);
    visit_parameters(g.proj_in, prefix + ".gmlp.proj_in", fn);
    fn(prefix + ".gmlp.spatial_weight", g.spatial_weight);
    fn(prefix + ".gmlp.spatial_bias", g.spatial_bias);
    visit_parameters(g.proj_out, prefix + ".gmlp.proj_out", fn);
  }
}

template <class T, class F>
void visit_parameters(CcatParams<T>& p, F&& fn) {
  for (std::size_t i = 0; i < p.backbone.size(); ++i) visit_parameters(p.backbone[i], "backbone." + std::to_string(i), fn);
  visit_parameters(p.token_proj, "tokens", fn);
  for (std::size_t i = 0; i < p.wst.size(); ++i) visit_parameters(p.wst[i], "wst." + std::to_string(i), fn);
  for (std::size_t i = 0; i < p.bst.size(); ++i) visit_parameters(p.bst[i], "bst." + std::to_string(i), fn);
  for (std::size_t i = 0; i < p.classifier.size(); ++i)
    visit_parameters(p.classifier[i], "classifier." + std::to_string(i), fn);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Handles to every parameter, in the fixed traversal order.
template <class T, class Params>
NamedTensors<T> named_parameters(const Params& params) {
  NamedTensors<T> out;
  visit_parameters(const_cast<Params&>(params), [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <class T, class Params>
std::size_t parameter_count(const Params& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters<T>(params)) n += t.numel();
  return n;
}

/// Deep copy whose leaves have (or lack) gradient buffers.
template <class T, class Params>
Params copy_parameters(const Params& params, bool requires_grad) {
  Params out = params;
  visit_parameters(out, [&](const std::string&, Tensor<T>& t) { t = t.detach_copy(requires_grad); });
  return out;
}

template <class T, class Params>
void zero_gradients(Params& params) {
  visit_parameters(params, [](const std::string&, Tensor<T>& t) { t.zero_grad(); });
}

namespace init {

template <class T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <class T>
LinearParams<T> linear(std::size_t in, std::size_t out, Rng& rng, bool zero = false) {
  LinearParams<T> p;
  p.weight = zero ? Tensor<T>::zeros({in, out}, true) : kaiming<T>({in, out}, in, rng);
  p.bias = Tensor<T>::zeros({out}, true);
  return p;
}

template <class T>
NormParams<T> norm(std::size_t d) {
  return {Tensor<T>::filled({d}, T{1}, true), Tensor<T>::zeros({d}, true)};
}

template <class T>
ConvParams<T> conv(std::size_t in, std::size_t out, Rng& rng) {
  return {kaiming<T>({out, in, 3, 3}, in * 9, rng), Tensor<T>::zeros({out}, true)};
}

template <class T>
BlockParams<T> block(std::size_t d, std::size_t heads, std::size_t tokens, Rng& rng) {
  if (heads > 0) {
    AttentionBlockParams<T> a;
    a.norm1 = norm<T>(d);
    a.qkv = linear<T>(d, 3 * d, rng);
    a.out = linear<T>(d, d, rng);
    a.norm2 = norm<T>(d);
    a.ffn_in = linear<T>(d, 4 * d, rng);
    a.ffn_out = linear<T>(4 * d, d, rng);
    return a;
  }
  GmlpBlockParams<T> g;
  g.norm = norm<T>(d);
  g.proj_in = linear<T>(d, 4 * d, rng);
  std::uniform_real_distribution<double> small(-1e-3, 1e-3);
  std::vector<T> s(tokens * tokens);
  for (T& x : s) x = static_cast<T>(small(rng));
  g.spatial_weight = Tensor<T>::from({tokens, tokens}, std::move(s), true);
  g.spatial_bias = Tensor<T>::filled({tokens, 1}, T{1}, true);
  g.proj_out = linear<T>(2 * d, d, rng);
  return g;
}

}  // namespace init

/// Kaiming fan-in initialisation; the last classifier layer starts at zero so
/// an untrained model outputs exactly [0.5, 0.5].
template <class T>
CcatParams<T> init_ccat_params(const CcatConfig& cfg, Rng& rng) {
  cfg.validate();
  CcatParams<T> p;
  std::size_t in = 1;
  for (std::size_t w : cfg.backbone_widths) {
    p.backbone.push_back(init::conv<T>(in, w, rng));
    in = w;
  }
  p.token_proj = init::linear<T>(cfg.channels(), cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.depth; ++i) p.wst.push_back(init::block<T>(cfg.d_model, cfg.heads, cfg.tokens(), rng));
  for (std::size_t i = 0; i < cfg.depth; ++i) p.bst.push_back(init::block<T>(cfg.d_model, cfg.heads, cfg.slices, rng));
  p.classifier[0] = init::linear<T>(cfg.d_model, cfg.hidden1, rng);
  p.classifier[1] = init::linear<T>(cfg.hidden1, cfg.hidden2, rng);
  p.classifier[2] = init::linear<T>(cfg.hidden2, 2, rng, /*zero=*/true);
  return p;
}

// Fixed sinusoidal encodings: channel j uses frequency 10000^(-2 floor(j/2) / dim),
// sine on even channels and cosine on odd ones.
inline double sinusoid(std::size_t pos, std::size_t j, std::size_t dim) {
  const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(dim));
  const double a = static_cast<double>(pos) * freq;
  return j % 2 == 0 ? std::sin(a) : std::cos(a);
}

template <class T>
Tensor<T> sinusoidal_encoding_1d(std::size_t length, std::size_t dim) {
  std::vector<T> v(length * dim);
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t j = 0; j < dim; ++j) v[p * dim + j] = static_cast<T>(sinusoid(p, j, dim));
  return Tensor<T>::from({length, dim}, std::move(v));
}

/// Row position fills the first half of the channels, column position the rest.
template <class T>
Tensor<T> sinusoidal_encoding_2d(std::size_t height, std::size_t width, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(height * width * dim);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      T* row = v.data() + (y * width + x) * dim;
      for (std::size_t j = 0; j < half; ++j) row[j] = static_cast<T>(sinusoid(y, j, half));
      for (std::size_t j = half; j < dim; ++j) row[j] = static_cast<T>(sinusoid(x, j - half, dim - half));
    }
  return Tensor<T>::from({height * width, dim}, std::move(v));
}

/// Strided conv stack with LeakyReLU after every stage. Input [N x 1 x H x W];
/// the spatial map is returned as is, without global pooling.
template <class T>
Tensor<T> backbone_forward(const std::vector<ConvParams<T>>& stages, const Tensor<T>& x) {
  Tensor<T> h = x;
  for (const auto& s : stages) h = leaky_relu(conv2d(h, s.kernels, s.bias, 2, 1), static_cast<T>(kLeakySlope));
  return h;
}

/// Feature maps [L x c x h_f x w_f] -> tokens [L x (h_f w_f) x d_model], one
/// token per spatial position in row-major order.
template <class T>
Tensor<T> tokenize(const LinearParams<T>& proj, const Tensor<T>& fmap, bool positional) {
  detail::require_rank("tokenize", fmap.shape(), 4);
  const std::size_t L = fmap.dim(0), c = fmap.dim(1), hf = fmap.dim(2), wf = fmap.dim(3);
  Tensor<T> tokens = reshape(permute(fmap, {0, 2, 3, 1}), {L, hf * wf, c});
  tokens = linear(tokens, proj.weight, proj.bias);
  if (positional) tokens = add(tokens, sinusoidal_encoding_2d<T>(hf, wf, proj.weight.dim(1)));
  return tokens;
}

/// Multi-head scaled dot-product self-attention over already-normalised
/// tokens [G x n x d], output projection included, residual excluded.
template <class T>
Tensor<T> self_attention(const AttentionBlockParams<T>& p, const Tensor<T>& z, std::size_t heads,
                         std::vector<Tensor<T>>* weights_out = nullptr) {
  detail::require_rank("self_attention", z.shape(), 3);
  const std::size_t G = z.dim(0), n = z.dim(1), d = z.dim(2);
  if (heads == 0 || d % heads != 0) throw ConfigError("self_attention: d_model must be divisible by heads");
  const std::size_t dh = d / heads;
  const Tensor<T> qkv = linear(z, p.qkv.weight, p.qkv.bias);
  auto split_heads = [&](std::size_t part) {
    Tensor<T> t = reshape(slice(qkv, 2, part * d, d), {G, n, heads, dh});
    return reshape(permute(t, {0, 2, 1, 3}), {G * heads, n, dh});
  };
  const Tensor<T> q = split_heads(0), k = split_heads(1), v = split_heads(2);
  const Tensor<T> scores = scale(bmm(q, k, /*transpose_b=*/true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const Tensor<T> weights = softmax(scores, 2);
  if (weights_out) weights_out->push_back(weights);
  Tensor<T> o = reshape(bmm(weights, v), {G, heads, n, dh});
  o = reshape(permute(o, {0, 2, 1, 3}), {G, n, d});
  return linear(o, p.out.weight, p.out.bias);
}

template <class T>
Tensor<T> attention_block(const AttentionBlockParams<T>& p, const Tensor<T>& x, std::size_t heads,
                          std::vector<Tensor<T>>* weights_out = nullptr) {
  const T slope = static_cast<T>(kLeakySlope);
  Tensor<T> h = add(x, self_attention(p, layer_norm(x, p.norm1.gain, p.norm1.bias), heads, weights_out));
  Tensor<T> f = leaky_relu(linear(layer_norm(h, p.norm2.gain, p.norm2.bias), p.ffn_in.weight, p.ffn_in.bias), slope);
  return add(h, linear(f, p.ffn_out.weight, p.ffn_out.bias));
}

/// gMLP block: channel expansion, split into (u, v), u * (S v + b) with S
/// mixing tokens, projection back and residual.
template <class T>
Tensor<T> gmlp_block(const GmlpBlockParams<T>& p, const Tensor<T>& x) {
  detail::require_rank("gmlp_block", x.shape(), 3);
  const std::size_t G = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (p.spatial_weight.dim(0) != n) {
    throw DimensionError("gmlp_block: configured for " + std::to_string(p.spatial_weight.dim(0)) + " tokens, got " +
                         std::to_string(n));
  }
  const Tensor<T> h =
      leaky_relu(linear(layer_norm(x, p.norm.gain, p.norm.bias), p.proj_in.weight, p.proj_in.bias), static_cast<T>(kLeakySlope));
  const std::size_t half = h.dim(2) / 2;
  const Tensor<T> u = slice(h, 2, 0, half);
  const Tensor<T> v = slice(h, 2, half, half);
  // Token mixing as one matmul: [n x n] * [n x (G * half)].
  Tensor<T> vt = reshape(permute(v, {1, 0, 2}), {n, G * half});
  Tensor<T> gate = add(matmul(p.spatial_weight, vt), p.spatial_bias);
  gate = permute(reshape(gate, {n, G, half}), {1, 0, 2});
  const Tensor<T> y = mul(u, gate);
  (void)d;
  return add(x, linear(y, p.proj_out.weight, p.proj_out.bias));
}

template <class T>
Tensor<T> mixer_block(const BlockParams<T>& block, const Tensor<T>& x, std::size_t heads,
                      std::vector<Tensor<T>>* weights_out = nullptr) {
  if (const auto* a = std::get_if<AttentionBlockParams<T>>(&block)) return attention_block(*a, x, heads, weights_out);
  return gmlp_block(std::get<GmlpBlockParams<T>>(block), x);
}

/// Within-slice transformer: tokens [L x n x d] -> one context vector per slice [L x d].
template <class T>
Tensor<T> wst_forward(const std::vector<BlockParams<T>>& blocks, const Tensor<T>& tokens, std::size_t heads,
                      std::vector<Tensor<T>>* weights_out = nullptr) {
  Tensor<T> h = tokens;
  for (const auto& b : blocks) h = mixer_block(b, h, heads, weights_out);
  return mean(h, 1);
}

/// Between-slice transformer: slice vectors [L_s x d] -> scan vector [1 x d].
template <class T>
Tensor<T> bst_forward(const std::vector<BlockParams<T>>& blocks, const Tensor<T>& slice_vectors, std::size_t expected_slices,
                      std::size_t heads, bool positional, std::vector<Tensor<T>>* weights_out = nullptr) {
  detail::require_rank("bst_forward", slice_vectors.shape(), 2);
  const std::size_t L = slice_vectors.dim(0), d = slice_vectors.dim(1);
  if (L != expected_slices) {
    throw DimensionError("bst_forward: expected " + std::to_string(expected_slices) + " slice vectors, got " +
                         std::to_string(L));
  }
  Tensor<T> h = reshape(slice_vectors, {1, L, d});
  if (positional) h = add(h, sinusoidal_encoding_1d<T>(L, d));
  for (const auto& b : blocks) h = mixer_block(b, h, heads, weights_out);
  return mean(h, 1);
}

/// Three affine layers with LeakyReLU after the first two; raw logits [N x 2].
template <class T>
Tensor<T> classify(const std::array<LinearParams<T>, 3>& layers, const Tensor<T>& scan_vector) {
  const T slope = static_cast<T>(kLeakySlope);
  Tensor<T> h = leaky_relu(linear(scan_vector, layers[0].weight, layers[0].bias), slope);
  h = leaky_relu(linear(h, layers[1].weight, layers[1].bias), slope);
  return linear(h, layers[2].weight, layers[2].bias);
}

/// Intermediate results of one CCAT pass, kept for inspection.
template <class T>
struct CcatTrace {
  Tensor<T> features;       // [L x c x h_f x w_f]
  Tensor<T> tokens;         // [L x n x d]
  Tensor<T> slice_vectors;  // [L x d]
  Tensor<T> scan_vector;    // [1 x d]
  Tensor<T> logits;         // [1 x 2]
  std::vector<Tensor<T>> attention;
};

/// Input-only z-scoring: splits x into `groups` equal contiguous chunks and
/// maps each to zero mean, unit variance (spread floored at 1e-3 so flat
/// inputs map to zero). The result is a fresh constant; no gradient flows.
template <class T>
Tensor<T> standardize_groups(const Tensor<T>& x, std::size_t groups) {
  if (groups == 0 || x.numel() % groups != 0) throw DimensionError("standardize: bad group count");
  const std::size_t len = x.numel() / groups;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t g = 0; g < groups; ++g) {
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = g * len; i < (g + 1) * len; ++i) mean += static_cast<double>(out[i]);
    mean /= static_cast<double>(len);
    for (std::size_t i = g * len; i < (g + 1) * len; ++i) {
      const double c = static_cast<double>(out[i]) - mean;
      sq += c * c;
    }
    const double sd = std::max(std::sqrt(sq / static_cast<double>(len)), 1e-3);
    for (std::size_t i = g * len; i < (g + 1) * len; ++i) out[i] = static_cast<T>((static_cast<double>(out[i]) - mean) / sd);
  }
  return Tensor<T>::from(x.shape(), std::move(out));
}

/// Full pass over prepared slices [L_s x H x W] (values in [0,1]).
template <class T>
CcatTrace<T> ccat_trace(const CcatParams<T>& p, const CcatConfig& cfg, const Tensor<T>& slices) {
  detail::require_rank("ccat input", slices.shape(), 3);
  if (slices.dim(1) != cfg.input_height || slices.dim(2) != cfg.input_width) {
    throw DimensionError("ccat: slices must be " + std::to_string(cfg.input_height) + "x" +
                         std::to_string(cfg.input_width) + ", got " + shape_str(slices.shape()));
  }
  CcatTrace<T> t;
  const std::size_t L = slices.dim(0);
  const Tensor<T> xin = cfg.standardize_input ? standardize_groups(slices, 1) : slices;
  t.features = backbone_forward(p.backbone, reshape(xin, {L, 1, cfg.input_height, cfg.input_width}));
  t.tokens = tokenize(p.token_proj, t.features, cfg.spatial_pe);
  t.slice_vectors = wst_forward(p.wst, t.tokens, cfg.heads, &t.attention);
  t.scan_vector = bst_forward(p.bst, t.slice_vectors, cfg.slices, cfg.heads, cfg.sequence_pe, &t.attention);
  t.logits = classify(p.classifier, t.scan_vector);
  return t;
}

template <class T>
Tensor<T> ccat_logits(const CcatParams<T>& p, const CcatConfig& cfg, const Tensor<T>& slices) {
  return ccat_trace(p, cfg, slices).logits;
}

/// P(covid) from 2-class logits.
template <class T>
double covid_probability(const Tensor<T>& logits, std::size_t row = 0) {
  const double a = static_cast<double>(logits[row * 2]), b = static_cast<double>(logits[row * 2 + 1]);
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return eb / (ea + eb);
}

template <class T>
Tensor<T> volume_to_tensor(const CtVolume& vol) {
  std::vector<T> v(vol.voxels.begin(), vol.voxels.end());
  return Tensor<T>::from({vol.depth, vol.height, vol.width}, std::move(v));
}

/// Selects L_s slices (random window when `rng` is given, centred window
/// otherwise), resizes them to the model input and applies augmentation.
inline CtVolume prepare_ccat_slices(const CtVolume& vol, const CcatConfig& cfg, Rng* rng,
                                    const AugmentationSpec* augmentation = nullptr) {
  const auto idx = rng ? strided_sample(vol.depth, cfg.slices, cfg.slice_stride, *rng)
                       : centered_strided_sample(vol.depth, cfg.slices, cfg.slice_stride);
  CtVolume sampled = resize_volume(gather_slices(vol, idx), cfg.input_height, cfg.input_width);
  if (rng && augmentation && augmentation->any()) sampled = augment(sampled, *augmentation, *rng);
  return sampled;
}

template <class T>
struct CcatModel {
  CcatConfig config;
  CcatParams<T> params;

  static CcatModel create(const CcatConfig& cfg, Rng& rng) { return {cfg, init_ccat_params<T>(cfg, rng)}; }

  /// Copy without gradient tracking, safe to share across threads.
  CcatModel frozen() const { return {config, copy_parameters<T>(params, false)}; }

  /// Evaluation mode: deterministic centred window, no augmentation.
  double predict(const CtVolume& vol) const {
    const CtVolume prepared = prepare_ccat_slices(vol, config, nullptr);
    return covid_probability(ccat_logits(params, config, volume_to_tensor<T>(prepared)));
  }

  /// Training-mode forward with random slice sampling.
  double predict_sampled(const CtVolume& vol, Rng& rng) const {
    const CtVolume prepared = prepare_ccat_slices(vol, config, &rng);
    return covid_probability(ccat_logits(params, config, volume_to_tensor<T>(prepared)));
  }
};

/// Evaluation-mode CCAT forward: P(covid) for one volume.
template <class T>
double ccat_forward(const CcatModel<T>& model, const CtVolume& vol) {
  return model.predict(vol);
}

/// Training-mode CCAT forward (random strided slice window).
template <class T>
double ccat_forward(const CcatModel<T>& model, const CtVolume& vol, Rng& rng) {
  return model.predict_sampled(vol, rng);
}

// ---------------------------------------------------------------------------
// Desk-scale slice scorer for the statistical pipeline: the CCAT backbone
// followed by a flattening two-layer head.

struct ScorerConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::vector<std::size_t> backbone_widths{8, 16, 32, 32};
  std::size_t hidden = 32;
  bool standardize_input = true;  // z-score each slice before the backbone

  std::size_t feature_size() const {
    std::size_t h = input_height, w = input_width;
    for (std::size_t i = 0; i < backbone_widths.size(); ++i) {
      h = conv_stage_output(h);
      w = conv_stage_output(w);
    }
    return backbone_widths.back() * h * w;
  }

  void validate() const {
    if (input_height < 1 || input_width < 1) throw ConfigError("scorer: input size must be >= 1");
    if (backbone_widths.empty()) throw ConfigError("scorer: at least one backbone stage required");
    for (std::size_t w : backbone_widths) {
      if (w == 0) throw ConfigError("scorer: backbone widths must be >= 1");
    }
    if (hidden < 1) throw ConfigError("scorer: hidden size must be >= 1");
  }
};

template <class T>
struct ScorerParams {
  std::vector<ConvParams<T>> backbone;
  LinearParams<T> hidden;
  LinearParams<T> output;
};

template <class T, class F>
void visit_parameters(ScorerParams<T>& p, F&& fn) {
  for (std::size_t i = 0; i < p.backbone.size(); ++i) visit_parameters(p.backbone[i], "backbone." + std::to_string(i), fn);
  visit_parameters(p.hidden, "head.hidden", fn);
  visit_parameters(p.output, "head.output", fn);
}

template <class T>
ScorerParams<T> init_scorer_params(const ScorerConfig& cfg, Rng& rng) {
  cfg.validate();
  ScorerParams<T> p;
  std::size_t in = 1;
  for (std::size_t w : cfg.backbone_widths) {
    p.backbone.push_back(init::conv<T>(in, w, rng));
    in = w;
  }
  p.hidden = init::linear<T>(cfg.feature_size(), cfg.hidden, rng);
  p.output = init::linear<T>(cfg.hidden, 2, rng, /*zero=*/true);
  return p;
}

/// Slices [N x H x W] -> logits [N x 2].
template <class T>
Tensor<T> scorer_logits(const ScorerParams<T>& p, const ScorerConfig& cfg, const Tensor<T>& slices) {
  detail::require_rank("scorer input", slices.shape(), 3);
  const std::size_t n = slices.dim(0);
  if (slices.dim(1) != cfg.input_height || slices.dim(2) != cfg.input_width) {
    throw DimensionError("scorer: slices must be " + std::to_string(cfg.input_height) + "x" +
                         std::to_string(cfg.input_width) + ", got " + shape_str(slices.shape()));
  }
  const Tensor<T> x = cfg.standardize_input ? standardize_groups(slices, n) : slices;
  Tensor<T> f = backbone_forward(p.backbone, reshape(x, {n, 1, cfg.input_height, cfg.input_width}));
  f = reshape(f, {n, f.numel() / n});
  f = leaky_relu(linear(f, p.hidden.weight, p.hidden.bias), static_cast<T>(kLeakySlope));
  return linear(f, p.output.weight, p.output.bias);
}

template <class T>
struct ScorerModel {
  ScorerConfig config;
  ScorerParams<T> params;

  static ScorerModel create(const ScorerConfig& cfg, Rng& rng) { return {cfg, init_scorer_params<T>(cfg, rng)}; }
  ScorerModel frozen() const { return {config, copy_parameters<T>(params, false)}; }

  /// P(covid) for every slice of a volume, resized to the model input.
  std::vector<double> score_all(const CtVolume& vol) const {
    const CtVolume r = resize_volume(vol, config.input_height, config.input_width);
    const Tensor<T> logits = scorer_logits(params, config, volume_to_tensor<T>(r));
    std::vector<double> p(vol.depth);
    for (std::size_t i = 0; i < vol.depth; ++i) p[i] = covid_probability(logits, i);
    return p;
  }

  double score(std::span<const float> slice, std::size_t height, std::size_t width) const {
    auto img = resize_slice(slice, height, width, config.input_height, config.input_width);
    std::vector<T> v(img.begin(), img.end());
    const auto logits = scorer_logits(params, config, Tensor<T>::from({1, config.input_height, config.input_width}, std::move(v)));
    return covid_probability(logits);
  }
};

}  // namespace ctscan
