#pragma once

// Desk-scale VLA model: patch-projection vision stub, pre-norm causal
// transformer decoder, and the weight containers for the DiT action head.
// Sequence order inside the decoder is [text tokens..., visual tokens...] so
// that visual queries can attend to every text key under the causal mask.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evla/errors.hpp"
#include "evla/tensor.hpp"

namespace evla {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 8;
  std::size_t d_ff = 176;
  std::size_t n_visual_tokens = 256;
  std::size_t image_size = 128;
  std::size_t patch_size = 8;
  std::size_t max_text_tokens = 16;
  std::size_t vocab_size = 256;
  std::size_t action_dim = 7;
  std::size_t action_horizon = 16;
  std::size_t dit_blocks = 4;
  std::size_t dit_d_model = 64;
  std::size_t dit_heads = 4;
  std::size_t dit_d_ff = 256;
  std::size_t denoise_steps = 10;
  std::uint64_t seed = 42;

  std::size_t patch_dim() const { return patch_size * patch_size; }
  std::size_t grid_size() const { return image_size / patch_size; }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(d_model, "d_model");
    positive(n_heads, "n_heads");
    positive(d_ff, "d_ff");
    positive(n_visual_tokens, "n_visual_tokens");
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(max_text_tokens, "max_text_tokens");
    positive(vocab_size, "vocab_size");
    positive(action_dim, "action_dim");
    positive(action_horizon, "action_horizon");
    positive(dit_blocks, "dit_blocks");
    positive(dit_d_model, "dit_d_model");
    positive(dit_heads, "dit_heads");
    positive(dit_d_ff, "dit_d_ff");
    positive(denoise_steps, "denoise_steps");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (dit_d_model % dit_heads != 0)
      throw ConfigError("dit_d_model must be divisible by dit_heads");
    if (dit_d_model % 2 != 0)
      throw ConfigError("dit_d_model must be even (sinusoidal time embedding)");
    if (image_size % patch_size != 0 ||
        grid_size() * grid_size() != n_visual_tokens) {
      throw ConfigError("image_size/patch_size grid does not produce " +
                        std::to_string(n_visual_tokens) + " visual tokens");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Default toy configuration used by tests and the CLI.
inline ModelConfig default_config() { return ModelConfig{}; }

/// Wider, deeper configuration for latency measurements.
inline ModelConfig scaled_config() {
  ModelConfig c;
  c.d_model = 512;
  c.n_heads = 8;
  c.n_layers = 12;
  c.d_ff = 1408;
  c.dit_d_model = 256;
  c.dit_heads = 8;
  c.dit_d_ff = 1024;
  return c;
}

struct NormWeights {
  Tensor gain;
  Tensor bias;
};

struct LayerWeights {
  std::size_t index = 0;  // position in the original, unpruned stack
  NormWeights attn_norm;
  Tensor wq, wk, wv, wo;  // d_model x d_model
  NormWeights mlp_norm;
  Tensor w_gate, w_up;  // d_model x d_ff
  Tensor w_down;        // d_ff x d_model

  std::size_t d_ff() const { return w_up.dim(1); }
};

struct VisionWeights {
  Tensor proj;  // patch_dim x d_model
  Tensor bias;  // d_model
};

struct DitBlockWeights {
  NormWeights attn_norm;
  Tensor wq, wk, wv, wo;  // dit_d x dit_d
  NormWeights mlp_norm;
  Tensor w1, b1;  // dit_d x dit_ff, dit_ff
  Tensor w2, b2;  // dit_ff x dit_d, dit_d
};

struct DitWeights {
  Tensor cond_proj, cond_bias;  // d_model x dit_d, dit_d
  std::vector<DitBlockWeights> blocks;
  NormWeights eps_norm;
  Tensor eps_proj, eps_bias;        // dit_d x dit_d, dit_d
  Tensor action_proj, action_bias;  // dit_d x action_dim, action_dim
};

struct ModelBundle {
  ModelConfig config;
  VisionWeights vision;
  Tensor text_embed;  // vocab x d_model
  std::vector<LayerWeights> layers;
  NormWeights final_norm;
  DitWeights dit;

  std::vector<std::size_t> retained_layer_indices() const {
    std::vector<std::size_t> out;
    for (const auto& l : layers) out.push_back(l.index);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

enum class Stream : std::uint64_t {
  kVision = 1,
  kText = 2,
  kDitGlobal = 3,
  kLayerBase = 1000,
  kDitBlockBase = 500000,
};

inline Tensor init(std::uint64_t seed, std::uint64_t stream, const Dims& dims,
                   std::size_t fan_in, std::size_t fan_out) {
  SeededGenerator gen(derive_seed(seed, stream));
  return uniform_init(gen, dims, fan_in, fan_out);
}

inline NormWeights unit_norm(std::size_t d) {
  return {Tensor({d}, 1.0f), Tensor({d}, 0.0f)};
}

inline std::uint64_t stream(Stream base, std::size_t index, std::size_t slot) {
  return static_cast<std::uint64_t>(base) + index * 16 + slot;
}

}  // namespace detail

/// Builds a model whose every weight is a pure function of config.seed.
/// Linear weights use Xavier-uniform init; norms start at gain 1, bias 0;
/// biases start at zero.
inline ModelBundle generate_model(const ModelConfig& config) {
  config.validate();
  using detail::init;
  using detail::Stream;
  using detail::stream;
  const auto seed = config.seed;
  const std::size_t d = config.d_model, ff = config.d_ff;
  const std::size_t dd = config.dit_d_model, dff = config.dit_d_ff;

  ModelBundle m;
  m.config = config;
  m.vision.proj = init(seed, stream(Stream::kVision, 0, 0),
                       {config.patch_dim(), d}, config.patch_dim(), d);
  m.vision.bias = Tensor({d});
  m.text_embed = init(seed, stream(Stream::kText, 0, 0),
                      {config.vocab_size, d}, config.vocab_size, d);

  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.index = l;
    w.attn_norm = detail::unit_norm(d);
    w.wq = init(seed, stream(Stream::kLayerBase, l, 0), {d, d}, d, d);
    w.wk = init(seed, stream(Stream::kLayerBase, l, 1), {d, d}, d, d);
    w.wv = init(seed, stream(Stream::kLayerBase, l, 2), {d, d}, d, d);
    w.wo = init(seed, stream(Stream::kLayerBase, l, 3), {d, d}, d, d);
    w.mlp_norm = detail::unit_norm(d);
    w.w_gate = init(seed, stream(Stream::kLayerBase, l, 4), {d, ff}, d, ff);
    w.w_up = init(seed, stream(Stream::kLayerBase, l, 5), {d, ff}, d, ff);
    w.w_down = init(seed, stream(Stream::kLayerBase, l, 6), {ff, d}, ff, d);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = detail::unit_norm(d);

  auto& dit = m.dit;
  dit.cond_proj = init(seed, stream(Stream::kDitGlobal, 0, 0), {d, dd}, d, dd);
  dit.cond_bias = Tensor({dd});
  for (std::size_t b = 0; b < config.dit_blocks; ++b) {
    DitBlockWeights w;
    w.attn_norm = detail::unit_norm(dd);
    w.wq = init(seed, stream(Stream::kDitBlockBase, b, 0), {dd, dd}, dd, dd);
    w.wk = init(seed, stream(Stream::kDitBlockBase, b, 1), {dd, dd}, dd, dd);
    w.wv = init(seed, stream(Stream::kDitBlockBase, b, 2), {dd, dd}, dd, dd);
    w.wo = init(seed, stream(Stream::kDitBlockBase, b, 3), {dd, dd}, dd, dd);
    w.mlp_norm = detail::unit_norm(dd);
    w.w1 = init(seed, stream(Stream::kDitBlockBase, b, 4), {dd, dff}, dd, dff);
    w.b1 = Tensor({dff});
    w.w2 = init(seed, stream(Stream::kDitBlockBase, b, 5), {dff, dd}, dff, dd);
    w.b2 = Tensor({dd});
    dit.blocks.push_back(std::move(w));
  }
  dit.eps_norm = detail::unit_norm(dd);
  dit.eps_proj = init(seed, stream(Stream::kDitGlobal, 0, 1), {dd, dd}, dd, dd);
  dit.eps_bias = Tensor({dd});
  dit.action_proj = init(seed, stream(Stream::kDitGlobal, 0, 2),
                         {dd, config.action_dim}, dd, config.action_dim);
  dit.action_bias = Tensor({config.action_dim});
  return m;
}

// ---------------------------------------------------------------------------
// Shared attention / MLP primitives

/// Multi-head scaled dot-product attention on already-normalized input `h`.
/// When `capture` is non-null it receives the post-softmax weights as
/// [n_heads x S x S].
inline Tensor multi_head_attention(const Tensor& h, const Tensor& wq,
                                   const Tensor& wk, const Tensor& wv,
                                   const Tensor& wo, std::size_t n_heads,
                                   bool causal, Tensor* capture = nullptr) {
  const std::size_t s = h.rows(), d = h.cols();
  if (d % n_heads != 0) throw ShapeError("attention width not divisible");
  const std::size_t dh = d / n_heads;
  const Tensor q = matmul(h, wq);
  const Tensor k = matmul(h, wk);
  const Tensor v = matmul(h, wv);
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor concat({s, d});
  if (capture) *capture = Tensor({n_heads, s, s});
  for (std::size_t head = 0; head < n_heads; ++head) {
    const std::size_t off = head * dh;
    Tensor qh({s, dh}), kt({dh, s}), vh({s, dh});
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        qh.at(i, c) = q.at(i, off + c);
        kt.at(c, i) = k.at(i, off + c);
        vh.at(i, c) = v.at(i, off + c);
      }
    }
    Tensor scores = matmul(qh, kt);
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        float& sc = scores.at(i, j);
        sc = (causal && j > i) ? -std::numeric_limits<float>::infinity()
                               : sc * scale;
      }
    }
    const Tensor probs = softmax_rows(scores);
    if (capture) {
      auto dst = capture->data().subspan(head * s * s, s * s);
      std::copy(probs.data().begin(), probs.data().end(), dst.begin());
    }
    const Tensor oh = matmul(probs, vh);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t c = 0; c < dh; ++c) concat.at(i, off + c) = oh.at(i, c);
  }
  return matmul(concat, wo);
}

/// SiLU-gated MLP: (silu(h Wg) * (h Wu)) Wd.
inline Tensor gated_mlp(const Tensor& h, const LayerWeights& w) {
  Tensor gate = matmul(h, w.w_gate);
  const Tensor up = matmul(h, w.w_up);
  auto g = gate.data();
  auto u = up.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
  return matmul(gate, w.w_down);
}

// ---------------------------------------------------------------------------
// Language-side forward

/// Post-softmax attention weights of one decoder layer.
struct AttentionCapture {
  std::size_t layer = 0;  // 1-based position in the executed stack
  Tensor weights;         // [n_heads x S x S]

  std::size_t heads() const { return weights.dim(0); }
  std::size_t seq_len() const { return weights.dim(1); }
  float at(std::size_t head, std::size_t query, std::size_t key) const {
    const std::size_t s = seq_len();
    return weights[(head * s + query) * s + key];
  }
};

struct LayerTrace {
  Tensor input;   // x^(l)
  Tensor output;  // x^(l+1)
};

/// Per-layer input/output hidden states of one calibration sample.
struct HiddenTrace {
  std::size_t sample_id = 0;
  std::vector<LayerTrace> layers;
};

struct LayerOutput {
  Tensor hidden;
  std::optional<Tensor> attention;
};

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(.)).
inline LayerOutput forward_layer(const Tensor& x, const LayerWeights& layer,
                                 std::size_t n_heads, bool capture) {
  LayerOutput out;
  Tensor attn_weights;
  const Tensor h1 = layer_norm(x, layer.attn_norm.gain.data(),
                               layer.attn_norm.bias.data());
  Tensor x1 = x;
  add_inplace(x1, multi_head_attention(h1, layer.wq, layer.wk, layer.wv,
                                       layer.wo, n_heads, /*causal=*/true,
                                       capture ? &attn_weights : nullptr));
  const Tensor h2 =
      layer_norm(x1, layer.mlp_norm.gain.data(), layer.mlp_norm.bias.data());
  add_inplace(x1, gated_mlp(h2, layer));
  out.hidden = std::move(x1);
  if (capture) out.attention = std::move(attn_weights);
  return out;
}

/// Splits an h x w image into non-overlapping patches (row-major grid,
/// row-major pixels within a patch) and projects each to d_model.
inline Tensor encode_image(const Tensor& image, const ModelConfig& config,
                           const VisionWeights& w) {
  if (image.rank() != 2) throw ShapeError("image must be rank 2");
  const std::size_t h = image.dim(0), wd = image.dim(1), p = config.patch_size;
  if (h % p != 0 || wd % p != 0 || (h / p) * (wd / p) != config.n_visual_tokens) {
    throw ShapeError("image " + dims_to_string(image.dims()) +
                     " does not tile into " +
                     std::to_string(config.n_visual_tokens) + " patches of " +
                     std::to_string(p) + "x" + std::to_string(p));
  }
  const std::size_t gw = wd / p;
  Tensor patches({config.n_visual_tokens, p * p});
  for (std::size_t t = 0; t < config.n_visual_tokens; ++t) {
    const std::size_t pr = t / gw, pc = t % gw;
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x)
        patches.at(t, y * p + x) = image.at(pr * p + y, pc * p + x);
  }
  Tensor out = matmul(patches, w.proj);
  add_row_bias(out, w.bias.data());
  return out;
}

inline Tensor encode_image(const Tensor& image, const ModelBundle& m) {
  return encode_image(image, m.config, m.vision);
}

inline Tensor embed_text(std::span<const std::uint32_t> ids,
                         const ModelBundle& m) {
  const std::size_t d = m.config.d_model;
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= m.config.vocab_size) {
      throw InputError("token id " + std::to_string(ids[i]) +
                       " out of range for vocab " +
                       std::to_string(m.config.vocab_size));
    }
    auto src = m.text_embed.row(ids[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

struct StackOutput {
  Tensor hidden;  // [S x d_model]
  HiddenTrace trace;
  std::optional<AttentionCapture> attention;
};

/// Runs `layers` in order over [text..., visual...]. `capture_layer` is
/// 1-based within `layers`; 0 disables capture.
inline StackOutput forward_stack(const Tensor& visual, const Tensor& text,
                                 std::span<const LayerWeights> layers,
                                 std::size_t n_heads,
                                 std::size_t capture_layer,
                                 bool record_trace = true) {
  if (visual.size() + text.size() == 0)
    throw InputError("forward_stack: empty token set");
  if (capture_layer > layers.size())
    throw InputError("capture_layer " + std::to_string(capture_layer) +
                     " exceeds stack depth " + std::to_string(layers.size()));
  StackOutput out;
  out.hidden = concat_rows(text, visual);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const bool capture = (i + 1 == capture_layer);
    LayerOutput lo = forward_layer(out.hidden, layers[i], n_heads, capture);
    if (record_trace) out.trace.layers.push_back({out.hidden, lo.hidden});
    if (capture) out.attention = AttentionCapture{i + 1, std::move(*lo.attention)};
    out.hidden = std::move(lo.hidden);
  }
  return out;
}

inline StackOutput forward_stack(const ModelBundle& m, const Tensor& visual,
                                 const Tensor& text, std::size_t capture_layer,
                                 bool record_trace = true) {
  return forward_stack(visual, text, m.layers, m.config.n_heads, capture_layer,
                       record_trace);
}

/// Conditioning feature for the action head: the last-position hidden state.
inline std::vector<float> extract_cognition_feature(const Tensor& hidden) {
  if (hidden.rows() == 0 || hidden.size() == 0)
    throw InputError("extract_cognition_feature: empty hidden state");
  auto last = hidden.row(hidden.rows() - 1);
  return {last.begin(), last.end()};
}

}  // namespace evla
