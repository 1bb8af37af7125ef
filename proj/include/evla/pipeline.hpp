#pragma once

// End-to-end forward: image -> visual tokens -> language stack (with
// optional token pruning at the capture layer) -> cognition feature ->
// cached DiT denoising -> 7-DoF action chunk.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "evla/action_head.hpp"
#include "evla/errors.hpp"
#include "evla/layer_pruning.hpp"
#include "evla/model.hpp"
#include "evla/tensor.hpp"
#include "evla/token_pruning.hpp"

namespace evla {

/// Everything needed to turn a baseline model into its accelerated form.
struct PruningPlan {
  PruneLayersPlan layers;
  std::optional<TokenPruneConfig> tokens;
  std::size_t cache_interval = 1;
};

struct PipelineOptions {
  std::optional<TokenPruneConfig> tokens;
  CachePolicy cache;
  std::optional<std::uint64_t> noise_seed;  // defaults to the model's stream
  DenoiseOptions denoise;
};

inline PipelineOptions baseline_options() { return {}; }

inline PipelineOptions options_from_plan(const PruningPlan& plan) {
  PipelineOptions o;
  o.tokens = plan.tokens;
  o.cache.interval = plan.cache_interval;
  return o;
}

struct LanguageOutput {
  Tensor hidden;
  std::optional<TokenSelection> selection;
  std::optional<RelevanceScores> relevance;
  std::vector<std::size_t> seq_lens;  // sequence length entering each layer
};

/// Language stack with visual token pruning applied after layer
/// `tokens->capture_layer` (1-based within the retained stack).
inline LanguageOutput run_language(const ModelBundle& m, const Tensor& visual,
                                   const Tensor& text,
                                   const std::optional<TokenPruneConfig>& tokens) {
  if (visual.size() + text.size() == 0)
    throw InputError("run_language: empty token set");
  const std::size_t text_len = text.rows();
  std::size_t n_visual = visual.rows();
  if (tokens) {
    tokens->validate(n_visual);
    if (tokens->capture_layer < 1 || tokens->capture_layer > m.layers.size())
      throw ConfigError("capture layer " + std::to_string(tokens->capture_layer) +
                        " outside the retained stack of " +
                        std::to_string(m.layers.size()));
  }
  LanguageOutput out;
  out.hidden = concat_rows(text, visual);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    out.seq_lens.push_back(out.hidden.rows());
    const bool capture = tokens && (i + 1 == tokens->capture_layer);
    LayerOutput lo = forward_layer(out.hidden, m.layers[i], m.config.n_heads, capture);
    if (capture) {
      const AttentionCapture cap{i + 1, std::move(*lo.attention)};
      RelevanceScores scores;
      TokenSelection sel =
          select_from_capture(cap, out.hidden, text_len, n_visual, *tokens, &scores);
      std::vector<std::size_t> keep(text_len);
      std::iota(keep.begin(), keep.end(), std::size_t{0});
      for (std::size_t v : sel.pruned) keep.push_back(text_len + v);
      lo.hidden = gather_rows(lo.hidden, keep);
      n_visual = sel.pruned.size();
      out.selection = std::move(sel);
      out.relevance = std::move(scores);
    }
    out.hidden = std::move(lo.hidden);
  }
  return out;
}

/// Final-norm'd last-position hidden state.
inline std::vector<float> cognition_from_hidden(const Tensor& hidden,
                                                const ModelBundle& m) {
  const auto feat = extract_cognition_feature(hidden);
  const Tensor row({1, feat.size()}, feat);
  const Tensor normed = layer_norm(row, m.final_norm.gain.data(), m.final_norm.bias.data());
  return {normed.data().begin(), normed.data().end()};
}

struct StageTimes {
  double vision_ms = 0.0;
  double language_ms = 0.0;
  double action_ms = 0.0;
  double total_ms() const { return vision_ms + language_ms + action_ms; }
};

struct PipelineResult {
  Tensor actions;
  std::vector<float> cognition;
  std::optional<TokenSelection> selection;
  std::vector<std::size_t> seq_lens;
  std::vector<BlockCounters> dit_counters;
  StageTimes times;
};

inline PipelineResult run_pipeline(const ModelBundle& m, const Tensor& image,
                                   std::span<const std::uint32_t> token_ids,
                                   const PipelineOptions& options) {
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
  };
  PipelineResult r;
  const auto t0 = clock::now();
  const Tensor visual = encode_image(image, m);
  const auto t1 = clock::now();
  const Tensor text = embed_text(token_ids, m);
  LanguageOutput lang = run_language(m, visual, text, options.tokens);
  r.cognition = cognition_from_hidden(lang.hidden, m);
  const auto t2 = clock::now();
  DenoiseResult dr = denoise_loop(r.cognition, m, options.cache,
                                  options.noise_seed.value_or(default_noise_seed(m.config)),
                                  options.denoise);
  const auto t3 = clock::now();
  r.actions = std::move(dr.actions);
  r.selection = std::move(lang.selection);
  r.seq_lens = std::move(lang.seq_lens);
  r.dit_counters = std::move(dr.counters);
  r.times = {ms(t0, t1), ms(t1, t2), ms(t2, t3)};
  return r;
}

// ---------------------------------------------------------------------------
// Calibration data

struct CalibrationSample {
  Tensor image;
  std::vector<std::uint32_t> token_ids;
};

/// Seeded synthetic sample: uniform [0, 1) pixels and uniform token ids of
/// length max_text_tokens.
inline CalibrationSample synthetic_sample(const ModelConfig& c, std::uint64_t seed,
                                          std::size_t index) {
  SeededGenerator gen(derive_seed(seed, 0xCA11B000ull + index));
  CalibrationSample s;
  s.image = Tensor({c.image_size, c.image_size});
  for (float& v : s.image.data()) v = static_cast<float>(gen.next_unit());
  for (std::size_t i = 0; i < c.max_text_tokens; ++i)
    s.token_ids.push_back(static_cast<std::uint32_t>(gen.next() % c.vocab_size));
  return s;
}

/// Hidden-state trace of one calibration sample through the full stack.
inline HiddenTrace calibration_trace(const ModelBundle& m,
                                     const CalibrationSample& sample,
                                     std::size_t sample_id) {
  const Tensor visual = encode_image(sample.image, m);
  const Tensor text = embed_text(sample.token_ids, m);
  StackOutput so = forward_stack(m, visual, text, 0);
  so.trace.sample_id = sample_id;
  return std::move(so.trace);
}

/// Layer importance over `samples` seeded calibration inputs.
inline LayerImportance calibrate_importance(const ModelBundle& m,
                                            std::size_t samples,
                                            std::uint64_t seed) {
  if (samples == 0) throw InputError("calibration needs at least one sample");
  ImportanceAccumulator acc;
  for (std::size_t i = 0; i < samples; ++i)
    acc.add(calibration_trace(m, synthetic_sample(m.config, seed, i), i));
  return acc.importance();
}

/// Default token budget: 56 of 256 tokens, scaled to n_visual, clamped to
/// [k_key, n_visual].
inline TokenPruneConfig default_token_config(std::size_t n_visual) {
  TokenPruneConfig t;
  const auto scaled = static_cast<std::size_t>(
      std::llround(56.0 * static_cast<double>(n_visual) / 256.0));
  t.k_key = std::min<std::size_t>(t.k_key, n_visual);
  t.k_final = std::clamp<std::size_t>(scaled, t.k_key, n_visual);
  return t;
}

struct AccelerationSettings {
  std::optional<std::size_t> n_drop;  // defaults to the 22-of-32 fraction
  std::vector<std::size_t> drop_layers;  // explicit list overrides ranking
  double mlp_sparsity = 0.25;
  std::optional<TokenPruneConfig> tokens;  // defaults to default_token_config
  std::size_t cache_interval = 5;
  std::size_t calibration_samples = 16;
  std::uint64_t calibration_seed = 0;
};

struct AcceleratedModel {
  ModelBundle model;
  PruningPlan plan;
  LayerImportance importance;
};

/// Calibrate, rank, drop, sparsify, and attach token/cache settings.
inline AcceleratedModel accelerate(const ModelBundle& base,
                                   const AccelerationSettings& s) {
  AcceleratedModel out;
  const std::size_t depth = base.layers.size();
  if (!s.drop_layers.empty()) {
    // Explicit drops lead the ranking; the rest follow in stack order.
    out.plan.layers.ranked = s.drop_layers;
    for (const auto& l : base.layers)
      if (std::find(s.drop_layers.begin(), s.drop_layers.end(), l.index) ==
          s.drop_layers.end())
        out.plan.layers.ranked.push_back(l.index);
    out.plan.layers.dropped = s.drop_layers;
    out.plan.layers.mlp_sparsity = s.mlp_sparsity;
    const ModelBundle shallow = prune_layers(base, s.drop_layers.size(), s.drop_layers);
    out.model = sparsify_mlp(shallow, s.mlp_sparsity, &out.plan.layers.mlp_keep);
  } else {
    const std::size_t n = s.n_drop.value_or(depth - retained_layer_target(depth));
    out.importance = calibrate_importance(base, s.calibration_samples, s.calibration_seed);
    out.model = apply_layer_plan(base, out.importance, n, s.mlp_sparsity, out.plan.layers);
  }
  out.plan.tokens = s.tokens.value_or(default_token_config(base.config.n_visual_tokens));
  out.plan.tokens->validate(base.config.n_visual_tokens);
  if (out.plan.tokens->capture_layer > out.model.layers.size())
    throw ConfigError("capture layer deeper than the pruned stack");
  CachePolicy{s.cache_interval}.validate(base.config.denoise_steps);
  out.plan.cache_interval = s.cache_interval;
  return out;
}

}  // namespace evla
