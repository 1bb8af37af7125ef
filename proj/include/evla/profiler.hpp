#pragma once

// Analytical FLOP/parameter model, latency harness, and redundancy
// analyzers (inter-layer and temporal feature similarity).
//
// FLOP model per transformer layer at sequence length S:
//   2 * P_layer * S + 4 * S^2 * d
// i.e. one multiply-add per parameter per token plus the QK^T and AV
// products. Embedding, head and final norm contribute 2 * P * S as well.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evla/action_head.hpp"
#include "evla/errors.hpp"
#include "evla/layer_pruning.hpp"
#include "evla/model.hpp"
#include "evla/pipeline.hpp"

namespace evla {

struct StageBreakdown {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t tokens = 0;
  std::uint64_t steps = 0;
  double time_ms = 0.0;
  double flops = 0.0;
};

struct ModuleBreakdown {
  std::vector<StageBreakdown> stages;  // vision, language, action

  const StageBreakdown& stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return s;
    throw InputError("no stage named " + name);
  }
  double total_flops() const {
    double f = 0.0;
    for (const auto& s : stages) f += s.flops;
    return f;
  }
  double total_ms() const {
    double t = 0.0;
    for (const auto& s : stages) t += s.time_ms;
    return t;
  }
  std::uint64_t total_params() const {
    std::uint64_t p = 0;
    for (const auto& s : stages) p += s.params;
    return p;
  }
};

// ---------------------------------------------------------------------------
// FLOP model

/// Language FLOPs with a per-layer sequence length. The embedding is charged
/// at the input length, head and final norm at the output length.
inline double language_flops(const LanguageShape& shape, double mlp_sparsity,
                             std::span<const std::size_t> seq_per_layer,
                             std::size_t s_in, std::size_t s_out) {
  const auto b = language_param_breakdown(shape, seq_per_layer.size(), mlp_sparsity);
  const double d = static_cast<double>(shape.d_model);
  double f = 2.0 * static_cast<double>(b.embedding) * static_cast<double>(s_in);
  for (std::size_t s : seq_per_layer) {
    const double sd = static_cast<double>(s);
    f += 2.0 * static_cast<double>(b.per_layer) * sd + 4.0 * sd * sd * d;
  }
  f += 2.0 * static_cast<double>(b.head + b.final_norm) * static_cast<double>(s_out);
  return f;
}

/// All layers at the same sequence length.
inline double language_flops_uniform(const LanguageShape& shape,
                                     std::size_t retained_layers,
                                     double mlp_sparsity, std::size_t seq_len) {
  const std::vector<std::size_t> seqs(retained_layers, seq_len);
  return language_flops(shape, mlp_sparsity, seqs, seq_len, seq_len);
}

/// Solves 2 * P * S + 4 * S^2 * d * L = flops for S (positive root).
inline double solve_sequence_length(const LanguageShape& shape, double flops) {
  const double p = static_cast<double>(count_language_params(shape, shape.n_layers, 0.0));
  const double a = 4.0 * static_cast<double>(shape.d_model) * static_cast<double>(shape.n_layers);
  const double b = 2.0 * p;
  return (-b + std::sqrt(b * b + 4.0 * a * flops)) / (2.0 * a);
}

inline std::uint64_t vision_params(const ModelConfig& c) {
  return c.patch_dim() * c.d_model + c.d_model;
}

inline double vision_flops(const ModelConfig& c) {
  return 2.0 * static_cast<double>(c.patch_dim() * c.d_model + c.d_model) *
         static_cast<double>(c.n_visual_tokens);
}

struct ActionParamBreakdown {
  std::uint64_t cond = 0;       // cognition projection, run once
  std::uint64_t per_block = 0;  // attention + MLP + norms, cacheable
  std::uint64_t eps_head = 0;   // every step
  std::uint64_t action_head = 0;
  std::size_t blocks = 0;
  std::uint64_t total() const { return cond + per_block * blocks + eps_head + action_head; }
};

inline ActionParamBreakdown action_param_breakdown(const ModelConfig& c) {
  const std::uint64_t d = c.d_model, dd = c.dit_d_model, ff = c.dit_d_ff;
  ActionParamBreakdown b;
  b.cond = d * dd + dd;
  b.per_block = 4 * dd * dd + 2 * dd * ff + ff + dd + 4 * dd;
  b.eps_head = 2 * dd + dd * dd + dd;
  b.action_head = dd * c.action_dim + c.action_dim;
  b.blocks = c.dit_blocks;
  return b;
}

/// Action-stage FLOPs: blocks are charged only on effective steps; the
/// noise head runs on every step; projections in and out run once.
inline double action_flops(const ModelConfig& c, std::size_t effective_steps) {
  const auto b = action_param_breakdown(c);
  const double rows = static_cast<double>(c.action_horizon + 1);
  const double h = static_cast<double>(c.action_horizon);
  const double per_block =
      2.0 * static_cast<double>(b.per_block) * rows +
      4.0 * rows * rows * static_cast<double>(c.dit_d_model);
  return 2.0 * static_cast<double>(b.cond) +
         static_cast<double>(effective_steps) * static_cast<double>(b.blocks) * per_block +
         static_cast<double>(c.denoise_steps) * 2.0 * static_cast<double>(b.eps_head) * h +
         2.0 * static_cast<double>(b.action_head) * h;
}

/// Sequence length entering each retained layer under `tokens`.
inline std::vector<std::size_t> layer_sequence_lengths(
    std::size_t retained_layers, std::size_t text_len, std::size_t n_visual,
    const std::optional<TokenPruneConfig>& tokens) {
  std::vector<std::size_t> seqs;
  for (std::size_t i = 0; i < retained_layers; ++i) {
    const bool pruned = tokens && i >= tokens->capture_layer;
    seqs.push_back(text_len + (pruned ? tokens->k_final : n_visual));
  }
  return seqs;
}

/// Analytical breakdown (no timings) for `m` run with `options` on a prompt
/// of `text_len` tokens.
inline ModuleBreakdown estimate_flops(const ModelBundle& m,
                                      const PipelineOptions& options,
                                      std::size_t text_len) {
  const auto& c = m.config;
  LanguageShape shape = LanguageShape::from(c);
  // Charge the stored MLP width rather than re-deriving it from a sparsity.
  if (!m.layers.empty()) shape.d_ff = m.layers.front().d_ff();
  const auto seqs = layer_sequence_lengths(m.layers.size(), text_len,
                                           c.n_visual_tokens, options.tokens);
  const std::size_t s_in = text_len + c.n_visual_tokens;
  const bool pruned = options.tokens && options.tokens->capture_layer <= seqs.size();
  const std::size_t s_out = pruned ? text_len + options.tokens->k_final : s_in;
  const std::size_t steps = count_effective_steps(c.denoise_steps, options.cache.interval);

  ModuleBreakdown b;
  b.stages.push_back({"vision", vision_params(c), c.n_visual_tokens, 0, 0.0, vision_flops(c)});
  b.stages.push_back({"language", stored_language_params(m),
                      options.tokens ? options.tokens->k_final : c.n_visual_tokens, 0,
                      0.0, language_flops(shape, 0.0, seqs, s_in, s_out)});
  b.stages.push_back({"action", action_param_breakdown(c).total(), 0, steps, 0.0,
                      action_flops(c, steps)});
  return b;
}

// ---------------------------------------------------------------------------
// Latency

/// Median per-stage time over `trials` runs after one discarded warm-up.
inline StageTimes measure_latency(const std::function<StageTimes()>& run,
                                  std::size_t trials) {
  if (trials < 3) throw InputError("latency measurement needs >= 3 trials");
  (void)run();
  std::vector<double> v, l, a;
  for (std::size_t i = 0; i < trials; ++i) {
    const StageTimes t = run();
    v.push_back(t.vision_ms);
    l.push_back(t.language_ms);
    a.push_back(t.action_ms);
  }
  auto median = [](std::vector<double> x) {
    std::sort(x.begin(), x.end());
    const std::size_t n = x.size();
    return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
  };
  return {median(v), median(l), median(a)};
}

/// Breakdown with analytical FLOPs and measured median latencies.
inline ModuleBreakdown profile_pipeline(const ModelBundle& m, const Tensor& image,
                                        std::span<const std::uint32_t> token_ids,
                                        const PipelineOptions& options,
                                        std::size_t trials) {
  ModuleBreakdown b = estimate_flops(m, options, token_ids.size());
  const StageTimes t = measure_latency(
      [&] { return run_pipeline(m, image, token_ids, options).times; }, trials);
  b.stages[0].time_ms = t.vision_ms;
  b.stages[1].time_ms = t.language_ms;
  b.stages[2].time_ms = t.action_ms;
  return b;
}

struct Comparison {
  double speedup = 1.0;
  double flops_ratio = 1.0;
  double param_ratio = 1.0;
};

inline Comparison compare_reports(const ModuleBreakdown& base,
                                  const ModuleBreakdown& accel) {
  if (base.stages.size() != accel.stages.size())
    throw InputError("reports have different stage counts");
  for (std::size_t i = 0; i < base.stages.size(); ++i)
    if (base.stages[i].name != accel.stages[i].name)
      throw InputError("stage mismatch: " + base.stages[i].name + " vs " +
                       accel.stages[i].name);
  Comparison c;
  c.speedup = accel.total_ms() > 0.0 ? base.total_ms() / accel.total_ms() : 1.0;
  c.flops_ratio = accel.total_flops() / base.total_flops();
  c.param_ratio = static_cast<double>(accel.total_params()) /
                  static_cast<double>(base.total_params());
  return c;
}

// ---------------------------------------------------------------------------
// Redundancy analyzers

/// Mean cos(x^(l), x^(l+1)) per layer; the complement of layer importance.
inline std::vector<double> interlayer_similarity(std::span<const HiddenTrace> traces) {
  if (traces.empty()) throw InputError("interlayer_similarity: no traces");
  ImportanceAccumulator acc;
  for (const auto& t : traces) acc.add(t);
  return acc.mean_similarity();
}

struct TemporalSimilarity {
  std::size_t t = 0;  // similarity between steps t and t-1
  std::string kind;   // "attn" or "mlp"
  double cos = 0.0;
};

/// cos(flatten(h_t), flatten(h_{t-1})) per feature kind, averaged over blocks.
/// `run` must have been recorded with record_features.
inline std::vector<TemporalSimilarity> temporal_similarity(const DenoiseResult& run) {
  if (run.features.size() < 2)
    throw InputError("temporal_similarity needs at least two recorded steps");
  std::vector<TemporalSimilarity> out;
  for (std::size_t k = 0; k + 1 < run.features.size(); ++k) {
    const auto& cur = run.features[k];
    const auto& next = run.features[k + 1];
    double attn = 0.0, mlp = 0.0;
    for (std::size_t b = 0; b < cur.size(); ++b) {
      attn += cosine_similarity(cur[b].attn.data(), next[b].attn.data());
      mlp += cosine_similarity(cur[b].mlp.data(), next[b].mlp.data());
    }
    const double n = static_cast<double>(cur.size());
    out.push_back({run.timesteps[k], "attn", attn / n});
    out.push_back({run.timesteps[k], "mlp", mlp / n});
  }
  return out;
}

}  // namespace evla
