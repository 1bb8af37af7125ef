#pragma once

// DiT action head with a static N-step feature cache.
//
// Each denoising step builds z = [cond + time(t); latents] and runs every
// block as
//   h_attn = SelfAttn(LN(z)),  h_mlp = MLP(LN(h_attn + z)),
//   z     <- z + h_attn + h_mlp.
// h_attn and h_mlp are recomputed only when t == T_start or t % N == 0 and
// are replayed from the per-block cache on every other step.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evla/errors.hpp"
#include "evla/model.hpp"
#include "evla/tensor.hpp"

namespace evla {

struct CachePolicy {
  std::size_t interval = 1;

  void validate(std::size_t t_start) const {
    if (interval < 1 || interval > t_start) {
      throw ConfigError("cache interval " + std::to_string(interval) +
                        " outside [1, " + std::to_string(t_start) + "]");
    }
  }
};

inline bool should_recompute(std::size_t t, std::size_t t_start,
                             std::size_t interval) {
  return t == t_start || t % interval == 0;
}

using RecomputeRule = std::function<bool(std::size_t t, std::size_t t_start,
                                         std::size_t interval)>;

inline std::size_t count_effective_steps(std::size_t t_start,
                                         std::size_t interval) {
  std::size_t n = 0;
  for (std::size_t t = t_start; t >= 1; --t)
    if (should_recompute(t, t_start, interval)) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Deterministic DDIM (eta = 0) over a linear beta schedule.

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 2e-2;

class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::size_t steps) : alpha_bar_(steps + 1, 1.0) {
    if (steps == 0) throw ConfigError("schedule needs at least one step");
    double prod = 1.0;
    for (std::size_t i = 1; i <= steps; ++i) {
      const double beta =
          steps == 1 ? kBetaStart
                     : kBetaStart + (kBetaEnd - kBetaStart) *
                                        static_cast<double>(i - 1) /
                                        static_cast<double>(steps - 1);
      prod *= 1.0 - beta;
      alpha_bar_[i] = prod;
    }
  }

  std::size_t steps() const { return alpha_bar_.size() - 1; }
  /// Cumulative product of (1 - beta) up to step t; alpha_bar(0) = 1.
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }

 private:
  std::vector<double> alpha_bar_;
};

/// x_{t-1} = sqrt(ab_{t-1}) * x0_hat + sqrt(1 - ab_{t-1}) * eps, with
/// x0_hat = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t).
inline Tensor scheduler_step(const Tensor& latents, const Tensor& eps,
                             std::size_t t, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw InputError("timestep out of range");
  if (latents.dims() != eps.dims())
    throw ShapeError("scheduler_step: latent/noise dims differ");
  const double ab_t = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t - 1);
  const double s_t = std::sqrt(ab_t), n_t = std::sqrt(1.0 - ab_t);
  const double s_prev = std::sqrt(ab_prev), n_prev = std::sqrt(1.0 - ab_prev);
  Tensor out(latents.dims());
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const double e = eps[i];
    const double x0 = (static_cast<double>(latents[i]) - n_t * e) / s_t;
    out[i] = static_cast<float>(s_prev * x0 + n_prev * e);
  }
  return out;
}

/// Sinusoidal embedding of the timestep, width `dim` (even).
inline std::vector<float> time_embedding(std::size_t t, std::size_t dim) {
  std::vector<float> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = static_cast<float>(std::sin(static_cast<double>(t) * freq));
    e[i + half] = static_cast<float>(std::cos(static_cast<double>(t) * freq));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Block primitives

inline Tensor dit_self_attention(const Tensor& z, const DitBlockWeights& w,
                                 std::size_t heads) {
  const Tensor h = layer_norm(z, w.attn_norm.gain.data(), w.attn_norm.bias.data());
  return multi_head_attention(h, w.wq, w.wk, w.wv, w.wo, heads, /*causal=*/false);
}

/// MLP(LN(x)) = GELU(LN(x) W1 + b1) W2 + b2.
inline Tensor dit_mlp(const Tensor& x, const DitBlockWeights& w) {
  const Tensor h = layer_norm(x, w.mlp_norm.gain.data(), w.mlp_norm.bias.data());
  Tensor a = matmul(h, w.w1);
  add_row_bias(a, w.b1.data());
  for (float& v : a.data()) v = gelu(v);
  Tensor out = matmul(a, w.w2);
  add_row_bias(out, w.b2.data());
  return out;
}

struct BlockFeatures {
  Tensor attn;
  Tensor mlp;
};

/// Computes h_attn and h_mlp for one block from its input z.
inline BlockFeatures dit_block_features(const Tensor& z, const DitBlockWeights& w,
                                        std::size_t heads) {
  BlockFeatures f;
  f.attn = dit_self_attention(z, w, heads);
  Tensor mlp_in = f.attn;
  add_inplace(mlp_in, z);
  f.mlp = dit_mlp(mlp_in, w);
  return f;
}

inline Tensor compose_block_output(const Tensor& z, const BlockFeatures& f) {
  Tensor out = z;
  add_inplace(out, f.attn);
  add_inplace(out, f.mlp);
  return out;
}

/// Per-block attention/MLP caches for one denoising trajectory.
class FeatureCache {
 public:
  explicit FeatureCache(std::size_t blocks) : entries_(blocks) {}

  bool populated(std::size_t block) const { return entries_.at(block).has_value(); }
  const BlockFeatures& get(std::size_t block) const {
    const auto& e = entries_.at(block);
    if (!e) throw StateError("feature cache read before first population");
    return *e;
  }
  void put(std::size_t block, BlockFeatures f, std::size_t t) {
    entries_.at(block) = std::move(f);
    last_computed_t = t;
  }
  std::size_t blocks() const { return entries_.size(); }

  std::size_t last_computed_t = 0;

 private:
  std::vector<std::optional<BlockFeatures>> entries_;
};

struct BlockCounters {
  std::size_t attn_calls = 0;
  std::size_t mlp_calls = 0;
};

/// One DiT block at timestep t. Recomputes and stores the features when
/// `recompute` is set, otherwise replays the cached pair.
inline Tensor dit_block_forward(const Tensor& z, const DitBlockWeights& w,
                                std::size_t heads, FeatureCache& cache,
                                std::size_t block, bool recompute,
                                std::size_t t, BlockCounters* counters = nullptr,
                                BlockFeatures* tap = nullptr) {
  if (recompute) {
    BlockFeatures f = dit_block_features(z, w, heads);
    if (counters) {
      ++counters->attn_calls;
      ++counters->mlp_calls;
    }
    cache.put(block, std::move(f), t);
  }
  const BlockFeatures& f = cache.get(block);
  if (f.attn.dims() != z.dims())
    throw ShapeError("cached feature shape does not match block input");
  if (tap) *tap = f;
  return compose_block_output(z, f);
}

// ---------------------------------------------------------------------------
// Denoising loop

/// Fixed stream used for the initial latent noise of a model.
inline std::uint64_t default_noise_seed(const ModelConfig& c) {
  return derive_seed(c.seed, 0x4E4F495345ull);
}

/// Initial latents: standard normals drawn row-major from splitmix64.
inline Tensor initial_latents(const ModelConfig& c, std::uint64_t seed) {
  SeededGenerator gen(seed);
  Tensor x({c.action_horizon, c.dit_d_model});
  for (float& v : x.data()) v = static_cast<float>(gen.next_normal());
  return x;
}

/// Projects the (already normalized) cognition feature into the DiT width.
inline std::vector<float> condition_row(std::span<const float> cognition,
                                        const ModelBundle& m) {
  if (cognition.size() != m.config.d_model)
    throw ShapeError("cognition feature width mismatch");
  Tensor f({1, cognition.size()},
           std::vector<float>(cognition.begin(), cognition.end()));
  Tensor c = matmul(f, m.dit.cond_proj);
  add_row_bias(c, m.dit.cond_bias.data());
  return {c.data().begin(), c.data().end()};
}

/// z_t = [cond + time(t); latents].
inline Tensor assemble_input(std::span<const float> cond, std::size_t t,
                             const Tensor& latents) {
  const auto temb = time_embedding(t, cond.size());
  Tensor head({1, cond.size()});
  for (std::size_t i = 0; i < cond.size(); ++i) head[i] = cond[i] + temb[i];
  return concat_rows(head, latents);
}

/// Noise prediction from the final block output (action rows only).
inline Tensor predict_noise(const Tensor& z_out, const DitWeights& w) {
  std::vector<std::size_t> rows(z_out.rows() - 1);
  std::iota(rows.begin(), rows.end(), std::size_t{1});
  const Tensor actions = gather_rows(z_out, rows);
  const Tensor h = layer_norm(actions, w.eps_norm.gain.data(), w.eps_norm.bias.data());
  Tensor eps = matmul(h, w.eps_proj);
  add_row_bias(eps, w.eps_bias.data());
  return eps;
}

inline Tensor decode_actions(const Tensor& latents, const DitWeights& w) {
  Tensor a = matmul(latents, w.action_proj);
  add_row_bias(a, w.action_bias.data());
  return a;
}

struct DenoiseOptions {
  RecomputeRule rule;         // defaults to should_recompute
  bool record_features = false;
};

struct DenoiseResult {
  Tensor actions;  // [action_horizon x action_dim]
  std::vector<BlockCounters> counters;
  std::size_t steps_run = 0;
  // features[step][block], steps ordered t = T_start ... 1
  std::vector<std::vector<BlockFeatures>> features;
  std::vector<std::size_t> timesteps;
};

inline DenoiseResult denoise_loop(std::span<const float> cognition,
                                  const ModelBundle& m, CachePolicy policy,
                                  std::uint64_t seed,
                                  const DenoiseOptions& options = {}) {
  const auto& c = m.config;
  const std::size_t t_start = c.denoise_steps;
  policy.validate(t_start);
  const RecomputeRule rule = options.rule ? options.rule : RecomputeRule(should_recompute);
  const NoiseSchedule schedule(t_start);
  const auto cond = condition_row(cognition, m);

  DenoiseResult result;
  result.counters.resize(m.dit.blocks.size());
  FeatureCache cache(m.dit.blocks.size());
  Tensor latents = initial_latents(c, seed);
  for (std::size_t t = t_start; t >= 1; --t) {
    const bool recompute = rule(t, t_start, policy.interval);
    Tensor z = assemble_input(cond, t, latents);
    std::vector<BlockFeatures> taps;
    if (options.record_features) taps.resize(m.dit.blocks.size());
    for (std::size_t b = 0; b < m.dit.blocks.size(); ++b) {
      z = dit_block_forward(z, m.dit.blocks[b], c.dit_heads, cache, b, recompute,
                            t, &result.counters[b],
                            options.record_features ? &taps[b] : nullptr);
    }
    if (options.record_features) {
      result.features.push_back(std::move(taps));
      result.timesteps.push_back(t);
    }
    latents = scheduler_step(latents, predict_noise(z, m.dit), t, schedule);
    ++result.steps_run;
  }
  result.actions = decode_actions(latents, m.dit);
  return result;
}

}  // namespace evla
