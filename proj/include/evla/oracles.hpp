#pragma once

// Reference implementations used to cross-check the library. Each one is
// written as a direct loop over the defining formula and shares no code
// path with the routine it checks beyond the Tensor container and the
// primitives it is explicitly allowed to call.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "evla/action_head.hpp"
#include "evla/model.hpp"
#include "evla/tensor.hpp"
#include "evla/token_pruning.hpp"

namespace evla::oracle {

/// Triple loop, float accumulation in k order (bitwise comparable).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float sum = 0.0f;
      for (std::size_t p = 0; p < k; ++p) sum += a.at(i, p) * b.at(p, j);
      c.at(i, j) = sum;
    }
  }
  return c;
}

/// exp(x_i) / sum_j exp(x_j) evaluated in double without max subtraction.
inline std::vector<double> softmax(std::span<const double> x) {
  std::vector<double> e(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::isinf(x[i]) && x[i] < 0 ? 0.0 : std::exp(x[i]);
    sum += e[i];
  }
  for (double& v : e) v /= sum;
  return e;
}

inline double cosine(std::span<const float> u, std::span<const float> v) {
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    uu += static_cast<double>(u[i]) * u[i];
    vv += static_cast<double>(v[i]) * v[i];
  }
  if (std::sqrt(uu) < 1e-12 || std::sqrt(vv) < 1e-12) return 0.0;
  return std::clamp(dot / std::sqrt(uu * vv), -1.0, 1.0);
}

/// Per-head attention: every score, softmax and weighted sum computed
/// element by element in double. `probs_out`, if given, receives
/// [heads x S x S].
inline Tensor attention(const Tensor& h, const Tensor& wq, const Tensor& wk,
                        const Tensor& wv, const Tensor& wo, std::size_t heads,
                        bool causal, std::vector<double>* probs_out = nullptr) {
  const std::size_t s = h.rows(), d = h.cols(), dh = d / heads;
  auto project = [&](const Tensor& w) {
    std::vector<double> out(s * d, 0.0);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t p = 0; p < d; ++p)
          out[i * d + c] += static_cast<double>(h.at(i, p)) * w.at(p, c);
    return out;
  };
  const auto q = project(wq), k = project(wk), v = project(wv);
  std::vector<double> concat(s * d, 0.0);
  if (probs_out) probs_out->assign(heads * s * s, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> scores(s);
      for (std::size_t j = 0; j < s; ++j) {
        if (causal && j > i) {
          scores[j] = -std::numeric_limits<double>::infinity();
          continue;
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c)
          dot += q[i * d + hd * dh + c] * k[j * d + hd * dh + c];
        scores[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      const auto p = softmax(scores);
      if (probs_out)
        std::copy(p.begin(), p.end(), probs_out->begin() + (hd * s + i) * s);
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j) acc += p[j] * v[j * d + hd * dh + c];
        concat[i * d + hd * dh + c] = acc;
      }
    }
  }
  Tensor out({s, wo.dim(1)});
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t c = 0; c < wo.dim(1); ++c) {
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) acc += concat[i * d + p] * wo.at(p, c);
      out.at(i, c) = static_cast<float>(acc);
    }
  return out;
}

inline Tensor layer_norm(const Tensor& x, const NormWeights& w) {
  Tensor out(x.dims());
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x.at(r, c);
    mean /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) var += (x.at(r, c) - mean) * (x.at(r, c) - mean);
    var /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c)
      out.at(r, c) = static_cast<float>((x.at(r, c) - mean) / std::sqrt(var + 1e-5) *
                                            w.gain[c] + w.bias[c]);
  }
  return out;
}

/// Decoder layer from the per-head attention oracle and a scalar MLP loop.
inline Tensor forward_layer(const Tensor& x, const LayerWeights& l, std::size_t heads) {
  Tensor x1 = x;
  const Tensor a = attention(layer_norm(x, l.attn_norm), l.wq, l.wk, l.wv, l.wo, heads, true);
  for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += a[i];
  const Tensor h = layer_norm(x1, l.mlp_norm);
  const std::size_t s = h.rows(), d = h.cols(), ff = l.d_ff();
  Tensor out = x1;
  for (std::size_t i = 0; i < s; ++i) {
    std::vector<double> act(ff);
    for (std::size_t f = 0; f < ff; ++f) {
      double g = 0.0, u = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        g += static_cast<double>(h.at(i, p)) * l.w_gate.at(p, f);
        u += static_cast<double>(h.at(i, p)) * l.w_up.at(p, f);
      }
      act[f] = g / (1.0 + std::exp(-g)) * u;
    }
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t f = 0; f < ff; ++f) acc += act[f] * l.w_down.at(f, c);
      out.at(i, c) += static_cast<float>(acc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer importance

/// I_l = 1 - (1/|D|) sum_i (1/L) sum_j cos(x_in[i][j], x_out[i][j]).
inline std::vector<double> layer_importance(std::span<const HiddenTrace> traces) {
  const std::size_t layers = traces.front().layers.size();
  std::vector<double> out(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    double over_samples = 0.0;
    for (const auto& t : traces) {
      const Tensor& in = t.layers[l].input;
      const Tensor& o = t.layers[l].output;
      double over_positions = 0.0;
      for (std::size_t j = 0; j < in.rows(); ++j) over_positions += cosine(in.row(j), o.row(j));
      over_samples += over_positions / static_cast<double>(in.rows());
    }
    out[l] = 1.0 - over_samples / static_cast<double>(traces.size());
  }
  return out;
}

/// Random trace with chained layers: output of l is input of l + 1.
inline HiddenTrace random_trace(SeededGenerator& gen, std::size_t layers,
                                std::size_t tokens, std::size_t width) {
  HiddenTrace t;
  Tensor x({tokens, width});
  for (float& v : x.data()) v = static_cast<float>(gen.next_normal());
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor y({tokens, width});
    for (float& v : y.data()) v = static_cast<float>(gen.next_normal());
    t.layers.push_back({x, y});
    x = y;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Selection

/// i is in the top k of `pool` iff fewer than k members outrank it
/// (higher score, or equal score and lower index). Ascending result.
inline std::vector<std::size_t> top_k(std::span<const std::size_t> pool,
                                      std::span<const double> score, std::size_t k) {
  std::vector<std::size_t> out;
  for (std::size_t i : pool) {
    std::size_t ahead = 0;
    for (std::size_t j : pool)
      if (score[j] > score[i] || (score[j] == score[i] && j < i)) ++ahead;
    if (ahead < k) out.push_back(i);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// r_i = sum_j (1/H) sum_h A[h][i][j] over a flat [H x S x S] buffer.
inline std::vector<double> task_relevance(std::span<const double> attn, std::size_t heads,
                                          std::size_t seq, std::size_t text_begin,
                                          std::size_t text_end, std::size_t vis_begin,
                                          std::size_t vis_end) {
  std::vector<double> r;
  for (std::size_t i = vis_begin; i < vis_end; ++i) {
    double total = 0.0;
    for (std::size_t j = text_begin; j < text_end; ++j) {
      double mean = 0.0;
      for (std::size_t h = 0; h < heads; ++h) mean += attn[(h * seq + i) * seq + j];
      total += mean / static_cast<double>(heads);
    }
    r.push_back(total);
  }
  return r;
}

/// Straight-line selection: min-max, key top-k, task top-k of the rest,
/// diversity against the key set, union in index order.
inline TokenSelection select_tokens(const Tensor& emb, std::span<const double> raw,
                                    std::size_t k_final, std::size_t k_key, double alpha) {
  const std::size_t n = raw.size();
  const double lo = *std::min_element(raw.begin(), raw.end());
  const double hi = *std::max_element(raw.begin(), raw.end());
  std::vector<double> s(n, 0.0);
  if (hi > lo)
    for (std::size_t i = 0; i < n; ++i) s[i] = (raw[i] - lo) / (hi - lo);

  const std::size_t k_aug = k_final - k_key;
  const auto k_task = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(k_aug)));
  const std::size_t k_div = k_aug - k_task;

  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  TokenSelection sel;
  sel.key = top_k(all, s, k_key);
  std::vector<std::size_t> rem;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(sel.key.begin(), sel.key.end(), i) == sel.key.end()) rem.push_back(i);
  sel.task = top_k(rem, s, k_task);
  std::vector<std::size_t> rem2;
  for (std::size_t i : rem)
    if (std::find(sel.task.begin(), sel.task.end(), i) == sel.task.end()) rem2.push_back(i);
  std::vector<double> div(n, 0.0);
  for (std::size_t j : rem2) {
    double best = -1.0;
    for (std::size_t k : sel.key) best = std::max(best, cosine(emb.row(j), emb.row(k)));
    div[j] = 1.0 - best;
  }
  sel.diverse = top_k(rem2, div, k_div);
  for (std::size_t i = 0; i < n; ++i) {
    const auto in = [&](const std::vector<std::size_t>& v) {
      return std::find(v.begin(), v.end(), i) != v.end();
    };
    if (in(sel.key) || in(sel.task) || in(sel.diverse)) sel.pruned.push_back(i);
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Layer and MLP pruning

/// Columns whose combined norm is outranked by fewer than `keep` others.
inline std::vector<std::size_t> mlp_keep(const LayerWeights& l, std::size_t keep) {
  const std::size_t ff = l.d_ff(), d = l.w_up.dim(0);
  std::vector<double> norm(ff);
  for (std::size_t c = 0; c < ff; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < d; ++r) s += static_cast<double>(l.w_up.at(r, c)) * l.w_up.at(r, c);
    for (std::size_t r = 0; r < d; ++r)
      s += static_cast<double>(l.w_gate.at(r, c)) * l.w_gate.at(r, c);
    for (std::size_t r = 0; r < d; ++r)
      s += static_cast<double>(l.w_down.at(c, r)) * l.w_down.at(c, r);
    norm[c] = s;
  }
  std::vector<std::size_t> all(ff);
  for (std::size_t i = 0; i < ff; ++i) all[i] = i;
  return top_k(all, norm, keep);
}

/// Runs the layers of `m` whose original index is listed in `indices`.
inline Tensor run_layers(const ModelBundle& m, const Tensor& x,
                         std::span<const std::size_t> indices) {
  Tensor h = x;
  for (std::size_t idx : indices)
    for (const auto& l : m.layers)
      if (l.index == idx) h = evla::forward_layer(h, l, m.config.n_heads, false).hidden;
  return h;
}

/// Hand-summed language parameters of a LayerNorm stack without output head.
inline std::uint64_t toy_language_params(std::uint64_t vocab, std::uint64_t d,
                                         std::uint64_t ff, std::uint64_t layers) {
  std::uint64_t total = vocab * d;  // embedding
  for (std::uint64_t l = 0; l < layers; ++l) {
    total += d * d;   // wq
    total += d * d;   // wk
    total += d * d;   // wv
    total += d * d;   // wo
    total += d * ff;  // gate
    total += d * ff;  // up
    total += ff * d;  // down
    total += 4 * d;   // two LayerNorms
  }
  return total + 2 * d;  // final norm
}

// ---------------------------------------------------------------------------
// Denoising

/// Cumulative alpha product at step t for the linear beta schedule.
inline double alpha_bar(std::size_t t, std::size_t steps) {
  double ab = 1.0;
  for (std::size_t i = 1; i <= t; ++i) {
    const double beta =
        steps == 1 ? 1e-4 : 1e-4 + (2e-2 - 1e-4) * double(i - 1) / double(steps - 1);
    ab *= 1.0 - beta;
  }
  return ab;
}

/// With zero predicted noise every DDIM step rescales by
/// sqrt(ab_{t-1} / ab_t), so x_0 = x_T / sqrt(ab_T).
inline double zero_noise_scale(std::size_t steps) {
  return 1.0 / std::sqrt(alpha_bar(steps, steps));
}

/// Denoising loop with no cache: every block recomputes at every step.
inline Tensor denoise_cache_free(std::span<const float> cognition, const ModelBundle& m,
                                 std::uint64_t seed) {
  const auto& c = m.config;
  const NoiseSchedule schedule(c.denoise_steps);
  const auto cond = condition_row(cognition, m);
  Tensor latents = initial_latents(c, seed);
  for (std::size_t t = c.denoise_steps; t >= 1; --t) {
    Tensor z = assemble_input(cond, t, latents);
    for (const auto& block : m.dit.blocks)
      z = compose_block_output(z, dit_block_features(z, block, c.dit_heads));
    latents = scheduler_step(latents, predict_noise(z, m.dit), t, schedule);
  }
  return decode_actions(latents, m.dit);
}

/// Timesteps at which blocks recompute, enumerated by hand for the cases
/// the checks use.
inline std::vector<std::size_t> expected_recompute_steps(std::size_t t_start,
                                                         std::size_t interval) {
  if (t_start == 10 && interval == 5) return {10, 5};
  if (t_start == 10 && interval == 3) return {10, 9, 6, 3};
  if (t_start == 10 && interval == 10) return {10};
  if (t_start == 10 && interval == 1) return {10, 9, 8, 7, 6, 5, 4, 3, 2, 1};
  return {};
}

/// Small random configuration for property sweeps.
inline ModelConfig random_small_config(SeededGenerator& gen) {
  ModelConfig c;
  const std::size_t widths[] = {16, 24, 32};
  c.d_model = widths[gen.next() % 3];
  c.n_heads = c.d_model % 8 == 0 ? 4 : 2;
  c.n_layers = 1 + gen.next() % 3;
  c.d_ff = 16 + gen.next() % 33;
  c.image_size = 16;
  c.patch_size = 4;
  c.n_visual_tokens = 16;
  c.max_text_tokens = 4;
  c.vocab_size = 32;
  c.action_horizon = 2 + gen.next() % 6;
  c.dit_blocks = 1 + gen.next() % 3;
  c.dit_d_model = widths[gen.next() % 3];
  c.dit_heads = c.dit_d_model % 8 == 0 ? 4 : 2;
  c.dit_d_ff = 16 + gen.next() % 49;
  c.denoise_steps = 1 + gen.next() % 10;
  c.seed = gen.next();
  return c;
}

}  // namespace evla::oracle
