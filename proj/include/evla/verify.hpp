#pragma once

// Self-check suite behind `evla verify`: each check compares a library
// routine against its oracle or a fixed reference figure and reports pass/fail.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "evla/action_head.hpp"
#include "evla/layer_pruning.hpp"
#include "evla/model.hpp"
#include "evla/oracles.hpp"
#include "evla/pipeline.hpp"
#include "evla/profiler.hpp"
#include "evla/token_pruning.hpp"

namespace evla {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  RecomputeRule rule;  // empty: the library rule
  std::size_t cases = 20;
  std::uint64_t seed = 7;
};

namespace detail {

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

inline bool within_rel(double got, double want, double rel) {
  return std::fabs(got - want) <= rel * std::fabs(want);
}

}  // namespace detail

inline CheckResult check_param_counts() {
  const auto shape = LanguageShape::llama2_7b();
  const double base = static_cast<double>(count_language_params(shape, 32, 0.0)) / 1e6;
  const double pruned = static_cast<double>(count_language_params(shape, 22, 0.25)) / 1e6;
  const bool ok = detail::within_rel(base, 6738.9, 0.005) &&
                  detail::within_rel(pruned, 3971.1, 0.005);
  return {"param_counts", ok,
          "baseline " + detail::fmt(base) + "M, pruned " + detail::fmt(pruned) + "M"};
}

inline CheckResult check_language_flops() {
  const auto shape = LanguageShape::llama2_7b();
  const double target = 3726.55e9;
  const auto s = static_cast<std::size_t>(std::llround(solve_sequence_length(shape, target)));
  const double f = language_flops_uniform(shape, 32, 0.0, s);
  const bool ok = s >= 274 && s <= 279 && detail::within_rel(f, target, 0.015);
  return {"language_flops", ok,
          "S=" + std::to_string(s) + " -> " + detail::fmt(f / 1e9) + "G"};
}

/// Interval 1 must match the cache-free loop bitwise, and the recompute
/// schedule must hit the hand-enumerated timesteps.
inline CheckResult check_cache_transparency(const VerifyOptions& o) {
  SeededGenerator gen(derive_seed(o.seed, 0xCAC4E));
  DenoiseOptions dopt;
  dopt.rule = o.rule;
  for (std::size_t i = 0; i < o.cases; ++i) {
    const ModelConfig c = oracle::random_small_config(gen);
    const ModelBundle m = generate_model(c);
    std::vector<float> cog(c.d_model);
    for (float& v : cog) v = static_cast<float>(gen.next_normal());
    const std::uint64_t seed = gen.next();
    const auto got = denoise_loop(cog, m, CachePolicy{1}, seed, dopt).actions;
    const auto want = oracle::denoise_cache_free(cog, m, seed);
    if (!(got == want))
      return {"cache_transparency", false,
              "interval 1 differs from cache-free loop on case " + std::to_string(i)};
  }
  ModelConfig c = default_config();
  c.dit_blocks = 2;
  c.action_horizon = 4;
  const ModelBundle m = generate_model(c);
  const std::vector<float> cog(c.d_model, 0.5f);
  for (std::size_t interval : {1, 3, 5, 10}) {
    DenoiseOptions rec = dopt;
    rec.record_features = true;
    const auto r = denoise_loop(cog, m, CachePolicy{interval}, 1, rec);
    const auto want = oracle::expected_recompute_steps(10, interval);
    std::vector<std::size_t> hit;
    for (std::size_t k = 0; k < r.timesteps.size(); ++k) {
      const bool fresh = k == 0 || !(r.features[k][0].attn == r.features[k - 1][0].attn);
      if (fresh) hit.push_back(r.timesteps[k]);
    }
    if (hit != want || r.counters[0].attn_calls != want.size()) {
      auto list = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t t : v) s += (s.empty() ? "" : ",") + std::to_string(t);
        return "{" + s + "}";
      };
      return {"cache_transparency", false,
              "interval " + std::to_string(interval) + " recomputed at " + list(hit) +
                  ", expected " + list(want)};
    }
  }
  return {"cache_transparency", true,
          std::to_string(o.cases) + " random configs bitwise equal; schedules match"};
}

inline CheckResult check_effective_steps() {
  const bool ok = count_effective_steps(10, 5) == 2 && count_effective_steps(10, 1) == 10 &&
                  count_effective_steps(10, 3) == 4;
  const ModelConfig c = default_config();
  const double ratio = action_flops(c, count_effective_steps(10, 5)) / action_flops(c, 10);
  const bool ratio_ok = ratio >= 0.20 && ratio <= 0.23;
  return {"effective_steps", ok && ratio_ok,
          "(10,5)->" + std::to_string(count_effective_steps(10, 5)) +
              ", action flops ratio " + detail::fmt(ratio, 4)};
}

inline CheckResult check_importance(const VerifyOptions& o) {
  SeededGenerator gen(derive_seed(o.seed, 0x1A9));
  double worst = 0.0;
  for (std::size_t i = 0; i < o.cases; ++i) {
    std::vector<HiddenTrace> traces;
    const std::size_t layers = 1 + gen.next() % 4, tokens = 1 + gen.next() % 6,
                      width = 2 + gen.next() % 8, samples = 1 + gen.next() % 3;
    for (std::size_t s = 0; s < samples; ++s)
      traces.push_back(oracle::random_trace(gen, layers, tokens, width));
    const auto got = layer_importance(traces).scores;
    const auto want = oracle::layer_importance(traces);
    for (std::size_t l = 0; l < layers; ++l) worst = std::max(worst, std::fabs(got[l] - want[l]));
  }
  return {"layer_importance", worst <= 1e-6, "max |diff| " + detail::fmt(worst)};
}

inline CheckResult check_token_selection(const VerifyOptions& o) {
  SeededGenerator gen(derive_seed(o.seed, 0x70C));
  for (std::size_t i = 0; i < o.cases * 5; ++i) {
    const std::size_t n = 1 + gen.next() % 16, width = 2 + gen.next() % 6;
    TokenPruneConfig cfg;
    cfg.k_final = 1 + gen.next() % n;
    cfg.k_key = 1 + gen.next() % cfg.k_final;
    cfg.alpha = static_cast<double>(gen.next() % 5) / 4.0;
    Tensor emb({n, width});
    for (float& v : emb.data()) v = static_cast<float>(gen.next_normal());
    std::vector<double> raw(n);
    for (double& r : raw) r = static_cast<double>(gen.next() % 7);
    const auto got = prune_tokens(emb, normalize_scores(raw), cfg);
    const auto want = oracle::select_tokens(emb, raw, cfg.k_final, cfg.k_key, cfg.alpha);
    if (got.key != want.key || got.task != want.task || got.diverse != want.diverse ||
        got.pruned != want.pruned)
      return {"token_selection", false, "mismatch on case " + std::to_string(i)};
  }
  return {"token_selection", true, std::to_string(o.cases * 5) + " cases match"};
}

/// Dropping zero-output layers and the n=0 / sparsity=0 plan are identities.
inline CheckResult check_pruning_soundness() {
  ModelConfig c = default_config();
  c.n_layers = 4;
  c.image_size = 32;
  c.n_visual_tokens = 16;
  ModelBundle m = generate_model(c);
  for (std::size_t l : {1, 3}) {
    for (float& v : m.layers[l].wo.data()) v = 0.0f;
    for (float& v : m.layers[l].w_down.data()) v = 0.0f;
  }
  const auto sample = synthetic_sample(c, 3, 0);
  const Tensor visual = encode_image(sample.image, m);
  const Tensor text = embed_text(sample.token_ids, m);
  const Tensor full = forward_stack(m, visual, text, 0, false).hidden;
  const std::vector<std::size_t> ranked = {1, 3, 0, 2};
  const Tensor dropped = forward_stack(prune_layers(m, 2, ranked), visual, text, 0, false).hidden;
  const Tensor same =
      forward_stack(sparsify_mlp(prune_layers(m, 0, ranked), 0.0), visual, text, 0, false).hidden;
  const bool ok = full == dropped && full == same;
  return {"pruning_soundness", ok, ok ? "bitwise identical" : "hidden states differ"};
}

inline std::vector<CheckResult> run_verification(const VerifyOptions& o = {}) {
  return {check_param_counts(),        check_language_flops(),
          check_effective_steps(),     check_cache_transparency(o),
          check_importance(o),         check_token_selection(o),
          check_pruning_soundness()};
}

/// should_recompute with the modulus shifted by one step.
inline bool off_by_one_recompute(std::size_t t, std::size_t t_start, std::size_t interval) {
  return t == t_start || (t - 1) % interval == 0;
}

}  // namespace evla
