#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "evla/oracles.hpp"
#include "evla/pipeline.hpp"
#include "evla/profiler.hpp"
#include "test_util.hpp"

namespace evla {
namespace {

using testing::random_tensor;

constexpr double kLlamaLanguageGflops = 3726.55;

// FLOP model -------------------------------------------------------------------------

TEST(LanguageFlops, Llama2AtSequence277) {
  const double g = language_flops_uniform(LanguageShape::llama2_7b(), 32, 0.0, 277) / 1e9;
  EXPECT_NEAR(g, kLlamaLanguageGflops, kLlamaLanguageGflops * 0.015);
}

TEST(LanguageFlops, Llama2AtSolvedSequence) {
  const auto shape = LanguageShape::llama2_7b();
  const double s = solve_sequence_length(shape, kLlamaLanguageGflops * 1e9);
  const auto rounded = static_cast<std::size_t>(std::llround(s));
  EXPECT_GE(rounded, 274u);
  EXPECT_LE(rounded, 279u);
  const double g = language_flops_uniform(shape, 32, 0.0, rounded) / 1e9;
  EXPECT_NEAR(g, kLlamaLanguageGflops, kLlamaLanguageGflops * 0.015);
}

TEST(LanguageFlops, SolvedSequenceInvertsModel) {
  // Root of the model without embedding/head split; check by substitution.
  const auto shape = LanguageShape::llama2_7b();
  const double p = static_cast<double>(count_language_params(shape, 32, 0.0));
  const double s = solve_sequence_length(shape, 1e12);
  EXPECT_NEAR(2 * p * s + 4 * s * s * 4096.0 * 32, 1e12, 1.0);
}

TEST(LanguageFlops, HalvingSequenceHalvesLinearTerm) {
  const auto shape = LanguageShape::llama2_7b();
  auto linear = [&](std::size_t s) {
    const double sd = static_cast<double>(s);
    return language_flops_uniform(shape, 32, 0.0, s) - 32 * 4.0 * sd * sd * 4096.0;
  };
  EXPECT_EQ(linear(276), 2.0 * linear(138));
}

TEST(LanguageFlops, PerLayerSequenceLengths) {
  EXPECT_EQ(layer_sequence_lengths(4, 16, 256, std::nullopt),
            (std::vector<std::size_t>{272, 272, 272, 272}));
  EXPECT_EQ(layer_sequence_lengths(4, 16, 256, default_token_config(256)),
            (std::vector<std::size_t>{272, 272, 72, 72}));
}

TEST(ActionFlops, TenToTwoStepsRatio) {
  const ModelConfig c = default_config();
  const double ratio = action_flops(c, 2) / action_flops(c, 10);
  EXPECT_GE(ratio, 0.20);
  EXPECT_LE(ratio, 0.23);
  EXPECT_NEAR(ratio, 11.72 / 57.96, 0.015);
}

TEST(ActionFlops, MonotoneInInterval) {
  const ModelConfig c = default_config();
  for (std::size_t t = 1; t <= 30; ++t)
    for (std::size_t a = 1; a < t; ++a)
      EXPECT_GE(count_effective_steps(t, a), count_effective_steps(t, a + 1));
  for (std::size_t a = 1; a < 10; ++a)
    EXPECT_GE(action_flops(c, count_effective_steps(10, a)),
              action_flops(c, count_effective_steps(10, a + 1)));
}

/// Per-stage matmul FLOPs measured by the instrumented counter.
struct Measured {
  double vision = 0, language = 0, action = 0;
};

Measured measure(const ModelBundle& m, const CalibrationSample& s, const PipelineOptions& o) {
  Measured out;
  Tensor visual;
  {
    FlopCounter c;
    visual = encode_image(s.image, m);
    out.vision = static_cast<double>(c.flops());
  }
  std::vector<float> cog;
  {
    FlopCounter c;
    const auto lang = run_language(m, visual, embed_text(s.token_ids, m), o.tokens);
    cog = cognition_from_hidden(lang.hidden, m);
    out.language = static_cast<double>(c.flops());
  }
  // The estimate charges the embedding table as a dense matmul over the
  // full input sequence; the forward pass does a lookup.
  const ModelConfig& mc = m.config;
  out.language += 2.0 * static_cast<double>(mc.vocab_size * mc.d_model) *
                  static_cast<double>(mc.n_visual_tokens + s.token_ids.size());
  {
    FlopCounter c;
    denoise_loop(cog, m, o.cache, 1);
    out.action = static_cast<double>(c.flops());
  }
  return out;
}

void expect_within(double estimate, double counted, double rel) {
  EXPECT_LE(std::fabs(estimate - counted), rel * counted) << estimate << " vs " << counted;
}

TEST(EstimateFlops, BaselineMatchesInstrumentedCounter) {
  const ModelBundle m = generate_model(default_config());
  const auto s = synthetic_sample(m.config, 1, 0);
  const auto est = estimate_flops(m, baseline_options(), s.token_ids.size());
  const Measured got = measure(m, s, baseline_options());
  expect_within(est.stage("vision").flops, got.vision, 0.05);
  expect_within(est.stage("language").flops, got.language, 0.05);
  expect_within(est.stage("action").flops, got.action, 0.05);
}

TEST(EstimateFlops, AcceleratedMatchesInstrumentedCounter) {
  const ModelBundle base = generate_model(default_config());
  AccelerationSettings st;
  st.calibration_samples = 2;
  const AcceleratedModel acc = accelerate(base, st);
  const auto opt = options_from_plan(acc.plan);
  const auto s = synthetic_sample(base.config, 2, 0);
  const auto est = estimate_flops(acc.model, opt, s.token_ids.size());
  const Measured got = measure(acc.model, s, opt);
  expect_within(est.stage("language").flops, got.language, 0.05);
  expect_within(est.stage("action").flops, got.action, 0.05);
  expect_within(est.total_flops(), got.vision + got.language + got.action, 0.05);
}

TEST(EstimateFlops, TotalIsSumOfStages) {
  const ModelBundle m = generate_model(default_config());
  const auto b = estimate_flops(m, baseline_options(), 16);
  ASSERT_EQ(b.stages.size(), 3u);
  EXPECT_EQ(b.total_flops(), b.stages[0].flops + b.stages[1].flops + b.stages[2].flops);
  EXPECT_EQ(b.total_params(), b.stages[0].params + b.stages[1].params + b.stages[2].params);
}

TEST(EstimateFlops, ToyFullPlanMatchesHandComputation) {
  const ModelConfig c = default_config();
  const ModelBundle base = generate_model(c);
  AccelerationSettings st;
  st.calibration_samples = 2;
  const AcceleratedModel acc = accelerate(base, st);
  const auto b = estimate_flops(base, baseline_options(), 16);
  const auto a = estimate_flops(acc.model, options_from_plan(acc.plan), 16);

  // Language: 8 layers at 272 tokens vs 2 layers at 272 and 4 at 72, MLP
  // width 176 -> 132; embedding at 272; no output head, final norm at the
  // output length.
  const double d = 64, emb = 256 * 64;
  auto layer = [&](double ff, double s) { return 2 * (4 * d * d + 3 * d * ff + 4 * d) * s + 4 * s * s * d; };
  const double lang_base = 2 * emb * 272 + 8 * layer(176, 272) + 2 * (2 * d) * 272;
  const double lang_acc = 2 * emb * 272 + 2 * layer(132, 272) + 4 * layer(132, 72) + 2 * (2 * d) * 72;
  EXPECT_DOUBLE_EQ(b.stage("language").flops, lang_base);
  EXPECT_DOUBLE_EQ(a.stage("language").flops, lang_acc);

  // Action: blocks at 17 rows on 10 vs 2 steps; noise head every step.
  const double dd = 64, ff = 256;
  const double block = 2 * (4 * dd * dd + 2 * dd * ff + ff + dd + 4 * dd) * 17 + 4 * 17.0 * 17 * dd;
  const double fixed = 2 * (d * dd + dd) + 10 * 2 * (3 * dd + dd * dd) * 16 + 2 * (dd * 7 + 7) * 16;
  EXPECT_DOUBLE_EQ(b.stage("action").flops, fixed + 10 * 4 * block);
  EXPECT_DOUBLE_EQ(a.stage("action").flops, fixed + 2 * 4 * block);

  const double vision = 2 * (64 * 64 + 64) * 256.0;
  const double ratio = (vision + lang_acc + fixed + 8 * block) / (vision + lang_base + fixed + 40 * block);
  EXPECT_DOUBLE_EQ(compare_reports(b, a).flops_ratio, ratio);
  EXPECT_LE(ratio, 0.35);
}

TEST(EstimateFlops, MonotoneInLayersTokensAndSteps) {
  const ModelBundle m = generate_model(default_config());
  const std::vector<std::size_t> order = {0, 1, 2, 3, 4, 5, 6, 7};
  double prev = estimate_flops(m, baseline_options(), 16).total_flops();
  for (std::size_t n = 1; n < 8; ++n) {
    const double f = estimate_flops(prune_layers(m, n, order), baseline_options(), 16).total_flops();
    EXPECT_LT(f, prev);
    prev = f;
  }
  PipelineOptions o;
  prev = estimate_flops(m, o, 16).total_flops();
  for (std::size_t k : {256, 112, 96, 72, 56, 8}) {
    o.tokens = default_token_config(256);
    o.tokens->k_final = k;
    const double f = estimate_flops(m, o, 16).total_flops();
    EXPECT_LE(f, prev);
    prev = f;
  }
  prev = estimate_flops(m, o, 16).total_flops();
  for (std::size_t interval = 2; interval <= 10; ++interval) {
    o.cache.interval = interval;
    const double f = estimate_flops(m, o, 16).total_flops();
    EXPECT_LE(f, prev);
    prev = f;
  }
}

// Latency -----------------------------------------------------------------------------

TEST(MeasureLatency, RequiresThreeTrials) {
  EXPECT_THROW(measure_latency([] { return StageTimes{}; }, 2), InputError);
}

TEST(MeasureLatency, MedianSkipsWarmup) {
  int call = 0;
  const std::vector<double> seq = {100, 3, 1, 2};
  const StageTimes t = measure_latency(
      [&] {
        const double v = seq[call++];
        return StageTimes{v, 2 * v, 3 * v};
      },
      3);
  EXPECT_EQ(call, 4);
  EXPECT_EQ(t.vision_ms, 2.0);
  EXPECT_EQ(t.language_ms, 4.0);
  EXPECT_EQ(t.action_ms, 6.0);
}

TEST(ProfilePipeline, PositiveTimesAndStableSchema) {
  ModelConfig c = default_config();
  c.n_layers = 2;
  const ModelBundle m = generate_model(c);
  const auto s = synthetic_sample(c, 1, 0);
  const auto a = profile_pipeline(m, s.image, s.token_ids, baseline_options(), 3);
  const auto b = profile_pipeline(m, s.image, s.token_ids, baseline_options(), 3);
  ASSERT_EQ(a.stages.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_GT(a.stages[i].time_ms, 0.0);
    EXPECT_EQ(a.stages[i].name, b.stages[i].name);
    EXPECT_EQ(a.stages[i].flops, b.stages[i].flops);
  }
}

TEST(CompareReports, IdenticalReportsGiveUnitRatios) {
  ModuleBreakdown r;
  r.stages = {{"vision", 10, 256, 0, 1.0, 5.0},
              {"language", 20, 256, 0, 2.0, 7.0},
              {"action", 30, 0, 10, 3.0, 9.0}};
  const Comparison c = compare_reports(r, r);
  EXPECT_EQ(c.speedup, 1.0);
  EXPECT_EQ(c.flops_ratio, 1.0);
  EXPECT_EQ(c.param_ratio, 1.0);
}

TEST(CompareReports, StageMismatchThrows) {
  ModuleBreakdown a, b;
  a.stages = {{"vision", 1, 0, 0, 1, 1}};
  b.stages = {{"language", 1, 0, 0, 1, 1}};
  EXPECT_THROW(compare_reports(a, b), InputError);
  b.stages.push_back({"action", 1, 0, 0, 1, 1});
  EXPECT_THROW(compare_reports(a, b), InputError);
}

TEST(CompareReports, ActionOnlyCacheRatio) {
  const ModelBundle m = generate_model(default_config());
  PipelineOptions cached;
  cached.cache.interval = 5;
  const auto b = estimate_flops(m, baseline_options(), 16);
  const auto a = estimate_flops(m, cached, 16);
  EXPECT_EQ(a.stage("language").flops, b.stage("language").flops);
  const double r = a.stage("action").flops / b.stage("action").flops;
  EXPECT_NEAR(r, 0.202, 0.03);
}

// Redundancy analyzers ------------------------------------------------------------------

TEST(InterlayerSimilarity, ComplementOfImportance) {
  SeededGenerator gen(1);
  std::vector<HiddenTrace> traces;
  for (int i = 0; i < 3; ++i) traces.push_back(oracle::random_trace(gen, 4, 5, 8));
  const auto sim = interlayer_similarity(traces);
  const auto imp = layer_importance(traces).scores;
  const auto want = oracle::layer_importance(traces);
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_NEAR(sim[l] + imp[l], 1.0, 1e-6);
    EXPECT_NEAR(sim[l], 1.0 - want[l], 1e-6);
    EXPECT_GE(sim[l], -1.0);
    EXPECT_LE(sim[l], 1.0);
  }
}

TEST(InterlayerSimilarity, PureResidualIsOne) {
  SeededGenerator gen(2);
  HiddenTrace t;
  const Tensor x = random_tensor(gen, {4, 6});
  t.layers.push_back({x, x});
  EXPECT_EQ(interlayer_similarity(std::vector<HiddenTrace>{t})[0], 1.0);
  EXPECT_THROW(interlayer_similarity(std::vector<HiddenTrace>{}), InputError);
}

DenoiseResult synthetic_run(const std::vector<Tensor>& attn, const std::vector<Tensor>& mlp) {
  DenoiseResult r;
  for (std::size_t k = 0; k < attn.size(); ++k) {
    r.features.push_back({BlockFeatures{attn[k], mlp[k]}});
    r.timesteps.push_back(attn.size() - k);
  }
  return r;
}

TEST(TemporalSimilarity, IdenticalAndFlippedFeatures) {
  SeededGenerator gen(3);
  const Tensor f = random_tensor(gen, {3, 4});
  Tensor neg = f;
  for (float& v : neg.data()) v = -v;
  const auto same = temporal_similarity(synthetic_run({f, f, f}, {f, f, f}));
  ASSERT_EQ(same.size(), 4u);
  for (const auto& s : same) EXPECT_EQ(s.cos, 1.0);
  const auto flip = temporal_similarity(synthetic_run({f, neg}, {neg, f}));
  EXPECT_EQ(flip[0].kind, "attn");
  EXPECT_EQ(flip[0].cos, -1.0);
  EXPECT_EQ(flip[1].kind, "mlp");
  EXPECT_EQ(flip[1].cos, -1.0);
}

TEST(TemporalSimilarity, TooFewStepsThrows) {
  EXPECT_THROW(temporal_similarity(synthetic_run({Tensor({1, 1})}, {Tensor({1, 1})})), InputError);
}

TEST(TemporalSimilarity, RealRunMatchesDirectOracle) {
  ModelConfig c = default_config();
  c.dit_blocks = 2;
  const ModelBundle m = generate_model(c);
  DenoiseOptions o;
  o.record_features = true;
  const std::vector<float> cog(64, 0.1f);
  const auto run = denoise_loop(cog, m, CachePolicy{1}, 5, o);
  const auto sims = temporal_similarity(run);
  ASSERT_EQ(sims.size(), 18u);
  for (std::size_t k = 0; k + 1 < run.features.size(); ++k) {
    double attn = 0, mlp = 0;
    for (std::size_t b = 0; b < 2; ++b) {
      attn += oracle::cosine(run.features[k][b].attn.data(), run.features[k + 1][b].attn.data());
      mlp += oracle::cosine(run.features[k][b].mlp.data(), run.features[k + 1][b].mlp.data());
    }
    EXPECT_EQ(sims[2 * k].t, run.timesteps[k]);
    EXPECT_NEAR(sims[2 * k].cos, attn / 2, 1e-6);
    EXPECT_NEAR(sims[2 * k + 1].cos, mlp / 2, 1e-6);
  }
}

}  // namespace
}  // namespace evla
