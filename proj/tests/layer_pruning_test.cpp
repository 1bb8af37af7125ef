#include <algorithm>
#include <numeric>
#include <utility>
#include <vector>

#include <gtest/gtest.h>

#include "evla/layer_pruning.hpp"
#include "evla/oracles.hpp"
#include "evla/pipeline.hpp"
#include "test_util.hpp"

namespace evla {
namespace {

using testing::random_tensor;

ModelConfig tiny_config(std::size_t layers = 6) {
  ModelConfig c;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_layers = layers;
  c.d_ff = 40;
  c.image_size = 32;
  c.n_visual_tokens = 16;
  c.vocab_size = 64;
  c.max_text_tokens = 6;
  return c;
}

void zero_outputs(LayerWeights& l) {
  for (float& v : l.wo.data()) v = 0.0f;
  for (float& v : l.w_down.data()) v = 0.0f;
}

Tensor final_hidden(const ModelBundle& m, std::uint64_t seed) {
  const auto s = synthetic_sample(m.config, seed, 0);
  return forward_stack(m, encode_image(s.image, m), embed_text(s.token_ids, m), 0, false).hidden;
}

// Importance -----------------------------------------------------------------

TEST(LayerImportance, PureResidualLayerScoresZero) {
  ModelBundle m = generate_model(tiny_config(3));
  zero_outputs(m.layers[1]);
  const auto imp = calibrate_importance(m, 2, 0);
  EXPECT_EQ(imp.scores[1], 0.0);
  EXPECT_GT(imp.scores[0], 0.0);
  EXPECT_EQ(imp.calibration_size, 2u);
}

TEST(LayerImportance, SignFlipScoresTwo) {
  SeededGenerator gen(1);
  HiddenTrace t;
  const Tensor x = random_tensor(gen, {5, 8});
  Tensor y = x;
  for (float& v : y.data()) v = -v;
  t.layers.push_back({x, y});
  EXPECT_EQ(layer_importance(std::vector<HiddenTrace>{t}).scores[0], 2.0);
}

TEST(LayerImportance, MatchesDoubleLoopOracle) {
  SeededGenerator gen(2);
  std::vector<HiddenTrace> traces;
  for (int s = 0; s < 2; ++s) traces.push_back(oracle::random_trace(gen, 3, 4, 16));
  const auto got = layer_importance(traces).scores;
  const auto want = oracle::layer_importance(traces);
  ASSERT_EQ(got.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(got[l], want[l], 1e-6);
}

TEST(LayerImportance, EmptyTraceListThrows) {
  EXPECT_THROW(layer_importance(std::vector<HiddenTrace>{}), InputError);
}

TEST(LayerImportance, MixedDepthThrows) {
  SeededGenerator gen(3);
  std::vector<HiddenTrace> traces = {oracle::random_trace(gen, 2, 3, 4),
                                     oracle::random_trace(gen, 3, 3, 4)};
  EXPECT_THROW(layer_importance(traces), InputError);
}

TEST(LayerImportance, ScoresStayInRange) {
  SeededGenerator gen(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<HiddenTrace> traces = {oracle::random_trace(gen, 4, 3, 3)};
    for (double s : layer_importance(traces).scores) {
      EXPECT_GE(s, 0.0);
      EXPECT_LE(s, 2.0);
    }
  }
}

TEST(LayerImportance, InvariantToPositiveRescaling) {
  SeededGenerator gen(5);
  std::vector<HiddenTrace> traces = {oracle::random_trace(gen, 3, 6, 12)};
  auto scaled = traces;
  for (auto& lt : scaled[0].layers) {
    for (float& v : lt.input.data()) v *= 3.75f;
    for (float& v : lt.output.data()) v *= 3.75f;
  }
  const auto a = layer_importance(traces).scores, b = layer_importance(scaled).scores;
  for (std::size_t l = 0; l < a.size(); ++l) EXPECT_NEAR(a[l], b[l], 1e-6);
}

TEST(LayerImportance, CalibrationIsDeterministic) {
  const ModelBundle m = generate_model(tiny_config(4));
  EXPECT_EQ(calibrate_importance(m, 3, 9).scores, calibrate_importance(m, 3, 9).scores);
}

// Ranking ----------------------------------------------------------------------

TEST(RankLayers, Examples) {
  EXPECT_EQ(rank_layers({{0.5, 0.1, 0.9}, 1}), (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_EQ(rank_layers({{0.3, 0.3, 0.3, 0.3}, 1}), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(RankLayers, MatchesReferenceSort) {
  SeededGenerator gen(6);
  for (int trial = 0; trial < 100; ++trial) {
    LayerImportance imp;
    const std::size_t n = 1 + gen.next() % 12;
    for (std::size_t i = 0; i < n; ++i) imp.scores.push_back(static_cast<double>(gen.next() % 5) / 4);
    std::vector<std::pair<double, std::size_t>> ref;
    for (std::size_t i = 0; i < n; ++i) ref.emplace_back(imp.scores[i], i);
    std::sort(ref.begin(), ref.end());
    std::vector<std::size_t> want;
    for (const auto& r : ref) want.push_back(r.second);
    EXPECT_EQ(rank_layers(imp), want);
  }
}

TEST(RankLayers, DroppedSetIsTheNSmallest) {
  SeededGenerator gen(7);
  for (int trial = 0; trial < 100; ++trial) {
    LayerImportance imp;
    const std::size_t n_layers = 2 + gen.next() % 10;
    for (std::size_t i = 0; i < n_layers; ++i) imp.scores.push_back(gen.next_unit());
    const std::size_t n = gen.next() % n_layers;
    auto ranked = rank_layers(imp);
    std::vector<std::size_t> dropped(ranked.begin(), ranked.begin() + n);
    std::sort(dropped.begin(), dropped.end());
    std::vector<std::size_t> all(n_layers);
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<double> neg;
    for (double s : imp.scores) neg.push_back(-s);
    EXPECT_EQ(dropped, oracle::top_k(all, neg, n));
  }
}

// Depth pruning ----------------------------------------------------------------

TEST(PruneLayers, DropNothingIsIdentity) {
  const ModelBundle m = generate_model(tiny_config());
  const std::vector<std::size_t> ranked = {0, 1, 2, 3, 4, 5};
  EXPECT_TRUE(final_hidden(prune_layers(m, 0, ranked), 1) == final_hidden(m, 1));
}

TEST(PruneLayers, DroppingPureResidualLayersIsExact) {
  ModelBundle m = generate_model(tiny_config());
  zero_outputs(m.layers[2]);
  zero_outputs(m.layers[5]);
  const std::vector<std::size_t> ranked = {5, 2, 0, 1, 3, 4};
  const ModelBundle pruned = prune_layers(m, 2, ranked);
  EXPECT_EQ(pruned.retained_layer_indices(), (std::vector<std::size_t>{0, 1, 3, 4}));
  EXPECT_TRUE(final_hidden(pruned, 2) == final_hidden(m, 2));
}

TEST(PruneLayers, MatchesManualLayerLoop) {
  const ModelBundle m = generate_model(tiny_config());
  const std::vector<std::size_t> ranked = {4, 1, 3, 0, 2, 5};
  const ModelBundle pruned = prune_layers(m, 3, ranked);
  const auto s = synthetic_sample(m.config, 3, 0);
  const Tensor x = concat_rows(embed_text(s.token_ids, m), encode_image(s.image, m));
  const std::vector<std::size_t> keep = {0, 2, 5};
  EXPECT_TRUE(final_hidden(pruned, 3) == oracle::run_layers(m, x, keep));
}

TEST(PruneLayers, RejectsDroppingEverything) {
  const ModelBundle m = generate_model(tiny_config(3));
  const std::vector<std::size_t> ranked = {0, 1, 2};
  EXPECT_THROW(prune_layers(m, 3, ranked), InputError);
  EXPECT_THROW(prune_layers(m, 4, ranked), InputError);
}

TEST(PruneLayers, RejectsUnknownOrDuplicateIndices) {
  const ModelBundle m = generate_model(tiny_config(3));
  const std::vector<std::size_t> unknown = {7, 1, 2}, dup = {1, 1, 2};
  EXPECT_THROW(prune_layers(m, 1, unknown), InputError);
  EXPECT_THROW(prune_layers(m, 2, dup), InputError);
}

TEST(ApplyLayerPlan, DroppedIsPrefixOfRanked) {
  const ModelBundle m = generate_model(tiny_config());
  const LayerImportance imp{{0.4, 0.1, 0.3, 0.05, 0.9, 0.2}, 4};
  PruneLayersPlan plan;
  const ModelBundle out = apply_layer_plan(m, imp, 2, 0.25, plan);
  EXPECT_EQ(plan.ranked, (std::vector<std::size_t>{3, 1, 5, 2, 0, 4}));
  EXPECT_EQ(plan.dropped, (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(out.retained_layer_indices(), (std::vector<std::size_t>{0, 2, 4, 5}));
  ASSERT_EQ(plan.mlp_keep.size(), 4u);
  for (const auto& k : plan.mlp_keep) EXPECT_EQ(k.size(), 30u);
}

// Width pruning ----------------------------------------------------------------

TEST(MlpKeepCount, Rounding) {
  EXPECT_EQ(mlp_keep_count(11008, 0.25), 8256u);
  EXPECT_EQ(mlp_keep_count(176, 0.25), 132u);
  EXPECT_EQ(mlp_keep_count(10, 0.0), 10u);
  EXPECT_EQ(mlp_keep_count(3, 0.99), 1u);
  EXPECT_THROW(mlp_keep_count(10, 1.0), ConfigError);
  EXPECT_THROW(mlp_keep_count(10, -0.1), ConfigError);
}

TEST(SparsifyMlp, ZeroSparsityIsBitwiseIdentity) {
  const ModelBundle m = generate_model(tiny_config(2));
  const ModelBundle s = sparsify_mlp(m, 0.0);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_TRUE(s.layers[l].w_gate == m.layers[l].w_gate);
    EXPECT_TRUE(s.layers[l].w_up == m.layers[l].w_up);
    EXPECT_TRUE(s.layers[l].w_down == m.layers[l].w_down);
  }
  EXPECT_TRUE(final_hidden(s, 4) == final_hidden(m, 4));
}

TEST(SparsifyMlp, DeadColumnRemovalPreservesOutput) {
  ModelBundle m = generate_model(tiny_config(2));
  for (auto& l : m.layers) {
    for (std::size_t r = 0; r < l.w_up.dim(0); ++r) {
      l.w_up.at(r, 7) = 0.0f;
      l.w_gate.at(r, 7) = 0.0f;
    }
    for (float& v : l.w_down.row(7)) v = 0.0f;
  }
  std::vector<std::vector<std::size_t>> keep;
  const ModelBundle s = sparsify_mlp(m, 1.0 / 40.0, &keep);
  for (const auto& k : keep) {
    EXPECT_EQ(k.size(), 39u);
    EXPECT_EQ(std::find(k.begin(), k.end(), 7u), k.end());
  }
  EXPECT_LE(max_abs_diff(final_hidden(s, 5), final_hidden(m, 5)), 1e-6f);
}

TEST(SparsifyMlp, KeptSetMatchesBruteForceRanking) {
  SeededGenerator gen(8);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = tiny_config(1);
    c.seed = gen.next();
    const ModelBundle m = generate_model(c);
    const double sparsity = 0.1 * static_cast<double>(gen.next() % 9);
    const auto keep = mlp_keep_columns(m.layers[0], sparsity);
    EXPECT_EQ(keep, oracle::mlp_keep(m.layers[0], mlp_keep_count(40, sparsity)));
  }
}

// Parameter arithmetic -----------------------------------------------------------

TEST(CountLanguageParams, Llama2Baseline) {
  const double m = count_language_params(LanguageShape::llama2_7b(), 32, 0.0) / 1e6;
  EXPECT_NEAR(m, 6738.9, 6738.9 * 0.005);
}

TEST(CountLanguageParams, Llama2Pruned) {
  const double m = count_language_params(LanguageShape::llama2_7b(), 22, 0.25) / 1e6;
  EXPECT_NEAR(m, 3971.1, 3971.1 * 0.005);
}

TEST(CountLanguageParams, ToyMatchesHandSum) {
  ModelConfig c;
  c.d_ff = 256;
  c.n_layers = 4;
  const auto shape = LanguageShape::from(c);
  EXPECT_EQ(count_language_params(shape, 4, 0.0), oracle::toy_language_params(256, 64, 256, 4));
  EXPECT_EQ(count_language_params(shape, 4, 0.0), stored_language_params(generate_model(c)));
}

TEST(CountLanguageParams, StrictlyDecreasing) {
  const auto shape = LanguageShape::llama2_7b();
  for (std::size_t n = 32; n > 1; --n)
    EXPECT_GT(count_language_params(shape, n, 0.0), count_language_params(shape, n - 1, 0.0));
  for (int i = 0; i < 9; ++i)
    EXPECT_GT(count_language_params(shape, 22, 0.1 * i), count_language_params(shape, 22, 0.1 * (i + 1)));
}

TEST(CountLanguageParams, StoredCountTracksPruning) {
  const ModelBundle m = generate_model(tiny_config());
  const LayerImportance imp{{0.4, 0.1, 0.3, 0.05, 0.9, 0.2}, 1};
  PruneLayersPlan plan;
  const ModelBundle out = apply_layer_plan(m, imp, 2, 0.25, plan);
  EXPECT_EQ(stored_language_params(out),
            count_language_params(LanguageShape::from(m.config), 4, 0.25));
}

TEST(RetainedLayerTarget, TwentyTwoOfThirtyTwo) {
  EXPECT_EQ(retained_layer_target(32), 22u);
  EXPECT_EQ(retained_layer_target(8), 6u);
  EXPECT_EQ(retained_layer_target(12), 8u);
  EXPECT_EQ(retained_layer_target(1), 1u);
}

}  // namespace
}  // namespace evla
