#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "evla/model_io.hpp"

namespace evla {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / "evla_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::vector<std::uint8_t> px(128 * 128);
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>((i * 7) % 256);
    write_file(path("img.pgm"), encode_pgm(128, 128, px));
    ASSERT_EQ(evla("gen-model --seed 42 --out " + path("base.evla")), 0);
    ASSERT_EQ(evla("prune --model " + path("base.evla") + " --out " + path("accel.evla") +
                   " --samples 2"),
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  /// Runs the CLI with stdout/stderr captured to files; returns the exit code.
  static int evla(const std::string& args) {
    const std::string cmd = std::string(EVLA_CLI_PATH) + " " + args + " >" + path("stdout") +
                            " 2>" + path("stderr");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string slurp(const std::string& name) { return read_file(path(name)); }

  static std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    for (std::string l; std::getline(ss, l);) out.push_back(l);
    return out;
  }

  static inline fs::path dir_;
};

const std::string kPrompt = "--token-ids 3,17,42,99,7,250,1,64";

TEST_F(Cli, GenModelIsDeterministic) {
  ASSERT_EQ(evla("gen-model --seed 42 --out " + path("again.evla")), 0);
  EXPECT_EQ(slurp("again.evla"), slurp("base.evla"));
  ASSERT_EQ(evla("gen-model --seed 43 --out " + path("other.evla")), 0);
  EXPECT_NE(slurp("other.evla"), slurp("base.evla"));
}

TEST_F(Cli, SeedFromEnvironment) {
  ::setenv("EVLA_SEED", "42", 1);
  const int code = evla("gen-model --out " + path("env.evla"));
  ::unsetenv("EVLA_SEED");
  ASSERT_EQ(code, 0);
  EXPECT_EQ(slurp("env.evla"), slurp("base.evla"));
}

TEST_F(Cli, ProfileLayersOneRowPerLayer) {
  ASSERT_EQ(evla("profile-layers --samples 2 --model " + path("base.evla") + " --out " +
                 path("imp.csv")),
            0);
  const auto rows = lines(slurp("imp.csv"));
  ASSERT_EQ(rows.size(), 9u);
  EXPECT_EQ(rows[0], "layer_index,importance");
  EXPECT_EQ(rows[1].substr(0, 2), "0,");
  EXPECT_EQ(rows[8].substr(0, 2), "7,");
}

TEST_F(Cli, PruneWritesPlanIntoManifest) {
  const ModelFile f = load_model(path("accel.evla"));
  ASSERT_TRUE(f.plan.has_value());
  EXPECT_EQ(f.model.layers.size(), 6u);
  EXPECT_EQ(f.plan->layers.dropped.size(), 2u);
  EXPECT_EQ(f.plan->cache_interval, 5u);
  ASSERT_TRUE(f.plan->tokens.has_value());
  EXPECT_EQ(f.plan->tokens->k_final, 56u);
}

TEST_F(Cli, PruneExplicitLayers) {
  ASSERT_EQ(evla("prune --model " + path("base.evla") + " --out " + path("explicit.evla") +
                 " --drop-layers 1,4 --mlp-sparsity 0"),
            0);
  const ModelFile f = load_model(path("explicit.evla"));
  EXPECT_EQ(f.model.retained_layer_indices(), (std::vector<std::size_t>{0, 2, 3, 5, 6, 7}));
  EXPECT_EQ(f.model.layers[0].w_up.dim(1), 176u);
}

TEST_F(Cli, RunProducesActionChunk) {
  ASSERT_EQ(evla("run --model " + path("accel.evla") + " --image " + path("img.pgm") + " " +
                 kPrompt + " --out " + path("act.csv") + " --selection-out " + path("sel.csv")),
            0);
  const auto rows = lines(slurp("act.csv"));
  ASSERT_EQ(rows.size(), 16u);
  for (const auto& r : rows) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 6);
  EXPECT_EQ(lines(slurp("sel.csv")).size(), 57u);
}

TEST_F(Cli, DisabledAccelerationMatchesLibraryBaseline) {
  ASSERT_EQ(evla("run --model " + path("accel.evla") + " --image " + path("img.pgm") + " " +
                 kPrompt + " --tokens all --cache-interval 1 --out " + path("plain.csv")),
            0);
  const ModelFile f = load_model(path("accel.evla"));
  const Tensor img = parse_pgm(slurp("img.pgm"));
  const std::vector<std::uint32_t> ids = {3, 17, 42, 99, 7, 250, 1, 64};
  const auto r = run_pipeline(f.model, img, ids, baseline_options());
  EXPECT_EQ(slurp("plain.csv"), actions_csv(r.actions));

  ASSERT_EQ(evla("run --model " + path("base.evla") + " --image " + path("img.pgm") + " " +
                 kPrompt + " --out " + path("b1.csv")),
            0);
  ASSERT_EQ(evla("run --model " + path("base.evla") + " --image " + path("img.pgm") + " " +
                 kPrompt + " --tokens all --cache-interval 1 --out " + path("b2.csv")),
            0);
  EXPECT_EQ(slurp("b1.csv"), slurp("b2.csv"));
}

TEST_F(Cli, InputErrorsExitThree) {
  write_file(path("bad.pgm"), "P5\n128 128\n255\nshort");
  EXPECT_EQ(evla("run --model " + path("base.evla") + " --image " + path("bad.pgm") + " " + kPrompt),
            3);
  write_file(path("small.pgm"), encode_pgm(8, 8, std::vector<std::uint8_t>(64, 0)));
  EXPECT_EQ(
      evla("run --model " + path("base.evla") + " --image " + path("small.pgm") + " " + kPrompt), 3);
  write_file(path("junk.evla"), "not a model");
  EXPECT_EQ(evla("run --model " + path("junk.evla") + " --image " + path("img.pgm") + " " + kPrompt),
            3);
  EXPECT_EQ(evla("run --model " + path("base.evla") + " --image " + path("img.pgm") +
                 " --token-ids 1,999"),
            3);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(evla("prune --model " + path("base.evla") + " --out " + path("x.evla") +
                 " --n-drop 2 --drop-layers 1,2"),
            2);
  EXPECT_EQ(evla("bench --trials 2 --base " + path("base.evla") + " --accel " + path("accel.evla")),
            2);
  EXPECT_EQ(evla("no-such-command"), 2);
  write_file(path("cfg.json"), R"({"prune": {"bogus": 1}})");
  EXPECT_EQ(evla("gen-model --config " + path("cfg.json") + " --out " + path("y.evla")), 2);
  EXPECT_EQ(evla("run --model " + path("base.evla") + " --image " + path("img.pgm") + " " +
                 kPrompt + " --cache-interval 0"),
            2);
}

TEST_F(Cli, ConfigFileSuppliesPaths) {
  write_file(path("paths.json"), "{\"model\": {\"n_layers\": 2}, \"paths\": {\"out\": \"" +
                                     path("cfg_model.evla") + "\"}}");
  ASSERT_EQ(evla("gen-model --config " + path("paths.json")), 0);
  EXPECT_EQ(load_model(path("cfg_model.evla")).model.layers.size(), 2u);
}

TEST_F(Cli, VerifyPassesAndMutationFails) {
  EXPECT_EQ(evla("verify --cases 3"), 0);
  const auto ok = lines(slurp("stdout"));
  ASSERT_EQ(ok.size(), 7u);
  for (const auto& l : ok) EXPECT_EQ(l.substr(0, 4), "PASS") << l;
  EXPECT_EQ(evla("verify --cases 3 --inject-recompute-off-by-one"), 4);
  EXPECT_NE(slurp("stdout").find("FAIL cache_transparency"), std::string::npos);
}

TEST_F(Cli, BenchReportSchema) {
  ASSERT_EQ(evla("bench --trials 3 --base " + path("base.evla") + " --accel " +
                 path("accel.evla") + " --out " + path("bench.json") + " --csv " +
                 path("bench.csv")),
            0);
  const json j = json::parse(slurp("bench.json"));
  for (const char* model : {"base", "accel"})
    for (const char* stage : {"vision", "language", "action"})
      for (const char* key : {"params", "tokens", "steps", "time_ms", "flops"})
        EXPECT_TRUE(j.at(model).at(stage).contains(key)) << model << "." << stage << "." << key;
  EXPECT_LT(j.at("comparison").at("flops_ratio").get<double>(), 0.35);
  EXPECT_GT(j.at("comparison").at("speedup").get<double>(), 0.0);
  EXPECT_EQ(j.at("accel").at("action").at("steps"), 2);
  const auto rows = lines(slurp("bench.csv"));
  ASSERT_EQ(rows.size(), 7u);
  EXPECT_EQ(rows[0], "model,stage,params,tokens,steps,time_ms,flops");
  EXPECT_EQ(rows[1].substr(0, 12), "base,vision,");
}

TEST_F(Cli, AnalyzeWritesAllOutputs) {
  ASSERT_EQ(evla("analyze --samples 2 --model " + path("base.evla") + " --out-dir " +
                 path("an") + " --image " + path("img.pgm") + " " + kPrompt),
            0);
  EXPECT_EQ(lines(slurp("an/interlayer.csv")).size(), 9u);
  EXPECT_EQ(lines(slurp("an/selection.csv")).size(), 57u);
  EXPECT_EQ(lines(slurp("an/temporal.csv")).size(), 1u + 2u * 9u);
  const Tensor mask = parse_pgm(slurp("an/token_mask.pgm"));
  EXPECT_EQ(mask.dims(), (Dims{16, 16}));
  float kept = 0;
  for (float v : mask.data()) kept += v;
  EXPECT_EQ(kept, 56.0f);
}

}  // namespace
}  // namespace evla
