// evla: command-line driver for model generation, pruning, inference,
// benchmarking, redundancy analysis and self-verification.
//
// Exit codes: 0 success, 2 config error, 3 input error, 4 verification
// failure, 1 anything else (I/O).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "evla/errors.hpp"
#include "evla/model_io.hpp"
#include "evla/pipeline.hpp"
#include "evla/profiler.hpp"
#include "evla/run_config.hpp"
#include "evla/verify.hpp"

namespace {

using namespace evla;

constexpr int kExitConfig = 2;
constexpr int kExitInput = 3;
constexpr int kExitVerify = 4;

struct VerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    write_file(path, text);
  }
}

std::string path_or(const RunConfig& rc, const std::string& flag, const std::string& key) {
  if (!flag.empty()) return flag;
  auto it = rc.paths.find(key);
  return it == rc.paths.end() ? std::string() : it->second;
}

std::string require_path(const RunConfig& rc, const std::string& flag, const std::string& key) {
  std::string p = path_or(rc, flag, key);
  if (p.empty()) throw ConfigError("missing --" + key);
  return p;
}

/// Image and prompt: from --image/--token-ids when given, else a seeded
/// synthetic sample.
CalibrationSample load_inputs(const ModelConfig& c, const std::string& image_path,
                              const std::string& token_ids, std::uint64_t seed) {
  CalibrationSample s = synthetic_sample(c, seed, 0);
  if (!image_path.empty()) {
    s.image = parse_pgm(read_file(image_path));
    if (s.image.dim(0) != c.image_size || s.image.dim(1) != c.image_size)
      throw InputError("image is " + std::to_string(s.image.dim(1)) + "x" +
                       std::to_string(s.image.dim(0)) + ", model expects " +
                       std::to_string(c.image_size) + "x" + std::to_string(c.image_size));
  }
  if (!token_ids.empty()) {
    s.token_ids.clear();
    for (std::size_t id : parse_index_list(token_ids, "token id"))
      s.token_ids.push_back(static_cast<std::uint32_t>(id));
  }
  return s;
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    return config_path.empty() ? RunConfig{} : load_run_config(config_path);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration");
  cmd->add_option("--seed", c.seed, "Seed (overrides EVLA_SEED and the config)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training-free acceleration toolkit for a toy vision-language-action model"};
  app.require_subcommand(1);

  // gen-model --------------------------------------------------------------
  Common gen_common;
  std::string gen_out, gen_preset = "default";
  auto* gen = app.add_subcommand("gen-model", "Generate a seeded baseline model");
  add_common(gen, gen_common);
  gen->add_option("--out", gen_out, "Output model path");
  gen->add_option("--preset", gen_preset, "Base configuration")
      ->check(CLI::IsMember({"default", "scaled"}));

  // profile-layers ---------------------------------------------------------
  Common prof_common;
  std::string prof_model, prof_out;
  std::optional<std::size_t> prof_samples;
  auto* prof = app.add_subcommand("profile-layers", "Per-layer importance over calibration data");
  add_common(prof, prof_common);
  prof->add_option("--model", prof_model, "Model path");
  prof->add_option("--out", prof_out, "CSV output (default stdout)");
  prof->add_option("--samples", prof_samples, "Calibration samples");

  // prune ------------------------------------------------------------------
  Common prune_common;
  std::string prune_model, prune_out, prune_drop;
  std::optional<std::size_t> prune_n_drop, prune_samples, prune_final, prune_key, prune_capture,
      prune_interval;
  std::optional<double> prune_sparsity, prune_alpha;
  bool prune_greedy = false;
  auto* prune = app.add_subcommand("prune", "Apply layer, MLP, token and cache settings");
  add_common(prune, prune_common);
  prune->add_option("--model", prune_model, "Baseline model path");
  prune->add_option("--out", prune_out, "Pruned model path");
  prune->add_option("--n-drop", prune_n_drop, "Number of least important layers to drop");
  prune->add_option("--drop-layers", prune_drop, "Explicit comma-separated layer indices");
  prune->add_option("--mlp-sparsity", prune_sparsity, "Fraction of MLP columns removed");
  prune->add_option("--token-final", prune_final, "Visual tokens kept after pruning");
  prune->add_option("--token-key", prune_key, "Key task-relevant tokens");
  prune->add_option("--alpha", prune_alpha, "Task share of the augmented budget");
  prune->add_option("--capture-layer", prune_capture, "Layer whose attention drives selection");
  prune->add_option("--cache-interval", prune_interval, "DiT feature cache interval");
  prune->add_flag("--greedy-diversity", prune_greedy, "Grow the diversity reference set per pick");
  prune->add_option("--samples", prune_samples, "Calibration samples");

  // run --------------------------------------------------------------------
  Common run_common;
  std::string run_model, run_image, run_ids, run_tokens, run_out, run_sel;
  std::optional<std::size_t> run_interval;
  auto* run = app.add_subcommand("run", "Predict an action chunk for one image and prompt");
  add_common(run, run_common);
  run->add_option("--model", run_model, "Model path");
  run->add_option("--image", run_image, "8-bit binary PGM image");
  run->add_option("--token-ids", run_ids, "Comma-separated prompt token ids");
  run->add_option("--tokens", run_tokens, "Visual tokens kept: 'all' or a count");
  run->add_option("--cache-interval", run_interval, "DiT feature cache interval");
  run->add_option("--out", run_out, "Action CSV (default stdout)");
  run->add_option("--selection-out", run_sel, "Token selection CSV");

  // bench ------------------------------------------------------------------
  Common bench_common;
  std::string bench_base, bench_accel, bench_out, bench_csv, bench_sweep, bench_image, bench_ids;
  std::size_t bench_trials = 5;
  auto* bench = app.add_subcommand("bench", "Compare baseline and accelerated models");
  add_common(bench, bench_common);
  bench->add_option("--base", bench_base, "Baseline model path");
  bench->add_option("--accel", bench_accel, "Accelerated model path");
  bench->add_option("--trials", bench_trials, "Timed trials (median reported)")
      ->check(CLI::Range(3, 1000));
  bench->add_option("--out", bench_out, "JSON report (default stdout)");
  bench->add_option("--csv", bench_csv, "CSV mirror of both breakdowns");
  bench->add_option("--sweep", bench_sweep, "Token-budget sweep CSV on the baseline model");
  bench->add_option("--image", bench_image, "8-bit binary PGM image");
  bench->add_option("--token-ids", bench_ids, "Comma-separated prompt token ids");

  // analyze ----------------------------------------------------------------
  Common an_common;
  std::string an_model, an_dir, an_image, an_ids;
  std::optional<std::size_t> an_samples;
  auto* analyze = app.add_subcommand("analyze", "Similarity CSVs and token mask image");
  add_common(analyze, an_common);
  analyze->add_option("--model", an_model, "Model path");
  analyze->add_option("--out-dir", an_dir, "Output directory");
  analyze->add_option("--samples", an_samples, "Calibration samples for layer similarity");
  analyze->add_option("--image", an_image, "8-bit binary PGM image");
  analyze->add_option("--token-ids", an_ids, "Comma-separated prompt token ids");

  // verify -----------------------------------------------------------------
  std::size_t ver_cases = 20;
  bool ver_mutate = false;
  auto* verify = app.add_subcommand("verify", "Run the oracle self-check suite");
  verify->add_option("--cases", ver_cases, "Random cases per property")->check(CLI::Range(1, 100000));
  verify->add_flag("--inject-recompute-off-by-one", ver_mutate,
                   "Replace the cache recompute rule with a shifted one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen) {
      RunConfig rc = gen_common.load();
      if (gen_preset == "scaled" && gen_common.config_path.empty()) rc.model = scaled_config();
      rc.model.seed = resolve_seed(gen_common.seed, rc.model.seed);
      rc.model.validate();
      save_model(require_path(rc, gen_out, "out"), {generate_model(rc.model), std::nullopt});
    } else if (*prof) {
      RunConfig rc = prof_common.load();
      if (prof_samples) rc.calibration_samples = *prof_samples;
      rc.calibration_seed = resolve_seed(prof_common.seed, rc.calibration_seed);
      rc.validate();
      const ModelFile f = load_model(require_path(rc, prof_model, "model"));
      const auto imp =
          calibrate_importance(f.model, rc.calibration_samples, rc.calibration_seed);
      const auto ids = f.model.retained_layer_indices();
      emit(path_or(rc, prof_out, "out"), importance_csv(imp, ids));
    } else if (*prune) {
      RunConfig rc = prune_common.load();
      auto& p = rc.prune;
      if (prune_n_drop) {
        p.n_drop = prune_n_drop;
        if (!prune_drop.empty()) p.drop_layers.reset();
      }
      if (!prune_drop.empty()) {
        p.drop_layers = parse_index_list(prune_drop, "layer index");
        if (!prune_n_drop) p.n_drop.reset();
      }
      if (prune_sparsity) p.mlp_sparsity = *prune_sparsity;
      if (prune_final) p.token_final = prune_final;
      if (prune_key) p.token_key = *prune_key;
      if (prune_alpha) p.alpha = *prune_alpha;
      if (prune_capture) p.capture_layer = *prune_capture;
      if (prune_interval) p.cache_interval = *prune_interval;
      if (prune_greedy) p.greedy_diversity = true;
      if (prune_samples) rc.calibration_samples = *prune_samples;
      rc.calibration_seed = resolve_seed(prune_common.seed, rc.calibration_seed);
      rc.validate();
      const ModelFile f = load_model(require_path(rc, prune_model, "model"));
      if (f.plan) throw InputError("model is already pruned");
      const AcceleratedModel acc =
          accelerate(f.model, rc.acceleration(f.model.config.n_visual_tokens));
      save_model(require_path(rc, prune_out, "out"), {acc.model, acc.plan});
    } else if (*run) {
      RunConfig rc = run_common.load();
      const ModelFile f = load_model(require_path(rc, run_model, "model"));
      const auto& c = f.model.config;
      PipelineOptions opt = f.plan ? options_from_plan(*f.plan) : baseline_options();
      if (run_tokens == "all") {
        opt.tokens.reset();
      } else if (!run_tokens.empty()) {
        const auto k = parse_index_list(run_tokens, "--tokens");
        if (k.size() != 1) throw ConfigError("--tokens takes 'all' or one count");
        TokenPruneConfig t = opt.tokens.value_or(rc.token_config(c.n_visual_tokens));
        t.k_final = k.front();
        t.validate(c.n_visual_tokens);
        opt.tokens = t;
      }
      if (run_interval) {
        CachePolicy{*run_interval}.validate(c.denoise_steps);
        opt.cache.interval = *run_interval;
      }
      if (run_common.seed || std::getenv("EVLA_SEED"))
        opt.noise_seed = derive_seed(resolve_seed(run_common.seed, 0), 0x4E4F495345ull);
      const std::string image = path_or(rc, run_image, "image");
      if (image.empty()) throw ConfigError("missing --image");
      if (run_ids.empty()) throw ConfigError("missing --token-ids");
      const CalibrationSample in = load_inputs(c, image, run_ids, 0);
      const PipelineResult r = run_pipeline(f.model, in.image, in.token_ids, opt);
      emit(path_or(rc, run_out, "out"), actions_csv(r.actions));
      const std::string sel_path = path_or(rc, run_sel, "selection");
      if (!sel_path.empty())
        emit(sel_path, r.selection ? selection_csv(*r.selection) : "token_index,set\n");
    } else if (*bench) {
      RunConfig rc = bench_common.load();
      const ModelFile base = load_model(require_path(rc, bench_base, "base"));
      const ModelFile accel = load_model(require_path(rc, bench_accel, "accel"));
      const CalibrationSample in = load_inputs(base.model.config, path_or(rc, bench_image, "image"),
                                               bench_ids, resolve_seed(bench_common.seed, 0));
      const auto base_opt = base.plan ? options_from_plan(*base.plan) : baseline_options();
      const auto accel_opt = accel.plan ? options_from_plan(*accel.plan) : baseline_options();
      const auto b = profile_pipeline(base.model, in.image, in.token_ids, base_opt, bench_trials);
      const auto a = profile_pipeline(accel.model, in.image, in.token_ids, accel_opt, bench_trials);
      json report;
      report["base"] = to_json(b);
      report["accel"] = to_json(a);
      report["comparison"] = to_json(compare_reports(b, a));
      emit(path_or(rc, bench_out, "out"), report.dump(2) + "\n");
      if (!bench_csv.empty()) {
        std::string csv = "model,stage,params,tokens,steps,time_ms,flops\n";
        for (const auto& [name, rep] : {std::pair{"base", &b}, std::pair{"accel", &a}}) {
          const std::string body = breakdown_csv(*rep);
          std::size_t pos = body.find('\n') + 1;
          while (pos < body.size()) {
            const std::size_t nl = body.find('\n', pos);
            csv += std::string(name) + "," + body.substr(pos, nl - pos + 1);
            pos = nl + 1;
          }
        }
        emit(bench_csv, csv);
      }
      if (!bench_sweep.empty()) {
        const auto& c = base.model.config;
        std::string csv = "tokens,language_flops,language_ms,total_ms\n";
        for (std::size_t k : {256, 112, 96, 72, 56}) {
          const auto scaled = static_cast<std::size_t>(
              std::llround(static_cast<double>(k) * static_cast<double>(c.n_visual_tokens) / 256.0));
          PipelineOptions o = base_opt;
          TokenPruneConfig t = default_token_config(c.n_visual_tokens);
          t.k_final = std::max(scaled, t.k_key);
          o.tokens = t;
          const auto rep = profile_pipeline(base.model, in.image, in.token_ids, o, bench_trials);
          csv += std::to_string(t.k_final) + "," + fixed6(rep.stage("language").flops) + "," +
                 fixed6(rep.stage("language").time_ms) + "," + fixed6(rep.total_ms()) + "\n";
        }
        emit(bench_sweep, csv);
      }
    } else if (*analyze) {
      RunConfig rc = an_common.load();
      if (an_samples) rc.calibration_samples = *an_samples;
      const std::uint64_t seed = resolve_seed(an_common.seed, rc.calibration_seed);
      const ModelFile f = load_model(require_path(rc, an_model, "model"));
      const std::filesystem::path dir = require_path(rc, an_dir, "out-dir");
      std::filesystem::create_directories(dir);
      const auto& c = f.model.config;

      std::vector<HiddenTrace> traces;
      for (std::size_t i = 0; i < rc.calibration_samples; ++i)
        traces.push_back(calibration_trace(f.model, synthetic_sample(c, seed, i), i));
      const auto ids = f.model.retained_layer_indices();
      write_file((dir / "interlayer.csv").string(),
                 interlayer_csv(interlayer_similarity(traces), ids));

      const CalibrationSample in = load_inputs(c, path_or(rc, an_image, "image"), an_ids, seed);
      PipelineOptions opt = f.plan ? options_from_plan(*f.plan) : baseline_options();
      if (!opt.tokens) opt.tokens = rc.token_config(c.n_visual_tokens);
      const PipelineResult r = run_pipeline(f.model, in.image, in.token_ids, opt);
      write_file((dir / "selection.csv").string(), selection_csv(*r.selection));
      write_file((dir / "token_mask.pgm").string(), token_mask_pgm(c, *r.selection));

      DenoiseOptions rec;
      rec.record_features = true;
      const auto dr =
          denoise_loop(r.cognition, f.model, CachePolicy{1}, default_noise_seed(c), rec);
      write_file((dir / "temporal.csv").string(), temporal_csv(temporal_similarity(dr)));
    } else if (*verify) {
      VerifyOptions o;
      o.cases = ver_cases;
      if (ver_mutate) o.rule = off_by_one_recompute;
      bool all = true;
      for (const auto& r : run_verification(o)) {
        std::printf("%s %-20s %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
        all = all && r.passed;
      }
      if (!all) throw VerificationFailed("verification failed");
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const ShapeError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInput;
  } catch (const VerificationFailed& e) {
    std::cerr << e.what() << "\n";
    return kExitVerify;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
