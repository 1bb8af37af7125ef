#pragma once

// JSON run configuration shared by the CLI commands.
//
// {
//   "model":       { <ModelConfig fields> },
//   "prune":       { "drop_layers": [..] | "n_drop": n, "mlp_sparsity": f,
//                    "token_final": n, "token_key": n, "alpha": f,
//                    "capture_layer": n, "cache_interval": n,
//                    "greedy_diversity": bool },
//   "calibration": { "samples": n, "seed": n },
//   "paths":       { "<name>": "<path>", ... }
// }

#include <cstdint>
#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evla/errors.hpp"
#include "evla/model.hpp"
#include "evla/model_io.hpp"
#include "evla/pipeline.hpp"

namespace evla {

struct PruneSettings {
  std::optional<std::vector<std::size_t>> drop_layers;
  std::optional<std::size_t> n_drop;
  double mlp_sparsity = 0.25;
  std::optional<std::size_t> token_final;  // default scales 56/256 to the model
  std::size_t token_key = 4;
  double alpha = 0.5;
  std::size_t capture_layer = 2;
  std::size_t cache_interval = 5;
  bool greedy_diversity = false;
};

struct RunConfig {
  ModelConfig model;
  PruneSettings prune;
  std::size_t calibration_samples = 16;
  std::uint64_t calibration_seed = 0;
  std::map<std::string, std::string> paths;

  void validate() const {
    model.validate();
    if (prune.drop_layers && prune.n_drop)
      throw ConfigError("prune: give drop_layers or n_drop, not both");
    if (!(prune.mlp_sparsity >= 0.0 && prune.mlp_sparsity < 1.0))
      throw ConfigError("prune.mlp_sparsity must lie in [0, 1)");
    if (!(prune.alpha >= 0.0 && prune.alpha <= 1.0))
      throw ConfigError("prune.alpha must lie in [0, 1]");
    if (prune.token_key < 1) throw ConfigError("prune.token_key must be >= 1");
    if (prune.capture_layer < 1) throw ConfigError("prune.capture_layer must be >= 1");
    if (prune.cache_interval < 1) throw ConfigError("prune.cache_interval must be >= 1");
    if (calibration_samples < 1) throw ConfigError("calibration.samples must be >= 1");
  }

  /// Token settings for a model with `n_visual` visual tokens.
  TokenPruneConfig token_config(std::size_t n_visual) const {
    TokenPruneConfig t = default_token_config(n_visual);
    if (prune.token_final) t.k_final = *prune.token_final;
    t.k_key = prune.token_key;
    t.alpha = prune.alpha;
    t.capture_layer = prune.capture_layer;
    t.greedy_diversity = prune.greedy_diversity;
    return t;
  }

  AccelerationSettings acceleration(std::size_t n_visual) const {
    AccelerationSettings s;
    s.n_drop = prune.n_drop;
    if (prune.drop_layers) s.drop_layers = *prune.drop_layers;
    s.mlp_sparsity = prune.mlp_sparsity;
    s.tokens = token_config(n_visual);
    s.cache_interval = prune.cache_interval;
    s.calibration_samples = calibration_samples;
    s.calibration_seed = calibration_seed;
    return s;
  }
};

namespace detail {

template <typename T>
T get_field(const json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + " has the wrong type");
  }
}

inline void reject_unknown(const json& j, const std::vector<std::string>& known,
                           const std::string& section) {
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("unknown key " + section + "." + k);
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  using detail::get_field;
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  detail::reject_unknown(j, {"model", "prune", "calibration", "paths"}, "config");
  RunConfig rc;
  if (j.contains("model")) rc.model = model_config_from_json(j["model"]);
  if (j.contains("prune")) {
    const json& p = j["prune"];
    detail::reject_unknown(p,
                           {"drop_layers", "n_drop", "mlp_sparsity", "token_final", "token_key",
                            "alpha", "capture_layer", "cache_interval", "greedy_diversity"},
                           "prune");
    auto& s = rc.prune;
    if (p.contains("drop_layers"))
      s.drop_layers = get_field<std::vector<std::size_t>>(p["drop_layers"], "prune.drop_layers");
    if (p.contains("n_drop")) s.n_drop = get_field<std::size_t>(p["n_drop"], "prune.n_drop");
    if (p.contains("mlp_sparsity"))
      s.mlp_sparsity = get_field<double>(p["mlp_sparsity"], "prune.mlp_sparsity");
    if (p.contains("token_final"))
      s.token_final = get_field<std::size_t>(p["token_final"], "prune.token_final");
    if (p.contains("token_key")) s.token_key = get_field<std::size_t>(p["token_key"], "prune.token_key");
    if (p.contains("alpha")) s.alpha = get_field<double>(p["alpha"], "prune.alpha");
    if (p.contains("capture_layer"))
      s.capture_layer = get_field<std::size_t>(p["capture_layer"], "prune.capture_layer");
    if (p.contains("cache_interval"))
      s.cache_interval = get_field<std::size_t>(p["cache_interval"], "prune.cache_interval");
    if (p.contains("greedy_diversity"))
      s.greedy_diversity = get_field<bool>(p["greedy_diversity"], "prune.greedy_diversity");
  }
  if (j.contains("calibration")) {
    const json& c = j["calibration"];
    detail::reject_unknown(c, {"samples", "seed"}, "calibration");
    if (c.contains("samples"))
      rc.calibration_samples = get_field<std::size_t>(c["samples"], "calibration.samples");
    if (c.contains("seed"))
      rc.calibration_seed = get_field<std::uint64_t>(c["seed"], "calibration.seed");
  }
  if (j.contains("paths"))
    rc.paths = get_field<std::map<std::string, std::string>>(j["paths"], "paths");
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Seed precedence: explicit flag, then EVLA_SEED, then the config value.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("EVLA_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("EVLA_SEED is not an integer: ") + env);
    return v;
  }
  return config_seed;
}

/// "1,2,3" -> {1, 2, 3}; empty string -> {}.
inline std::vector<std::size_t> parse_index_list(const std::string& s, const char* what) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::size_t comma = std::min(s.find(',', pos), s.size());
    const std::string item = s.substr(pos, comma - pos);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(item.c_str(), &end, 10);
    if (item.empty() || *end != '\0' || item.front() == '-')
      throw InputError(std::string("bad ") + what + " entry '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  return out;
}

}  // namespace evla
