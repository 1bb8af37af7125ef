#pragma once

// EVLA model container plus the small text formats the CLI reads and writes.
//
// Container layout (all integers little-endian):
//   "EVLA" | u32 version=1 | u64 manifest_len | manifest (UTF-8 JSON)
//   | u32 tensor_count | tensor*
// tensor:
//   u32 name_len | name | u32 rank | rank x u64 dims | f32 data (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evla/errors.hpp"
#include "evla/model.hpp"
#include "evla/pipeline.hpp"
#include "evla/profiler.hpp"
#include "evla/tensor.hpp"

namespace evla {

static_assert(std::endian::native == std::endian::little,
              "EVLA I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'E', 'V', 'L', 'A'};
inline constexpr std::uint32_t kFormatVersion = 1;

using json = nlohmann::json;

/// A model plus the plan that produced it (absent for baseline models).
struct ModelFile {
  ModelBundle model;
  std::optional<PruningPlan> plan;
};

// ---------------------------------------------------------------------------
// JSON mappings

inline json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_layers", c.n_layers},
              {"d_ff", c.d_ff},
              {"n_visual_tokens", c.n_visual_tokens},
              {"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"max_text_tokens", c.max_text_tokens},
              {"vocab_size", c.vocab_size},
              {"action_dim", c.action_dim},
              {"action_horizon", c.action_horizon},
              {"dit_blocks", c.dit_blocks},
              {"dit_d_model", c.dit_d_model},
              {"dit_heads", c.dit_heads},
              {"dit_d_ff", c.dit_d_ff},
              {"denoise_steps", c.denoise_steps},
              {"seed", c.seed}};
}

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline ModelConfig model_config_from_json(const json& j, ModelConfig base = {}) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const std::map<std::string, std::size_t*> fields = {
      {"d_model", &base.d_model},
      {"n_heads", &base.n_heads},
      {"n_layers", &base.n_layers},
      {"d_ff", &base.d_ff},
      {"n_visual_tokens", &base.n_visual_tokens},
      {"image_size", &base.image_size},
      {"patch_size", &base.patch_size},
      {"max_text_tokens", &base.max_text_tokens},
      {"vocab_size", &base.vocab_size},
      {"action_dim", &base.action_dim},
      {"action_horizon", &base.action_horizon},
      {"dit_blocks", &base.dit_blocks},
      {"dit_d_model", &base.dit_d_model},
      {"dit_heads", &base.dit_heads},
      {"dit_d_ff", &base.dit_d_ff},
      {"denoise_steps", &base.denoise_steps}};
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError("seed must be unsigned");
      base.seed = value.get<std::uint64_t>();
      continue;
    }
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown model config key: " + key);
    if (!value.is_number_unsigned())
      throw ConfigError("model config '" + key + "' must be a non-negative integer");
    *it->second = value.get<std::size_t>();
  }
  return base;
}

inline json to_json(const TokenPruneConfig& t) {
  return json{{"k_final", t.k_final},
              {"k_key", t.k_key},
              {"alpha", t.alpha},
              {"capture_layer", t.capture_layer},
              {"greedy_diversity", t.greedy_diversity}};
}

inline TokenPruneConfig token_config_from_json(const json& j) {
  TokenPruneConfig t;
  t.k_final = j.at("k_final").get<std::size_t>();
  t.k_key = j.at("k_key").get<std::size_t>();
  t.alpha = j.at("alpha").get<double>();
  t.capture_layer = j.at("capture_layer").get<std::size_t>();
  t.greedy_diversity = j.value("greedy_diversity", false);
  return t;
}

inline json to_json(const PruningPlan& p) {
  return json{{"ranked", p.layers.ranked},
              {"dropped", p.layers.dropped},
              {"mlp_sparsity", p.layers.mlp_sparsity},
              {"mlp_keep", p.layers.mlp_keep},
              {"tokens", p.tokens ? to_json(*p.tokens) : json(nullptr)},
              {"cache_interval", p.cache_interval}};
}

inline PruningPlan plan_from_json(const json& j) {
  PruningPlan p;
  p.layers.ranked = j.at("ranked").get<std::vector<std::size_t>>();
  p.layers.dropped = j.at("dropped").get<std::vector<std::size_t>>();
  p.layers.mlp_sparsity = j.at("mlp_sparsity").get<double>();
  p.layers.mlp_keep = j.at("mlp_keep").get<std::vector<std::vector<std::size_t>>>();
  if (!j.at("tokens").is_null()) p.tokens = token_config_from_json(j.at("tokens"));
  p.cache_interval = j.at("cache_interval").get<std::size_t>();
  return p;
}

inline json to_json(const StageBreakdown& s) {
  return json{{"params", s.params},
              {"tokens", s.tokens},
              {"steps", s.steps},
              {"time_ms", s.time_ms},
              {"flops", s.flops}};
}

inline json to_json(const ModuleBreakdown& b) {
  json j = json::object();
  for (const auto& s : b.stages) j[s.name] = to_json(s);
  return j;
}

inline json to_json(const Comparison& c) {
  return json{{"speedup", c.speedup},
              {"flops_ratio", c.flops_ratio},
              {"param_ratio", c.param_ratio}};
}

// ---------------------------------------------------------------------------
// Named tensor flattening

namespace detail {

using NamedTensors = std::vector<std::pair<std::string, const Tensor*>>;

inline NamedTensors named_tensors(const ModelBundle& m) {
  NamedTensors out;
  out.emplace_back("vision.proj", &m.vision.proj);
  out.emplace_back("vision.bias", &m.vision.bias);
  out.emplace_back("text.embed", &m.text_embed);
  for (const auto& l : m.layers) {
    const std::string p = "layers." + std::to_string(l.index) + ".";
    out.emplace_back(p + "attn_norm.gain", &l.attn_norm.gain);
    out.emplace_back(p + "attn_norm.bias", &l.attn_norm.bias);
    out.emplace_back(p + "wq", &l.wq);
    out.emplace_back(p + "wk", &l.wk);
    out.emplace_back(p + "wv", &l.wv);
    out.emplace_back(p + "wo", &l.wo);
    out.emplace_back(p + "mlp_norm.gain", &l.mlp_norm.gain);
    out.emplace_back(p + "mlp_norm.bias", &l.mlp_norm.bias);
    out.emplace_back(p + "w_gate", &l.w_gate);
    out.emplace_back(p + "w_up", &l.w_up);
    out.emplace_back(p + "w_down", &l.w_down);
  }
  out.emplace_back("final_norm.gain", &m.final_norm.gain);
  out.emplace_back("final_norm.bias", &m.final_norm.bias);
  out.emplace_back("dit.cond_proj", &m.dit.cond_proj);
  out.emplace_back("dit.cond_bias", &m.dit.cond_bias);
  for (std::size_t b = 0; b < m.dit.blocks.size(); ++b) {
    const auto& w = m.dit.blocks[b];
    const std::string p = "dit.blocks." + std::to_string(b) + ".";
    out.emplace_back(p + "attn_norm.gain", &w.attn_norm.gain);
    out.emplace_back(p + "attn_norm.bias", &w.attn_norm.bias);
    out.emplace_back(p + "wq", &w.wq);
    out.emplace_back(p + "wk", &w.wk);
    out.emplace_back(p + "wv", &w.wv);
    out.emplace_back(p + "wo", &w.wo);
    out.emplace_back(p + "mlp_norm.gain", &w.mlp_norm.gain);
    out.emplace_back(p + "mlp_norm.bias", &w.mlp_norm.bias);
    out.emplace_back(p + "w1", &w.w1);
    out.emplace_back(p + "b1", &w.b1);
    out.emplace_back(p + "w2", &w.w2);
    out.emplace_back(p + "b2", &w.b2);
  }
  out.emplace_back("dit.eps_norm.gain", &m.dit.eps_norm.gain);
  out.emplace_back("dit.eps_norm.bias", &m.dit.eps_norm.bias);
  out.emplace_back("dit.eps_proj", &m.dit.eps_proj);
  out.emplace_back("dit.eps_bias", &m.dit.eps_bias);
  out.emplace_back("dit.action_proj", &m.dit.action_proj);
  out.emplace_back("dit.action_bias", &m.dit.action_bias);
  return out;
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw InputError("EVLA file truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline json manifest_for(const ModelFile& f) {
  json j;
  j["format"] = "evla";
  j["config"] = to_json(f.model.config);
  j["retained_layers"] = f.model.retained_layer_indices();
  j["language_params"] = stored_language_params(f.model);
  j["plan"] = f.plan ? to_json(*f.plan) : json(nullptr);
  return j;
}

inline std::string serialize(const ModelFile& f) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kFormatVersion);
  const std::string manifest = manifest_for(f).dump();
  detail::put<std::uint64_t>(out, manifest.size());
  out += manifest;
  const auto tensors = detail::named_tensors(f.model);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t d : t->dims()) detail::put<std::uint64_t>(out, d);
    const auto data = t->data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  return out;
}

inline ModelFile deserialize(std::string_view bytes) {
  detail::Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) throw InputError("not an EVLA file");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion)
    throw InputError("unsupported EVLA version " + std::to_string(version));
  const auto manifest_len = r.get<std::uint64_t>();
  json manifest;
  try {
    manifest = json::parse(r.take(manifest_len));
  } catch (const json::exception& e) {
    throw InputError(std::string("bad EVLA manifest: ") + e.what());
  }

  std::map<std::string, Tensor> tensors;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.take(r.get<std::uint32_t>()));
    const auto rank = r.get<std::uint32_t>();
    Dims dims(rank);
    for (auto& d : dims) d = r.get<std::uint64_t>();
    const std::size_t n = dims_product(dims);
    const auto raw = r.take(n * sizeof(float));
    std::vector<float> data(n);
    std::memcpy(data.data(), raw.data(), raw.size());
    tensors.emplace(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  if (!r.done()) throw InputError("trailing bytes after EVLA tensors");

  ModelFile f;
  try {
    f.model.config = model_config_from_json(manifest.at("config"));
    const auto retained = manifest.at("retained_layers").get<std::vector<std::size_t>>();
    if (!manifest.at("plan").is_null()) f.plan = plan_from_json(manifest.at("plan"));
    auto& m = f.model;
    m.layers.resize(retained.size());
    for (std::size_t i = 0; i < retained.size(); ++i) m.layers[i].index = retained[i];
    m.dit.blocks.resize(m.config.dit_blocks);
  } catch (const json::exception& e) {
    throw InputError(std::string("bad EVLA manifest: ") + e.what());
  }

  // Fill every expected slot by name; the expected set comes from the layout
  // of the (still empty) bundle.
  for (const auto& [name, slot] : detail::named_tensors(f.model)) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw InputError("EVLA file missing tensor " + name);
    *const_cast<Tensor*>(slot) = std::move(it->second);
    tensors.erase(it);
  }
  if (!tensors.empty())
    throw InputError("EVLA file has unexpected tensor " + tensors.begin()->first);
  return f;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline void save_model(const std::string& path, const ModelFile& f) {
  write_file(path, serialize(f));
}

inline ModelFile load_model(const std::string& path) {
  return deserialize(read_file(path));
}

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit)

inline Tensor parse_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_ws();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw InputError("malformed PGM header");
    return v;
  };
  if (bytes.substr(0, 2) != "P5") throw InputError("not a binary PGM (P5) image");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval == 0 || maxval > 255) throw InputError("PGM maxval must be in 1..255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw InputError("malformed PGM header");
  ++pos;
  if (bytes.size() - pos != w * h) throw InputError("PGM pixel data length mismatch");
  Tensor img({h, w});
  for (std::size_t i = 0; i < w * h; ++i)
    img[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) /
             static_cast<float>(maxval);
  return img;
}

inline std::string encode_pgm(std::size_t width, std::size_t height,
                              std::span<const std::uint8_t> pixels) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

/// One byte per patch: 255 for retained visual tokens, 0 for dropped ones.
inline std::string token_mask_pgm(const ModelConfig& c, const TokenSelection& sel) {
  std::vector<std::uint8_t> px(c.n_visual_tokens, 0);
  for (std::size_t i : sel.pruned) px.at(i) = 255;
  return encode_pgm(c.grid_size(), c.grid_size(), px);
}

// ---------------------------------------------------------------------------
// CSV

inline std::string fixed6(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(6) << v;
  return ss.str();
}

inline std::string importance_csv(const LayerImportance& imp,
                                  std::span<const std::size_t> layer_ids) {
  std::string out = "layer_index,importance\n";
  for (std::size_t i = 0; i < imp.scores.size(); ++i)
    out += std::to_string(layer_ids[i]) + "," + fixed6(imp.scores[i]) + "\n";
  return out;
}

inline std::string selection_csv(const TokenSelection& sel) {
  std::vector<std::pair<std::size_t, const char*>> rows;
  for (auto i : sel.key) rows.emplace_back(i, "key");
  for (auto i : sel.task) rows.emplace_back(i, "task");
  for (auto i : sel.diverse) rows.emplace_back(i, "div");
  std::sort(rows.begin(), rows.end());
  std::string out = "token_index,set\n";
  for (const auto& [i, s] : rows) out += std::to_string(i) + "," + s + "\n";
  return out;
}

inline std::string actions_csv(const Tensor& actions) {
  std::string out;
  for (std::size_t r = 0; r < actions.rows(); ++r) {
    auto row = actions.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ",";
      out += fixed6(row[c]);
    }
    out += "\n";
  }
  return out;
}

inline std::string interlayer_csv(std::span<const double> cos,
                                  std::span<const std::size_t> layer_ids) {
  std::string out = "layer,cos\n";
  for (std::size_t i = 0; i < cos.size(); ++i)
    out += std::to_string(layer_ids[i]) + "," + fixed6(cos[i]) + "\n";
  return out;
}

inline std::string temporal_csv(std::span<const TemporalSimilarity> rows) {
  std::string out = "t,kind,cos\n";
  for (const auto& r : rows)
    out += std::to_string(r.t) + "," + r.kind + "," + fixed6(r.cos) + "\n";
  return out;
}

inline std::string breakdown_csv(const ModuleBreakdown& b) {
  std::string out = "stage,params,tokens,steps,time_ms,flops\n";
  for (const auto& s : b.stages) {
    std::ostringstream ss;
    ss << s.name << "," << s.params << "," << s.tokens << "," << s.steps << ","
       << fixed6(s.time_ms) << "," << std::setprecision(17) << s.flops << "\n";
    out += ss.str();
  }
  return out;
}

}  // namespace evla
