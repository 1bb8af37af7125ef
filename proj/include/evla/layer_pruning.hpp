#pragma once

// Similarity-driven, non-contiguous depth pruning of the language stack, plus
// magnitude-based structured sparsification of the MLP intermediate width.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "evla/errors.hpp"
#include "evla/model.hpp"
#include "evla/tensor.hpp"

namespace evla {

struct LayerImportance {
  std::vector<double> scores;  // one per layer, in stack order
  std::size_t calibration_size = 0;
};

/// Streams calibration traces into per-layer importance
/// I = 1 - mean_samples(mean_positions(cos(x_in, x_out))).
/// Samples are folded in the order they are added.
class ImportanceAccumulator {
 public:
  void add(const HiddenTrace& trace) {
    if (count_ == 0) {
      sums_.assign(trace.layers.size(), 0.0);
    } else if (trace.layers.size() != sums_.size()) {
      throw InputError("trace depth " + std::to_string(trace.layers.size()) +
                       " differs from earlier traces (" +
                       std::to_string(sums_.size()) + ")");
    }
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
      const auto& [in, out] = trace.layers[l];
      if (in.dims() != out.dims())
        throw ShapeError("trace layer input/output dims differ");
      const std::size_t positions = in.rows();
      double per_sample = 0.0;
      for (std::size_t j = 0; j < positions; ++j)
        per_sample += cosine_similarity(in.row(j), out.row(j));
      sums_[l] += positions ? per_sample / static_cast<double>(positions) : 0.0;
    }
    ++count_;
  }

  std::size_t count() const { return count_; }

  /// Mean input/output cosine per layer.
  std::vector<double> mean_similarity() const {
    if (count_ == 0) throw InputError("no calibration traces");
    std::vector<double> out(sums_.size());
    for (std::size_t l = 0; l < sums_.size(); ++l)
      out[l] = sums_[l] / static_cast<double>(count_);
    return out;
  }

  LayerImportance importance() const {
    LayerImportance imp;
    imp.calibration_size = count_;
    for (double c : mean_similarity()) imp.scores.push_back(1.0 - c);
    return imp;
  }

 private:
  std::vector<double> sums_;
  std::size_t count_ = 0;
};

inline LayerImportance layer_importance(std::span<const HiddenTrace> traces) {
  if (traces.empty()) throw InputError("layer_importance: empty trace list");
  ImportanceAccumulator acc;
  for (const auto& t : traces) acc.add(t);
  return acc.importance();
}

/// Layer positions sorted by ascending importance; ties go to the lower index.
inline std::vector<std::size_t> rank_layers(const LayerImportance& imp) {
  std::vector<std::size_t> order(imp.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return imp.scores[a] < imp.scores[b];
  });
  return order;
}

struct PruneLayersPlan {
  std::vector<std::size_t> ranked;   // original layer indices, least important first
  std::vector<std::size_t> dropped;  // first n entries of `ranked`
  double mlp_sparsity = 0.0;
  std::vector<std::vector<std::size_t>> mlp_keep;  // per retained layer
};

/// Removes the layers whose original index appears in ranked[0, n).
/// Retained layers keep their order and weights.
inline ModelBundle prune_layers(const ModelBundle& model, std::size_t n,
                                std::span<const std::size_t> ranked) {
  if (n >= model.layers.size()) {
    throw InputError("cannot drop " + std::to_string(n) + " of " +
                     std::to_string(model.layers.size()) + " layers");
  }
  if (n > ranked.size()) throw InputError("ranking shorter than drop count");
  const std::set<std::size_t> drop(ranked.begin(), ranked.begin() + n);
  if (drop.size() != n) throw InputError("ranking contains duplicates");
  ModelBundle out = model;
  out.layers.clear();
  for (const auto& l : model.layers)
    if (!drop.contains(l.index)) out.layers.push_back(l);
  if (out.layers.size() + n != model.layers.size())
    throw InputError("ranking names layers that are not in the model");
  return out;
}

/// Number of intermediate columns kept at the given sparsity (at least one).
inline std::size_t mlp_keep_count(std::size_t d_ff, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0))
    throw ConfigError("mlp sparsity must lie in [0, 1)");
  const auto kept = static_cast<std::size_t>(
      std::llround((1.0 - sparsity) * static_cast<double>(d_ff)));
  return std::max<std::size_t>(1, kept);
}

/// Intermediate columns of `layer` ranked by the combined L2 norm of the
/// gate column, up column, and down row; the top keep_count survive.
/// Returned indices are ascending.
inline std::vector<std::size_t> mlp_keep_columns(const LayerWeights& layer,
                                                 double sparsity) {
  const std::size_t ff = layer.d_ff(), d = layer.w_up.dim(0);
  std::vector<double> norm(ff, 0.0);
  for (std::size_t c = 0; c < ff; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      const double g = layer.w_gate.at(r, c), u = layer.w_up.at(r, c);
      s += g * g + u * u;
    }
    for (float v : layer.w_down.row(c)) s += static_cast<double>(v) * v;
    norm[c] = std::sqrt(s);
  }
  std::vector<std::size_t> order(ff);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norm[a] > norm[b]; });
  order.resize(mlp_keep_count(ff, sparsity));
  std::sort(order.begin(), order.end());
  return order;
}

inline LayerWeights select_mlp_columns(const LayerWeights& layer,
                                       std::span<const std::size_t> keep) {
  LayerWeights out = layer;
  const std::size_t d = layer.w_up.dim(0), k = keep.size();
  out.w_gate = Tensor({d, k});
  out.w_up = Tensor({d, k});
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      out.w_gate.at(r, i) = layer.w_gate.at(r, keep[i]);
      out.w_up.at(r, i) = layer.w_up.at(r, keep[i]);
    }
  }
  out.w_down = gather_rows(layer.w_down, keep);
  return out;
}

/// Shrinks every layer's MLP to its highest-norm intermediate columns.
/// `keep_out`, when given, receives the kept column list per layer.
inline ModelBundle sparsify_mlp(
    const ModelBundle& model, double sparsity,
    std::vector<std::vector<std::size_t>>* keep_out = nullptr) {
  ModelBundle out = model;
  if (keep_out) keep_out->clear();
  for (auto& layer : out.layers) {
    const auto keep = mlp_keep_columns(layer, sparsity);
    layer = select_mlp_columns(layer, keep);
    if (keep_out) keep_out->push_back(keep);
  }
  return out;
}

/// Builds the full depth + width plan: rank on `importance`, drop `n`, then
/// sparsify the survivors.
inline ModelBundle apply_layer_plan(const ModelBundle& model,
                                    const LayerImportance& importance,
                                    std::size_t n, double sparsity,
                                    PruneLayersPlan& plan) {
  if (importance.scores.size() != model.layers.size())
    throw InputError("importance length does not match model depth");
  plan.ranked.clear();
  for (std::size_t pos : rank_layers(importance))
    plan.ranked.push_back(model.layers[pos].index);
  plan.dropped.assign(plan.ranked.begin(), plan.ranked.begin() + std::min(n, plan.ranked.size()));
  plan.mlp_sparsity = sparsity;
  const ModelBundle shallow = prune_layers(model, n, plan.ranked);
  return sparsify_mlp(shallow, sparsity, &plan.mlp_keep);
}

// ---------------------------------------------------------------------------
// Parameter arithmetic

/// Architecture summary sufficient for parameter and FLOP accounting.
struct LanguageShape {
  std::size_t vocab = 0;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t n_layers = 0;
  std::size_t norm_vectors = 2;  // 1 for RMSNorm (gain), 2 for LayerNorm
  bool output_head = false;

  /// Llama-2-7B: 32 layers, d=4096, d_ff=11008, vocab 32000, RMSNorm,
  /// untied output head.
  static LanguageShape llama2_7b() { return {32000, 4096, 11008, 32, 1, true}; }

  static LanguageShape from(const ModelConfig& c) {
    return {c.vocab_size, c.d_model, c.d_ff, c.n_layers, 2, false};
  }
};

struct LanguageParamBreakdown {
  std::uint64_t embedding = 0;
  std::uint64_t per_layer = 0;
  std::uint64_t layers = 0;
  std::uint64_t head = 0;
  std::uint64_t final_norm = 0;
  std::uint64_t total() const { return embedding + layers + head + final_norm; }
};

inline LanguageParamBreakdown language_param_breakdown(
    const LanguageShape& shape, std::size_t retained_layers,
    double mlp_sparsity) {
  const std::uint64_t d = shape.d_model;
  const std::uint64_t ff = mlp_keep_count(shape.d_ff, mlp_sparsity);
  LanguageParamBreakdown b;
  b.embedding = shape.vocab * d;
  b.per_layer = 4 * d * d + 3 * d * ff + 2 * shape.norm_vectors * d;
  b.layers = b.per_layer * retained_layers;
  b.head = shape.output_head ? shape.vocab * d : 0;
  b.final_norm = shape.norm_vectors * d;
  return b;
}

inline std::uint64_t count_language_params(const LanguageShape& shape,
                                           std::size_t retained_layers,
                                           double mlp_sparsity) {
  return language_param_breakdown(shape, retained_layers, mlp_sparsity).total();
}

/// Language parameters actually stored in `model` (embedding, layers, norm).
inline std::uint64_t stored_language_params(const ModelBundle& model) {
  std::uint64_t n = model.text_embed.size() + model.final_norm.gain.size() +
                    model.final_norm.bias.size();
  for (const auto& l : model.layers) {
    for (const Tensor* t : {&l.attn_norm.gain, &l.attn_norm.bias, &l.wq, &l.wk,
                            &l.wv, &l.wo, &l.mlp_norm.gain, &l.mlp_norm.bias,
                            &l.w_gate, &l.w_up, &l.w_down}) {
      n += t->size();
    }
  }
  return n;
}

/// Retained-layer count that keeps `keep_num / keep_den` of `n_layers`
/// (rounded half away from zero, at least one).
inline std::size_t retained_layer_target(std::size_t n_layers,
                                         std::size_t keep_num = 22,
                                         std::size_t keep_den = 32) {
  const auto r = static_cast<std::size_t>(std::llround(
      static_cast<double>(n_layers) * static_cast<double>(keep_num) /
      static_cast<double>(keep_den)));
  return std::clamp<std::size_t>(r, 1, n_layers);
}

}  // namespace evla
