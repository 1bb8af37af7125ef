#pragma once

// Task-relevance and diversity driven visual token selection.
//
//   r_i      = sum over text keys j of the head-averaged attention A[i -> j]
//   s_i      = min-max(r_i)
//   V_key    = top K_key by s
//   V_task   = top floor(alpha * K_aug) of the remainder by s
//   V_div    = top K_div of the remainder by 1 - max_{k in V_key} cos(v, v_k)
//   V_pruned = V_key u V_task u V_div, emitted in original token order
//
// Every ranking breaks ties toward the lower token index.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "evla/errors.hpp"
#include "evla/model.hpp"
#include "evla/tensor.hpp"

namespace evla {

struct TokenPruneConfig {
  std::size_t k_final = 56;
  std::size_t k_key = 4;
  double alpha = 0.5;
  std::size_t capture_layer = 2;
  bool greedy_diversity = false;

  std::size_t k_aug() const { return k_final - k_key; }
  std::size_t k_task() const {
    return static_cast<std::size_t>(
        std::floor(alpha * static_cast<double>(k_aug())));
  }
  std::size_t k_div() const { return k_aug() - k_task(); }

  void validate(std::size_t n_total) const {
    if (k_key < 1 || k_key > k_final || k_final > n_total) {
      throw ConfigError("token budget must satisfy 1 <= K_key (" +
                        std::to_string(k_key) + ") <= K_final (" +
                        std::to_string(k_final) + ") <= N_total (" +
                        std::to_string(n_total) + ")");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0))
      throw ConfigError("alpha must lie in [0, 1]");
  }

  friend bool operator==(const TokenPruneConfig&,
                         const TokenPruneConfig&) = default;
};

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct RelevanceScores {
  std::vector<double> raw;
  std::vector<double> normalized;
};

struct TokenSelection {
  std::vector<std::size_t> key;
  std::vector<std::size_t> task;
  std::vector<std::size_t> diverse;
  std::vector<std::size_t> pruned;  // ascending union of the three sets
};

/// r_i = sum_j (1/H) sum_h A[h][visual_i][text_j].
inline std::vector<double> task_relevance(const AttentionCapture& capture,
                                          IndexRange visual, IndexRange text) {
  if (text.size() == 0) throw InputError("task_relevance: empty text range");
  const std::size_t s = capture.seq_len(), heads = capture.heads();
  if (visual.end > s || text.end > s)
    throw ShapeError("task_relevance: range exceeds captured sequence");
  if (visual.begin < text.end && text.begin < visual.end)
    throw InputError("task_relevance: visual and text ranges overlap");
  std::vector<double> r(visual.size(), 0.0);
  for (std::size_t i = 0; i < visual.size(); ++i) {
    double sum = 0.0;
    for (std::size_t j = text.begin; j < text.end; ++j) {
      double head_sum = 0.0;
      for (std::size_t h = 0; h < heads; ++h)
        head_sum += capture.at(h, visual.begin + i, j);
      sum += head_sum / static_cast<double>(heads);
    }
    r[i] = sum;
  }
  return r;
}

/// Min-max scaling to [0, 1]; a constant vector maps to all zeros.
inline std::vector<double> normalize_scores(std::span<const double> raw) {
  std::vector<double> out(raw.size(), 0.0);
  if (raw.empty()) return out;
  const auto [mn, mx] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *mn, range = *mx - *mn;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - lo) / range;
  return out;
}

namespace detail {

/// Top-k of `candidates` by descending score, lower index first on ties.
/// Result is ascending by index.
template <typename ScoreFn>
std::vector<std::size_t> top_k(std::vector<std::size_t> candidates,
                               std::size_t k, ScoreFn score) {
  std::sort(candidates.begin(), candidates.end());
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) {
                     return score(a) > score(b);
                   });
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

inline void erase_all(std::vector<std::size_t>& from,
                      std::span<const std::size_t> items) {
  std::erase_if(from, [&](std::size_t v) {
    return std::find(items.begin(), items.end(), v) != items.end();
  });
}

}  // namespace detail

inline std::vector<std::size_t> select_key_tokens(std::span<const double> s,
                                                  std::size_t k_key) {
  if (k_key > s.size())
    throw InputError("K_key exceeds the number of visual tokens");
  std::vector<std::size_t> all(s.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return detail::top_k(std::move(all), k_key,
                       [&](std::size_t i) { return s[i]; });
}

/// Top-K_task of `s` restricted to `remaining`; the picks are then removed
/// from `remaining`.
inline std::vector<std::size_t> select_task_tokens(
    std::span<const double> s, std::vector<std::size_t>& remaining,
    std::size_t k_task) {
  if (k_task > remaining.size())
    throw InputError("K_task exceeds the remaining candidate pool");
  auto picked = detail::top_k(remaining, k_task,
                              [&](std::size_t i) { return s[i]; });
  detail::erase_all(remaining, picked);
  return picked;
}

/// 1 - max over reference rows of cos(v, reference).
inline double diversity_score(std::span<const float> v,
                              const Tensor& embeddings,
                              std::span<const std::size_t> reference) {
  if (reference.empty()) throw InputError("diversity_score: empty key set");
  double best = -1.0;
  for (std::size_t k : reference)
    best = std::max(best, cosine_similarity(v, embeddings.row(k)));
  return 1.0 - best;
}

/// K_div members of `remaining` least similar to `key`. In greedy mode the
/// reference set grows with each pick. Picks are removed from `remaining`.
inline std::vector<std::size_t> select_diverse_tokens(
    const Tensor& embeddings, std::span<const std::size_t> key,
    std::vector<std::size_t>& remaining, std::size_t k_div,
    bool greedy = false) {
  if (k_div > remaining.size())
    throw InputError("K_div exceeds the remaining candidate pool");
  if (k_div == 0) return {};
  std::vector<std::size_t> picked;
  if (!greedy) {
    std::vector<double> score(embeddings.rows(), 0.0);
    for (std::size_t j : remaining)
      score[j] = diversity_score(embeddings.row(j), embeddings, key);
    picked = detail::top_k(remaining, k_div,
                           [&](std::size_t i) { return score[i]; });
  } else {
    std::vector<std::size_t> reference(key.begin(), key.end());
    std::vector<std::size_t> pool = remaining;
    std::sort(pool.begin(), pool.end());
    for (std::size_t n = 0; n < k_div; ++n) {
      std::size_t best_idx = pool.front();
      double best = -1.0;
      for (std::size_t j : pool) {
        const double sc = diversity_score(embeddings.row(j), embeddings, reference);
        if (sc > best) {
          best = sc;
          best_idx = j;
        }
      }
      picked.push_back(best_idx);
      reference.push_back(best_idx);
      std::erase(pool, best_idx);
    }
    std::sort(picked.begin(), picked.end());
  }
  detail::erase_all(remaining, picked);
  return picked;
}

/// Full selection over `embeddings` (one row per visual token) given the
/// normalized relevance `s`.
inline TokenSelection prune_tokens(const Tensor& embeddings,
                                   std::span<const double> s,
                                   const TokenPruneConfig& config) {
  const std::size_t n = s.size();
  if (embeddings.rows() != n)
    throw ShapeError("prune_tokens: embeddings and scores disagree in count");
  config.validate(n);
  TokenSelection sel;
  sel.key = select_key_tokens(s, config.k_key);
  std::vector<std::size_t> remaining;
  for (std::size_t i = 0; i < n; ++i)
    if (!std::binary_search(sel.key.begin(), sel.key.end(), i))
      remaining.push_back(i);
  sel.task = select_task_tokens(s, remaining, config.k_task());
  sel.diverse = select_diverse_tokens(embeddings, sel.key, remaining,
                                      config.k_div(), config.greedy_diversity);
  sel.pruned = sel.key;
  sel.pruned.insert(sel.pruned.end(), sel.task.begin(), sel.task.end());
  sel.pruned.insert(sel.pruned.end(), sel.diverse.begin(), sel.diverse.end());
  std::sort(sel.pruned.begin(), sel.pruned.end());
  return sel;
}

/// Relevance + selection straight from a captured attention map. Visual
/// tokens are rows [text_len, text_len + n_visual) of `hidden`.
inline TokenSelection select_from_capture(const AttentionCapture& capture,
                                          const Tensor& hidden,
                                          std::size_t text_len,
                                          std::size_t n_visual,
                                          const TokenPruneConfig& config,
                                          RelevanceScores* scores_out = nullptr) {
  const IndexRange text{0, text_len};
  const IndexRange visual{text_len, text_len + n_visual};
  RelevanceScores scores;
  scores.raw = task_relevance(capture, visual, text);
  scores.normalized = normalize_scores(scores.raw);
  std::vector<std::size_t> rows(n_visual);
  std::iota(rows.begin(), rows.end(), text_len);
  const Tensor visual_rows = gather_rows(hidden, rows);
  TokenSelection sel = prune_tokens(visual_rows, scores.normalized, config);
  if (scores_out) *scores_out = std::move(scores);
  return sel;
}

}  // namespace evla
