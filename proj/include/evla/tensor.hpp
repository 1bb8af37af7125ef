#pragma once

// Dense row-major float32 tensors and the handful of kernels the VLA
// pipeline needs. Every reduction runs in a fixed left-to-right order so
// results are bitwise reproducible across runs.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evla/errors.hpp"

namespace evla {

using Dims = std::vector<std::size_t>;

inline std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string dims_to_string(const Dims& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, float fill = 0.0f)
      : dims_(std::move(dims)), data_(dims_product(dims_), fill) {}

  Tensor(Dims dims, std::vector<float> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != dims_product(dims_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match dims " + dims_to_string(dims_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<float> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
  }

  const Dims& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }

  // 2-D views. A rank-1 tensor is treated as a single row.
  std::size_t rows() const {
    if (rank() < 2) return 1;
    return std::accumulate(dims_.begin(), dims_.end() - 1, std::size_t{1},
                           std::multiplies<>());
  }
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  std::span<float> row(std::size_t r) {
    return std::span<float>(data_).subspan(r * cols(), cols());
  }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * cols(), cols());
  }

  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.dims_ != b.dims_ || a.data_.size() != b.data_.size()) return false;
    // Bitwise comparison so that -0.0 vs 0.0 and NaN payloads are caught.
    for (std::size_t i = 0; i < a.data_.size(); ++i) {
      if (std::bit_cast<std::uint32_t>(a.data_[i]) !=
          std::bit_cast<std::uint32_t>(b.data_[i])) {
        return false;
      }
    }
    return true;
  }

 private:
  Dims dims_;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// FLOP accounting. Matmuls report 2*m*n*k to the innermost active counter.

class FlopCounter {
 public:
  FlopCounter() : previous_(active()) { active() = this; }
  ~FlopCounter() { active() = previous_; }
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t flops() const { return flops_; }
  std::uint64_t matmuls() const { return matmuls_; }

  static void record(std::uint64_t flops) {
    for (FlopCounter* c = active(); c != nullptr; c = c->previous_) {
      c->flops_ += flops;
      ++c->matmuls_;
    }
  }

 private:
  static FlopCounter*& active() {
    thread_local FlopCounter* current = nullptr;
    return current;
  }

  FlopCounter* previous_;
  std::uint64_t flops_ = 0;
  std::uint64_t matmuls_ = 0;
};

// ---------------------------------------------------------------------------
// splitmix64

class SeededGenerator {
 public:
  explicit SeededGenerator(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double next_unit() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double next_normal() {
    const double u1 = 1.0 - next_unit();  // (0, 1]
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// Independent sub-stream seed for (seed, stream); used so that each weight
/// tensor draws from its own generator regardless of generation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SeededGenerator g(seed ^ (stream * 0xD1B54A32D192ED03ull));
  return g.next();
}

inline Tensor uniform_init(SeededGenerator& gen, const Dims& dims,
                           std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t(dims);
  for (float& v : t.data()) {
    const double u = 2.0 * gen.next_unit() - 1.0;
    v = static_cast<float>(u * a);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Kernels

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " must be rank 2, got " +
                     dims_to_string(t.dims()));
  }
}

/// c[i][j] = sum_k a[i][k] * b[k][j], accumulated for k = 0, 1, ... in order.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul lhs");
  require_matrix(b, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner dimensions disagree: " +
                     dims_to_string(a.dims()) + " x " +
                     dims_to_string(b.dims()));
  }
  Tensor c({m, n});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* pc = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float aip = pa[i * k + p];
      const float* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  FlopCounter::record(2ull * m * n * k);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose input");
  Tensor t({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

/// Adds `bias` to every row of `x` in place.
inline void add_row_bias(Tensor& x, std::span<const float> bias) {
  if (bias.size() != x.cols()) throw ShapeError("bias width mismatch");
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

inline void add_inplace(Tensor& x, const Tensor& y) {
  if (x.dims() != y.dims()) {
    throw ShapeError("elementwise add: " + dims_to_string(x.dims()) + " vs " +
                     dims_to_string(y.dims()));
  }
  auto xs = x.data();
  auto ys = y.data();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ys[i];
}

/// Row-wise softmax with per-row max subtraction. Entries equal to -inf
/// (masked positions) map to exactly zero.
inline Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.dims());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    float mx = -std::numeric_limits<float>::infinity();
    for (float v : in) mx = std::max(mx, v);
    float sum = 0.0f;
    for (std::size_t c = 0; c < n; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    for (std::size_t c = 0; c < n; ++c) o[c] = o[c] / sum;
  }
  return out;
}

/// Cosine similarity accumulated in double. Returns 0 when either norm is
/// below 1e-12; otherwise clamps to [-1, 1].
inline double cosine_similarity(std::span<const float> u,
                                std::span<const float> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine_similarity length mismatch: " +
                     std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double a = u[i], b = v[i];
    dot += a * b;
    uu += a * a;
    vv += b * b;
  }
  // sqrt(uu*vv) rather than sqrt(uu)*sqrt(vv): exact 1 for u == v.
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < 1e-12 || nv < 1e-12) return 0.0;
  const double c = dot / std::sqrt(uu * vv);
  return std::clamp(c, -1.0, 1.0);
}

inline constexpr float kLayerNormEps = 1e-5f;

/// Normalizes each length-d vector of `x` (last dimension) to zero mean and
/// unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, std::span<const float> gain,
                         std::span<const float> bias) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layer_norm: gain/bias width " +
                     std::to_string(gain.size()) + " vs last dim " +
                     std::to_string(d));
  }
  Tensor out(x.dims());
  if (d == 0) return out;
  const float inv_d = 1.0f / static_cast<float>(d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    float mean = 0.0f;
    for (float v : in) mean += v;
    mean *= inv_d;
    float var = 0.0f;
    for (float v : in) var += (v - mean) * (v - mean);
    var *= inv_d;
    const float inv_std = 1.0f / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      o[c] = (in[c] - mean) * inv_std * gain[c] + bias[c];
    }
  }
  return out;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

inline float gelu(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

/// Copies the listed rows of `x` (in the given order) into a new tensor.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out({idx.size(), x.cols()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

/// Stacks two matrices vertically. Either side may have zero rows.
inline Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  if (top.cols() != bottom.cols()) {
    throw ShapeError("concat_rows: column mismatch " +
                     dims_to_string(top.dims()) + " vs " +
                     dims_to_string(bottom.dims()));
  }
  Tensor out({top.rows() + bottom.rows(), top.cols()});
  auto dst = out.data();
  std::copy(top.data().begin(), top.data().end(), dst.begin());
  std::copy(bottom.data().begin(), bottom.data().end(),
            dst.begin() + static_cast<std::ptrdiff_t>(top.size()));
  return out;
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) throw ShapeError("max_abs_diff: dims differ");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace evla
