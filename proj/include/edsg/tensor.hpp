#pragma once

// Dense row-major tensors and the raw numeric kernels behind every tape
// primitive. Storage and training compute are binary32; the same kernels
// instantiate at binary64 for the finite-difference oracles.
//
// Determinism contract: every reduction accumulates in a fixed order.
// matmul accumulates strictly k-ascending per output element (the i-blocked
// ikj loop vectorizes across output columns, which does not reorder any
// element's partial sums). Row reductions are sequential left-to-right.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "edsg/common.hpp"

namespace edsg {

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(Shape s) {
    Tensor t;
    t.data.assign(static_cast<size_t>(numel_of(s)), T(0));
    t.shape = std::move(s);
    return t;
  }
  static Tensor full(Shape s, T v) {
    Tensor t;
    t.data.assign(static_cast<size_t>(numel_of(s)), v);
    t.shape = std::move(s);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({}, {v}); }
  static Tensor randn(Shape s, uint64_t seed, T stddev = T(1)) {
    Tensor t = zeros(std::move(s));
    NormalSampler ns(seed);
    for (auto& x : t.data) x = static_cast<T>(ns.next() * static_cast<double>(stddev));
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }
  bool is_scalar() const { return shape.empty(); }

  // 2-D accessors; rows()/cols() treat a vector as a single row.
  int64_t rows() const { return rank() == 2 ? shape[0] : 1; }
  int64_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }
  T& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  const T& at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// True when `b` equals a trailing suffix of `a` (leading-dimension broadcast).
inline bool suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<long>(b.size()));
}

namespace kernels {

// C[M,N] += A[M,K] * B[K,N]. Per-element accumulation is strictly
// k-ascending; the i-block only improves reuse of B rows.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  constexpr int64_t kIBlock = 8;
  for (int64_t i0 = 0; i0 < m; i0 += kIBlock) {
    const int64_t i1 = std::min(i0 + kIBlock, m);
    for (int64_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * n;
      for (int64_t i = i0; i < i1; ++i) {
        const T av = a[i * k + kk];
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, int64_t rows, int64_t cols) {
  constexpr int64_t kB = 32;
  for (int64_t i0 = 0; i0 < rows; i0 += kB)
    for (int64_t j0 = 0; j0 < cols; j0 += kB) {
      const int64_t i1 = std::min(i0 + kB, rows), j1 = std::min(j0 + kB, cols);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) out[j * rows + i] = a[i * cols + j];
    }
}

template <typename T>
void softmax_row(const T* x, T* y, int64_t n) {
  T mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = T(0);
  for (int64_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const T inv = T(1) / sum;
  for (int64_t j = 0; j < n; ++j) y[j] *= inv;
}

template <typename T>
void log_softmax_row(const T* x, T* y, int64_t n) {
  T mx = x[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  T sum = T(0);
  for (int64_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
  const T lse = mx + std::log(sum);
  for (int64_t j = 0; j < n; ++j) y[j] = x[j] - lse;
}

// y = x / sqrt(mean(x^2) + eps) * gamma, one row. Returns the inverse rms
// so the backward rule can reuse it.
template <typename T>
T rms_norm_row(const T* x, const T* gamma, T* y, int64_t n, T eps) {
  T ms = T(0);
  for (int64_t j = 0; j < n; ++j) ms += x[j] * x[j];
  ms = ms / static_cast<T>(n) + eps;
  const T inv = T(1) / std::sqrt(ms);
  for (int64_t j = 0; j < n; ++j) y[j] = x[j] * inv * gamma[j];
  return inv;
}

// Rotates each head's (2p, 2p+1) pairs in place by
// angle = position * base^(-2p / d_head); invert applies the opposite turn.
// `data` is row-major [rows, heads * d_head].
template <typename T>
void rope_rows(T* data, int64_t rows, const int32_t* positions, int64_t heads, int64_t d_head,
               double base, bool invert) {
  const int64_t pairs = d_head / 2;
  const int64_t width = heads * d_head;
  for (int64_t i = 0; i < rows; ++i) {
    const double pos = static_cast<double>(positions[i]) * (invert ? -1.0 : 1.0);
    T* row = data + i * width;
    for (int64_t p = 0; p < pairs; ++p) {
      const double theta =
          pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(d_head));
      const T c = static_cast<T>(std::cos(theta)), s = static_cast<T>(std::sin(theta));
      for (int64_t h = 0; h < heads; ++h) {
        T* v = row + h * d_head + 2 * p;
        const T x0 = v[0], x1 = v[1];
        v[0] = x0 * c - x1 * s;
        v[1] = x0 * s + x1 * c;
      }
    }
  }
}

// Tanh-approximated gelu, the convention used by the model family this
// toolkit mirrors.
template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  return static_cast<T>(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T u = c * (x + static_cast<T>(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + static_cast<T>(0.134145) * x * x);
  return static_cast<T>(0.5) * (T(1) + t) + static_cast<T>(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace kernels

}  // namespace edsg
