// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and the handful of kernels the scorer graph needs.
// Every kernel has a matching *_backward that accumulates into caller-owned
// gradient buffers. Reductions accumulate in double.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace termprob {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateMaskError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class BasicTensor2 {
 public:
  using value_type = T;

  BasicTensor2() = default;
  BasicTensor2(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicTensor2(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match " + shape_string(rows, cols));
    }
  }

  static BasicTensor2 from_rows(const std::vector<std::vector<T>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.front().size() : 0;
    BasicTensor2 out(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      if (rows[i].size() != c) throw DimensionError("ragged row list");
      for (std::size_t j = 0; j < c; ++j) out(i, j) = rows[i][j];
    }
    return out;
  }

  template <typename U>
  BasicTensor2<U> cast() const {
    BasicTensor2<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape() const { return shape_string(rows_, cols_); }

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

  friend bool operator==(const BasicTensor2& a, const BasicTensor2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Tensor2 = BasicTensor2<float>;
using Tensor2d = BasicTensor2<double>;

// Binary validity mask: 1 = valid, 0 = padded.
using Mask = std::vector<std::uint8_t>;

inline Mask prefix_mask(std::size_t valid, std::size_t total) {
  Mask m(total, 0);
  for (std::size_t i = 0; i < valid && i < total; ++i) m[i] = 1;
  return m;
}

inline std::size_t count_valid(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m) n += v ? 1 : 0;
  return n;
}

// A parameter tensor with its gradient. The gradient accumulates across
// backward calls until zero_grad().
template <typename T>
struct BasicGradPair {
  BasicTensor2<T> value;
  BasicTensor2<T> grad;

  BasicGradPair() = default;
  explicit BasicGradPair(BasicTensor2<T> v)
      : value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad = BasicTensor2<T>(value.rows(), value.cols()); }
};

using GradPair = BasicGradPair<float>;

// ---------------------------------------------------------------------------
// matmul

template <typename T>
BasicTensor2<T> matmul(const BasicTensor2<T>& a, const BasicTensor2<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + a.shape() + " x " + b.shape());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  BasicTensor2<T> out(n, m);
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const T* brow = &b(p, 0);
      for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

// Accumulates dL/da += g * b^T and dL/db += a^T * g.
template <typename T>
void matmul_backward(const BasicTensor2<T>& a, const BasicTensor2<T>& b,
                     const BasicTensor2<T>& g, BasicTensor2<T>* grad_a,
                     BasicTensor2<T>* grad_b) {
  if (g.rows() != a.rows() || g.cols() != b.cols()) {
    throw DimensionError("matmul_backward gradient shape " + g.shape() +
                         " does not match " + a.shape() + " x " + b.shape());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (grad_a) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += static_cast<double>(g(i, j)) * b(p, j);
        (*grad_a)(i, p) += static_cast<T>(s);
      }
  }
  if (grad_b) {
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a(i, p)) * g(i, j);
        (*grad_b)(p, j) += static_cast<T>(s);
      }
  }
}

template <typename T>
BasicTensor2<T> transpose(const BasicTensor2<T>& a) {
  BasicTensor2<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// Adds a 1 x cols bias row to every row of x.
template <typename T>
void add_row_bias(BasicTensor2<T>& x, const BasicTensor2<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw DimensionError("bias shape " + bias.shape() + " does not fit " + x.shape());
  }
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += bias(0, j);
}

// ---------------------------------------------------------------------------
// masked softmax over each row

template <typename T>
BasicTensor2<T> masked_softmax_rows(const BasicTensor2<T>& scores, const Mask& mask) {
  if (mask.size() != scores.cols()) {
    throw DimensionError("mask length " + std::to_string(mask.size()) +
                         " does not match score columns " + std::to_string(scores.cols()));
  }
  if (count_valid(mask) == 0) {
    throw DegenerateMaskError("masked_softmax_rows: every column is masked");
  }
  BasicTensor2<T> out(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask[j]) mx = std::max(mx, static_cast<double>(scores(i, j)));
    double denom = 0.0;
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask[j]) denom += std::exp(static_cast<double>(scores(i, j)) - mx);
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      out(i, j) = mask[j] ? static_cast<T>(std::exp(static_cast<double>(scores(i, j)) - mx) / denom)
                          : T(0);
    }
  }
  return out;
}

// Given the softmax output p and upstream gradient g, accumulates
// dL/dscores = p * (g - sum_j p_j g_j) row by row. Masked columns have p = 0
// and receive nothing.
template <typename T>
void masked_softmax_rows_backward(const BasicTensor2<T>& p, const BasicTensor2<T>& g,
                                  BasicTensor2<T>& grad_scores) {
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += static_cast<double>(p(i, j)) * g(i, j);
    for (std::size_t j = 0; j < p.cols(); ++j)
      grad_scores(i, j) += static_cast<T>(p(i, j) * (g(i, j) - dot));
  }
}

// ---------------------------------------------------------------------------
// scalar helpers

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) {
    const T z = std::exp(-x);
    return T(1) / (T(1) + z);
  }
  const T z = std::exp(x);
  return z / (T(1) + z);
}

}  // namespace termprob
