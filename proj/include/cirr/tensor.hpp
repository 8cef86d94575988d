// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace cirr {

using Vector = std::vector<double>;

/// Dense row-major matrix. Small on purpose: every kernel in this library is a
/// handful of dot products, and gradients are written out by hand.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  assert(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// out = M * x
inline void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) {
  assert(m.cols() == x.size() && m.rows() == out.size());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), x);
}

/// out = M^T * x
inline void matvec_t(const Matrix& m, std::span<const double> x, std::span<double> out) {
  assert(m.rows() == x.size() && m.cols() == out.size());
  for (auto& v : out) v = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(x[r], m.row(r), out);
}

/// M += alpha * u v^T
inline void add_outer(double alpha, std::span<const double> u, std::span<const double> v, Matrix& m) {
  assert(m.rows() == u.size() && m.cols() == v.size());
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(alpha * u[r], v, m.row(r));
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

/// Numerically stable softmax. Empty input yields empty output.
inline Vector softmax(std::span<const double> logits) {
  Vector out(logits.size());
  if (logits.empty()) return out;
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    total += out[i];
  }
  for (auto& p : out) p /= total;
  return out;
}

}  // namespace cirr
