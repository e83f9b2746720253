#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ccnf/errors.hpp"

namespace ccnf {

using Vector = std::vector<double>;

inline bool all_finite(std::span<const double> x) {
  for (double v : x) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Row-major dense matrix of doubles.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, Vector data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw InvalidInput("DenseMatrix: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
    }
  }

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// Raw kernels shared by the plain and the recorded evaluation paths. Both
// paths call exactly these loops, which is what makes recorded and unrecorded
// integration bit-identical.
namespace kernels {

inline void affine(const double* w, std::size_t rows, std::size_t cols, const double* b,
                   const double* x, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = w + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * x[c];
    out[r] = b ? acc + b[r] : acc;
  }
}

inline void tanh(const double* x, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x[i]);
}

inline void one_minus_square(const double* y, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 - y[i] * y[i];
}

inline void mul(const double* a, const double* b, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

// out = x + alpha * y
inline void axpy(const double* x, double alpha, const double* y, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + alpha * y[i];
}

inline void scale(const double* x, double alpha, std::size_t n, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline double sum(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

// out[j] = sum_{i < prefix} w_out[i, j] * w_in[j, i]; w_out is (out_rows x hidden),
// w_in is (hidden x in_cols). This is diag(w_out * w_in[:, :prefix]) reorganised
// per hidden unit.
inline void diag_contract(const double* w_out, std::size_t out_rows, std::size_t hidden,
                          const double* w_in, std::size_t in_cols, std::size_t prefix,
                          double* out) {
  for (std::size_t j = 0; j < hidden; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < prefix && i < out_rows; ++i) {
      acc += w_out[i * hidden + j] * w_in[j * in_cols + i];
    }
    out[j] = acc;
  }
}

}  // namespace kernels

inline Vector affine(const DenseMatrix& w, std::span<const double> b, std::span<const double> x) {
  if (w.cols() != x.size() || w.rows() != b.size()) {
    throw InvalidInput("affine: W is " + std::to_string(w.rows()) + "x" +
                       std::to_string(w.cols()) + ", len(b)=" + std::to_string(b.size()) +
                       ", len(x)=" + std::to_string(x.size()));
  }
  Vector out(w.rows());
  kernels::affine(w.data().data(), w.rows(), w.cols(), b.data(), x.data(), out.data());
  return out;
}

inline Vector tanh_elementwise(std::span<const double> x) {
  Vector out(x.size());
  kernels::tanh(x.data(), x.size(), out.data());
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("dot: length mismatch");
  return kernels::dot(a.data(), b.data(), a.size());
}

inline double norm(std::span<const double> x) { return std::sqrt(kernels::dot(x.data(), x.data(), x.size())); }

inline Vector operator+(const Vector& a, const Vector& b) {
  Vector out(a.size());
  kernels::axpy(a.data(), 1.0, b.data(), a.size(), out.data());
  return out;
}

inline Vector operator-(const Vector& a, const Vector& b) {
  Vector out(a.size());
  kernels::axpy(a.data(), -1.0, b.data(), a.size(), out.data());
  return out;
}

inline Vector operator*(double s, const Vector& a) {
  Vector out(a.size());
  kernels::scale(a.data(), s, a.size(), out.data());
  return out;
}

inline Vector matvec(const DenseMatrix& w, std::span<const double> x) {
  if (w.cols() != x.size()) throw InvalidInput("matvec: dimension mismatch");
  Vector out(w.rows());
  kernels::affine(w.data().data(), w.rows(), w.cols(), nullptr, x.data(), out.data());
  return out;
}

}  // namespace ccnf
