#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "knnx/errors.hpp"

namespace knnx {

// Dense row-major square matrix.
class Matrix {
 public:
  Matrix() = default;
  explicit Matrix(std::size_t n, double fill = 0.0) : n_(n), data_(n * n, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t size() const noexcept { return n_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * n_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * n_ + c]; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * n_, n_}; }
  const std::vector<double>& data() const noexcept { return data_; }

  std::vector<double> multiply(std::span<const double> v) const {
    std::vector<double> out(n_, 0.0);
    for (std::size_t r = 0; r < n_; ++r) {
      double acc = 0.0;
      const double* row = data_.data() + r * n_;
      for (std::size_t c = 0; c < n_; ++c) acc += row[c] * v[c];
      out[r] = acc;
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Lower-triangular Cholesky factor of (A + shift*I), computed once and
// reused for many right-hand sides.
class CholeskyFactor {
 public:
  CholeskyFactor(const Matrix& a, double shift) : a_(a), shift_(shift), l_(a.size()) {
    const std::size_t n = a.size();
    for (std::size_t j = 0; j < n; ++j) {
      double d = a(j, j) + shift;
      for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
      if (!(d > 0.0) || !std::isfinite(d))
        throw SingularHessianError("matrix is not positive definite (pivot " + std::to_string(j) + " = " +
                                   std::to_string(d) + "); increase damping");
      const double ljj = std::sqrt(d);
      l_(j, j) = ljj;
      for (std::size_t i = j + 1; i < n; ++i) {
        double s = a(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / ljj;
      }
    }
  }

  std::size_t size() const noexcept { return l_.size(); }

  // Solves (A + shift*I) x = b with one step of iterative refinement.
  std::vector<double> solve(std::span<const double> b) const {
    if (b.size() != size()) throw ShapeError("right-hand side has length " + std::to_string(b.size()) + ", expected " + std::to_string(size()));
    std::vector<double> x = substitute(b);
    std::vector<double> r = a_.multiply(x);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = b[i] - r[i] - shift_ * x[i];
    const std::vector<double> dx = substitute(r);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += dx[i];
    return x;
  }

 private:
  std::vector<double> substitute(std::span<const double> b) const {
    const std::size_t n = size();
    std::vector<double> y(b.begin(), b.end());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < i; ++k) y[i] -= l_(i, k) * y[k];
      y[i] /= l_(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t k = i + 1; k < n; ++k) y[i] -= l_(k, i) * y[k];
      y[i] /= l_(i, i);
    }
    return y;
  }

  Matrix a_;
  double shift_;
  Matrix l_;
};

// s = (H + damping*I)^-1 v by direct factorization.
inline std::vector<double> inverse_hvp_solve(const Matrix& h, std::span<const double> v, double damping) {
  if (damping < 0.0) throw ArgError("damping must be >= 0");
  for (std::size_t i = 0; i < h.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (h(i, j) != h(j, i)) throw ArgError("matrix is not symmetric");
  return CholeskyFactor(h, damping).solve(v);
}

}  // namespace knnx
