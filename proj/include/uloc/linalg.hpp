#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace uloc {

using Vec = std::vector<double>;

// Dense row-major matrix. Biases are stored as n-by-1 matrices so that every
// parameter tensor shares one type.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return a[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return a[r * cols + c]; }

  std::size_t size() const { return a.size(); }
  void fill(double v) { a.assign(a.size(), v); }
};

// y = W x
inline Vec matvec(const Matrix& w, const Vec& x) {
  assert(w.cols == x.size());
  Vec y(w.rows, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    double acc = 0.0;
    const double* row = &w.a[r * w.cols];
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

// y = W^T x
inline Vec tmatvec(const Matrix& w, const Vec& x) {
  assert(w.rows == x.size());
  Vec y(w.cols, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = &w.a[r * w.cols];
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += row[c] * x[r];
  }
  return y;
}

// g += y x^T
inline void add_outer(Matrix& g, const Vec& y, const Vec& x) {
  assert(g.rows == y.size() && g.cols == x.size());
  for (std::size_t r = 0; r < g.rows; ++r) {
    double* row = &g.a[r * g.cols];
    for (std::size_t c = 0; c < g.cols; ++c) row[c] += y[r] * x[c];
  }
}

inline double dot(const Vec& a, const Vec& b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline void axpy(double alpha, const Vec& x, Vec& y) {
  assert(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace uloc
