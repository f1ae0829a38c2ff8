#pragma once

// Independent reference implementations used by the tests: dense operators and
// direct loops, no shared code with the library's fast paths.

#include <cmath>
#include <functional>
#include <random>

#include <Eigen/Dense>

#include "difuzcam/types.hpp"

namespace oracle {

using difuzcam::Matrix;
using difuzcam::Vector;

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return k;
}

/// Column-major vectorization.
inline Vector vec(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

inline Matrix unvec(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

/// vec(L X R) = (R^T kron L) vec(X).
inline Matrix dense_separable(const Matrix& l, const Matrix& r) { return kron(r.transpose(), l); }

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline double rel_err(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

/// Central finite difference of f at x along direction d.
inline double central_diff(const std::function<double(double)>& f, double h) { return (f(h) - f(-h)) / (2.0 * h); }

}  // namespace oracle
