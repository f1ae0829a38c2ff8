#pragma once

#include <array>

#include "difuzcam/optics.hpp"
#include "difuzcam/types.hpp"

namespace difuzcam {

struct TikhonovConfig {
  double lambda = 1e-3;
  bool per_channel = true;  // false: one grayscale inversion of the whole mosaic
};

/// Ridge inversion of Y = L X R through cached thin SVDs of both factors.
/// Read-only after construction.
class TikhonovSolver {
 public:
  TikhonovSolver(const Matrix& phi_l, const Matrix& phi_r);

  /// argmin_X |L X R - Y|_F^2 + lambda |X|_F^2. lambda == 0 requires full
  /// column rank of L and full row rank of R.
  Matrix solve(const Matrix& y, double lambda) const;

  int rows_in() const { return static_cast<int>(v_.rows()); }
  int cols_in() const { return static_cast<int>(w_.rows()); }
  const Vector& left_singular_values() const { return s_; }
  const Vector& right_singular_values() const { return t_; }

 private:
  Matrix u_, v_, w_, z_;
  Vector s_, t_;
  Eigen::Index out_rows_ = 0, out_cols_ = 0;
  bool left_full_rank_ = false, right_full_rank_ = false;
};

Matrix tikhonov_reconstruct(const Matrix& y, const Matrix& phi_l, const Matrix& phi_r, double lambda);

/// Per-system cache of the four Bayer-plane solvers (plus a grayscale one).
class TikhonovRGB {
 public:
  explicit TikhonovRGB(const SeparableSystem& system);

  /// Black-level subtract, split, invert each plane, average Gr/Gb, clip to [0, 1].
  RGBImage reconstruct(const RawCapture& capture, const TikhonovConfig& cfg) const;

  /// The four plane estimates before fusion, in [R, Gr, Gb, B] order.
  std::array<Matrix, 4> plane_estimates(const RawCapture& capture, double lambda) const;

  const SeparableSystem& system() const { return system_; }

 private:
  SeparableSystem system_;
  std::array<TikhonovSolver, 4> planes_;
  TikhonovSolver full_;
};

RGBImage tikhonov_rgb(const RawCapture& capture, const SeparableSystem& system, const TikhonovConfig& cfg);

/// Sensor response to a unit point at scene pixel (i, j).
Matrix compute_psf(const SeparableSystem& system, int i, int j);

}  // namespace difuzcam
