#include "difuzcam/tikhonov.hpp"

#include <stdexcept>

namespace difuzcam {

namespace {

bool full_rank(const Vector& sv, Eigen::Index needed) {
  if (sv.size() < needed || sv.size() == 0) return false;
  const double tol = sv(0) * 1e-12 * static_cast<double>(needed);
  return sv(needed - 1) > tol;
}

}  // namespace

TikhonovSolver::TikhonovSolver(const Matrix& phi_l, const Matrix& phi_r) {
  if (phi_l.size() == 0 || phi_r.size() == 0) throw std::invalid_argument("TikhonovSolver: empty factor");
  Eigen::BDCSVD<Matrix> left(phi_l, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::BDCSVD<Matrix> right(phi_r, Eigen::ComputeThinU | Eigen::ComputeThinV);
  u_ = left.matrixU();
  s_ = left.singularValues();
  v_ = left.matrixV();
  w_ = right.matrixU();
  t_ = right.singularValues();
  z_ = right.matrixV();
  out_rows_ = phi_l.rows();
  out_cols_ = phi_r.cols();
  left_full_rank_ = full_rank(s_, phi_l.cols());
  right_full_rank_ = full_rank(t_, phi_r.rows());
}

Matrix TikhonovSolver::solve(const Matrix& y, double lambda) const {
  if (lambda < 0.0) throw std::invalid_argument("tikhonov: lambda must be nonnegative");
  if (y.rows() != out_rows_ || y.cols() != out_cols_)
    throw std::invalid_argument("tikhonov: measurement shape does not match the factors");
  if (lambda == 0.0 && !(left_full_rank_ && right_full_rank_)) {
    throw std::invalid_argument(std::string("tikhonov: lambda = 0 with a rank-deficient ") +
                                (left_full_rank_ ? "right" : "left") + " factor (singular system)");
  }
  Matrix m = u_.transpose() * y * z_;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double st = s_(i) * t_(j);
      const double den = st * st + lambda;
      m(i, j) = den > 0.0 ? st * m(i, j) / den : 0.0;
    }
  }
  return v_ * m * w_.transpose();
}

Matrix tikhonov_reconstruct(const Matrix& y, const Matrix& phi_l, const Matrix& phi_r, double lambda) {
  return TikhonovSolver(phi_l, phi_r).solve(y, lambda);
}

namespace {

std::array<TikhonovSolver, 4> make_plane_solvers(const SeparableSystem& s) {
  return {TikhonovSolver(plane_phi_l(s, 0), plane_phi_r(s, 0)), TikhonovSolver(plane_phi_l(s, 1), plane_phi_r(s, 1)),
          TikhonovSolver(plane_phi_l(s, 2), plane_phi_r(s, 2)), TikhonovSolver(plane_phi_l(s, 3), plane_phi_r(s, 3))};
}

}  // namespace

TikhonovRGB::TikhonovRGB(const SeparableSystem& system)
    : system_(system), planes_(make_plane_solvers(system)), full_(system.phi_l, system.phi_r) {
  system_.validate();
}

std::array<Matrix, 4> TikhonovRGB::plane_estimates(const RawCapture& capture, double lambda) const {
  if (capture.mosaic.rows() != system_.sensor_rows() || capture.mosaic.cols() != system_.sensor_cols())
    throw std::invalid_argument("tikhonov_rgb: capture geometry does not match the system");
  const Matrix y = capture_signal(capture) / system_.gain_dn;
  const auto planes = bayer_split(y);
  std::array<Matrix, 4> out;
  for (std::size_t k = 0; k < 4; ++k) out[k] = planes_[k].solve(planes[k], lambda);
  return out;
}

RGBImage TikhonovRGB::reconstruct(const RawCapture& capture, const TikhonovConfig& cfg) const {
  RGBImage rgb(3);
  if (cfg.per_channel) {
    const auto est = plane_estimates(capture, cfg.lambda);
    rgb[0] = est[0];
    rgb[1] = 0.5 * (est[1] + est[2]);
    rgb[2] = est[3];
  } else {
    if (capture.mosaic.rows() != system_.sensor_rows() || capture.mosaic.cols() != system_.sensor_cols())
      throw std::invalid_argument("tikhonov_rgb: capture geometry does not match the system");
    const Matrix gray = full_.solve(capture_signal(capture) / system_.gain_dn, cfg.lambda);
    rgb = {gray, gray, gray};
  }
  for (auto& p : rgb) p = p.cwiseMax(0.0).cwiseMin(1.0);
  return rgb;
}

RGBImage tikhonov_rgb(const RawCapture& capture, const SeparableSystem& system, const TikhonovConfig& cfg) {
  return TikhonovRGB(system).reconstruct(capture, cfg);
}

Matrix compute_psf(const SeparableSystem& system, int i, int j) {
  if (i < 0 || i >= system.scene_rows() || j < 0 || j >= system.scene_cols())
    throw std::out_of_range("compute_psf: index outside the scene grid");
  return system.phi_l.col(i) * system.phi_r.row(j);
}

}  // namespace difuzcam
