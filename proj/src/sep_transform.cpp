#include "difuzcam/sep_transform.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace difuzcam {

namespace {

// Valid output window for a kernel tap at offset (dy, dx) on an h x w plane.
struct Window {
  Eigen::Index y0, x0, rows, cols;
};

Window tap_window(Eigen::Index h, Eigen::Index w, int dy, int dx) {
  const Eigen::Index y0 = std::max<Eigen::Index>(0, -dy);
  const Eigen::Index x0 = std::max<Eigen::Index>(0, -dx);
  const Eigen::Index y1 = std::min<Eigen::Index>(h, h - dy);
  const Eigen::Index x1 = std::min<Eigen::Index>(w, w - dx);
  return {y0, x0, std::max<Eigen::Index>(0, y1 - y0), std::max<Eigen::Index>(0, x1 - x0)};
}

void check_co(const Planes& c_o, const SepTransform& t, const char* what) {
  if (c_o.size() != 4) throw std::invalid_argument(std::string(what) + ": expected 4 channels");
  for (const auto& p : c_o) {
    if (p.rows() != t.out_rows() || p.cols() != t.out_cols())
      throw std::invalid_argument(std::string(what) + ": channel shape does not match the transform output");
  }
}

Matrix regularized_pinv(const Matrix& a, double rel_ridge) {
  Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double mu = rel_ridge * s(0) * s(0);
  Vector inv(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) / (s(i) * s(i) + mu);
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

void set_color_stacking_head(SepTransform& t) {
  std::fill(t.head_weight.begin(), t.head_weight.end(), 0.0);
  t.head_bias = {0.0, 0.0, 0.0};
  t.head(0, 0, 1, 1) = 1.0;
  t.head(1, 1, 1, 1) = 0.5;
  t.head(1, 2, 1, 1) = 0.5;
  t.head(2, 3, 1, 1) = 1.0;
}

}  // namespace

bool SepTransform::all_finite() const {
  for (int k = 0; k < 4; ++k)
    if (!phi_l[static_cast<std::size_t>(k)].allFinite() || !phi_r[static_cast<std::size_t>(k)].allFinite()) return false;
  for (double v : head_weight)
    if (!std::isfinite(v)) return false;
  for (double v : head_bias)
    if (!std::isfinite(v)) return false;
  return true;
}

std::vector<std::pair<std::string, std::span<double>>> SepTransform::blocks() {
  std::vector<std::pair<std::string, std::span<double>>> out;
  static const char* names[4] = {"R", "Gr", "Gb", "B"};
  for (std::size_t k = 0; k < 4; ++k) {
    out.emplace_back(std::string("sep.phi_l.") + names[k],
                     std::span<double>(phi_l[k].data(), static_cast<std::size_t>(phi_l[k].size())));
    out.emplace_back(std::string("sep.phi_r.") + names[k],
                     std::span<double>(phi_r[k].data(), static_cast<std::size_t>(phi_r[k].size())));
  }
  out.emplace_back("sep.head.weight", std::span<double>(head_weight));
  out.emplace_back("sep.head.bias", std::span<double>(head_bias));
  return out;
}

SepGrad SepGrad::zeros_like(const SepTransform& t) {
  SepGrad g;
  for (std::size_t k = 0; k < 4; ++k) {
    g.phi_l[k] = Matrix::Zero(t.phi_l[k].rows(), t.phi_l[k].cols());
    g.phi_r[k] = Matrix::Zero(t.phi_r[k].rows(), t.phi_r[k].cols());
  }
  return g;
}

std::vector<std::span<double>> SepGrad::blocks() {
  std::vector<std::span<double>> out;
  for (std::size_t k = 0; k < 4; ++k) {
    out.emplace_back(phi_l[k].data(), static_cast<std::size_t>(phi_l[k].size()));
    out.emplace_back(phi_r[k].data(), static_cast<std::size_t>(phi_r[k].size()));
  }
  out.emplace_back(head_weight);
  out.emplace_back(head_bias);
  return out;
}

SepInit parse_sep_init(const std::string& name) {
  if (name == "tikhonov_init") return SepInit::tikhonov_init;
  if (name == "random") return SepInit::random;
  throw std::invalid_argument("unknown separable-transform init: " + name);
}

SepTransform init_sep_transform(const SeparableSystem& system, SepInit mode, std::uint64_t seed, double rel_ridge) {
  system.validate();
  SepTransform t;
  t.input_scale = 1.0 / (system.max_dn() - system.black_level);
  const int h_i = system.sensor_rows() / 2, w_i = system.sensor_cols() / 2;
  const int h_o = system.scene_rows(), w_o = system.scene_cols();
  if (mode == SepInit::tikhonov_init) {
    // planes hold input_scale * gain * L_k X R_k
    const double to_scene = 1.0 / (t.input_scale * system.gain_dn);
    for (int k = 0; k < 4; ++k) {
      t.phi_l[static_cast<std::size_t>(k)] = regularized_pinv(plane_phi_l(system, k), rel_ridge) * to_scene;
      t.phi_r[static_cast<std::size_t>(k)] = regularized_pinv(plane_phi_r(system, k), rel_ridge);
    }
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nl(0.0, 1.0 / std::sqrt(static_cast<double>(h_i)));
    std::normal_distribution<double> nr(0.0, 1.0 / std::sqrt(static_cast<double>(w_i)));
    for (std::size_t k = 0; k < 4; ++k) {
      t.phi_l[k].resize(h_o, h_i);
      t.phi_r[k].resize(w_i, w_o);
      for (Eigen::Index j = 0; j < h_i; ++j)
        for (Eigen::Index i = 0; i < h_o; ++i) t.phi_l[k](i, j) = nl(rng);
      for (Eigen::Index j = 0; j < w_o; ++j)
        for (Eigen::Index i = 0; i < w_i; ++i) t.phi_r[k](i, j) = nr(rng);
    }
  }
  set_color_stacking_head(t);
  return t;
}

std::array<Matrix, 4> capture_planes(const RawCapture& capture, const SepTransform& t) {
  auto planes = bayer_split(capture_signal(capture));
  for (auto& p : planes) p *= t.input_scale;
  return planes;
}

Planes apply_sep_transform(const std::array<Matrix, 4>& planes, const SepTransform& t) {
  Planes out(4);
  for (std::size_t k = 0; k < 4; ++k) {
    if (planes[k].rows() != t.in_rows() || planes[k].cols() != t.in_cols())
      throw std::invalid_argument("apply_sep_transform: plane shape does not match the transform input");
    out[k].noalias() = t.phi_l[k] * planes[k] * t.phi_r[k];
  }
  return out;
}

Planes conv_head(const Planes& c_o, const SepTransform& t) {
  check_co(c_o, t, "conv_head");
  const auto h = c_o[0].rows(), w = c_o[0].cols();
  Planes out(3);
  for (int o = 0; o < 3; ++o) {
    Matrix acc = Matrix::Constant(h, w, t.head_bias[static_cast<std::size_t>(o)]);
    for (int i = 0; i < 4; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const double wgt = t.head(o, i, ky, kx);
          if (wgt == 0.0) continue;
          const Window win = tap_window(h, w, ky - 1, kx - 1);
          acc.block(win.y0, win.x0, win.rows, win.cols) +=
              wgt * c_o[static_cast<std::size_t>(i)].block(win.y0 + ky - 1, win.x0 + kx - 1, win.rows, win.cols);
        }
      }
    }
    out[static_cast<std::size_t>(o)] = std::move(acc);
  }
  return out;
}

double sep_loss(const Planes& target_rgb, const Planes& c_o, const SepTransform& t) {
  const Planes pred = conv_head(c_o, t);
  check_same_shape(pred, target_rgb, "sep_loss");
  double acc = 0.0;
  double count = 0.0;
  for (std::size_t c = 0; c < 3; ++c) {
    acc += (pred[c] - target_rgb[c]).squaredNorm();
    count += static_cast<double>(pred[c].size());
  }
  return acc / count;
}

Planes sep_loss_backward(const Planes& target_rgb, const Planes& c_o, const SepTransform& t, SepGrad& grad,
                         double scale) {
  const Planes pred = conv_head(c_o, t);
  check_same_shape(pred, target_rgb, "sep_loss");
  const auto h = c_o[0].rows(), w = c_o[0].cols();
  const double count = 3.0 * static_cast<double>(h * w);
  Planes d_out(3);
  for (std::size_t c = 0; c < 3; ++c) d_out[c] = (2.0 * scale / count) * (pred[c] - target_rgb[c]);

  Planes d_co(4, Matrix::Zero(h, w));
  for (int o = 0; o < 3; ++o) {
    const Matrix& g = d_out[static_cast<std::size_t>(o)];
    grad.head_bias[static_cast<std::size_t>(o)] += g.sum();
    for (int i = 0; i < 4; ++i) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const Window win = tap_window(h, w, ky - 1, kx - 1);
          const auto src = c_o[static_cast<std::size_t>(i)].block(win.y0 + ky - 1, win.x0 + kx - 1, win.rows, win.cols);
          const auto gb = g.block(win.y0, win.x0, win.rows, win.cols);
          grad.head_weight[static_cast<std::size_t>(((o * 4 + i) * 3 + ky) * 3 + kx)] += (gb.array() * src.array()).sum();
          d_co[static_cast<std::size_t>(i)].block(win.y0 + ky - 1, win.x0 + kx - 1, win.rows, win.cols) +=
              t.head(o, i, ky, kx) * gb;
        }
      }
    }
  }
  return d_co;
}

void apply_sep_transform_backward(const std::array<Matrix, 4>& planes, const SepTransform& t, const Planes& d_c_o,
                                  SepGrad& grad) {
  check_co(d_c_o, t, "apply_sep_transform_backward");
  for (std::size_t k = 0; k < 4; ++k) {
    grad.phi_l[k].noalias() += d_c_o[k] * (planes[k] * t.phi_r[k]).transpose();
    grad.phi_r[k].noalias() += (t.phi_l[k] * planes[k]).transpose() * d_c_o[k];
  }
}

}  // namespace difuzcam
