#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "difuzcam/optics.hpp"
#include "difuzcam/types.hpp"

namespace difuzcam {

/// Learned per-Bayer-plane separable map C_k -> phi_l[k] * C_k * phi_r[k],
/// followed by a 3x3 convolution head (4 -> 3 channels) used by the
/// separable reconstruction loss.
struct SepTransform {
  std::array<Matrix, 4> phi_l;  // h_o x h_i
  std::array<Matrix, 4> phi_r;  // w_i x w_o
  std::vector<double> head_weight = std::vector<double>(3 * 4 * 9, 0.0);  // [out][in][ky][kx]
  std::array<double, 3> head_bias{0.0, 0.0, 0.0};
  /// Raw DN (after black-level subtraction) are multiplied by this before the transform.
  double input_scale = 1.0;

  int in_rows() const { return static_cast<int>(phi_l[0].cols()); }
  int in_cols() const { return static_cast<int>(phi_r[0].rows()); }
  int out_rows() const { return static_cast<int>(phi_l[0].rows()); }
  int out_cols() const { return static_cast<int>(phi_r[0].cols()); }

  double& head(int o, int i, int ky, int kx) { return head_weight[static_cast<std::size_t>(((o * 4 + i) * 3 + ky) * 3 + kx)]; }
  double head(int o, int i, int ky, int kx) const { return head_weight[static_cast<std::size_t>(((o * 4 + i) * 3 + ky) * 3 + kx)]; }

  bool all_finite() const;
  /// Flat views for the optimizer / serialization, in a fixed order.
  std::vector<std::pair<std::string, std::span<double>>> blocks();
};

/// Gradient with the same layout as SepTransform's weights.
struct SepGrad {
  std::array<Matrix, 4> phi_l, phi_r;
  std::vector<double> head_weight = std::vector<double>(3 * 4 * 9, 0.0);
  std::array<double, 3> head_bias{0.0, 0.0, 0.0};

  static SepGrad zeros_like(const SepTransform& t);
  std::vector<std::span<double>> blocks();
};

enum class SepInit { tikhonov_init, random };

SepInit parse_sep_init(const std::string& name);

/// tikhonov_init: regularized pseudo-inverses of the parity-selected factors
/// (relative ridge `rel_ridge` * s_max^2), scaled so the output is in scene
/// units. random: N(0, 1/h_i) entries from `seed`. The head starts as the
/// R, mean(Gr, Gb), B colour stacking in both modes.
SepTransform init_sep_transform(const SeparableSystem& system, SepInit mode, std::uint64_t seed = 0,
                                double rel_ridge = 1e-4);

/// Normalized Bayer planes of a capture: (raw - black) * input_scale.
std::array<Matrix, 4> capture_planes(const RawCapture& capture, const SepTransform& t);

/// Channel k of the result is phi_l[k] * planes[k] * phi_r[k].
Planes apply_sep_transform(const std::array<Matrix, 4>& planes, const SepTransform& t);

/// 3x3 same-padded convolution 4 -> 3 channels plus bias, no nonlinearity.
Planes conv_head(const Planes& c_o, const SepTransform& t);

/// Mean squared error between conv_head(c_o) and the RGB target.
double sep_loss(const Planes& target_rgb, const Planes& c_o, const SepTransform& t);

/// Adds the gradients of `scale * sep_loss` w.r.t. the head weights into `grad`
/// and returns dLoss/dC^o (also scaled).
Planes sep_loss_backward(const Planes& target_rgb, const Planes& c_o, const SepTransform& t, SepGrad& grad,
                         double scale = 1.0);

/// Given dL/dC^o, accumulates dL/dphi_l and dL/dphi_r into `grad`.
void apply_sep_transform_backward(const std::array<Matrix, 4>& planes, const SepTransform& t, const Planes& d_c_o,
                                  SepGrad& grad);

}  // namespace difuzcam
