#pragma once

#include "difuzcam/types.hpp"

namespace difuzcam {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over all planes; identical inputs give kPsnrCap.
double psnr(const Planes& a, const Planes& b, double peak = 1.0);

/// Mean SSIM over the valid 11x11 Gaussian windows (sigma 1.5) of the channel
/// mean, with K1 = 0.01, K2 = 0.03 and dynamic range `peak`.
double ssim(const Planes& a, const Planes& b, double peak = 1.0);

/// Channel mean.
Matrix to_gray(const Planes& img);

}  // namespace difuzcam
