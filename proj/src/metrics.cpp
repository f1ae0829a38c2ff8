#include "difuzcam/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace difuzcam {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;

Vector gaussian_taps() {
  Vector g(kWin);
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g(i) = std::exp(-d * d / (2.0 * kSigma * kSigma));
  }
  return g / g.sum();
}

// Separable valid-mode filtering: (H - 10) x (W - 10) output.
Matrix filter_valid(const Matrix& x, const Vector& g) {
  const Eigen::Index h = x.rows() - kWin + 1, w = x.cols() - kWin + 1;
  Matrix rows = Matrix::Zero(h, x.cols());
  for (int k = 0; k < kWin; ++k) rows += g(k) * x.middleRows(k, h);
  Matrix out = Matrix::Zero(h, w);
  for (int k = 0; k < kWin; ++k) out += g(k) * rows.middleCols(k, w);
  return out;
}

}  // namespace

double psnr(const Planes& a, const Planes& b, double peak) {
  check_same_shape(a, b, "psnr");
  if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
  if (a.empty() || a[0].size() == 0) throw std::invalid_argument("psnr: empty image");
  double sse = 0.0, count = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    sse += (a[c] - b[c]).squaredNorm();
    count += static_cast<double>(a[c].size());
  }
  const double mse = sse / count;
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

Matrix to_gray(const Planes& img) {
  if (img.empty()) throw std::invalid_argument("to_gray: empty image");
  Matrix g = img[0];
  for (std::size_t c = 1; c < img.size(); ++c) g += img[c];
  return g / static_cast<double>(img.size());
}

double ssim(const Planes& a, const Planes& b, double peak) {
  check_same_shape(a, b, "ssim");
  const Matrix x = to_gray(a), y = to_gray(b);
  if (x.rows() < kWin || x.cols() < kWin) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  const double c1 = std::pow(0.01 * peak, 2), c2 = std::pow(0.03 * peak, 2);
  const Vector g = gaussian_taps();
  const Matrix mx = filter_valid(x, g), my = filter_valid(y, g);
  const Matrix sxx = filter_valid(x.cwiseProduct(x), g) - mx.cwiseProduct(mx);
  const Matrix syy = filter_valid(y.cwiseProduct(y), g) - my.cwiseProduct(my);
  const Matrix sxy = filter_valid(x.cwiseProduct(y), g) - mx.cwiseProduct(my);
  const auto num = (2.0 * mx.array() * my.array() + c1) * (2.0 * sxy.array() + c2);
  const auto den = (mx.array().square() + my.array().square() + c1) * (sxx.array() + syy.array() + c2);
  return (num / den).mean();
}

}  // namespace difuzcam
