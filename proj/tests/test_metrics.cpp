#include <doctest.h>

#include "difuzcam/metrics.hpp"
#include "oracles.hpp"

using namespace difuzcam;

namespace {

Planes constant(double v, int h = 16, int w = 16) { return Planes(3, Matrix::Constant(h, w, v)); }

Planes random_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0, 1);
  Planes p(3, Matrix(h, w));
  for (auto& m : p) m = m.unaryExpr([&](double) { return u(rng); });
  return p;
}

// Direct per-window SSIM: every valid 11x11 window, Gaussian weights recomputed each time.
double naive_ssim(const Planes& a, const Planes& b) {
  const auto h = a[0].rows(), w = a[0].cols();
  Matrix x = Matrix::Zero(h, w), y = Matrix::Zero(h, w);
  for (std::size_t c = 0; c < a.size(); ++c) {
    x += a[c] / static_cast<double>(a.size());
    y += b[c] / static_cast<double>(b.size());
  }
  double wsum = 0.0;
  Matrix g(11, 11);
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) wsum += g(i, j) = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
  g /= wsum;
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int count = 0;
  for (Eigen::Index r = 0; r + 11 <= h; ++r)
    for (Eigen::Index c = 0; c + 11 <= w; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          mx += g(i, j) * x(r + i, c + j);
          my += g(i, j) * y(r + i, c + j);
        }
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double dx = x(r + i, c + j) - mx, dy = y(r + i, c + j) - my;
          sxx += g(i, j) * dx * dx;
          syy += g(i, j) * dy * dy;
          sxy += g(i, j) * dx * dy;
        }
      total += (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  return total / count;
}

}  // namespace

TEST_CASE("psnr: constant offset, identity cap, direct summation") {
  CHECK(psnr(constant(0.0), constant(0.5)) == doctest::Approx(6.0206).epsilon(1e-5));
  CHECK(std::abs(psnr(constant(0.0), constant(0.5)) - 20 * std::log10(2.0)) < 1e-4);
  CHECK(psnr(constant(0.3), constant(0.3)) == kPsnrCap);
  std::mt19937_64 rng(1);
  const Planes a = random_image(rng, 9, 13), b = random_image(rng, 9, 13);
  double sse = 0.0;
  int n = 0;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 13; ++j) {
        sse += std::pow(a[c](i, j) - b[c](i, j), 2);
        ++n;
      }
  CHECK(psnr(a, b, 2.0) == doctest::Approx(10 * std::log10(4.0 / (sse / n))).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, constant(0.1)), std::invalid_argument);
  CHECK_THROWS_AS(psnr(a, b, 0.0), std::invalid_argument);
}

TEST_CASE("ssim: self, constant closed form, symmetry, window oracle, size check") {
  std::mt19937_64 rng(2);
  const Planes a = random_image(rng, 24, 20), b = random_image(rng, 24, 20);
  CHECK(std::abs(ssim(a, a) - 1.0) < 1e-4);
  const double c1 = 1e-4;
  const double closed = (2 * 0.2 * 0.4 + c1) / (0.04 + 0.16 + c1);
  CHECK(std::abs(ssim(constant(0.2), constant(0.4)) - closed) < 1e-4);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(naive_ssim(a, b)).epsilon(1e-9));
  CHECK_THROWS_AS(ssim(constant(0.1, 10, 30), constant(0.1, 10, 30)), std::invalid_argument);
  CHECK(ssim(a, b) <= 1.0);
  CHECK(ssim(a, b) >= -1.0);
}
