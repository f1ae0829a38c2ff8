#include <doctest.h>

#include "difuzcam/metrics.hpp"
#include "difuzcam/tikhonov.hpp"
#include "oracles.hpp"

using namespace difuzcam;

namespace {

// argmin |A x - y|^2 + lambda |x|^2 through the dense normal equations.
Matrix dense_ridge(const Matrix& l, const Matrix& r, const Matrix& y, double lambda, Vector* residual = nullptr) {
  const Matrix a = oracle::dense_separable(l, r);
  const Matrix n = a.transpose() * a + lambda * Matrix::Identity(a.cols(), a.cols());
  const Vector x = n.ldlt().solve(a.transpose() * oracle::vec(y));
  if (residual) *residual = n * x - a.transpose() * oracle::vec(y);
  return oracle::unvec(x, l.cols(), r.rows());
}

SeparableSystem small_system(int order, int scene, int pitch) {
  SystemSpec spec;
  spec.scene = scene;
  spec.sensor = 2 * scene;
  spec.mseq_order = order;
  spec.pitch = pitch;
  spec.read_noise_sigma = 0;
  spec.shot_noise_gain = 0;
  return make_system(spec);
}

}  // namespace

TEST_CASE("Tikhonov matches the dense ridge solve on random instances") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 2 + trial % 6, w = 2 + (trial * 7) % 6;
    const int m = h + trial % 4, n = w + (trial / 2) % 3;  // tall, square or wide mixes
    const Matrix l = oracle::random_matrix(m, h, rng), r = oracle::random_matrix(w, n, rng);
    const Matrix y = oracle::random_matrix(m, n, rng);
    const double lambda = std::pow(10.0, -3.0 + (trial % 5));
    Vector res;
    const Matrix want = dense_ridge(l, r, y, lambda, &res);
    const Matrix got = TikhonovSolver(l, r).solve(y, lambda);
    CHECK(oracle::rel_err(got, want) < 1e-9);

    // normal-equation residual of our solution
    const Matrix a = oracle::dense_separable(l, r);
    const Vector x = oracle::vec(got);
    const Vector rhs = a.transpose() * oracle::vec(y);
    const Vector r_ours = (a.transpose() * a) * x + lambda * x - rhs;
    CHECK(r_ours.norm() / rhs.norm() < 1e-8);
  }
}

TEST_CASE("Tikhonov handles rank-deficient factors when lambda > 0") {
  std::mt19937_64 rng(7);
  const Matrix l = oracle::random_matrix(3, 5, rng);  // wide: rank 3 < 5
  const Matrix r = oracle::random_matrix(4, 6, rng);
  const Matrix y = oracle::random_matrix(3, 6, rng);
  CHECK(oracle::rel_err(TikhonovSolver(l, r).solve(y, 0.1), dense_ridge(l, r, y, 0.1)) < 1e-9);
  CHECK_THROWS_AS(TikhonovSolver(l, r).solve(y, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(TikhonovSolver(l, r).solve(y, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(TikhonovSolver(l, r).solve(Matrix::Zero(2, 6), 1.0), std::invalid_argument);
}

TEST_CASE("lambda = 0 on a full-rank square system inverts exactly") {
  std::mt19937_64 rng(9);
  const Matrix l = oracle::random_matrix(5, 5, rng), r = oracle::random_matrix(4, 4, rng);
  const Matrix x = oracle::random_matrix(5, 4, rng);
  CHECK(oracle::rel_err(TikhonovSolver(l, r).solve(l * x * r, 0.0), x) < 1e-9);
}

TEST_CASE("noiseless quantization-only capture of a full-rank system recovers above 60 dB") {
  const SeparableSystem sys = small_system(3, 7, 2);
  for (int k = 0; k < 4; ++k) {
    Eigen::FullPivLU<Matrix> lu(plane_phi_l(sys, k));
    CHECK(lu.rank() == 7);
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  Scene s{zeros_planes(3, 7, 7), "", "q", "{}"};
  for (auto& p : s.rgb) p = p.unaryExpr([&](double) { return u(rng); });
  const RawCapture cap = simulate_capture(s, sys, 1);
  const RGBImage rec = tikhonov_rgb(cap, sys, {1e-8, true});
  CHECK(psnr(rec, s.rgb) > 60.0);
}

TEST_CASE("zero scene reconstructs to zero; Gr and Gb agree on a gray scene") {
  SystemSpec spec;
  spec.scene = 16;
  spec.sensor = 32;
  spec.mseq_order = 6;
  spec.read_noise_sigma = 0;
  spec.shot_noise_gain = 0;
  const SeparableSystem sys = make_system(spec);
  const TikhonovRGB solver(sys);
  const RawCapture zero = simulate_capture(Scene{zeros_planes(3, 16, 16), "", "z", "{}"}, sys, 1);
  const RGBImage rec = solver.reconstruct(zero, {1e-3, true});
  // one DN expressed in scene units is far above this
  for (const auto& p : rec) CHECK(p.cwiseAbs().maxCoeff() < 1.0 / sys.gain_dn);

  Scene gray{RGBImage(3, Matrix::Constant(16, 16, 0.4)), "", "g", "{}"};
  const auto est = solver.plane_estimates(simulate_capture(gray, sys, 1), 1e-3);
  // Gr and Gb see different sensor rows, so they only agree up to amplified quantization
  CHECK(est[1].mean() == doctest::Approx(est[2].mean()).epsilon(1e-2));
  CHECK(oracle::rel_err(est[1], est[2]) < 0.1);
  CHECK(solver.reconstruct(simulate_capture(gray, sys, 1), {1e-3, false})[0].mean() == doctest::Approx(0.4).epsilon(0.05));
}

TEST_CASE("compute_psf equals forward_project of an impulse and checks bounds") {
  const SeparableSystem sys = small_system(5, 8, 1);
  Matrix impulse = Matrix::Zero(8, 8);
  impulse(3, 5) = 1.0;
  CHECK(compute_psf(sys, 3, 5) == forward_project(impulse, sys));
  CHECK_THROWS_AS(compute_psf(sys, 8, 0), std::out_of_range);
  CHECK_THROWS_AS(compute_psf(sys, 0, -1), std::out_of_range);
}
