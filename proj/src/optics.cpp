#include "difuzcam/optics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "difuzcam/hash.hpp"

namespace difuzcam {

void check_same_shape(const Planes& a, const Planes& b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": channel count mismatch");
  for (std::size_t c = 0; c < a.size(); ++c) {
    if (a[c].rows() != b[c].rows() || a[c].cols() != b[c].cols())
      throw std::invalid_argument(std::string(what) + ": plane shape mismatch");
  }
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the three words
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

std::vector<int> default_taps(int order) {
  switch (order) {
    case 2: return {2, 1};
    case 3: return {3, 2};
    case 4: return {4, 3};
    case 5: return {5, 3};
    case 6: return {6, 5};
    case 7: return {7, 6};
    case 8: return {8, 6, 5, 4};
    case 9: return {9, 5};
    case 10: return {10, 7};
    case 11: return {11, 9};
    case 12: return {12, 6, 4, 1};
    case 13: return {13, 4, 3, 1};
    case 14: return {14, 5, 3, 1};
    case 15: return {15, 14};
    case 16: return {16, 15, 13, 4};
    default: throw std::invalid_argument("default_taps: order must be in [2, 16]");
  }
}

MSequence generate_mseq(int order, const std::vector<int>& taps, std::uint32_t seed_state) {
  if (order < 2 || order > 24) throw std::invalid_argument("generate_mseq: order must be in [2, 24]");
  const std::uint32_t mask = (1u << order) - 1u;
  if ((seed_state & mask) == 0) throw std::invalid_argument("generate_mseq: seed state must be nonzero");
  if (taps.empty()) throw std::invalid_argument("generate_mseq: empty tap set");
  std::uint32_t tap_mask = 0;
  for (int t : taps) {
    if (t < 1 || t > order) throw std::invalid_argument("generate_mseq: tap out of range");
    tap_mask |= 1u << (t - 1);
  }

  const std::size_t period = (std::size_t{1} << order) - 1;
  MSequence seq{order, taps, {}};
  seq.bits.reserve(period);
  const std::uint32_t start = seed_state & mask;
  std::uint32_t state = start;
  for (std::size_t i = 0; i < period; ++i) {
    seq.bits.push_back(static_cast<std::uint8_t>((state >> (order - 1)) & 1u));
    const std::uint32_t fb = static_cast<std::uint32_t>(__builtin_parity(state & tap_mask));
    state = ((state << 1) | fb) & mask;
    if (state == start && i + 1 < period)
      throw std::invalid_argument("generate_mseq: taps are not primitive (period " + std::to_string(i + 1) + ")");
  }
  if (state != start) throw std::invalid_argument("generate_mseq: taps are not primitive");
  return seq;
}

FactorMode parse_factor_mode(const std::string& name) {
  if (name == "circulant") return FactorMode::circulant;
  if (name == "random_gaussian") return FactorMode::random_gaussian;
  throw std::invalid_argument("unknown factor mode: " + name);
}

Matrix build_separable_factors(const MSequence& mseq, int rows, int cols, FactorMode mode, int pitch,
                               std::uint64_t seed) {
  if (rows <= 0 || cols <= 0) throw std::invalid_argument("build_separable_factors: empty shape");
  if (pitch < 1) throw std::invalid_argument("build_separable_factors: pitch must be >= 1");
  Matrix out(rows, cols);
  if (mode == FactorMode::random_gaussian) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out(r, c) = normal(rng);
    return out;
  }
  const auto period = static_cast<long>(mseq.period());
  if (period == 0) throw std::invalid_argument("build_separable_factors: empty m-sequence");
  const long mask_rows = (rows + pitch - 1) / pitch;
  if (mask_rows > period || cols > period)
    throw std::invalid_argument("build_separable_factors: crop exceeds the m-sequence period");
  for (int r = 0; r < rows; ++r) {
    const long shift = r / pitch;
    for (int c = 0; c < cols; ++c) {
      const long idx = ((c - shift) % period + period) % period;
      out(r, c) = mseq.bits[static_cast<std::size_t>(idx)];
    }
  }
  return out;
}

void SeparableSystem::validate() const {
  if (phi_l.size() == 0 || phi_r.size() == 0) throw std::invalid_argument("SeparableSystem: empty factor");
  if (!phi_l.allFinite() || !phi_r.allFinite()) throw std::invalid_argument("SeparableSystem: non-finite factor");
  if (binary_mask) {
    auto binary = [](const Matrix& m) {
      return ((m.array() == 0.0) || (m.array() == 1.0)).all();
    };
    if (!binary(phi_l) || !binary(phi_r)) throw std::invalid_argument("SeparableSystem: binary mask has non-binary entry");
  }
  if (sensor_rows() % 2 != 0 || sensor_cols() % 2 != 0)
    throw std::invalid_argument("SeparableSystem: sensor dimensions must be even");
  if (bit_depth < 1 || bit_depth > 16) throw std::invalid_argument("SeparableSystem: bit depth must be in [1, 16]");
  if (!(gain_dn > 0.0)) throw std::invalid_argument("SeparableSystem: gain must be positive");
  if (read_noise_sigma < 0.0 || shot_noise_gain < 0.0) throw std::invalid_argument("SeparableSystem: negative noise");
}

std::string SeparableSystem::fingerprint() const {
  Sha256 h;
  auto put_matrix = [&](const Matrix& m) {
    const std::int64_t dims[2] = {m.rows(), m.cols()};
    h.update(dims, sizeof(dims));
    h.update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  };
  put_matrix(phi_l);
  put_matrix(phi_r);
  const double params[5] = {gain_dn, read_noise_sigma, shot_noise_gain, black_level, static_cast<double>(bit_depth)};
  h.update(params, sizeof(params));
  return h.hex();
}

SeparableSystem make_system(const SystemSpec& spec) {
  SeparableSystem sys;
  const MSequence seq = generate_mseq(spec.mseq_order, default_taps(spec.mseq_order), 1);
  sys.phi_l = build_separable_factors(seq, spec.sensor, spec.scene, spec.mode, spec.pitch,
                                      derive_seed(spec.factor_seed, 1));
  sys.phi_r = build_separable_factors(seq, spec.sensor, spec.scene, spec.mode, spec.pitch,
                                      derive_seed(spec.factor_seed, 2))
                  .transpose();
  sys.binary_mask = spec.mode == FactorMode::circulant;
  sys.read_noise_sigma = spec.read_noise_sigma;
  sys.shot_noise_gain = spec.shot_noise_gain;
  sys.black_level = spec.black_level;
  sys.bit_depth = spec.bit_depth;
  // a white scene projects to rowsum(phi_l) * colsum(phi_r) at its brightest pixel
  const double peak = (sys.phi_l * Matrix::Ones(sys.scene_rows(), sys.scene_cols()) * sys.phi_r).cwiseAbs().maxCoeff();
  if (!(spec.fill > 0.0) || !(peak > 0.0)) throw std::invalid_argument("make_system: fill and projection peak must be positive");
  sys.gain_dn = spec.fill * (sys.max_dn() - sys.black_level) / peak;
  sys.validate();
  return sys;
}

Matrix forward_project(const Matrix& x, const SeparableSystem& system) {
  if (x.rows() != system.phi_l.cols() || x.cols() != system.phi_r.rows())
    throw std::invalid_argument("forward_project: scene shape does not match the system factors");
  return system.phi_l * x * system.phi_r;
}

Matrix mosaic_bayer(const RGBImage& rgb) {
  if (rgb.size() != 3) throw std::invalid_argument("mosaic_bayer: expected 3 channels");
  const auto m = rgb[0].rows(), n = rgb[0].cols();
  if (m % 2 != 0 || n % 2 != 0) throw std::invalid_argument("mosaic_bayer: dimensions must be even");
  for (const auto& p : rgb)
    if (p.rows() != m || p.cols() != n) throw std::invalid_argument("mosaic_bayer: channel shapes differ");
  Matrix out(m, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const int k = static_cast<int>((i % 2) * 2 + (j % 2));
      out(i, j) = rgb[static_cast<std::size_t>(kBayerColor[static_cast<std::size_t>(k)])](i, j);
    }
  }
  return out;
}

std::array<Matrix, 4> bayer_split(const Matrix& mosaic) {
  const auto m = mosaic.rows(), n = mosaic.cols();
  if (m % 2 != 0 || n % 2 != 0) throw std::invalid_argument("bayer_split: dimensions must be even");
  std::array<Matrix, 4> planes;
  for (int k = 0; k < 4; ++k) {
    const auto [di, dj] = kBayerOffsets[static_cast<std::size_t>(k)];
    planes[static_cast<std::size_t>(k)] = mosaic(Eigen::seq(di, m - 1, 2), Eigen::seq(dj, n - 1, 2));
  }
  return planes;
}

Matrix bayer_merge(const std::array<Matrix, 4>& planes) {
  const auto h = planes[0].rows(), w = planes[0].cols();
  for (const auto& p : planes)
    if (p.rows() != h || p.cols() != w) throw std::invalid_argument("bayer_merge: plane shapes differ");
  Matrix out(2 * h, 2 * w);
  for (int k = 0; k < 4; ++k) {
    const auto [di, dj] = kBayerOffsets[static_cast<std::size_t>(k)];
    out(Eigen::seq(di, 2 * h - 1, 2), Eigen::seq(dj, 2 * w - 1, 2)) = planes[static_cast<std::size_t>(k)];
  }
  return out;
}

Matrix plane_phi_l(const SeparableSystem& system, int k) {
  const int di = kBayerOffsets.at(static_cast<std::size_t>(k))[0];
  return system.phi_l(Eigen::seq(di, system.phi_l.rows() - 1, 2), Eigen::all);
}

Matrix plane_phi_r(const SeparableSystem& system, int k) {
  const int dj = kBayerOffsets.at(static_cast<std::size_t>(k))[1];
  return system.phi_r(Eigen::all, Eigen::seq(dj, system.phi_r.cols() - 1, 2));
}

RawCapture simulate_capture(const Scene& scene, const SeparableSystem& system, std::uint64_t seed) {
  if (scene.rgb.size() != 3) throw std::invalid_argument("simulate_capture: scene must have 3 channels");
  for (const auto& p : scene.rgb) {
    if (!p.allFinite() || p.minCoeff() < 0.0 || p.maxCoeff() > 1.0)
      throw std::invalid_argument("simulate_capture: scene values must lie in [0, 1]");
  }
  RGBImage on_sensor;
  on_sensor.reserve(3);
  for (const auto& p : scene.rgb) on_sensor.push_back(forward_project(p, system) * system.gain_dn);
  const Matrix signal = mosaic_bayer(on_sensor);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double max_dn = system.max_dn();
  RawCapture cap;
  cap.mosaic.resize(signal.rows(), signal.cols());
  for (Eigen::Index j = 0; j < signal.cols(); ++j) {
    for (Eigen::Index i = 0; i < signal.rows(); ++i) {
      const double s = signal(i, j);
      double v = s;
      const double var = system.shot_noise_gain * std::max(s, 0.0) + system.read_noise_sigma * system.read_noise_sigma;
      if (var > 0.0) v += std::sqrt(var) * normal(rng);
      v = std::clamp(v + system.black_level, 0.0, max_dn);
      cap.mosaic(i, j) = static_cast<std::uint16_t>(std::lround(v));
    }
  }
  cap.black_level = system.black_level;
  cap.bit_depth = system.bit_depth;
  cap.seed = seed;
  cap.scene_id = scene.scene_id;
  return cap;
}

Matrix capture_signal(const RawCapture& capture) {
  return capture.mosaic.cast<double>().array() - capture.black_level;
}

}  // namespace difuzcam
