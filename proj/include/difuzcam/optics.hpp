#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "difuzcam/types.hpp"

namespace difuzcam {

/// Full-period output of a Fibonacci LFSR.
struct MSequence {
  int order = 0;
  std::vector<int> taps;
  std::vector<std::uint8_t> bits;

  std::size_t period() const { return bits.size(); }
};

/// Primitive-polynomial taps (1-based stage indices) for orders 2..16.
std::vector<int> default_taps(int order);

/// Runs the LFSR for one period starting from `seed_state` (bit i = stage i+1).
/// Throws if the seed is zero or the taps do not give period 2^order - 1.
MSequence generate_mseq(int order, const std::vector<int>& taps, std::uint32_t seed_state = 1);

enum class FactorMode { circulant, random_gaussian };

FactorMode parse_factor_mode(const std::string& name);

/// Builds one separable factor. In circulant mode entry (r, c) is
/// bits[(c - r / pitch) mod period]; pitch > 1 repeats each mask row over
/// `pitch` sensor rows. Random mode draws seeded N(0,1) entries.
Matrix build_separable_factors(const MSequence& mseq, int rows, int cols, FactorMode mode,
                               int pitch = 1, std::uint64_t seed = 0);

enum class BayerOrder { RGGB };

/// Ground-truth camera: Y = gain * phi_l * X * phi_r, then sensor effects.
struct SeparableSystem {
  Matrix phi_l;  // m x h
  Matrix phi_r;  // w x n
  double gain_dn = 1.0;
  double read_noise_sigma = 2.0;
  double shot_noise_gain = 1.0;
  double black_level = 64.0;
  int bit_depth = 12;
  BayerOrder bayer_order = BayerOrder::RGGB;
  bool binary_mask = true;

  int scene_rows() const { return static_cast<int>(phi_l.cols()); }
  int scene_cols() const { return static_cast<int>(phi_r.rows()); }
  int sensor_rows() const { return static_cast<int>(phi_l.rows()); }
  int sensor_cols() const { return static_cast<int>(phi_r.cols()); }
  double max_dn() const { return static_cast<double>((1 << bit_depth) - 1); }

  /// Throws if any invariant (finite, binary when flagged, even sensor dims) fails.
  void validate() const;

  /// SHA-256 over factors and sensor parameters, hex encoded.
  std::string fingerprint() const;
};

struct SystemSpec {
  int scene = 64;
  int sensor = 128;
  int mseq_order = 8;
  int pitch = 1;
  FactorMode mode = FactorMode::circulant;
  std::uint64_t factor_seed = 0;
  double fill = 0.8;  // fraction of (max_dn - black) reached by a white scene
  double read_noise_sigma = 2.0;
  double shot_noise_gain = 1.0;
  double black_level = 64.0;
  int bit_depth = 12;
};

/// Builds both factors from one m-sequence (phi_r is the transposed construction)
/// and sets gain_dn from `fill`.
SeparableSystem make_system(const SystemSpec& spec);

struct Scene {
  RGBImage rgb;
  std::string caption;
  std::string scene_id;
  std::string params_json;
};

struct RawCapture {
  Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic> mosaic;
  double black_level = 0.0;
  int bit_depth = 12;
  std::uint64_t seed = 0;
  std::string scene_id;
};

/// phi_l * x * phi_r, noiseless, in projected-intensity units (no gain).
Matrix forward_project(const Matrix& x, const SeparableSystem& system);

/// RGGB sampling of a full-resolution 3-plane sensor image.
Matrix mosaic_bayer(const RGBImage& rgb_on_sensor);

/// Parity planes in order [R, Gr, Gb, B].
std::array<Matrix, 4> bayer_split(const Matrix& mosaic);
Matrix bayer_merge(const std::array<Matrix, 4>& planes);

/// Row/column parity offsets for plane k in [R, Gr, Gb, B].
inline constexpr std::array<std::array<int, 2>, 4> kBayerOffsets{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}};
/// Scene colour channel observed by plane k.
inline constexpr std::array<int, 4> kBayerColor{0, 1, 1, 2};

/// Rows of phi_l (and columns of phi_r) seen by Bayer plane k.
Matrix plane_phi_l(const SeparableSystem& system, int k);
Matrix plane_phi_r(const SeparableSystem& system, int k);

/// Projection, mosaic, shot + read noise, black level, clip, round.
RawCapture simulate_capture(const Scene& scene, const SeparableSystem& system, std::uint64_t seed);

/// Black-level subtracted mosaic in DN as doubles.
Matrix capture_signal(const RawCapture& capture);

}  // namespace difuzcam
