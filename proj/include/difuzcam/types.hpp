#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace difuzcam {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Channel-planar image; every plane has the same shape.
using Planes = std::vector<Matrix>;
using RGBImage = Planes;

inline Planes zeros_planes(int channels, int rows, int cols) {
  return Planes(static_cast<std::size_t>(channels), Matrix::Zero(rows, cols));
}

void check_same_shape(const Planes& a, const Planes& b, const char* what);

/// Deterministic per-purpose RNG seed derived from a run seed and labels.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace difuzcam
