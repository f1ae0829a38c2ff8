#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "difuzcam/optics.hpp"

namespace difuzcam {

struct ShapeSpec {
  std::string shape;     // circle, square, triangle, ring, diamond, cross
  std::string color;     // palette name
  std::string size;      // small, medium, large
  std::string position;  // one of the 3x3 region names
  double cx = 0, cy = 0, radius = 0;  // pixels
  std::array<double, 3> rgb{};
};

struct SceneSpec {
  double background = 0.05;
  std::vector<ShapeSpec> shapes;
};

const std::vector<std::string>& shape_names();
const std::vector<std::string>& color_names();
std::array<double, 3> palette_rgb(const std::string& color);

/// 1 to 3 shapes on a dark gray background.
SceneSpec sample_scene_spec(int size, std::mt19937_64& rng);
/// 4x4 supersampled rendering, painted in order.
RGBImage render_scene(const SceneSpec& spec, int size);
/// e.g. "a large red circle at the upper left and a small blue square at the center".
std::string caption_for(const SceneSpec& spec);
std::string scene_params_json(const SceneSpec& spec);

Scene generate_scene(int size, std::uint64_t seed, const std::string& scene_id);

}  // namespace difuzcam
