#include "difuzcam/scenes.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace difuzcam {

namespace {

const std::vector<std::string> kSizes = {"small", "medium", "large"};
const std::vector<std::string> kRegions = {"upper left", "top", "upper right", "left", "center",
                                           "right", "lower left", "bottom", "lower right"};

bool inside(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy, r = s.radius;
  if (s.shape == "circle") return dx * dx + dy * dy <= r * r;
  if (s.shape == "square") return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
  if (s.shape == "diamond") return std::abs(dx) + std::abs(dy) <= r;
  if (s.shape == "ring") {
    const double d2 = dx * dx + dy * dy;
    return d2 <= r * r && d2 >= 0.36 * r * r;
  }
  if (s.shape == "cross") {
    const double arm = 0.3 * r;
    return (std::abs(dx) <= arm && std::abs(dy) <= r) || (std::abs(dy) <= arm && std::abs(dx) <= r);
  }
  if (s.shape == "triangle") {
    // apex up, base at cy + r/2
    if (dy > 0.5 * r || dy < -r) return false;
    return std::abs(dx) <= (dy + r) / 1.5 * 0.866;
  }
  throw std::invalid_argument("unknown shape: " + s.shape);
}

}  // namespace

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> k = {"circle", "square", "triangle", "ring", "diamond", "cross"};
  return k;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> k = {"red", "green", "blue", "yellow", "cyan",
                                             "magenta", "white", "orange", "purple"};
  return k;
}

std::array<double, 3> palette_rgb(const std::string& color) {
  if (color == "red") return {0.9, 0.1, 0.1};
  if (color == "green") return {0.1, 0.8, 0.2};
  if (color == "blue") return {0.15, 0.25, 0.95};
  if (color == "yellow") return {0.95, 0.9, 0.15};
  if (color == "cyan") return {0.1, 0.85, 0.9};
  if (color == "magenta") return {0.9, 0.15, 0.85};
  if (color == "white") return {0.95, 0.95, 0.95};
  if (color == "orange") return {0.95, 0.55, 0.1};
  if (color == "purple") return {0.55, 0.2, 0.8};
  throw std::invalid_argument("unknown color: " + color);
}

SceneSpec sample_scene_spec(int size, std::mt19937_64& rng) {
  if (size < 16) throw std::invalid_argument("sample_scene_spec: size must be at least 16");
  auto pick = [&](const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SceneSpec spec;
  spec.background = 0.02 + 0.08 * u01(rng);
  const int count = std::uniform_int_distribution<int>(1, 3)(rng);
  const double cell = size / 3.0;
  for (int i = 0; i < count; ++i) {
    ShapeSpec s;
    s.shape = pick(shape_names());
    s.color = pick(color_names());
    const int size_idx = std::uniform_int_distribution<int>(0, 2)(rng);
    s.size = kSizes[static_cast<std::size_t>(size_idx)];
    const double lo[3] = {0.10, 0.16, 0.24}, hi[3] = {0.15, 0.23, 0.32};
    s.radius = size * (lo[size_idx] + (hi[size_idx] - lo[size_idx]) * u01(rng));
    const int region = std::uniform_int_distribution<int>(0, 8)(rng);
    s.position = kRegions[static_cast<std::size_t>(region)];
    s.cx = cell * (region % 3 + 0.25 + 0.5 * u01(rng));
    s.cy = cell * (region / 3 + 0.25 + 0.5 * u01(rng));
    s.rgb = palette_rgb(s.color);
    spec.shapes.push_back(s);
  }
  return spec;
}

RGBImage render_scene(const SceneSpec& spec, int size) {
  RGBImage img = zeros_planes(3, size, size);
  constexpr int ss = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss, py = y + (sy + 0.5) / ss;
          std::array<double, 3> c{spec.background, spec.background, spec.background};
          for (const auto& s : spec.shapes)
            if (inside(s, px, py)) c = s.rgb;
          for (int k = 0; k < 3; ++k) acc[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)];
        }
      }
      for (std::size_t k = 0; k < 3; ++k) img[k](y, x) = acc[k] / (ss * ss);
    }
  }
  return img;
}

std::string caption_for(const SceneSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.shapes.size(); ++i) {
    const auto& s = spec.shapes[i];
    if (i > 0) out += " and ";
    const std::string at = s.position == "left" || s.position == "right" || s.position == "top" ||
                                   s.position == "bottom"
                               ? " on the "
                               : " at the ";
    out += "a " + s.size + " " + s.color + " " + s.shape + at + s.position;
  }
  return out;
}

std::string scene_params_json(const SceneSpec& spec) {
  nlohmann::json j;
  j["background"] = spec.background;
  j["shapes"] = nlohmann::json::array();
  for (const auto& s : spec.shapes)
    j["shapes"].push_back({{"shape", s.shape}, {"color", s.color}, {"size", s.size}, {"position", s.position},
                           {"cx", s.cx}, {"cy", s.cy}, {"radius", s.radius}});
  return j.dump();
}

Scene generate_scene(int size, std::uint64_t seed, const std::string& scene_id) {
  std::mt19937_64 rng(seed);
  const SceneSpec spec = sample_scene_spec(size, rng);
  return {render_scene(spec, size), caption_for(spec), scene_id, scene_params_json(spec)};
}

}  // namespace difuzcam
