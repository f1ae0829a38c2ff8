#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "difuzcam/metrics.hpp"
#include "difuzcam/optics.hpp"
#include "difuzcam/pipeline.hpp"
#include "difuzcam/scenes.hpp"
#include "difuzcam/tikhonov.hpp"

namespace py = pybind11;
using namespace difuzcam;

namespace {

using Mosaic = Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic>;

// (C, H, W) float64 array <-> channel planes
py::array_t<double> planes_to_array(const Planes& p) {
  if (p.empty()) return py::array_t<double>(std::vector<py::ssize_t>{0, 0, 0});
  const auto h = p[0].rows(), w = p[0].cols();
  py::array_t<double> out({static_cast<py::ssize_t>(p.size()), static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  auto a = out.mutable_unchecked<3>();
  for (std::size_t c = 0; c < p.size(); ++c)
    for (Eigen::Index y = 0; y < h; ++y)
      for (Eigen::Index x = 0; x < w; ++x) a(static_cast<py::ssize_t>(c), y, x) = p[c](y, x);
  return out;
}

Planes array_to_planes(const py::array_t<double, py::array::c_style | py::array::forcecast>& arr) {
  if (arr.ndim() != 3) throw std::invalid_argument("expected a (channels, height, width) array");
  auto a = arr.unchecked<3>();
  Planes p(static_cast<std::size_t>(a.shape(0)), Matrix(a.shape(1), a.shape(2)));
  for (py::ssize_t c = 0; c < a.shape(0); ++c)
    for (py::ssize_t y = 0; y < a.shape(1); ++y)
      for (py::ssize_t x = 0; x < a.shape(2); ++x) p[static_cast<std::size_t>(c)](y, x) = a(c, y, x);
  return p;
}

RunConfig config_from(const std::string& text, const std::string& base_dir) {
  return RunConfig::from_json(nlohmann::json::parse(text), base_dir);
}

SeparableSystem system_from(const std::string& text) {
  nlohmann::json j;
  j["system"] = nlohmann::json::parse(text);
  return make_system(RunConfig::from_json(j).system);
}

RawCapture capture_of(const Mosaic& mosaic, const SeparableSystem& sys) {
  RawCapture c;
  c.mosaic = mosaic;
  c.black_level = sys.black_level;
  c.bit_depth = sys.bit_depth;
  return c;
}

}  // namespace

PYBIND11_MODULE(_difuzcam, m) {
  m.doc() = "Lensless separable-mask camera simulation and reconstruction";

  py::class_<MSequence>(m, "MSequence")
      .def_readonly("order", &MSequence::order)
      .def_readonly("taps", &MSequence::taps)
      .def_property_readonly("bits", [](const MSequence& s) { return std::vector<int>(s.bits.begin(), s.bits.end()); })
      .def_property_readonly("period", &MSequence::period);

  m.def("default_taps", &default_taps, py::arg("order"));
  m.def(
      "generate_mseq",
      [](int order, std::optional<std::vector<int>> taps, std::uint32_t seed_state) {
        return generate_mseq(order, taps ? *taps : default_taps(order), seed_state);
      },
      py::arg("order"), py::arg("taps") = py::none(), py::arg("seed_state") = 1);
  m.def(
      "build_separable_factors",
      [](const MSequence& s, int rows, int cols, const std::string& mode, int pitch, std::uint64_t seed) {
        return build_separable_factors(s, rows, cols, parse_factor_mode(mode), pitch, seed);
      },
      py::arg("mseq"), py::arg("rows"), py::arg("cols"), py::arg("mode") = "circulant", py::arg("pitch") = 1,
      py::arg("seed") = 0);

  py::class_<SeparableSystem>(m, "SeparableSystem")
      .def_readonly("phi_l", &SeparableSystem::phi_l)
      .def_readonly("phi_r", &SeparableSystem::phi_r)
      .def_readonly("gain_dn", &SeparableSystem::gain_dn)
      .def_readonly("read_noise_sigma", &SeparableSystem::read_noise_sigma)
      .def_readonly("black_level", &SeparableSystem::black_level)
      .def_readonly("bit_depth", &SeparableSystem::bit_depth)
      .def_property_readonly("fingerprint", &SeparableSystem::fingerprint)
      .def_property_readonly("scene_shape", [](const SeparableSystem& s) { return py::make_tuple(s.scene_rows(), s.scene_cols()); })
      .def_property_readonly("sensor_shape",
                             [](const SeparableSystem& s) { return py::make_tuple(s.sensor_rows(), s.sensor_cols()); });

  m.def("make_system", &system_from, py::arg("spec_json") = "{}",
        "Builds the camera from a JSON object with the keys of the config 'system' section.");
  m.def("forward_project", &forward_project, py::arg("x"), py::arg("system"));
  m.def(
      "simulate_capture",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& rgb, const SeparableSystem& sys,
         std::uint64_t seed) { return simulate_capture(Scene{array_to_planes(rgb), "", "py", "{}"}, sys, seed).mosaic; },
      py::arg("rgb"), py::arg("system"), py::arg("seed"));

  m.def("tikhonov_reconstruct", &tikhonov_reconstruct, py::arg("y"), py::arg("phi_l"), py::arg("phi_r"),
        py::arg("lam"));
  m.def(
      "tikhonov_rgb",
      [](const Mosaic& mosaic, const SeparableSystem& sys, double lam) {
        return planes_to_array(TikhonovRGB(sys).reconstruct(capture_of(mosaic, sys), {lam, true}));
      },
      py::arg("mosaic"), py::arg("system"), py::arg("lam"));

  m.def(
      "generate_scene",
      [](int size, std::uint64_t seed) {
        const Scene s = generate_scene(size, seed, "py");
        return py::make_tuple(planes_to_array(s.rgb), s.caption);
      },
      py::arg("size"), py::arg("seed"));

  m.def(
      "psnr", [](const py::array_t<double>& a, const py::array_t<double>& b, double peak) {
        return psnr(array_to_planes(a), array_to_planes(b), peak);
      },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);
  m.def(
      "ssim", [](const py::array_t<double>& a, const py::array_t<double>& b, double peak) {
        return ssim(array_to_planes(a), array_to_planes(b), peak);
      },
      py::arg("a"), py::arg("b"), py::arg("peak") = 1.0);

  // pipeline entry points take the config as JSON text
  m.def(
      "config_hash", [](const std::string& cfg, const std::string& base) { return config_from(cfg, base).hash(); },
      py::arg("config_json"), py::arg("base_dir") = "");
  m.def(
      "make_dataset",
      [](const std::string& cfg, const std::string& base, int threads) {
        py::gil_scoped_release release;
        return make_dataset(config_from(cfg, base), threads).size();
      },
      py::arg("config_json"), py::arg("base_dir") = "", py::arg("threads") = 0);
  m.def(
      "train",
      [](const std::string& cfg, const std::string& base, std::vector<std::string> only, long budget, bool verbose) {
        py::gil_scoped_release release;
        const TrainResult r = train(config_from(cfg, base), {std::move(only), budget, verbose});
        py::gil_scoped_acquire acquire;
        py::dict d;
        d["trained"] = r.trained;
        d["skipped"] = r.skipped;
        d["interrupted"] = r.interrupted;
        return d;
      },
      py::arg("config_json"), py::arg("base_dir") = "", py::arg("only") = std::vector<std::string>{},
      py::arg("step_budget") = -1, py::arg("verbose") = false);
  m.def(
      "evaluate",
      [](const std::string& cfg, const std::string& base, std::vector<std::string> modes, bool verbose) {
        std::vector<ModeSummary> s;
        {
          py::gil_scoped_release release;
          s = evaluate(config_from(cfg, base), {std::move(modes), true, verbose});
        }
        py::list out;
        for (const auto& r : s) {
          py::dict d;
          d["mode"] = r.mode;
          d["n"] = r.n;
          d["psnr"] = r.psnr;
          d["ssim"] = r.ssim;
          out.append(d);
        }
        return out;
      },
      py::arg("config_json"), py::arg("base_dir") = "", py::arg("modes") = std::vector<std::string>{},
      py::arg("verbose") = false);
  m.def(
      "report", [](const std::string& cfg, const std::string& base) { return report(config_from(cfg, base)); },
      py::arg("config_json"), py::arg("base_dir") = "");
}
