// difuzcam: dataset synthesis, training, reconstruction and evaluation for the
// toy separable lensless camera.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "difuzcam/image_io.hpp"
#include "difuzcam/pipeline.hpp"
#include "difuzcam/tikhonov.hpp"

using namespace difuzcam;

namespace {

void write_matrix_png(const fs::path& path, const Matrix& m) {
  const double lo = m.minCoeff(), hi = m.maxCoeff();
  const Matrix scaled = hi > lo ? Matrix((m.array() - lo) / (hi - lo)) : Matrix(Matrix::Zero(m.rows(), m.cols()));
  write_png8(path, Planes{scaled});
}

int cmd_gen_mask(const RunConfig& cfg, const fs::path& out) {
  const SeparableSystem system = make_system(cfg.system);
  const MSequence mseq = generate_mseq(cfg.system.mseq_order, default_taps(cfg.system.mseq_order));
  Matrix mask(static_cast<Eigen::Index>(mseq.period()), static_cast<Eigen::Index>(mseq.period()));
  for (std::size_t i = 0; i < mseq.period(); ++i)
    for (std::size_t j = 0; j < mseq.period(); ++j)
      mask(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = mseq.bits[i] * mseq.bits[j];
  write_matrix_png(out / "mask.png", mask);
  write_matrix_png(out / "phi_l.png", system.phi_l);
  write_matrix_png(out / "phi_r.png", system.phi_r);
  const int c = system.scene_rows() / 2;
  write_matrix_png(out / "psf_center.png", compute_psf(system, c, c));
  nlohmann::json j = cfg.to_json()["system"];
  j["fingerprint"] = system.fingerprint();
  j["gain_dn"] = system.gain_dn;
  j["period"] = mseq.period();
  std::string bits;
  for (auto b : mseq.bits) bits += static_cast<char>('0' + b);
  j["mseq_bits"] = bits;
  atomic_write_text(out / "system.json", j.dump(2) + "\n");
  std::printf("fingerprint %s\n", j["fingerprint"].get<std::string>().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lensless separable-mask camera simulation and diffusion reconstruction"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);

  auto* gen_mask = app.add_subcommand("gen-mask", "Write the mask, factors, PSF and system fingerprint");
  std::string mask_out = "mask";
  gen_mask->add_option("-o,--out", mask_out, "Output directory");

  auto* make_ds = app.add_subcommand("make-dataset", "Generate scenes, simulated captures and the manifest");
  int threads = 0;
  make_ds->add_option("--threads", threads, "Worker threads (0: all cores)");

  auto* train_cmd = app.add_subcommand("train", "Run (or resume) the training stages");
  std::vector<std::string> only;
  long budget = -1;
  train_cmd->add_option("--stage", only, "Only these stages")->check(CLI::IsMember(kStages));
  train_cmd->add_option("--max-steps", budget, "Stop after this many optimizer steps (partial checkpoint kept)");

  auto* recon_cmd = app.add_subcommand("reconstruct", "Reconstruct one raw capture");
  std::string raw_path, out_path, caption, stage = "control", fingerprint;
  double black_level = -1;
  int steps = 0;
  std::uint64_t seed = 0;
  recon_cmd->add_option("--raw", raw_path, "16-bit raw mosaic PNG")->required()->check(CLI::ExistingFile);
  recon_cmd->add_option("-o,--out", out_path, "Output PNG")->required();
  recon_cmd->add_option("--caption", caption, "Scene description (omit for the no-text path)");
  recon_cmd->add_option("--stage", stage, "Control checkpoint")->check(CLI::IsMember({"control", "control_text"}));
  recon_cmd->add_option("--steps", steps, "Sampling steps (default from config)");
  recon_cmd->add_option("--seed", seed, "Sampling seed");
  recon_cmd->add_option("--black-level", black_level, "Black level in DN (default from config)");
  recon_cmd->add_option("--fingerprint", fingerprint, "System fingerprint of the capture (default: dataset system.json)");
  bool tikhonov_only = false;
  recon_cmd->add_flag("--tikhonov", tikhonov_only, "Tikhonov baseline instead of the diffusion model");

  auto* eval_cmd = app.add_subcommand("evaluate", "Reconstruct the test split and write metrics");
  std::vector<std::string> modes;
  bool no_generate = false;
  eval_cmd->add_option("--modes", modes, "Modes to evaluate")->delimiter(',')->check(CLI::IsMember(kEvalModes));
  eval_cmd->add_flag("--no-generate", no_generate, "Fail instead of generating missing reconstructions");

  app.add_subcommand("report", "Write report.md for the run");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = RunConfig::load(config_path);
    if (*gen_mask) return cmd_gen_mask(cfg, mask_out);
    if (*make_ds) {
      const auto records = make_dataset(cfg, threads);
      std::printf("wrote %zu records to %s (manifest sha256 %s)\n", records.size(), cfg.data_dir.c_str(),
                  manifest_hash(cfg.data_dir).c_str());
      return 0;
    }
    if (*train_cmd) {
      TrainOptions opts;
      opts.only = only;
      opts.step_budget = budget;
      const TrainResult r = train(cfg, opts);
      std::printf("trained %zu stage(s), %zu up to date%s\n", r.trained.size(), r.skipped.size(),
                  r.interrupted ? ", interrupted" : "");
      return 0;
    }
    if (*recon_cmd) {
      RawCapture cap;
      cap.mosaic = read_png16(raw_path);
      cap.black_level = black_level >= 0 ? black_level : cfg.system.black_level;
      cap.bit_depth = cfg.system.bit_depth;
      if (fingerprint.empty())
        fingerprint = nlohmann::json::parse(read_text(cfg.data_dir / "system.json")).at("fingerprint").get<std::string>();
      nlohmann::json prov;
      RGBImage img;
      if (tikhonov_only) {
        const SeparableSystem system = make_system(cfg.system);
        if (system.fingerprint() != fingerprint) throw std::runtime_error("capture fingerprint does not match the system");
        const double lambda = selected_lambda(cfg);
        img = tikhonov_rgb(cap, system, {lambda, true});
        prov = {{"method", "tikhonov"}, {"lambda", lambda}, {"fingerprint", fingerprint}};
      } else {
        Reconstructor rec(cfg, stage);
        img = rec.reconstruct({cap}, {caption}, {seed}, fingerprint, steps).front();
        prov = rec.provenance();
        prov["caption"] = caption;
        prov["seed"] = seed;
        if (steps > 0) prov["sample_steps"] = steps;
      }
      prov["raw"] = raw_path;
      write_png8(out_path, img);
      atomic_write_text(fs::path(out_path).replace_extension(".json"), prov.dump(2) + "\n");
      return 0;
    }
    if (*eval_cmd) {
      EvalOptions opts;
      opts.modes = modes;
      opts.generate = !no_generate;
      evaluate(cfg, opts);
      return 0;
    }
    std::cout << report(cfg);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
