#include "difuzcam/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "difuzcam/checkpoint.hpp"
#include "difuzcam/hash.hpp"
#include "difuzcam/metrics.hpp"
#include "difuzcam/scenes.hpp"
#include "difuzcam/tikhonov.hpp"

namespace difuzcam {

using nlohmann::json;

namespace {

// derive_seed labels
enum : std::uint64_t {
  kSeedScene = 1,
  kSeedCapture,
  kSeedSplit,
  kSeedAEInit,
  kSeedAETrain,
  kSeedBaseInit,
  kSeedTextInit,
  kSeedBaseStep,
  kSeedBranchInit,
  kSeedSepInit,
  kSeedControlStep,
  kSeedFinetuneStep,
  kSeedEvalSample,
};

class Reader {
 public:
  Reader(const json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw std::invalid_argument("config: " + section_ + " must be an object");
  }
  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config: bad type for " + section_ + key);
    }
  }
  const json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw std::invalid_argument("config: unknown key " + section_ + k);
  }

 private:
  const json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double cosine_lr(double lr, long k, long total, double final_fraction) {
  const double progress = static_cast<double>(k) / static_cast<double>(std::max<long>(1, total));
  return lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

nn::Tensor planes_to_image_tensor(const std::vector<RGBImage>& imgs) { return planes_to_tensor(imgs); }

RGBImage tensor_image(const nn::Tensor& t, int n) {
  RGBImage img = zeros_planes(t.c, t.h, t.w);
  for (int c = 0; c < t.c; ++c)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) img[static_cast<std::size_t>(c)](y, x) = t.at(n, c, y, x);
  return img;
}

// ------------------------------------------------------------------ loss log

struct LossLog {
  std::vector<std::string> cols;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row) { rows.push_back(std::move(row)); }

  void store(Checkpoint& ck) const {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      std::vector<double> v;
      for (const auto& r : rows) v.push_back(r[c]);
      ck.f64["loss." + cols[c]] = std::move(v);
    }
  }
  void load(const Checkpoint& ck) {
    rows.clear();
    if (cols.empty() || !ck.f64.count("loss." + cols[0])) return;
    const std::size_t n = ck.f64.at("loss." + cols[0]).size();
    rows.assign(n, std::vector<double>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& v = ck.f64.at("loss." + cols[c]);
      for (std::size_t i = 0; i < n; ++i) rows[i][c] = v[i];
    }
  }
  void write_csv(const fs::path& path) const {
    std::string out;
    for (std::size_t c = 0; c < cols.size(); ++c) out += (c ? "," : "") + cols[c];
    out += "\n";
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) out += (c ? "," : "") + (c == 0 ? std::to_string(static_cast<long>(r[c])) : fmt(r[c], 8));
      out += "\n";
    }
    atomic_write_text(path, out);
  }
};

// ------------------------------------------------------------------ stage bookkeeping

fs::path partial_path(const RunConfig& cfg, const std::string& stage) { return cfg.run_dir / (stage + ".partial.ckpt"); }

bool checkpoint_matches(const fs::path& path, const std::string& hash) {
  if (!fs::exists(path)) return false;
  try {
    const json meta = load_checkpoint_meta(path);
    return meta.value("stage_hash", "") == hash && meta.value("complete", false);
  } catch (const std::exception&) {
    return false;
  }
}

bool partial_matches(const fs::path& path, const std::string& hash) {
  if (!fs::exists(path)) return false;
  try {
    return load_checkpoint_meta(path).value("stage_hash", "") == hash;
  } catch (const std::exception&) {
    return false;
  }
}

Checkpoint require_stage(const RunConfig& cfg, const std::string& stage) {
  const fs::path p = stage_checkpoint(cfg, stage);
  if (!checkpoint_matches(p, cfg.stage_hash(stage)))
    throw std::runtime_error("stage '" + stage + "' is missing or was trained with a different config (" + p.string() +
                             "); run `train` for it first");
  return load_checkpoint(p);
}

Checkpoint new_stage_checkpoint(const RunConfig& cfg, const std::string& stage, const std::string& fingerprint) {
  Checkpoint ck;
  ck.meta["stage"] = stage;
  ck.meta["stage_hash"] = cfg.stage_hash(stage);
  ck.meta["config_hash"] = cfg.hash();
  ck.meta["config"] = cfg.to_json();
  ck.meta["seed"] = cfg.seed;
  ck.meta["fingerprint"] = fingerprint;
  ck.meta["complete"] = false;
  return ck;
}

Autoencoder load_autoencoder(const RunConfig& cfg) {
  const Checkpoint ck = require_stage(cfg, "autoencoder");
  if (ck.meta.at("pixel_space").get<bool>()) {
    Autoencoder ae = Autoencoder::pixel_space(3);
    ae.trained = ae.frozen = true;
    return ae;
  }
  Autoencoder ae(cfg.ae, 0);
  load_params(ck, ae.all_params());
  nn::set_trainable(ae.all_params(), false);
  ae.latent_scale = ck.meta.at("latent_scale").get<float>();
  ae.trained = ae.frozen = true;
  return ae;
}

DenoiserConfig denoiser_config(const RunConfig& cfg, const Autoencoder& ae) {
  DenoiserConfig dc = cfg.denoiser;
  dc.latent_channels = ae.latent_channels();
  return dc;
}

void load_base(const RunConfig& cfg, const Autoencoder& ae, Denoiser& den, TextEmbedder& emb) {
  const Checkpoint ck = require_stage(cfg, "base");
  const DenoiserConfig dc = denoiser_config(cfg, ae);
  den = Denoiser(dc, 0);
  emb = TextEmbedder(dc.token_dim, dc.emb_dim, 0);
  load_params(ck, den.all_params());
  nn::ParamList ep;
  emb.params(ep);
  load_params(ck, ep);
  den.trained = true;
  nn::set_trainable(den.all_params(), false);
  nn::set_trainable(ep, false);
}

nn::Tensor encode_all(Autoencoder& ae, const nn::Tensor& images) {
  nn::Tensor out;
  for (int first = 0; first < images.n; first += 64) {
    const nn::Tensor z = ae.encode(slice_batch(images, first, std::min(64, images.n - first)));
    if (first == 0) out = nn::Tensor(images.n, z.c, z.h, z.w);
    std::copy(z.data.begin(), z.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(first * out.sample_size()));
  }
  return out;
}

/// Copies a completed stage (checkpoint + loss curve) from cfg.reuse_from when its hash matches.
bool try_reuse(const RunConfig& cfg, const std::string& stage) {
  if (cfg.reuse_from.empty()) return false;
  RunConfig other = cfg;
  other.run_dir = cfg.reuse_from;
  const fs::path src = stage_checkpoint(other, stage);
  if (!checkpoint_matches(src, cfg.stage_hash(stage))) return false;
  fs::create_directories(cfg.run_dir);
  fs::copy_file(src, stage_checkpoint(cfg, stage), fs::copy_options::overwrite_existing);
  if (fs::exists(stage_loss_csv(other, stage)))
    fs::copy_file(stage_loss_csv(other, stage), stage_loss_csv(cfg, stage), fs::copy_options::overwrite_existing);
  return true;
}

void log_line(bool verbose, const std::string& msg) {
  if (verbose) std::fprintf(stderr, "%s\n", msg.c_str());
}

// Shared optimizer-step loop: resumes at `start`, saves a partial checkpoint every
// cfg.checkpoint_every steps, honours the step budget. Returns false when interrupted.
template <typename StepFn, typename SaveFn>
bool run_steps(const RunConfig& cfg, long start, long total, long& budget, StepFn&& step, SaveFn&& save_partial) {
  for (long k = start; k < total; ++k) {
    if (budget == 0) {
      save_partial(k);
      return false;
    }
    step(k);
    if (budget > 0) --budget;
    if ((k + 1) % cfg.checkpoint_every == 0 && k + 1 < total) save_partial(k + 1);
  }
  return true;
}

struct TrainData {
  Split train;
  nn::Tensor latents;
};

// ------------------------------------------------------------------ stages

void stage_tikhonov(const RunConfig& cfg, const SeparableSystem& system, const std::string& fp, bool verbose) {
  const auto t0 = std::chrono::steady_clock::now();
  const Split train = load_split(cfg.data_dir, "train", system);
  const TikhonovRGB solver(system);
  const std::size_t n = std::min<std::size_t>(train.size(), static_cast<std::size_t>(cfg.lambda_search_images));
  double best = -1.0, best_lambda = cfg.lambda_grid.front();
  LossLog log{{"index", "lambda", "psnr"}, {}};
  for (std::size_t li = 0; li < cfg.lambda_grid.size(); ++li) {
    const double lambda = cfg.lambda_grid[li];
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += psnr(solver.reconstruct(train.captures[i], {lambda, true}), train.image(i));
    const double mean = acc / static_cast<double>(n);
    log.add({static_cast<double>(li), lambda, mean});
    log_line(verbose, "[tikhonov] lambda " + fmt(lambda, 5) + " psnr " + fmt(mean, 3));
    if (mean > best) {
      best = mean;
      best_lambda = lambda;
    }
  }
  Checkpoint ck = new_stage_checkpoint(cfg, "tikhonov", fp);
  ck.meta["lambda"] = best_lambda;
  ck.meta["search_psnr"] = best;
  ck.meta["elapsed_seconds"] = seconds_since(t0);
  ck.meta["complete"] = true;
  log.store(ck);
  log.write_csv(stage_loss_csv(cfg, "tikhonov"));
  save_checkpoint(stage_checkpoint(cfg, "tikhonov"), ck);
}

bool stage_autoencoder(const RunConfig& cfg, const SeparableSystem& system, const std::string& fp, long& budget,
                       bool verbose) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!cfg.use_autoencoder) {
    Checkpoint ck = new_stage_checkpoint(cfg, "autoencoder", fp);
    ck.meta["pixel_space"] = true;
    ck.meta["latent_scale"] = 1.0;
    ck.meta["elapsed_seconds"] = 0.0;
    ck.meta["complete"] = true;
    save_checkpoint(stage_checkpoint(cfg, "autoencoder"), ck);
    return true;
  }
  const Split train = load_split(cfg.data_dir, "train", system);
  Autoencoder ae(cfg.ae, derive_seed(cfg.seed, kSeedAEInit));
  AutoencoderTrainer trainer(ae, train.images, cfg.ae_train, derive_seed(cfg.seed, kSeedAETrain));
  LossLog log{{"step", "loss"}, {}};
  double elapsed0 = 0.0;
  const fs::path partial = partial_path(cfg, "autoencoder");
  if (partial_matches(partial, cfg.stage_hash("autoencoder"))) {
    const Checkpoint ck = load_checkpoint(partial);
    load_params(ck, ae.all_params());
    load_adam(ck, "adam", trainer.optimizer());
    log.load(ck);
    elapsed0 = ck.meta.value("elapsed_seconds", 0.0);
    log_line(verbose, "[autoencoder] resuming at step " + std::to_string(trainer.steps_done()));
  }
  auto snapshot = [&](bool complete) {
    Checkpoint ck = new_stage_checkpoint(cfg, "autoencoder", fp);
    store_params(ck, ae.all_params());
    store_adam(ck, "adam", trainer.optimizer());
    log.store(ck);
    ck.meta["pixel_space"] = false;
    ck.meta["step"] = trainer.steps_done();
    ck.meta["elapsed_seconds"] = elapsed0 + seconds_since(t0);
    ck.meta["complete"] = complete;
    return ck;
  };
  const bool done = run_steps(
      cfg, trainer.steps_done(), trainer.total_steps(), budget,
      [&](long k) {
        const double loss = trainer.step();
        log.add({static_cast<double>(k), loss});
        if (verbose && (k % 100 == 0 || k + 1 == trainer.total_steps()))
          log_line(verbose, "[autoencoder] step " + std::to_string(k) + "/" + std::to_string(trainer.total_steps()) +
                                " loss " + fmt(loss));
      },
      [&](long) { save_checkpoint(partial, snapshot(false)); });
  if (!done) return false;
  trainer.finish();

  // held-out roundtrip quality
  const Split test = load_split(cfg.data_dir, "test", system);
  double acc = 0.0;
  const int n = std::min(test.images.n, 64);
  const nn::Tensor x = slice_batch(test.images, 0, n);
  const nn::Tensor y = ae.decode(ae.encode(x));
  for (int i = 0; i < n; ++i) acc += psnr(tensor_image(y, i), tensor_image(x, i));

  Checkpoint ck = snapshot(true);
  ck.meta["latent_scale"] = ae.latent_scale;
  ck.meta["roundtrip_psnr"] = n > 0 ? acc / n : 0.0;
  log.write_csv(stage_loss_csv(cfg, "autoencoder"));
  save_checkpoint(stage_checkpoint(cfg, "autoencoder"), ck);
  fs::remove(partial);
  log_line(verbose, "[autoencoder] roundtrip psnr " + fmt(ck.meta["roundtrip_psnr"].get<double>(), 2));
  return true;
}

bool stage_base(const RunConfig& cfg, const SeparableSystem& system, const std::string& fp, long& budget, bool verbose) {
  const auto t0 = std::chrono::steady_clock::now();
  Autoencoder ae = load_autoencoder(cfg);
  const Split train = load_split(cfg.data_dir, "train", system);
  const nn::Tensor latents = encode_all(ae, train.images);
  const DenoiserConfig dc = denoiser_config(cfg, ae);
  Denoiser den(dc, derive_seed(cfg.seed, kSeedBaseInit));
  TextEmbedder emb(dc.token_dim, dc.emb_dim, derive_seed(cfg.seed, kSeedTextInit));
  nn::ParamList params = den.all_params();
  emb.params(params);
  nn::AdamW<float> opt(cfg.base_lr);
  nn::register_params(opt, params);
  const NoiseSchedule schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  LossLog log{{"step", "loss"}, {}};
  double elapsed0 = 0.0;
  const fs::path partial = partial_path(cfg, "base");
  if (partial_matches(partial, cfg.stage_hash("base"))) {
    const Checkpoint ck = load_checkpoint(partial);
    load_params(ck, params);
    load_adam(ck, "adam", opt);
    log.load(ck);
    elapsed0 = ck.meta.value("elapsed_seconds", 0.0);
    log_line(verbose, "[base] resuming at step " + std::to_string(opt.steps()));
  }
  auto snapshot = [&](bool complete) {
    Checkpoint ck = new_stage_checkpoint(cfg, "base", fp);
    store_params(ck, params);
    store_adam(ck, "adam", opt);
    log.store(ck);
    ck.meta["step"] = opt.steps();
    ck.meta["latent_channels"] = dc.latent_channels;
    ck.meta["elapsed_seconds"] = elapsed0 + seconds_since(t0);
    ck.meta["complete"] = complete;
    return ck;
  };
  const int batch = std::min(cfg.base_batch, latents.n);
  const bool done = run_steps(
      cfg, opt.steps(), cfg.base_steps, budget,
      [&](long k) {
        std::mt19937_64 rng(derive_seed(cfg.seed, kSeedBaseStep, static_cast<std::uint64_t>(k)));
        std::uniform_int_distribution<int> pick(0, latents.n - 1);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::vector<int> idx(static_cast<std::size_t>(batch));
        LdmBatch b;
        for (auto& i : idx) {
          i = pick(rng);
          b.captions.push_back(u01(rng) < cfg.caption_dropout ? std::string() : train.records[static_cast<std::size_t>(i)].caption);
        }
        b.z0 = gather_batch(latents, idx);
        const NoiseDraw draw = draw_noise(b.z0, schedule, rng);
        nn::zero_grads(params);
        const float loss = ldm_loss(b, den, emb, schedule, draw, true);
        opt.set_lr(cosine_lr(cfg.base_lr, k, cfg.base_steps, 0.1));
        opt.step();
        log.add({static_cast<double>(k), loss});
        if (verbose && (k % 100 == 0 || k + 1 == cfg.base_steps))
          log_line(verbose, "[base] step " + std::to_string(k) + "/" + std::to_string(cfg.base_steps) + " loss " + fmt(loss));
      },
      [&](long) { save_checkpoint(partial, snapshot(false)); });
  if (!done) return false;
  den.trained = true;
  Checkpoint ck = snapshot(true);
  ck.meta["denoiser_hash"] = den.weights_hash();
  log.write_csv(stage_loss_csv(cfg, "base"));
  save_checkpoint(stage_checkpoint(cfg, "base"), ck);
  fs::remove(partial);
  return true;
}

bool stage_control(const RunConfig& cfg, const SeparableSystem& system, const std::string& fp, bool with_text,
                   long& budget, bool verbose) {
  const std::string stage = with_text ? "control_text" : "control";
  const auto t0 = std::chrono::steady_clock::now();
  Autoencoder ae = load_autoencoder(cfg);
  Denoiser den;
  TextEmbedder emb;
  load_base(cfg, ae, den, emb);
  const Split train = load_split(cfg.data_dir, "train", system);
  const nn::Tensor latents = encode_all(ae, train.images);
  const NoiseSchedule schedule = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  const int scene = system.scene_rows();
  ControlBranch branch = init_control_from_denoiser(den, scene, scene / ae.downsample(),
                                                    derive_seed(cfg.seed, kSeedBranchInit));
  SepTransform sep = init_sep_transform(system, cfg.sep_init, derive_seed(cfg.seed, kSeedSepInit));
  if (with_text) {
    const Checkpoint prev = require_stage(cfg, "control");
    load_params(prev, branch.all_params());
    load_sep(prev, sep);
  }
  nn::ParamList bparams = branch.all_params();
  SepGrad sgrad = SepGrad::zeros_like(sep);
  nn::AdamW<float> opt(cfg.control_lr);
  nn::register_params(opt, bparams);
  nn::AdamW<double> sopt(cfg.sep_lr);
  {
    auto vb = sep.blocks();
    auto gb = sgrad.blocks();
    for (std::size_t i = 0; i < vb.size(); ++i) sopt.add(vb[i].second, gb[i]);
  }

  LossLog log{{"step", "total", "l_c", "l_sep"}, {}};
  double elapsed0 = 0.0;
  const fs::path partial = partial_path(cfg, stage);
  if (partial_matches(partial, cfg.stage_hash(stage))) {
    const Checkpoint ck = load_checkpoint(partial);
    load_params(ck, bparams);
    load_sep(ck, sep);
    load_adam(ck, "adam", opt);
    load_adam(ck, "adam_sep", sopt);
    log.load(ck);
    elapsed0 = ck.meta.value("elapsed_seconds", 0.0);
    log_line(verbose, "[" + stage + "] resuming at step " + std::to_string(opt.steps()));
  }
  auto snapshot = [&](bool complete) {
    Checkpoint ck = new_stage_checkpoint(cfg, stage, fp);
    store_params(ck, bparams);
    store_sep(ck, sep);
    store_adam(ck, "adam", opt);
    store_adam(ck, "adam_sep", sopt);
    log.store(ck);
    ck.meta["step"] = opt.steps();
    ck.meta["donor_hash"] = branch.donor_hash;
    ck.meta["w_sep"] = cfg.w_sep;
    ck.meta["with_text"] = with_text;
    ck.meta["elapsed_seconds"] = elapsed0 + seconds_since(t0);
    ck.meta["complete"] = complete;
    return ck;
  };
  const long total = with_text ? cfg.finetune_steps : cfg.control_steps;
  const int batch = std::min(cfg.control_batch, latents.n);
  ControlModels models{&den, &emb, &branch, &sep};
  const bool done = run_steps(
      cfg, opt.steps(), total, budget,
      [&](long k) {
        std::mt19937_64 rng(derive_seed(cfg.seed, with_text ? kSeedFinetuneStep : kSeedControlStep,
                                        static_cast<std::uint64_t>(k)));
        std::uniform_int_distribution<int> pick(0, latents.n - 1);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::vector<int> idx(static_cast<std::size_t>(batch));
        ControlBatch b;
        for (auto& i : idx) {
          i = pick(rng);
          const auto si = static_cast<std::size_t>(i);
          b.planes.push_back(capture_planes(train.captures[si], sep));
          b.targets.push_back(train.image(si));
          const bool keep = with_text && u01(rng) >= cfg.caption_dropout;
          b.captions.push_back(keep ? train.records[si].caption : std::string());
        }
        b.z0 = gather_batch(latents, idx);
        const NoiseDraw draw = draw_noise(b.z0, schedule, rng);
        nn::zero_grads(bparams);
        for (auto s : sgrad.blocks()) std::fill(s.begin(), s.end(), 0.0);
        const LossParts parts = total_loss(b, models, schedule, cfg.w_sep, draw, true, &sgrad);
        opt.set_lr(cosine_lr(cfg.control_lr, k, total, 0.1));
        sopt.set_lr(cosine_lr(cfg.sep_lr, k, total, 0.1));
        opt.step();
        sopt.step();
        log.add({static_cast<double>(k), parts.total, parts.l_c, parts.l_sep});
        if (verbose && (k % 50 == 0 || k + 1 == total))
          log_line(verbose, "[" + stage + "] step " + std::to_string(k) + "/" + std::to_string(total) + " total " +
                                fmt(parts.total) + " l_c " + fmt(parts.l_c) + " l_sep " + fmt(parts.l_sep));
      },
      [&](long) { save_checkpoint(partial, snapshot(false)); });
  if (!done) return false;
  if (!sep.all_finite()) throw std::runtime_error(stage + ": separable transform diverged");
  log.write_csv(stage_loss_csv(cfg, stage));
  save_checkpoint(stage_checkpoint(cfg, stage), snapshot(true));
  fs::remove(partial);
  return true;
}

}  // namespace

// ------------------------------------------------------------------ config

TextMode parse_text_mode(const std::string& name) {
  if (name == "none") return TextMode::none;
  if (name == "sample_with_text") return TextMode::sample_with_text;
  if (name == "finetune_with_text") return TextMode::finetune_with_text;
  throw std::invalid_argument("unknown text_mode: " + name);
}

std::string to_string(TextMode mode) {
  switch (mode) {
    case TextMode::none: return "none";
    case TextMode::sample_with_text: return "sample_with_text";
    case TextMode::finetune_with_text: return "finetune_with_text";
  }
  return "none";
}

void RunConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
  };
  need(system.scene >= 16, "system.scene must be >= 16");
  need(system.sensor >= 2 && system.sensor % 2 == 0, "system.sensor must be even");
  need(system.mseq_order >= 2 && system.mseq_order <= 16, "system.mseq_order must be in [2, 16]");
  need(system.pitch >= 1, "system.pitch must be >= 1");
  need(system.fill > 0 && system.fill <= 1, "system.fill must be in (0, 1]");
  need(system.read_noise_sigma >= 0 && system.shot_noise_gain >= 0, "system noise parameters must be >= 0");
  need(system.bit_depth >= 8 && system.bit_depth <= 16, "system.bit_depth must be in [8, 16]");
  need(system.black_level >= 0 && system.black_level < (1 << system.bit_depth) - 1, "system.black_level out of range");
  need(n_scenes >= 1, "dataset.n_scenes must be >= 1");
  need(test_fraction > 0 && test_fraction < 1, "dataset.test_fraction must be in (0, 1)");
  need(!lambda_grid.empty(), "tikhonov.lambda_grid must not be empty");
  for (double l : lambda_grid) need(l >= 0, "tikhonov.lambda_grid values must be >= 0");
  need(lambda_search_images >= 1, "tikhonov.search_images must be >= 1");
  need(ae.latent_channels >= 1 && ae.width >= 2, "autoencoder sizes must be positive");
  need(ae_train.epochs >= 1 && ae_train.batch >= 1 && ae_train.lr > 0, "autoencoder training budget must be positive");
  need(!use_autoencoder || system.scene % 4 == 0, "system.scene must be divisible by 4 with the autoencoder");
  const int latent = use_autoencoder ? system.scene / 4 : system.scene;
  need(latent % 4 == 0, "latent size must be divisible by 4");
  need(T >= 2, "diffusion.T must be >= 2");
  need(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "diffusion betas must satisfy 0 < start <= end < 1");
  need(denoiser.base_channels >= 1 && denoiser.emb_dim >= 1 && denoiser.time_dim >= 2 && denoiser.time_dim % 2 == 0 &&
           denoiser.token_dim >= 1,
       "diffusion network sizes must be positive (time_dim even)");
  need(base_steps >= 1 && base_batch >= 1 && base_lr > 0, "diffusion training budget must be positive");
  need(caption_dropout >= 0 && caption_dropout <= 1, "diffusion.caption_dropout must be in [0, 1]");
  need(control_steps >= 1 && control_batch >= 1 && control_lr > 0 && sep_lr > 0,
       "control training budget must be positive");
  need(w_sep >= 0, "control.w_sep must be >= 0");
  need(finetune_steps >= 0, "control.finetune_steps must be >= 0");
  need(text_mode != TextMode::finetune_with_text || finetune_steps >= 1,
       "text_mode finetune_with_text needs control.finetune_steps >= 1");
  need(sample_steps >= 1 && sample_steps <= T, "eval.sample_steps must be in [1, T]");
  need(eval_limit >= 0 && grid_images >= 0, "eval limits must be >= 0");
  need(checkpoint_every >= 1, "checkpoint_every must be >= 1");
}

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["system"] = {{"scene", system.scene},
                 {"sensor", system.sensor},
                 {"mseq_order", system.mseq_order},
                 {"pitch", system.pitch},
                 {"mode", system.mode == FactorMode::circulant ? "circulant" : "random_gaussian"},
                 {"factor_seed", system.factor_seed},
                 {"fill", system.fill},
                 {"read_noise_sigma", system.read_noise_sigma},
                 {"shot_noise_gain", system.shot_noise_gain},
                 {"black_level", system.black_level},
                 {"bit_depth", system.bit_depth}};
  j["dataset"] = {{"n_scenes", n_scenes}, {"test_fraction", test_fraction}};
  j["tikhonov"] = {{"lambda_grid", lambda_grid}, {"search_images", lambda_search_images}};
  j["autoencoder"] = {{"enabled", use_autoencoder},      {"latent_channels", ae.latent_channels},
                      {"width", ae.width},               {"epochs", ae_train.epochs},
                      {"batch", ae_train.batch},         {"lr", ae_train.lr},
                      {"final_lr_fraction", ae_train.final_lr_fraction}};
  j["diffusion"] = {{"T", T},
                    {"beta_start", beta_start},
                    {"beta_end", beta_end},
                    {"base_channels", denoiser.base_channels},
                    {"emb_dim", denoiser.emb_dim},
                    {"time_dim", denoiser.time_dim},
                    {"token_dim", denoiser.token_dim},
                    {"steps", base_steps},
                    {"batch", base_batch},
                    {"lr", base_lr},
                    {"caption_dropout", caption_dropout}};
  j["control"] = {{"steps", control_steps},
                  {"batch", control_batch},
                  {"lr", control_lr},
                  {"sep_lr", sep_lr},
                  {"w_sep", w_sep},
                  {"sep_init", sep_init == SepInit::random ? "random" : "tikhonov_init"},
                  {"finetune_steps", finetune_steps}};
  j["eval"] = {{"sample_steps", sample_steps}, {"limit", eval_limit}, {"grid_images", grid_images}};
  j["text_mode"] = to_string(text_mode);
  j["checkpoint_every"] = checkpoint_every;
  j["paths"] = {{"data", data_dir.string()}, {"run", run_dir.string()}, {"reuse_from", reuse_from.string()}};
  return j;
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  Reader top(j, "");
  top.get("seed", c.seed);
  if (const json* s = top.sub("system")) {
    Reader r(*s, "system.");
    std::string mode = "circulant";
    r.get("scene", c.system.scene);
    r.get("sensor", c.system.sensor);
    r.get("mseq_order", c.system.mseq_order);
    r.get("pitch", c.system.pitch);
    r.get("mode", mode);
    r.get("factor_seed", c.system.factor_seed);
    r.get("fill", c.system.fill);
    r.get("read_noise_sigma", c.system.read_noise_sigma);
    r.get("shot_noise_gain", c.system.shot_noise_gain);
    r.get("black_level", c.system.black_level);
    r.get("bit_depth", c.system.bit_depth);
    r.finish();
    c.system.mode = parse_factor_mode(mode);
  }
  if (const json* s = top.sub("dataset")) {
    Reader r(*s, "dataset.");
    r.get("n_scenes", c.n_scenes);
    r.get("test_fraction", c.test_fraction);
    r.finish();
  }
  if (const json* s = top.sub("tikhonov")) {
    Reader r(*s, "tikhonov.");
    r.get("lambda_grid", c.lambda_grid);
    r.get("search_images", c.lambda_search_images);
    r.finish();
  }
  if (const json* s = top.sub("autoencoder")) {
    Reader r(*s, "autoencoder.");
    r.get("enabled", c.use_autoencoder);
    r.get("latent_channels", c.ae.latent_channels);
    r.get("width", c.ae.width);
    r.get("epochs", c.ae_train.epochs);
    r.get("batch", c.ae_train.batch);
    r.get("lr", c.ae_train.lr);
    r.get("final_lr_fraction", c.ae_train.final_lr_fraction);
    r.finish();
  }
  if (const json* s = top.sub("diffusion")) {
    Reader r(*s, "diffusion.");
    r.get("T", c.T);
    r.get("beta_start", c.beta_start);
    r.get("beta_end", c.beta_end);
    r.get("base_channels", c.denoiser.base_channels);
    r.get("emb_dim", c.denoiser.emb_dim);
    r.get("time_dim", c.denoiser.time_dim);
    r.get("token_dim", c.denoiser.token_dim);
    r.get("steps", c.base_steps);
    r.get("batch", c.base_batch);
    r.get("lr", c.base_lr);
    r.get("caption_dropout", c.caption_dropout);
    r.finish();
  }
  if (const json* s = top.sub("control")) {
    Reader r(*s, "control.");
    std::string init = "random";
    r.get("steps", c.control_steps);
    r.get("batch", c.control_batch);
    r.get("lr", c.control_lr);
    r.get("sep_lr", c.sep_lr);
    r.get("w_sep", c.w_sep);
    r.get("sep_init", init);
    r.get("finetune_steps", c.finetune_steps);
    r.finish();
    c.sep_init = parse_sep_init(init);
  }
  if (const json* s = top.sub("eval")) {
    Reader r(*s, "eval.");
    r.get("sample_steps", c.sample_steps);
    r.get("limit", c.eval_limit);
    r.get("grid_images", c.grid_images);
    r.finish();
  }
  std::string mode = to_string(c.text_mode);
  top.get("text_mode", mode);
  c.text_mode = parse_text_mode(mode);
  top.get("checkpoint_every", c.checkpoint_every);
  if (const json* s = top.sub("paths")) {
    Reader r(*s, "paths.");
    std::string data = c.data_dir.string(), run = c.run_dir.string(), reuse;
    r.get("data", data);
    r.get("run", run);
    r.get("reuse_from", reuse);
    r.finish();
    c.data_dir = data;
    c.run_dir = run;
    c.reuse_from = reuse;
  }
  top.finish();
  auto resolve = [&](fs::path& p) {
    if (!p.empty() && p.is_relative() && !base_dir.empty()) p = base_dir / p;
  };
  resolve(c.data_dir);
  resolve(c.run_dir);
  resolve(c.reuse_from);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config: cannot parse " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

std::string RunConfig::stage_hash(const std::string& stage) const {
  const json full = to_json();
  json parts;
  parts["seed"] = full["seed"];
  parts["system"] = full["system"];
  parts["dataset"] = full["dataset"];
  if (stage == "tikhonov") {
    parts["tikhonov"] = full["tikhonov"];
  } else if (stage == "autoencoder" || stage == "base" || stage == "control" || stage == "control_text") {
    parts["autoencoder"] = full["autoencoder"];
    if (stage != "autoencoder") parts["diffusion"] = full["diffusion"];
    if (stage == "control" || stage == "control_text") {
      parts["control"] = full["control"];
      if (stage == "control") parts["control"].erase("finetune_steps");
    }
  } else {
    throw std::invalid_argument("unknown stage: " + stage);
  }
  parts["stage"] = stage;
  return sha256_hex(parts.dump());
}

std::string RunConfig::hash() const {
  json j = to_json();
  j.erase("paths");
  return sha256_hex(j.dump());
}

std::vector<std::string> RunConfig::stages() const {
  std::vector<std::string> s = {"tikhonov", "autoencoder", "base", "control"};
  if (text_mode == TextMode::finetune_with_text) s.push_back("control_text");
  return s;
}

// ------------------------------------------------------------------ dataset

json ManifestRecord::to_json() const {
  return {{"scene_id", scene_id}, {"scene_path", scene_path}, {"raw_path", raw_path},
          {"caption", caption},   {"seed", seed},             {"split", split},
          {"verified", verified}, {"black_level", black_level}, {"bit_depth", bit_depth},
          {"fingerprint", fingerprint}, {"params", json::parse(params)}};
}

ManifestRecord ManifestRecord::from_json(const json& j) {
  ManifestRecord r;
  r.scene_id = j.at("scene_id").get<std::string>();
  r.scene_path = j.at("scene_path").get<std::string>();
  r.raw_path = j.at("raw_path").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.split = j.at("split").get<std::string>();
  r.verified = j.at("verified").get<bool>();
  r.black_level = j.at("black_level").get<double>();
  r.bit_depth = j.at("bit_depth").get<int>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.params = j.at("params").dump();
  return r;
}

bool caption_matches_params(const std::string& caption, const std::string& params_json) {
  const json p = json::parse(params_json);
  SceneSpec spec;
  spec.background = p.at("background").get<double>();
  for (const auto& s : p.at("shapes")) {
    ShapeSpec sh;
    sh.shape = s.at("shape").get<std::string>();
    sh.color = s.at("color").get<std::string>();
    sh.size = s.at("size").get<std::string>();
    sh.position = s.at("position").get<std::string>();
    spec.shapes.push_back(sh);
  }
  return caption == caption_for(spec);
}

std::vector<ManifestRecord> make_dataset(const RunConfig& cfg, int threads) {
  cfg.validate();
  const SeparableSystem system = make_system(cfg.system);
  const std::string fp = system.fingerprint();
  try {
    fs::create_directories(cfg.data_dir / "scenes");
    fs::create_directories(cfg.data_dir / "raw");
  } catch (const fs::filesystem_error& e) {
    throw std::runtime_error("make_dataset: cannot create " + cfg.data_dir.string() + ": " + e.what());
  }
  const int n = cfg.n_scenes;
  const int n_test = static_cast<int>(std::lround(n * cfg.test_fraction));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 split_rng(derive_seed(cfg.seed, kSeedSplit));
  std::shuffle(order.begin(), order.end(), split_rng);
  std::vector<bool> is_test(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n_test; ++i) is_test[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

  std::vector<ManifestRecord> records(static_cast<std::size_t>(n));
  auto work = [&](int first, int stride) {
    for (int i = first; i < n; i += stride) {
      char id[32];
      std::snprintf(id, sizeof(id), "s%05d", i);
      const std::uint64_t scene_seed = derive_seed(cfg.seed, kSeedScene, static_cast<std::uint64_t>(i));
      Scene scene = generate_scene(cfg.system.scene, scene_seed, id);
      // the stored 8-bit scene is the ground truth, so image exactly that
      for (auto& p : scene.rgb) p = (p * 255.0).array().round() / 255.0;
      const std::uint64_t cap_seed = derive_seed(cfg.seed, kSeedCapture, static_cast<std::uint64_t>(i));
      const RawCapture cap = simulate_capture(scene, system, cap_seed);
      ManifestRecord& r = records[static_cast<std::size_t>(i)];
      r.scene_id = id;
      r.scene_path = std::string("scenes/") + id + ".png";
      r.raw_path = std::string("raw/") + id + ".png";
      r.caption = scene.caption;
      r.seed = cap_seed;
      r.split = is_test[static_cast<std::size_t>(i)] ? "test" : "train";
      r.black_level = cap.black_level;
      r.bit_depth = cap.bit_depth;
      r.fingerprint = fp;
      r.params = scene.params_json;
      r.verified = caption_matches_params(r.caption, r.params);
      write_png8(cfg.data_dir / r.scene_path, scene.rgb);
      write_png16(cfg.data_dir / r.raw_path, cap.mosaic);
    }
  };
  const int nt = std::max(1, threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency()));
  if (nt == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(nt));
    for (int t = 0; t < nt; ++t)
      pool.emplace_back([&, t] {
        try {
          work(t, nt);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (const auto& r : records)
    if (r.split == "test" && !r.verified) throw std::logic_error("make_dataset: unverified test caption for " + r.scene_id);

  std::string manifest;
  for (const auto& r : records) manifest += r.to_json().dump() + "\n";
  json sys = cfg.to_json()["system"];
  sys["fingerprint"] = fp;
  sys["gain_dn"] = system.gain_dn;
  atomic_write_text(cfg.data_dir / "system.json", sys.dump(2) + "\n");
  atomic_write_text(cfg.data_dir / "manifest.jsonl", manifest);
  return records;
}

std::vector<ManifestRecord> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
  std::vector<ManifestRecord> out;
  std::set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(ManifestRecord::from_json(json::parse(line)));
    if (!ids.insert(out.back().scene_id).second) throw std::runtime_error("manifest: duplicate scene_id " + out.back().scene_id);
  }
  return out;
}

std::string manifest_hash(const fs::path& data_dir) { return sha256_hex(read_text(data_dir / "manifest.jsonl")); }

RGBImage Split::image(std::size_t i) const { return tensor_image(images, static_cast<int>(i)); }

RawCapture capture_from_record(const fs::path& data_dir, const ManifestRecord& rec) {
  RawCapture cap;
  cap.mosaic = read_png16(data_dir / rec.raw_path);
  cap.black_level = rec.black_level;
  cap.bit_depth = rec.bit_depth;
  cap.seed = rec.seed;
  cap.scene_id = rec.scene_id;
  return cap;
}

Split load_split(const fs::path& data_dir, const std::string& split, const SeparableSystem& system) {
  const auto records = read_manifest(data_dir / "manifest.jsonl");
  const std::string fp = system.fingerprint();
  Split out;
  std::vector<RGBImage> imgs;
  for (const auto& r : records) {
    if (r.split != split) continue;
    if (r.fingerprint != fp)
      throw std::runtime_error("dataset " + data_dir.string() + " was captured with a different system (scene " +
                               r.scene_id + ")");
    if (!fs::exists(data_dir / r.scene_path) || !fs::exists(data_dir / r.raw_path))
      throw std::runtime_error("manifest references a missing file for " + r.scene_id);
    out.records.push_back(r);
    imgs.push_back(read_png8(data_dir / r.scene_path));
    out.captures.push_back(capture_from_record(data_dir, r));
  }
  if (out.records.empty()) throw std::runtime_error("dataset split '" + split + "' is empty");
  out.images = planes_to_image_tensor(imgs);
  return out;
}

// ------------------------------------------------------------------ training

fs::path stage_checkpoint(const RunConfig& cfg, const std::string& stage) { return cfg.run_dir / (stage + ".ckpt"); }
fs::path stage_loss_csv(const RunConfig& cfg, const std::string& stage) { return cfg.run_dir / ("loss_" + stage + ".csv"); }

double selected_lambda(const RunConfig& cfg) {
  return require_stage(cfg, "tikhonov").meta.at("lambda").get<double>();
}

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (!fs::exists(cfg.data_dir / "manifest.jsonl"))
    throw std::runtime_error("train: no manifest in " + cfg.data_dir.string() + "; run make-dataset first");
  const SeparableSystem system = make_system(cfg.system);
  const std::string fp = system.fingerprint();
  fs::create_directories(cfg.run_dir);
  atomic_write_text(cfg.run_dir / "config.json", cfg.to_json().dump(2) + "\n");

  std::vector<std::string> todo = cfg.stages();
  if (!opts.only.empty()) {
    for (const auto& s : opts.only)
      if (std::find(kStages.begin(), kStages.end(), s) == kStages.end()) throw std::invalid_argument("unknown stage: " + s);
    std::vector<std::string> keep;
    for (const auto& s : kStages)
      if (std::find(opts.only.begin(), opts.only.end(), s) != opts.only.end()) keep.push_back(s);
    todo = keep;
  }
  TrainResult res;
  long budget = opts.step_budget;
  for (const auto& stage : todo) {
    if (checkpoint_matches(stage_checkpoint(cfg, stage), cfg.stage_hash(stage)) || try_reuse(cfg, stage)) {
      res.skipped.push_back(stage);
      log_line(opts.verbose, "[" + stage + "] up to date");
      continue;
    }
    bool done = true;
    if (stage == "tikhonov") stage_tikhonov(cfg, system, fp, opts.verbose);
    else if (stage == "autoencoder") done = stage_autoencoder(cfg, system, fp, budget, opts.verbose);
    else if (stage == "base") done = stage_base(cfg, system, fp, budget, opts.verbose);
    else if (stage == "control") done = stage_control(cfg, system, fp, false, budget, opts.verbose);
    else if (stage == "control_text") done = stage_control(cfg, system, fp, true, budget, opts.verbose);
    if (!done) {
      res.interrupted = true;
      log_line(opts.verbose, "[" + stage + "] interrupted; partial checkpoint saved");
      return res;
    }
    res.trained.push_back(stage);
  }
  return res;
}

double recorded_train_seconds(const RunConfig& cfg) {
  double total = 0.0;
  for (const auto& s : kStages) {
    const fs::path p = stage_checkpoint(cfg, s);
    if (fs::exists(p)) total += load_checkpoint_meta(p).value("elapsed_seconds", 0.0);
  }
  return total;
}

// ------------------------------------------------------------------ inference

Reconstructor::Reconstructor(const RunConfig& cfg, const std::string& control_stage) : cfg_(cfg), stage_(control_stage) {
  if (control_stage != "control" && control_stage != "control_text")
    throw std::invalid_argument("Reconstructor: stage must be control or control_text");
  system_ = make_system(cfg.system);
  fingerprint_ = system_.fingerprint();
  ae_ = load_autoencoder(cfg);
  load_base(cfg, ae_, denoiser_, embedder_);
  const Checkpoint ck = require_stage(cfg, control_stage);
  if (ck.meta.at("fingerprint").get<std::string>() != fingerprint_)
    throw std::runtime_error("Reconstructor: checkpoint was trained for a different system");
  const int scene = system_.scene_rows();
  branch_ = ControlBranch(denoiser_, scene, scene / ae_.downsample(), 0);
  load_params(ck, branch_.all_params());
  sep_ = init_sep_transform(system_, SepInit::random, 0);
  load_sep(ck, sep_);
  schedule_ = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
}

std::vector<RGBImage> Reconstructor::reconstruct(const std::vector<RawCapture>& captures,
                                                 const std::vector<std::string>& captions,
                                                 const std::vector<std::uint64_t>& seeds, const std::string& fingerprint,
                                                 int steps, int chunk) {
  if (fingerprint != fingerprint_)
    throw std::runtime_error("reconstruct: capture system fingerprint does not match the checkpoint");
  if (captions.size() != captures.size() || seeds.size() != captures.size())
    throw std::invalid_argument("reconstruct: one caption and seed per capture");
  if (steps <= 0) steps = cfg_.sample_steps;
  std::vector<RGBImage> out;
  for (std::size_t first = 0; first < captures.size(); first += static_cast<std::size_t>(chunk)) {
    const std::size_t last = std::min(captures.size(), first + static_cast<std::size_t>(chunk));
    std::vector<Planes> c_o;
    for (std::size_t i = first; i < last; ++i) {
      if (captures[i].mosaic.rows() != system_.sensor_rows() || captures[i].mosaic.cols() != system_.sensor_cols())
        throw std::invalid_argument("reconstruct: capture size does not match the system");
      c_o.push_back(apply_sep_transform(capture_planes(captures[i], sep_), sep_));
    }
    const std::vector<std::string> caps(captions.begin() + static_cast<std::ptrdiff_t>(first),
                                        captions.begin() + static_cast<std::ptrdiff_t>(last));
    const std::vector<std::uint64_t> sd(seeds.begin() + static_cast<std::ptrdiff_t>(first),
                                        seeds.begin() + static_cast<std::ptrdiff_t>(last));
    const nn::Tensor img = sample_controlled(denoiser_, embedder_, branch_, ae_, planes_to_tensor(c_o), caps, schedule_,
                                             steps, sd);
    for (int n = 0; n < img.n; ++n) out.push_back(tensor_image(img, n));
  }
  return out;
}

json Reconstructor::provenance() const {
  return {{"stage", stage_},
          {"stage_hash", cfg_.stage_hash(stage_)},
          {"config_hash", cfg_.hash()},
          {"fingerprint", fingerprint_},
          {"sample_steps", cfg_.sample_steps}};
}

std::vector<std::string> default_eval_modes(const RunConfig& cfg) {
  std::vector<std::string> m = {"tikhonov", "no_text"};
  if (cfg.text_mode != TextMode::none) m.push_back("sample_with_text");
  if (cfg.text_mode == TextMode::finetune_with_text) {
    m.push_back("finetune_with_text");
    m.push_back("wrong_text");
  }
  return m;
}

namespace {

Planes tile_raw(const RawCapture& cap, int size) {
  const Matrix sig = capture_signal(cap) / (std::pow(2.0, cap.bit_depth) - 1.0 - cap.black_level);
  Matrix tile(size, size);
  const double sy = static_cast<double>(sig.rows()) / size, sx = static_cast<double>(sig.cols()) / size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto y0 = static_cast<Eigen::Index>(y * sy), x0 = static_cast<Eigen::Index>(x * sx);
      const auto h = std::max<Eigen::Index>(1, static_cast<Eigen::Index>((y + 1) * sy) - y0);
      const auto w = std::max<Eigen::Index>(1, static_cast<Eigen::Index>((x + 1) * sx) - x0);
      tile(y, x) = sig.block(y0, x0, h, w).mean();
    }
  const double peak = std::max(1e-12, tile.maxCoeff());
  tile = (tile / peak).cwiseMax(0.0);
  return {tile, tile, tile};
}

Planes hconcat(const std::vector<Planes>& tiles, int gap) {
  const auto h = tiles[0][0].rows();
  Eigen::Index w = 0;
  for (const auto& t : tiles) w += t[0].cols() + gap;
  w -= gap;
  Planes out = zeros_planes(3, static_cast<int>(h), static_cast<int>(w));
  for (auto& p : out) p.setOnes();
  Eigen::Index x = 0;
  for (const auto& t : tiles) {
    for (std::size_t c = 0; c < 3; ++c) out[c].block(0, x, h, t[c].cols()) = t[c];
    x += t[0].cols() + gap;
  }
  return out;
}

}  // namespace

std::vector<ModeSummary> evaluate(const RunConfig& cfg, const EvalOptions& opts) {
  cfg.validate();
  const std::vector<std::string> modes = opts.modes.empty() ? default_eval_modes(cfg) : opts.modes;
  for (const auto& m : modes)
    if (std::find(kEvalModes.begin(), kEvalModes.end(), m) == kEvalModes.end())
      throw std::invalid_argument("unknown eval mode: " + m);
  const SeparableSystem system = make_system(cfg.system);
  const std::string fp = system.fingerprint();
  Split test = load_split(cfg.data_dir, "test", system);
  std::size_t n = test.size();
  if (cfg.eval_limit > 0) n = std::min(n, static_cast<std::size_t>(cfg.eval_limit));
  const fs::path eval_dir = cfg.run_dir / "eval";

  std::vector<std::uint64_t> seeds(n);
  std::vector<std::string> captions(n), wrong(n), empty(n);
  std::vector<RawCapture> caps(test.captures.begin(), test.captures.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    seeds[i] = derive_seed(cfg.seed, kSeedEvalSample, i);
    captions[i] = test.records[i].caption;
    wrong[i] = test.records[(i + 1) % n].caption;
  }

  std::map<std::string, std::unique_ptr<Reconstructor>> recon;
  auto reconstructor = [&](const std::string& stage) -> Reconstructor& {
    auto& r = recon[stage];
    if (!r) r = std::make_unique<Reconstructor>(cfg, stage);
    return *r;
  };

  for (const auto& mode : modes) {
    const fs::path dir = eval_dir / mode;
    bool have_all = true;
    for (std::size_t i = 0; i < n; ++i) have_all = have_all && fs::exists(dir / (test.records[i].scene_id + ".png"));
    if (have_all) continue;
    if (!opts.generate) throw std::runtime_error("evaluate: missing reconstructions for mode " + mode);
    log_line(opts.verbose, "[evaluate] reconstructing " + std::to_string(n) + " test captures, mode " + mode);
    std::vector<RGBImage> out;
    if (mode == "tikhonov") {
      const TikhonovRGB solver(system);
      const TikhonovConfig tc{selected_lambda(cfg), true};
      for (std::size_t i = 0; i < n; ++i) out.push_back(solver.reconstruct(caps[i], tc));
    } else if (mode == "no_text") {
      out = reconstructor("control").reconstruct(caps, empty, seeds, fp);
    } else if (mode == "sample_with_text") {
      out = reconstructor("control").reconstruct(caps, captions, seeds, fp);
    } else if (mode == "finetune_with_text") {
      out = reconstructor("control_text").reconstruct(caps, captions, seeds, fp);
    } else {
      out = reconstructor("control_text").reconstruct(caps, wrong, seeds, fp);
    }
    for (std::size_t i = 0; i < n; ++i) write_png8(dir / (test.records[i].scene_id + ".png"), out[i]);
  }

  std::string per_image = "scene_id,mode,psnr,ssim\n";
  std::vector<ModeSummary> summary;
  std::map<std::string, std::vector<RGBImage>> loaded;
  for (const auto& mode : modes) {
    ModeSummary s{mode, static_cast<int>(n), 0.0, 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      RGBImage img = read_png8(eval_dir / mode / (test.records[i].scene_id + ".png"));
      const RGBImage gt = test.image(i);
      const double p = psnr(img, gt), q = ssim(img, gt);
      s.psnr += p;
      s.ssim += q;
      per_image += test.records[i].scene_id + "," + mode + "," + fmt(p) + "," + fmt(q) + "\n";
      if (i < static_cast<std::size_t>(cfg.grid_images)) loaded[mode].push_back(std::move(img));
    }
    s.psnr /= static_cast<double>(n);
    s.ssim /= static_cast<double>(n);
    summary.push_back(s);
  }
  std::string csv = "mode,n,psnr,ssim\n", txt;
  std::ostringstream table;
  table << std::left << std::setw(20) << "mode" << std::right << std::setw(6) << "n" << std::setw(10) << "PSNR"
        << std::setw(8) << "SSIM" << "\n";
  for (const auto& s : summary) {
    csv += s.mode + "," + std::to_string(s.n) + "," + fmt(s.psnr) + "," + fmt(s.ssim) + "\n";
    table << std::left << std::setw(20) << s.mode << std::right << std::setw(6) << s.n << std::setw(10) << fmt(s.psnr, 2)
          << std::setw(8) << fmt(s.ssim, 3) << "\n";
  }
  atomic_write_text(eval_dir / "per_image.csv", per_image);
  atomic_write_text(eval_dir / "summary.csv", csv);
  atomic_write_text(eval_dir / "summary.txt", table.str());

  // raw | tikhonov | no text | text | ground truth
  const std::string text_mode = loaded.count("finetune_with_text") ? "finetune_with_text" : "sample_with_text";
  const std::vector<std::string> columns = {"tikhonov", "no_text", text_mode};
  const std::size_t n_grid = std::min(n, static_cast<std::size_t>(cfg.grid_images));
  for (std::size_t i = 0; i < n_grid; ++i) {
    std::vector<Planes> tiles = {tile_raw(caps[i], system.scene_rows())};
    for (const auto& m : columns)
      if (loaded.count(m)) tiles.push_back(loaded[m][i]);
    tiles.push_back(test.image(i));
    write_png8(eval_dir / "grid" / (test.records[i].scene_id + ".png"), hconcat(tiles, 2));
  }
  if (opts.verbose) std::fprintf(stderr, "%s", table.str().c_str());
  return summary;
}

std::vector<ModeSummary> read_summary(const fs::path& csv) {
  std::istringstream in(read_text(csv));
  std::string line;
  std::getline(in, line);
  std::vector<ModeSummary> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ModeSummary s;
    std::string tok;
    std::getline(ls, s.mode, ',');
    std::getline(ls, tok, ',');
    s.n = std::stoi(tok);
    std::getline(ls, tok, ',');
    s.psnr = std::stod(tok);
    std::getline(ls, tok, ',');
    s.ssim = std::stod(tok);
    out.push_back(s);
  }
  return out;
}

std::string report(const RunConfig& cfg) {
  std::ostringstream md;
  md << "# Run report\n\n";
  md << "- config hash: `" << cfg.hash() << "`\n";
  md << "- seed: " << cfg.seed << "\n";
  md << "- text mode: " << to_string(cfg.text_mode) << "\n";
  md << "- system: scene " << cfg.system.scene << ", sensor " << cfg.system.sensor << ", m-sequence order "
     << cfg.system.mseq_order << ", read noise " << cfg.system.read_noise_sigma << " DN\n\n";
  md << "## Stages\n\n| stage | steps | seconds | first loss | last loss (mean of final 50) |\n|---|---|---|---|---|\n";
  for (const auto& s : kStages) {
    const fs::path p = stage_checkpoint(cfg, s);
    if (!fs::exists(p)) continue;
    const json meta = load_checkpoint_meta(p);
    std::string first = "-", last = "-";
    const fs::path loss = stage_loss_csv(cfg, s);
    if (s != "tikhonov" && fs::exists(loss)) {
      std::istringstream in(read_text(loss));
      std::string line;
      std::getline(in, line);
      std::vector<double> vals;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        vals.push_back(std::stod(line.substr(c1 + 1, c2 == std::string::npos ? std::string::npos : c2 - c1 - 1)));
      }
      if (!vals.empty()) {
        first = fmt(vals.front(), 4);
        const std::size_t k = std::min<std::size_t>(50, vals.size());
        double acc = 0.0;
        for (std::size_t i = vals.size() - k; i < vals.size(); ++i) acc += vals[i];
        last = fmt(acc / static_cast<double>(k), 4);
      }
    }
    md << "| " << s << " | " << meta.value("step", 0) << " | " << fmt(meta.value("elapsed_seconds", 0.0), 1) << " | "
       << first << " | " << last << " |\n";
  }
  if (fs::exists(stage_checkpoint(cfg, "tikhonov")))
    md << "\nTikhonov lambda (grid search on training captures): " << selected_lambda(cfg) << "\n";
  const fs::path summary = cfg.run_dir / "eval" / "summary.csv";
  if (fs::exists(summary)) {
    md << "\n## Test-set metrics\n\n| mode | n | PSNR (dB) | SSIM |\n|---|---|---|---|\n";
    for (const auto& s : read_summary(summary))
      md << "| " << s.mode << " | " << s.n << " | " << fmt(s.psnr, 2) << " | " << fmt(s.ssim, 3) << " |\n";
  } else {
    md << "\nNo evaluation summary yet; run `evaluate`.\n";
  }
  md << "\nTotal recorded training time: " << fmt(recorded_train_seconds(cfg), 1) << " s\n";
  const std::string text = md.str();
  atomic_write_text(cfg.run_dir / "report.md", text);
  return text;
}

}  // namespace difuzcam
