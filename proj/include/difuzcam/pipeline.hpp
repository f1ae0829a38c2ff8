#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "difuzcam/autoencoder.hpp"
#include "difuzcam/control.hpp"
#include "difuzcam/diffusion.hpp"
#include "difuzcam/image_io.hpp"
#include "difuzcam/optics.hpp"
#include "difuzcam/sep_transform.hpp"

namespace difuzcam {

namespace fs = std::filesystem;

enum class TextMode { none, sample_with_text, finetune_with_text };
TextMode parse_text_mode(const std::string& name);
std::string to_string(TextMode mode);

/// Training stages in dependency order.
inline const std::vector<std::string> kStages = {"tikhonov", "autoencoder", "base", "control", "control_text"};

struct RunConfig {
  std::uint64_t seed = 20240601;
  SystemSpec system;

  int n_scenes = 2000;
  double test_fraction = 0.1;

  std::vector<double> lambda_grid = {1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1e3, 3e3, 1e4};
  int lambda_search_images = 48;

  bool use_autoencoder = true;
  AutoencoderConfig ae;
  AETrainConfig ae_train;

  int T = 200;
  double beta_start = 5e-4, beta_end = 0.1;
  DenoiserConfig denoiser;
  int base_steps = 2000, base_batch = 32;
  double base_lr = 2e-3;
  double caption_dropout = 0.1;

  int control_steps = 1500, control_batch = 16;
  double control_lr = 1e-3, sep_lr = 1e-3;
  double w_sep = 1.0;
  SepInit sep_init = SepInit::random;
  int finetune_steps = 500;

  int sample_steps = 50;
  int eval_limit = 0;  // 0: whole test split
  int grid_images = 8;
  int checkpoint_every = 250;
  TextMode text_mode = TextMode::finetune_with_text;

  fs::path data_dir = "data", run_dir = "run", reuse_from;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep defaults; unknown keys are rejected. Relative paths resolve against `base_dir`.
  static RunConfig from_json(const nlohmann::json& j, const fs::path& base_dir = {});
  static RunConfig load(const fs::path& path);

  /// Hash over the config sections a stage (and its upstream stages) depend on.
  std::string stage_hash(const std::string& stage) const;
  /// Hash over everything except paths.
  std::string hash() const;
  /// Stages this configuration trains.
  std::vector<std::string> stages() const;
};

// ------------------------------------------------------------------ dataset

struct ManifestRecord {
  std::string scene_id, scene_path, raw_path, caption, split, fingerprint, params;
  std::uint64_t seed = 0;
  bool verified = false;
  double black_level = 0;
  int bit_depth = 0;

  nlohmann::json to_json() const;
  static ManifestRecord from_json(const nlohmann::json& j);
};

/// Checks a caption against the generator parameters it was built from.
bool caption_matches_params(const std::string& caption, const std::string& params_json);

/// Writes scenes, raw captures, system.json and manifest.jsonl under cfg.data_dir.
std::vector<ManifestRecord> make_dataset(const RunConfig& cfg, int threads = 0);
std::vector<ManifestRecord> read_manifest(const fs::path& path);
std::string manifest_hash(const fs::path& data_dir);

struct Split {
  std::vector<ManifestRecord> records;
  nn::Tensor images;  // [N, 3, H, W]
  std::vector<RawCapture> captures;

  std::size_t size() const { return records.size(); }
  RGBImage image(std::size_t i) const;
};

/// Loads one split and rejects records whose fingerprint differs from `system`.
Split load_split(const fs::path& data_dir, const std::string& split, const SeparableSystem& system);
RawCapture capture_from_record(const fs::path& data_dir, const ManifestRecord& rec);

// ------------------------------------------------------------------ training

struct TrainOptions {
  std::vector<std::string> only;  // empty: every configured stage
  long step_budget = -1;          // stop (with a partial checkpoint) after this many optimizer steps
  bool verbose = true;
};

struct TrainResult {
  std::vector<std::string> trained, skipped;
  bool interrupted = false;
};

TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

fs::path stage_checkpoint(const RunConfig& cfg, const std::string& stage);
fs::path stage_loss_csv(const RunConfig& cfg, const std::string& stage);
/// Selected Tikhonov lambda from the tikhonov stage.
double selected_lambda(const RunConfig& cfg);

// ------------------------------------------------------------------ inference

/// Loads trained stages for inference with a control checkpoint ("control" or "control_text").
class Reconstructor {
 public:
  Reconstructor(const RunConfig& cfg, const std::string& control_stage);

  /// Rejects captures from a system whose fingerprint differs from the checkpoint's.
  std::vector<RGBImage> reconstruct(const std::vector<RawCapture>& captures, const std::vector<std::string>& captions,
                                    const std::vector<std::uint64_t>& seeds, const std::string& fingerprint,
                                    int steps = 0, int chunk = 16);

  nlohmann::json provenance() const;
  const SeparableSystem& system() const { return system_; }

 private:
  RunConfig cfg_;
  std::string stage_;
  SeparableSystem system_;
  std::string fingerprint_;
  Autoencoder ae_;
  Denoiser denoiser_;
  TextEmbedder embedder_;
  ControlBranch branch_;
  SepTransform sep_;
  NoiseSchedule schedule_;
};

inline const std::vector<std::string> kEvalModes = {"tikhonov", "no_text", "sample_with_text", "finetune_with_text",
                                                    "wrong_text"};
/// Modes reachable from cfg.text_mode (Tikhonov is always included).
std::vector<std::string> default_eval_modes(const RunConfig& cfg);

struct ModeSummary {
  std::string mode;
  int n = 0;
  double psnr = 0, ssim = 0;
};

struct EvalOptions {
  std::vector<std::string> modes;  // empty: default_eval_modes
  bool generate = true;            // false: reject missing reconstructions
  bool verbose = true;
};

/// Writes <run>/eval/{per_image.csv, summary.csv, summary.txt, <mode>/*.png, grid/*.png}.
std::vector<ModeSummary> evaluate(const RunConfig& cfg, const EvalOptions& opts = {});
std::vector<ModeSummary> read_summary(const fs::path& csv);

/// Writes <run>/report.md from the evaluation summary, loss curves and stage metadata.
std::string report(const RunConfig& cfg);

/// Total training time recorded in the stage checkpoints, seconds.
double recorded_train_seconds(const RunConfig& cfg);

}  // namespace difuzcam
