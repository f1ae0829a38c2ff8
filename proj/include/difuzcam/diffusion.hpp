#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "difuzcam/nn.hpp"

namespace difuzcam {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;
};

/// Linear betas; alpha_bars[t] = prod_{s <= t} (1 - betas[s]).
NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

/// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps with one timestep per batch element.
nn::Tensor q_sample(const nn::Tensor& z0, std::span<const int> t, const nn::Tensor& eps, const NoiseSchedule& schedule);
nn::Tensor q_sample(const nn::Tensor& z0, int t, const nn::Tensor& eps, const NoiseSchedule& schedule);

nn::Tensor gaussian_like(const nn::Tensor& shape, std::mt19937_64& rng);

// ------------------------------------------------------------------ text

/// Closed caption vocabulary; id 0 is UNK.
class Vocabulary {
 public:
  static const std::vector<std::string>& words();
  static int size() { return static_cast<int>(words().size()); }
  static int id(const std::string& word);
  /// Lowercase, split on whitespace and punctuation, map OOV words to UNK.
  static std::vector<int> tokenize(const std::string& caption);
};

/// Mean-pooled token embeddings through a 2-layer MLP; empty captions map to
/// a learned null vector.
class TextEmbedder {
 public:
  TextEmbedder() = default;
  TextEmbedder(int token_dim, int emb_dim, std::uint64_t seed);

  nn::Tensor forward(const std::vector<std::string>& captions);
  void backward(const nn::Tensor& d_emb);
  nn::Tensor embed(const std::string& caption);

  void params(nn::ParamList& out);
  int emb_dim() const { return emb_dim_; }
  int token_dim() const { return token_dim_; }
  const nn::Param& null_embedding() const { return null_; }

 private:
  int token_dim_ = 0, emb_dim_ = 0;
  nn::Param table_, null_;
  nn::Linear l1_, l2_;
  nn::SiLU act_;
  std::vector<std::vector<int>> tokens_;
};

// ------------------------------------------------------------------ UNet

struct DenoiserConfig {
  int latent_channels = 4;
  int base_channels = 32;
  int emb_dim = 64;
  int time_dim = 32;
  int token_dim = 32;
};

class TimeMLP {
 public:
  TimeMLP() = default;
  TimeMLP(const std::string& name, int time_dim, int emb_dim, std::mt19937_64& rng);
  nn::Tensor forward(std::span<const int> t);
  void backward(const nn::Tensor& d_emb);
  void params(nn::ParamList& out);

 private:
  int time_dim_ = 0;
  nn::Linear l1_, l2_;
  nn::SiLU act_;
};

/// Skip features at the three resolutions (full, 1/2, 1/4 of the latent).
struct UNetFeatures {
  nn::Tensor h1, h2, h3;
};

class UNetEncoder {
 public:
  UNetEncoder() = default;
  UNetEncoder(const std::string& name, const DenoiserConfig& cfg, std::mt19937_64& rng);

  /// `hint` (if given) is added to the stem output.
  UNetFeatures forward(const nn::Tensor& x, const nn::Tensor& emb, const nn::Tensor* hint = nullptr);
  /// Returns dL/d(stem output), which is also dL/dhint; dL/dx goes to `dx` when non-null.
  nn::Tensor backward(const UNetFeatures& d, nn::Tensor& d_emb, nn::Tensor* dx = nullptr);
  void params(nn::ParamList& out);

 private:
  nn::Conv2d in_conv_, down1_, down2_;
  nn::ResBlock res1_, res2_, mid_;
};

class UNetDecoder {
 public:
  UNetDecoder() = default;
  UNetDecoder(const std::string& name, const DenoiserConfig& cfg, std::mt19937_64& rng);

  nn::Tensor forward(const UNetFeatures& f, const nn::Tensor& emb);
  UNetFeatures backward(const nn::Tensor& d_out, nn::Tensor& d_emb);
  void params(nn::ParamList& out);

 private:
  nn::Conv2d up2_, up1_, out_conv_;
  nn::ResBlock dres2_, dres1_;
  nn::SiLU out_act_;
};

/// Noise predictor eps_theta(z_t, t, y[, control]).
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  /// time MLP(t) + text conditioning vector.
  nn::Tensor embedding(std::span<const int> t, const nn::Tensor& text_vec);

  /// `control` features are added to the decoder skip inputs.
  nn::Tensor forward(const nn::Tensor& z_t, const nn::Tensor& emb, const UNetFeatures* control = nullptr);

  struct Backward {
    nn::Tensor d_emb;        // gradient w.r.t. the text vector (time MLP grads accumulated)
    UNetFeatures d_control;  // gradient at the additive control injection points
  };
  /// With `through_encoder` false, stops at the decoder (control training).
  Backward backward(const nn::Tensor& d_eps, bool through_encoder = true);

  void params(nn::ParamList& out);
  /// The half copied into a control branch: time MLP plus encoder.
  void encoder_params(nn::ParamList& out);
  nn::ParamList all_params();
  std::string weights_hash();

  const DenoiserConfig& config() const { return cfg_; }
  bool trained = false;

  TimeMLP time_mlp;
  UNetEncoder encoder;
  UNetDecoder decoder;

 private:
  DenoiserConfig cfg_;
  UNetFeatures enc_out_;
};

struct LdmBatch {
  nn::Tensor z0;
  std::vector<std::string> captions;
};

/// Draws t ~ U{0..T-1} and eps ~ N(0, I) from `rng` for each element.
struct NoiseDraw {
  std::vector<int> t;
  nn::Tensor eps;
};
NoiseDraw draw_noise(const nn::Tensor& z0, const NoiseSchedule& schedule, std::mt19937_64& rng);

/// Per-element mean of |eps - eps_theta(z_t, t, y)|^2.
float ldm_loss(const LdmBatch& batch, Denoiser& model, TextEmbedder& embedder, const NoiseSchedule& schedule,
               std::mt19937_64& rng);
/// Same as ldm_loss for a fixed draw, optionally followed by backward into all trainable params.
float ldm_loss(const LdmBatch& batch, Denoiser& model, TextEmbedder& embedder, const NoiseSchedule& schedule,
               const NoiseDraw& draw, bool backward);

/// Timesteps visited by a strided sampler, ascending.
std::vector<int> sampling_timesteps(int T, int steps);

using NoisePredictor = std::function<nn::Tensor(const nn::Tensor& z_t, std::span<const int> t)>;

/// Ancestral DDPM sampling over a strided subset of timesteps starting from
/// unit Gaussian noise; sample n uses its own RNG seeded by seeds[n].
nn::Tensor sample_latent(const NoisePredictor& predict, int channels, int height, int width,
                         const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds);

}  // namespace difuzcam
