#pragma once

#include <cstdint>
#include <string>

#include "difuzcam/nn.hpp"

namespace difuzcam {

struct AutoencoderConfig {
  int latent_channels = 4;
  int width = 32;  // channels at 1/2 and 1/4 resolution; full resolution uses width / 2
};

/// Conv autoencoder with 4x spatial downsampling, or the identity (pixel-space mode).
/// Latents are the raw encoder output times `latent_scale`.
class Autoencoder {
 public:
  Autoencoder() = default;
  Autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed);
  static Autoencoder pixel_space(int channels = 3);

  nn::Tensor encode(const nn::Tensor& x);
  /// Decoded image clipped to [0, 1].
  nn::Tensor decode(const nn::Tensor& z);

  /// Unclipped reconstruction of x for training; call backward() right after.
  nn::Tensor reconstruct_train(const nn::Tensor& x);
  void backward(const nn::Tensor& d_recon);

  int latent_channels() const { return identity_ ? image_channels_ : cfg_.latent_channels; }
  int downsample() const { return identity_ ? 1 : 4; }
  bool identity() const { return identity_; }

  void params(nn::ParamList& out);
  nn::ParamList all_params();
  std::string weights_hash();

  float latent_scale = 1.0f;
  bool frozen = false;
  bool trained = false;

 private:
  nn::Tensor encode_raw(const nn::Tensor& x);
  nn::Tensor decode_raw(const nn::Tensor& z);

  AutoencoderConfig cfg_;
  bool identity_ = false;
  int image_channels_ = 3;
  nn::Conv2d e0_, e1_, e2_, e3_;
  nn::SiLU ea0_, ea1_, ea2_;
  nn::Conv2d d0_, d1_, d2_, d3_;
  nn::SiLU da0_, da1_, da2_;
};

struct AETrainConfig {
  int epochs = 12;
  int batch = 16;
  double lr = 2e-3;
  double final_lr_fraction = 0.05;  // cosine decay target
};

/// Step-indexed trainer: step k draws its batch from derive_seed(seed, k), so a
/// run resumed at step k with restored weights and optimizer state is bit-identical.
class AutoencoderTrainer {
 public:
  AutoencoderTrainer(Autoencoder& ae, const nn::Tensor& images, const AETrainConfig& cfg, std::uint64_t seed);

  double step();
  int steps_done() const { return static_cast<int>(opt_.steps()); }
  int total_steps() const { return total_steps_; }
  bool done() const { return steps_done() >= total_steps_; }
  nn::AdamW<float>& optimizer() { return opt_; }
  /// Sets latent_scale from the encoded training set and freezes the model.
  void finish();

 private:
  Autoencoder& ae_;
  const nn::Tensor& images_;
  AETrainConfig cfg_;
  std::uint64_t seed_;
  int total_steps_ = 0;
  nn::AdamW<float> opt_;
};

/// Trains from scratch; requires at least `min_images` images.
Autoencoder train_autoencoder(const nn::Tensor& images, const AutoencoderConfig& arch, const AETrainConfig& cfg,
                              std::uint64_t seed, int min_images = 256);

/// Copies samples [first, first + count) of a batch tensor.
nn::Tensor slice_batch(const nn::Tensor& t, int first, int count);
nn::Tensor gather_batch(const nn::Tensor& t, const std::vector<int>& indices);

/// Standard deviation over all elements of a latent batch.
double tensor_std(const nn::Tensor& t);

}  // namespace difuzcam
