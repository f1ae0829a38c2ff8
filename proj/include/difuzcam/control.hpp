#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "difuzcam/autoencoder.hpp"
#include "difuzcam/diffusion.hpp"
#include "difuzcam/sep_transform.hpp"

namespace difuzcam {

/// Trainable copy of the denoiser's time MLP and encoder. C^o enters through a
/// strided conditioning encoder added to the stem; every skip feature leaves
/// through a zero-initialized 1x1 projection.
class ControlBranch {
 public:
  ControlBranch() = default;

  /// `cond_size` is the side of C^o; `latent_size` the side of z_t.
  ControlBranch(Denoiser& donor, int cond_size, int latent_size, std::uint64_t seed);

  UNetFeatures forward(const nn::Tensor& z_t, std::span<const int> t, const nn::Tensor& text_vec, const nn::Tensor& c_o);
  /// Accumulates branch gradients and returns dL/dC^o.
  nn::Tensor backward(const UNetFeatures& d_features);

  void params(nn::ParamList& out);
  nn::ParamList all_params();
  /// Encoder-copy params in the same order as Denoiser::encoder_params.
  void copy_params(nn::ParamList& out);
  void projection_params(nn::ParamList& out);
  void cond_encoder_params(nn::ParamList& out);

  std::string donor_hash;

 private:
  std::vector<nn::Conv2d> cond_convs_;
  std::vector<nn::SiLU> cond_acts_;
  nn::Conv2d cond_out_;
  TimeMLP time_mlp_;
  UNetEncoder encoder_;
  nn::Conv2d proj1_, proj2_, proj3_;
};

/// Rejects an untrained donor.
ControlBranch init_control_from_denoiser(Denoiser& denoiser, int cond_size, int latent_size, std::uint64_t seed);

/// eps_theta(z_t, t, y, C_psi(C^o)).
nn::Tensor controlled_predict(const nn::Tensor& z_t, std::span<const int> t, const nn::Tensor& text_vec,
                              const nn::Tensor& c_o, Denoiser& denoiser, ControlBranch& branch);

/// Stacks per-sample C^o planes into [N, 4, h_o, w_o].
nn::Tensor planes_to_tensor(const std::vector<Planes>& batch);
std::vector<Planes> tensor_to_planes(const nn::Tensor& t);

struct ControlBatch {
  std::vector<std::array<Matrix, 4>> planes;  // normalized Bayer planes per sample
  std::vector<Planes> targets;                // ground-truth RGB per sample
  nn::Tensor z0;                              // encoded targets
  std::vector<std::string> captions;
};

struct LossParts {
  double total = 0.0;
  double l_c = 0.0;
  double l_sep = 0.0;
};

/// Models touched by the control objective. Only `branch` and `sep` are trained.
struct ControlModels {
  Denoiser* denoiser = nullptr;
  TextEmbedder* embedder = nullptr;
  ControlBranch* branch = nullptr;
  SepTransform* sep = nullptr;
};

/// l_C + w_sep * l_sep for a fixed noise draw. With `backward`, accumulates
/// branch gradients into the branch params and separable-transform gradients into `sep_grad`.
LossParts total_loss(const ControlBatch& batch, ControlModels models, const NoiseSchedule& schedule, double w_sep,
                     const NoiseDraw& draw, bool backward, SepGrad* sep_grad = nullptr);
LossParts total_loss(const ControlBatch& batch, ControlModels models, const NoiseSchedule& schedule, double w_sep,
                     std::mt19937_64& rng);

/// Controlled sampling + decode for a batch of captures. Empty captions use the null embedding.
nn::Tensor sample_controlled(Denoiser& denoiser, TextEmbedder& embedder, ControlBranch& branch, Autoencoder& ae,
                             const nn::Tensor& c_o, const std::vector<std::string>& captions,
                             const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds);

/// Base-model sampling (no control) + decode.
nn::Tensor sample_base(Denoiser& denoiser, TextEmbedder& embedder, Autoencoder& ae, const std::vector<std::string>& captions,
                       int latent_size, const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds);

}  // namespace difuzcam
