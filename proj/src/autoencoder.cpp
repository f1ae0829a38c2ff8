#include "difuzcam/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "difuzcam/types.hpp"

namespace difuzcam {

Autoencoder::Autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  std::mt19937_64 rng(seed);
  const int w1 = std::max(1, cfg.width / 2), w2 = cfg.width;
  e0_ = nn::Conv2d("ae.enc0", 3, w1, 3, 1, rng);
  e1_ = nn::Conv2d("ae.enc1", w1, w2, 3, 2, rng);
  e2_ = nn::Conv2d("ae.enc2", w2, w2, 3, 2, rng);
  e3_ = nn::Conv2d("ae.enc3", w2, cfg.latent_channels, 1, 1, rng);
  d0_ = nn::Conv2d("ae.dec0", cfg.latent_channels, w2, 3, 1, rng);
  d1_ = nn::Conv2d("ae.dec1", w2, w2, 3, 1, rng);
  d2_ = nn::Conv2d("ae.dec2", w2, w1, 3, 1, rng);
  d3_ = nn::Conv2d("ae.dec3", w1, 3, 3, 1, rng);
}

Autoencoder Autoencoder::pixel_space(int channels) {
  Autoencoder ae;
  ae.identity_ = true;
  ae.image_channels_ = channels;
  ae.trained = true;
  ae.frozen = true;
  return ae;
}

void Autoencoder::params(nn::ParamList& out) {
  if (identity_) return;
  for (auto* c : {&e0_, &e1_, &e2_, &e3_, &d0_, &d1_, &d2_, &d3_}) c->params(out);
}

nn::ParamList Autoencoder::all_params() {
  nn::ParamList p;
  params(p);
  return p;
}

std::string Autoencoder::weights_hash() { return nn::params_hash(all_params()); }

nn::Tensor Autoencoder::encode_raw(const nn::Tensor& x) {
  nn::Tensor h = ea0_.forward(e0_.forward(x));
  h = ea1_.forward(e1_.forward(h));
  h = ea2_.forward(e2_.forward(h));
  return e3_.forward(h);
}

nn::Tensor Autoencoder::decode_raw(const nn::Tensor& z) {
  nn::Tensor h = da0_.forward(d0_.forward(z));
  h = da1_.forward(d1_.forward(nn::upsample2x(h)));
  h = da2_.forward(d2_.forward(nn::upsample2x(h)));
  return d3_.forward(h);
}

nn::Tensor Autoencoder::encode(const nn::Tensor& x) {
  if (x.c != image_channels_ || x.h % downsample() != 0 || x.w % downsample() != 0)
    throw std::invalid_argument("Autoencoder::encode: unexpected image shape " + x.shape_str());
  if (identity_) return x;
  nn::Tensor z = encode_raw(x);
  z *= latent_scale;
  return z;
}

nn::Tensor Autoencoder::decode(const nn::Tensor& z) {
  if (z.c != latent_channels()) throw std::invalid_argument("Autoencoder::decode: unexpected latent shape " + z.shape_str());
  nn::Tensor x;
  if (identity_) {
    x = z;
  } else {
    nn::Tensor zs = z;
    zs *= 1.0f / latent_scale;
    x = decode_raw(zs);
  }
  for (auto& v : x.data) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

nn::Tensor Autoencoder::reconstruct_train(const nn::Tensor& x) {
  if (identity_) return x;
  return decode_raw(encode_raw(x));
}

void Autoencoder::backward(const nn::Tensor& d_recon) {
  if (identity_) return;
  nn::Tensor g = d3_.backward(d_recon);
  g = nn::upsample2x_backward(d2_.backward(da2_.backward(g)));
  g = nn::upsample2x_backward(d1_.backward(da1_.backward(g)));
  g = d0_.backward(da0_.backward(g));
  g = e3_.backward(g);
  g = e2_.backward(ea2_.backward(g));
  g = e1_.backward(ea1_.backward(g));
  e0_.backward(ea0_.backward(g));
}

nn::Tensor slice_batch(const nn::Tensor& t, int first, int count) {
  if (first < 0 || count < 0 || first + count > t.n) throw std::out_of_range("slice_batch: range outside the batch");
  nn::Tensor out(count, t.c, t.h, t.w);
  std::copy_n(t.sample(first), out.size(), out.data.data());
  return out;
}

nn::Tensor gather_batch(const nn::Tensor& t, const std::vector<int>& indices) {
  nn::Tensor out(static_cast<int>(indices.size()), t.c, t.h, t.w);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || idx >= t.n) throw std::out_of_range("gather_batch: index outside the batch");
    std::copy_n(t.sample(idx), t.sample_size(), out.sample(static_cast<int>(i)));
  }
  return out;
}

double tensor_std(const nn::Tensor& t) {
  if (t.data.empty()) return 0.0;
  double sum = 0.0, sq = 0.0;
  for (float v : t.data) {
    sum += v;
    sq += static_cast<double>(v) * v;
  }
  const double n = static_cast<double>(t.data.size());
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sq / n - mean * mean));
}

AutoencoderTrainer::AutoencoderTrainer(Autoencoder& ae, const nn::Tensor& images, const AETrainConfig& cfg,
                                       std::uint64_t seed)
    : ae_(ae), images_(images), cfg_(cfg), seed_(seed), opt_(cfg.lr) {
  if (images.n == 0) throw std::invalid_argument("train_autoencoder: empty dataset");
  if (cfg.batch <= 0 || cfg.epochs <= 0) throw std::invalid_argument("train_autoencoder: batch and epochs must be positive");
  const int per_epoch = std::max(1, images.n / cfg.batch);
  total_steps_ = per_epoch * cfg.epochs;
  nn::register_params(opt_, ae_.all_params());
}

double AutoencoderTrainer::step() {
  if (ae_.identity()) {
    opt_.set_steps(total_steps_);
    return 0.0;
  }
  const int k = steps_done();
  std::mt19937_64 rng(derive_seed(seed_, 0xAE, static_cast<std::uint64_t>(k)));
  std::uniform_int_distribution<int> pick(0, images_.n - 1);
  std::vector<int> idx(static_cast<std::size_t>(std::min(cfg_.batch, images_.n)));
  for (auto& i : idx) i = pick(rng);
  const nn::Tensor x = gather_batch(images_, idx);

  nn::zero_grads(ae_.all_params());
  const nn::Tensor recon = ae_.reconstruct_train(x);
  const double loss = nn::mse(recon, x);
  ae_.backward(nn::mse_grad(recon, x));

  const double progress = static_cast<double>(k) / std::max(1, total_steps_);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  opt_.set_lr(cfg_.lr * (cfg_.final_lr_fraction + (1.0 - cfg_.final_lr_fraction) * cosine));
  opt_.step();
  return loss;
}

void AutoencoderTrainer::finish() {
  if (!ae_.identity()) {
    ae_.latent_scale = 1.0f;
    // accumulate first and second moments of the raw latents
    double sum = 0.0, sq = 0.0, count = 0.0;
    for (int first = 0; first < images_.n; first += 64) {
      const nn::Tensor z = ae_.encode(slice_batch(images_, first, std::min(64, images_.n - first)));
      for (float v : z.data) {
        sum += v;
        sq += static_cast<double>(v) * v;
      }
      count += static_cast<double>(z.size());
    }
    const double mean = sum / count;
    const double sd = std::sqrt(std::max(1e-12, sq / count - mean * mean));
    ae_.latent_scale = static_cast<float>(1.0 / sd);
  }
  nn::set_trainable(ae_.all_params(), false);
  ae_.trained = true;
  ae_.frozen = true;
}

Autoencoder train_autoencoder(const nn::Tensor& images, const AutoencoderConfig& arch, const AETrainConfig& cfg,
                              std::uint64_t seed, int min_images) {
  if (images.n == 0) throw std::invalid_argument("train_autoencoder: empty dataset");
  if (images.n < min_images)
    throw std::invalid_argument("train_autoencoder: need at least " + std::to_string(min_images) + " images");
  Autoencoder ae(arch, seed);
  AutoencoderTrainer trainer(ae, images, cfg, seed);
  while (!trainer.done()) trainer.step();
  trainer.finish();
  return ae;
}

}  // namespace difuzcam
