#include "difuzcam/control.hpp"

#include <bit>
#include <stdexcept>

namespace difuzcam {

namespace {

void rename_prefix(nn::ParamList& params, const std::string& from, const std::string& to) {
  for (auto* p : params) {
    if (p->name.rfind(from, 0) == 0) p->name = to + p->name.substr(from.size());
  }
}

}  // namespace

ControlBranch::ControlBranch(Denoiser& donor, int cond_size, int latent_size, std::uint64_t seed) {
  if (cond_size < latent_size || latent_size <= 0 || cond_size % latent_size != 0 ||
      !std::has_single_bit(static_cast<unsigned>(cond_size / latent_size)))
    throw std::invalid_argument("ControlBranch: condition size must be a power-of-two multiple of the latent size");
  const auto& cfg = donor.config();
  std::mt19937_64 rng(seed);

  const int n_down = std::countr_zero(static_cast<unsigned>(cond_size / latent_size));
  const int n_convs = std::max(2, n_down);
  int cin = 4;
  for (int i = 0; i < n_convs; ++i) {
    const int cout = i == 0 ? 16 : 32;
    cond_convs_.emplace_back("control.cond" + std::to_string(i), cin, cout, 3, i < n_down ? 2 : 1, rng);
    cond_acts_.emplace_back();
    cin = cout;
  }
  cond_out_ = nn::Conv2d("control.cond_out", cin, cfg.base_channels, 3, 1, rng, /*zero_init=*/true);

  time_mlp_ = donor.time_mlp;
  encoder_ = donor.encoder;
  nn::ParamList copied;
  copy_params(copied);
  rename_prefix(copied, "unet.", "control.");
  nn::set_trainable(copied, true);

  const int c1 = cfg.base_channels, c2 = 2 * cfg.base_channels;
  proj1_ = nn::Conv2d("control.proj1", c1, c1, 1, 1, rng, true);
  proj2_ = nn::Conv2d("control.proj2", c2, c2, 1, 1, rng, true);
  proj3_ = nn::Conv2d("control.proj3", c2, c2, 1, 1, rng, true);
  donor_hash = donor.weights_hash();
}

void ControlBranch::cond_encoder_params(nn::ParamList& out) {
  for (auto& c : cond_convs_) c.params(out);
  cond_out_.params(out);
}

void ControlBranch::copy_params(nn::ParamList& out) {
  time_mlp_.params(out);
  encoder_.params(out);
}

void ControlBranch::projection_params(nn::ParamList& out) {
  proj1_.params(out);
  proj2_.params(out);
  proj3_.params(out);
}

void ControlBranch::params(nn::ParamList& out) {
  cond_encoder_params(out);
  copy_params(out);
  projection_params(out);
}

nn::ParamList ControlBranch::all_params() {
  nn::ParamList p;
  params(p);
  return p;
}

UNetFeatures ControlBranch::forward(const nn::Tensor& z_t, std::span<const int> t, const nn::Tensor& text_vec,
                                    const nn::Tensor& c_o) {
  if (c_o.n != z_t.n || c_o.c != 4) throw std::invalid_argument("ControlBranch: C^o must be [N, 4, h, w] matching z_t");
  nn::Tensor h = c_o;
  for (std::size_t i = 0; i < cond_convs_.size(); ++i) h = cond_acts_[i].forward(cond_convs_[i].forward(h));
  const nn::Tensor hint = cond_out_.forward(h);
  if (hint.h != z_t.h || hint.w != z_t.w) throw std::invalid_argument("ControlBranch: C^o size does not map onto the latent grid");
  nn::Tensor emb = time_mlp_.forward(t);
  emb += text_vec;
  const UNetFeatures f = encoder_.forward(z_t, emb, &hint);
  return {proj1_.forward(f.h1), proj2_.forward(f.h2), proj3_.forward(f.h3)};
}

nn::Tensor ControlBranch::backward(const UNetFeatures& d) {
  UNetFeatures df{proj1_.backward(d.h1), proj2_.backward(d.h2), proj3_.backward(d.h3)};
  nn::Tensor d_emb(d.h1.n, 0, 1, 1);
  nn::ParamList tm;
  time_mlp_.params(tm);
  const int emb_dim = static_cast<int>(tm.back()->value.size());
  d_emb = nn::Tensor(d.h1.n, emb_dim, 1, 1);
  nn::Tensor d_hint = encoder_.backward(df, d_emb);
  time_mlp_.backward(d_emb);
  nn::Tensor g = cond_out_.backward(d_hint);
  for (std::size_t i = cond_convs_.size(); i-- > 0;) g = cond_convs_[i].backward(cond_acts_[i].backward(g));
  return g;
}

ControlBranch init_control_from_denoiser(Denoiser& denoiser, int cond_size, int latent_size, std::uint64_t seed) {
  if (!denoiser.trained) throw std::invalid_argument("init_control_from_denoiser: the base denoiser is untrained");
  return ControlBranch(denoiser, cond_size, latent_size, seed);
}

nn::Tensor controlled_predict(const nn::Tensor& z_t, std::span<const int> t, const nn::Tensor& text_vec,
                              const nn::Tensor& c_o, Denoiser& denoiser, ControlBranch& branch) {
  const UNetFeatures ctrl = branch.forward(z_t, t, text_vec, c_o);
  const nn::Tensor emb = denoiser.embedding(t, text_vec);
  return denoiser.forward(z_t, emb, &ctrl);
}

nn::Tensor planes_to_tensor(const std::vector<Planes>& batch) {
  if (batch.empty()) return {};
  const int c = static_cast<int>(batch[0].size());
  const int h = static_cast<int>(batch[0][0].rows()), w = static_cast<int>(batch[0][0].cols());
  nn::Tensor out(static_cast<int>(batch.size()), c, h, w);
  for (int n = 0; n < out.n; ++n) {
    const auto& planes = batch[static_cast<std::size_t>(n)];
    if (static_cast<int>(planes.size()) != c) throw std::invalid_argument("planes_to_tensor: channel count differs");
    for (int ch = 0; ch < c; ++ch) {
      const Matrix& p = planes[static_cast<std::size_t>(ch)];
      if (p.rows() != h || p.cols() != w) throw std::invalid_argument("planes_to_tensor: plane shape differs");
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(n, ch, y, x) = static_cast<float>(p(y, x));
    }
  }
  return out;
}

std::vector<Planes> tensor_to_planes(const nn::Tensor& t) {
  std::vector<Planes> out(static_cast<std::size_t>(t.n));
  for (int n = 0; n < t.n; ++n) {
    auto& planes = out[static_cast<std::size_t>(n)];
    planes.assign(static_cast<std::size_t>(t.c), Matrix(t.h, t.w));
    for (int ch = 0; ch < t.c; ++ch)
      for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x) planes[static_cast<std::size_t>(ch)](y, x) = t.at(n, ch, y, x);
  }
  return out;
}

LossParts total_loss(const ControlBatch& batch, ControlModels m, const NoiseSchedule& schedule, double w_sep,
                     const NoiseDraw& draw, bool backward, SepGrad* sep_grad) {
  const auto n = batch.planes.size();
  if (n == 0) throw std::invalid_argument("total_loss: empty batch");
  if (w_sep < 0.0) throw std::invalid_argument("total_loss: w_sep must be nonnegative");
  if (batch.targets.size() != n || batch.captions.size() != n || static_cast<std::size_t>(batch.z0.n) != n)
    throw std::invalid_argument("total_loss: batch fields disagree in size");
  if (backward && sep_grad == nullptr) throw std::invalid_argument("total_loss: backward needs a SepGrad");

  std::vector<Planes> c_o(n);
  LossParts parts;
  for (std::size_t i = 0; i < n; ++i) {
    c_o[i] = apply_sep_transform(batch.planes[i], *m.sep);
    parts.l_sep += sep_loss(batch.targets[i], c_o[i], *m.sep) / static_cast<double>(n);
  }
  const nn::Tensor c_o_t = planes_to_tensor(c_o);

  const nn::Tensor z_t = q_sample(batch.z0, draw.t, draw.eps, schedule);
  const nn::Tensor text = m.embedder->forward(batch.captions);
  const UNetFeatures ctrl = m.branch->forward(z_t, draw.t, text, c_o_t);
  const nn::Tensor emb = m.denoiser->embedding(draw.t, text);
  const nn::Tensor eps_hat = m.denoiser->forward(z_t, emb, &ctrl);
  parts.l_c = nn::mse(eps_hat, draw.eps);
  parts.total = parts.l_c + w_sep * parts.l_sep;

  if (backward) {
    const auto bd = m.denoiser->backward(nn::mse_grad(eps_hat, draw.eps), /*through_encoder=*/false);
    const nn::Tensor d_co_t = m.branch->backward(bd.d_control);
    std::vector<Planes> d_co = tensor_to_planes(d_co_t);
    for (std::size_t i = 0; i < n; ++i) {
      if (w_sep > 0.0) {
        const Planes d_sep = sep_loss_backward(batch.targets[i], c_o[i], *m.sep, *sep_grad, w_sep / static_cast<double>(n));
        for (std::size_t k = 0; k < 4; ++k) d_co[i][k] += d_sep[k];
      }
      apply_sep_transform_backward(batch.planes[i], *m.sep, d_co[i], *sep_grad);
    }
  }
  return parts;
}

LossParts total_loss(const ControlBatch& batch, ControlModels models, const NoiseSchedule& schedule, double w_sep,
                     std::mt19937_64& rng) {
  if (batch.planes.empty()) throw std::invalid_argument("total_loss: empty batch");
  return total_loss(batch, models, schedule, w_sep, draw_noise(batch.z0, schedule, rng), false);
}

nn::Tensor sample_controlled(Denoiser& denoiser, TextEmbedder& embedder, ControlBranch& branch, Autoencoder& ae,
                             const nn::Tensor& c_o, const std::vector<std::string>& captions,
                             const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds) {
  if (!denoiser.trained) throw std::invalid_argument("sample: the denoiser is untrained");
  if (c_o.n != static_cast<int>(seeds.size()) || captions.size() != seeds.size())
    throw std::invalid_argument("sample: one C^o, caption and seed per output");
  const nn::Tensor text = embedder.forward(captions);
  const int side = c_o.h / ae.downsample();
  NoisePredictor predict = [&](const nn::Tensor& z, std::span<const int> t) {
    return controlled_predict(z, t, text, c_o, denoiser, branch);
  };
  return ae.decode(sample_latent(predict, ae.latent_channels(), side, c_o.w / ae.downsample(), schedule, steps, seeds));
}

nn::Tensor sample_base(Denoiser& denoiser, TextEmbedder& embedder, Autoencoder& ae, const std::vector<std::string>& captions,
                       int latent_size, const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds) {
  if (!denoiser.trained) throw std::invalid_argument("sample: the denoiser is untrained");
  if (captions.size() != seeds.size()) throw std::invalid_argument("sample: one caption per seed");
  const nn::Tensor text = embedder.forward(captions);
  NoisePredictor predict = [&](const nn::Tensor& z, std::span<const int> t) {
    return denoiser.forward(z, denoiser.embedding(t, text));
  };
  return ae.decode(sample_latent(predict, ae.latent_channels(), latent_size, latent_size, schedule, steps, seeds));
}

}  // namespace difuzcam
