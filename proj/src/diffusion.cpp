#include "difuzcam/diffusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace difuzcam {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("build_schedule: T must be >= 2");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw std::invalid_argument("build_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(static_cast<std::size_t>(T));
  s.alpha_bars.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (T - 1);
    s.betas[static_cast<std::size_t>(t)] = beta;
    prod *= 1.0 - beta;
    s.alpha_bars[static_cast<std::size_t>(t)] = prod;
  }
  return s;
}

nn::Tensor q_sample(const nn::Tensor& z0, std::span<const int> t, const nn::Tensor& eps, const NoiseSchedule& schedule) {
  if (!z0.same_shape(eps)) throw std::invalid_argument("q_sample: eps shape differs from z0");
  if (t.size() != static_cast<std::size_t>(z0.n)) throw std::invalid_argument("q_sample: one timestep per sample required");
  nn::Tensor out = z0;
  for (int n = 0; n < z0.n; ++n) {
    const int ti = t[static_cast<std::size_t>(n)];
    if (ti < 0 || ti >= schedule.T) throw std::out_of_range("q_sample: timestep out of range");
    const double ab = schedule.alpha_bars[static_cast<std::size_t>(ti)];
    const auto a = static_cast<float>(std::sqrt(ab));
    const auto b = static_cast<float>(std::sqrt(1.0 - ab));
    float* o = out.sample(n);
    const float* e = eps.sample(n);
    for (std::size_t i = 0; i < z0.sample_size(); ++i) o[i] = a * o[i] + b * e[i];
  }
  return out;
}

nn::Tensor q_sample(const nn::Tensor& z0, int t, const nn::Tensor& eps, const NoiseSchedule& schedule) {
  std::vector<int> ts(static_cast<std::size_t>(z0.n), t);
  return q_sample(z0, ts, eps, schedule);
}

nn::Tensor gaussian_like(const nn::Tensor& shape, std::mt19937_64& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  nn::Tensor out(shape.n, shape.c, shape.h, shape.w);
  for (auto& v : out.data) v = normal(rng);
  return out;
}

// ------------------------------------------------------------------ text

const std::vector<std::string>& Vocabulary::words() {
  static const std::vector<std::string> kWords = {
      "<unk>",
      // function words
      "a", "an", "and", "the", "at", "on", "in", "with", "of", "is", "are", "near", "dark", "background", "black",
      // colours
      "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange", "purple", "pink", "gray",
      // shapes
      "circle", "square", "triangle", "disk", "box", "ring", "star", "diamond", "cross", "bar",
      // sizes
      "small", "large", "medium", "tiny", "big", "huge",
      // positions
      "top", "bottom", "left", "right", "center", "middle", "upper", "lower", "corner",
      // counts and misc
      "one", "two", "three", "shape", "shapes", "object", "objects", "scene", "picture", "bright"};
  return kWords;
}

int Vocabulary::id(const std::string& word) {
  static const std::unordered_map<std::string, int> kIndex = [] {
    std::unordered_map<std::string, int> m;
    const auto& w = words();
    for (std::size_t i = 0; i < w.size(); ++i) m.emplace(w[i], static_cast<int>(i));
    return m;
  }();
  const auto it = kIndex.find(word);
  return it == kIndex.end() ? 0 : it->second;
}

std::vector<int> Vocabulary::tokenize(const std::string& caption) {
  std::vector<int> ids;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) ids.push_back(id(cur));
    cur.clear();
  };
  for (char ch : caption) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isalnum(uc)) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

TextEmbedder::TextEmbedder(int token_dim, int emb_dim, std::uint64_t seed) : token_dim_(token_dim), emb_dim_(emb_dim) {
  std::mt19937_64 rng(seed);
  const auto vocab = static_cast<std::size_t>(Vocabulary::size());
  table_ = {"text.table", std::vector<float>(vocab * static_cast<std::size_t>(token_dim)),
            std::vector<float>(vocab * static_cast<std::size_t>(token_dim), 0.0f), true};
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (auto& v : table_.value) v = normal(rng);
  null_ = {"text.null", std::vector<float>(static_cast<std::size_t>(emb_dim), 0.0f),
           std::vector<float>(static_cast<std::size_t>(emb_dim), 0.0f), true};
  l1_ = nn::Linear("text.l1", token_dim, emb_dim, rng);
  l2_ = nn::Linear("text.l2", emb_dim, emb_dim, rng);
}

void TextEmbedder::params(nn::ParamList& out) {
  out.push_back(&table_);
  out.push_back(&null_);
  l1_.params(out);
  l2_.params(out);
}

nn::Tensor TextEmbedder::forward(const std::vector<std::string>& captions) {
  const int n = static_cast<int>(captions.size());
  tokens_.clear();
  nn::Tensor pooled(n, token_dim_, 1, 1);
  for (int i = 0; i < n; ++i) {
    tokens_.push_back(Vocabulary::tokenize(captions[static_cast<std::size_t>(i)]));
    const auto& toks = tokens_.back();
    if (toks.empty()) continue;
    const float inv = 1.0f / static_cast<float>(toks.size());
    for (int tok : toks) {
      const float* row = table_.value.data() + static_cast<std::size_t>(tok) * static_cast<std::size_t>(token_dim_);
      for (int d = 0; d < token_dim_; ++d) pooled.at(i, d, 0, 0) += inv * row[d];
    }
  }
  nn::Tensor out = l2_.forward(act_.forward(l1_.forward(pooled)));
  for (int i = 0; i < n; ++i) {
    if (!tokens_[static_cast<std::size_t>(i)].empty()) continue;
    std::copy(null_.value.begin(), null_.value.end(), out.sample(i));
  }
  return out;
}

void TextEmbedder::backward(const nn::Tensor& d_emb) {
  nn::require_shape(d_emb, static_cast<int>(tokens_.size()), emb_dim_, 1, 1, "TextEmbedder::backward");
  nn::Tensor d = d_emb;
  for (int i = 0; i < d.n; ++i) {
    if (!tokens_[static_cast<std::size_t>(i)].empty()) continue;
    float* row = d.sample(i);
    if (null_.trainable)
      for (int k = 0; k < emb_dim_; ++k) null_.grad[static_cast<std::size_t>(k)] += row[k];
    std::fill(row, row + emb_dim_, 0.0f);
  }
  const nn::Tensor d_pooled = l1_.backward(act_.backward(l2_.backward(d)));
  if (!table_.trainable) return;
  for (int i = 0; i < d.n; ++i) {
    const auto& toks = tokens_[static_cast<std::size_t>(i)];
    if (toks.empty()) continue;
    const float inv = 1.0f / static_cast<float>(toks.size());
    for (int tok : toks) {
      float* g = table_.grad.data() + static_cast<std::size_t>(tok) * static_cast<std::size_t>(token_dim_);
      for (int k = 0; k < token_dim_; ++k) g[k] += inv * d_pooled.at(i, k, 0, 0);
    }
  }
}

nn::Tensor TextEmbedder::embed(const std::string& caption) { return forward({caption}); }

// ------------------------------------------------------------------ UNet

TimeMLP::TimeMLP(const std::string& name, int time_dim, int emb_dim, std::mt19937_64& rng)
    : time_dim_(time_dim), l1_(name + ".l1", time_dim, emb_dim, rng), l2_(name + ".l2", emb_dim, emb_dim, rng) {}

nn::Tensor TimeMLP::forward(std::span<const int> t) {
  return l2_.forward(act_.forward(l1_.forward(nn::timestep_features(t, time_dim_))));
}

void TimeMLP::backward(const nn::Tensor& d_emb) { l1_.backward(act_.backward(l2_.backward(d_emb))); }

void TimeMLP::params(nn::ParamList& out) {
  l1_.params(out);
  l2_.params(out);
}

UNetEncoder::UNetEncoder(const std::string& name, const DenoiserConfig& cfg, std::mt19937_64& rng) {
  const int c1 = cfg.base_channels, c2 = 2 * cfg.base_channels;
  in_conv_ = nn::Conv2d(name + ".in_conv", cfg.latent_channels, c1, 3, 1, rng);
  res1_ = nn::ResBlock(name + ".res1", c1, cfg.emb_dim, rng);
  down1_ = nn::Conv2d(name + ".down1", c1, c2, 3, 2, rng);
  res2_ = nn::ResBlock(name + ".res2", c2, cfg.emb_dim, rng);
  down2_ = nn::Conv2d(name + ".down2", c2, c2, 3, 2, rng);
  mid_ = nn::ResBlock(name + ".mid", c2, cfg.emb_dim, rng);
}

UNetFeatures UNetEncoder::forward(const nn::Tensor& x, const nn::Tensor& emb, const nn::Tensor* hint) {
  if (x.h % 4 != 0 || x.w % 4 != 0) throw std::invalid_argument("UNetEncoder: spatial size must be divisible by 4");
  nn::Tensor a0 = in_conv_.forward(x);
  if (hint != nullptr) a0 += *hint;
  UNetFeatures f;
  f.h1 = res1_.forward(a0, emb);
  f.h2 = res2_.forward(down1_.forward(f.h1), emb);
  f.h3 = mid_.forward(down2_.forward(f.h2), emb);
  return f;
}

nn::Tensor UNetEncoder::backward(const UNetFeatures& d, nn::Tensor& d_emb, nn::Tensor* dx) {
  nn::Tensor dh2 = d.h2 + down2_.backward(mid_.backward(d.h3, d_emb));
  nn::Tensor dh1 = d.h1 + down1_.backward(res2_.backward(dh2, d_emb));
  nn::Tensor da0 = res1_.backward(dh1, d_emb);
  if (dx != nullptr) {
    *dx = in_conv_.backward(da0);
  } else if (in_conv_.weight.trainable) {
    in_conv_.backward(da0);
  }
  return da0;
}

void UNetEncoder::params(nn::ParamList& out) {
  in_conv_.params(out);
  res1_.params(out);
  down1_.params(out);
  res2_.params(out);
  down2_.params(out);
  mid_.params(out);
}

UNetDecoder::UNetDecoder(const std::string& name, const DenoiserConfig& cfg, std::mt19937_64& rng) {
  const int c1 = cfg.base_channels, c2 = 2 * cfg.base_channels;
  up2_ = nn::Conv2d(name + ".up2", c2, c2, 3, 1, rng);
  dres2_ = nn::ResBlock(name + ".res2", c2, cfg.emb_dim, rng);
  up1_ = nn::Conv2d(name + ".up1", c2, c1, 3, 1, rng);
  dres1_ = nn::ResBlock(name + ".res1", c1, cfg.emb_dim, rng);
  out_conv_ = nn::Conv2d(name + ".out_conv", c1, cfg.latent_channels, 3, 1, rng, /*zero_init=*/true);
}

nn::Tensor UNetDecoder::forward(const UNetFeatures& f, const nn::Tensor& emb) {
  nn::Tensor u2 = up2_.forward(nn::upsample2x(f.h3));
  u2 += f.h2;
  nn::Tensor u1 = up1_.forward(nn::upsample2x(dres2_.forward(u2, emb)));
  u1 += f.h1;
  return out_conv_.forward(out_act_.forward(dres1_.forward(u1, emb)));
}

UNetFeatures UNetDecoder::backward(const nn::Tensor& d_out, nn::Tensor& d_emb) {
  UNetFeatures d;
  d.h1 = dres1_.backward(out_act_.backward(out_conv_.backward(d_out)), d_emb);
  d.h2 = dres2_.backward(nn::upsample2x_backward(up1_.backward(d.h1)), d_emb);
  d.h3 = nn::upsample2x_backward(up2_.backward(d.h2));
  return d;
}

void UNetDecoder::params(nn::ParamList& out) {
  up2_.params(out);
  dres2_.params(out);
  up1_.params(out);
  dres1_.params(out);
  out_conv_.params(out);
}

Denoiser::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  std::mt19937_64 rng(seed);
  time_mlp = TimeMLP("unet.time", cfg.time_dim, cfg.emb_dim, rng);
  encoder = UNetEncoder("unet.enc", cfg, rng);
  decoder = UNetDecoder("unet.dec", cfg, rng);
}

nn::Tensor Denoiser::embedding(std::span<const int> t, const nn::Tensor& text_vec) {
  nn::Tensor emb = time_mlp.forward(t);
  emb += text_vec;
  return emb;
}

nn::Tensor Denoiser::forward(const nn::Tensor& z_t, const nn::Tensor& emb, const UNetFeatures* control) {
  nn::require_shape(z_t, emb.n, cfg_.latent_channels, z_t.h, z_t.w, "Denoiser");
  enc_out_ = encoder.forward(z_t, emb);
  if (control == nullptr) return decoder.forward(enc_out_, emb);
  UNetFeatures mixed = enc_out_;
  mixed.h1 += control->h1;
  mixed.h2 += control->h2;
  mixed.h3 += control->h3;
  return decoder.forward(mixed, emb);
}

Denoiser::Backward Denoiser::backward(const nn::Tensor& d_eps, bool through_encoder) {
  Backward out;
  out.d_emb = nn::Tensor(d_eps.n, cfg_.emb_dim, 1, 1);
  out.d_control = decoder.backward(d_eps, out.d_emb);
  if (through_encoder) {
    encoder.backward(out.d_control, out.d_emb);
    time_mlp.backward(out.d_emb);
  }
  return out;
}

void Denoiser::params(nn::ParamList& out) {
  time_mlp.params(out);
  encoder.params(out);
  decoder.params(out);
}

void Denoiser::encoder_params(nn::ParamList& out) {
  time_mlp.params(out);
  encoder.params(out);
}

nn::ParamList Denoiser::all_params() {
  nn::ParamList p;
  params(p);
  return p;
}

std::string Denoiser::weights_hash() { return nn::params_hash(all_params()); }

NoiseDraw draw_noise(const nn::Tensor& z0, const NoiseSchedule& schedule, std::mt19937_64& rng) {
  NoiseDraw d;
  std::uniform_int_distribution<int> uni(0, schedule.T - 1);
  for (int i = 0; i < z0.n; ++i) d.t.push_back(uni(rng));
  d.eps = gaussian_like(z0, rng);
  return d;
}

float ldm_loss(const LdmBatch& batch, Denoiser& model, TextEmbedder& embedder, const NoiseSchedule& schedule,
               const NoiseDraw& draw, bool backward) {
  if (batch.z0.n == 0) throw std::invalid_argument("ldm_loss: empty batch");
  if (batch.captions.size() != static_cast<std::size_t>(batch.z0.n))
    throw std::invalid_argument("ldm_loss: one caption per latent required");
  const nn::Tensor z_t = q_sample(batch.z0, draw.t, draw.eps, schedule);
  const nn::Tensor text = embedder.forward(batch.captions);
  const nn::Tensor emb = model.embedding(draw.t, text);
  const nn::Tensor eps_hat = model.forward(z_t, emb);
  const float loss = nn::mse(eps_hat, draw.eps);
  if (backward) {
    const auto b = model.backward(nn::mse_grad(eps_hat, draw.eps));
    embedder.backward(b.d_emb);
  }
  return loss;
}

float ldm_loss(const LdmBatch& batch, Denoiser& model, TextEmbedder& embedder, const NoiseSchedule& schedule,
               std::mt19937_64& rng) {
  if (batch.z0.n == 0) throw std::invalid_argument("ldm_loss: empty batch");
  return ldm_loss(batch, model, embedder, schedule, draw_noise(batch.z0, schedule, rng), false);
}

std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("sampling_timesteps: steps must be in [1, T]");
  if (steps == 1) return {T - 1};
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * (T - 1) / (steps - 1)));
    if (ts.empty() || t > ts.back()) ts.push_back(t);
  }
  return ts;
}

nn::Tensor sample_latent(const NoisePredictor& predict, int channels, int height, int width,
                         const NoiseSchedule& schedule, int steps, std::span<const std::uint64_t> seeds) {
  const int n = static_cast<int>(seeds.size());
  if (n == 0) throw std::invalid_argument("sample_latent: no seeds");
  const auto ts = sampling_timesteps(schedule.T, steps);
  std::vector<std::mt19937_64> rngs;
  rngs.reserve(seeds.size());
  for (auto s : seeds) rngs.emplace_back(s);
  // one distribution per sample: normal_distribution caches a spare draw
  std::vector<std::normal_distribution<float>> normals(seeds.size(), std::normal_distribution<float>(0.0f, 1.0f));

  nn::Tensor z(n, channels, height, width);
  for (int i = 0; i < n; ++i) {
    float* p = z.sample(i);
    for (std::size_t k = 0; k < z.sample_size(); ++k) p[k] = normals[static_cast<std::size_t>(i)](rngs[static_cast<std::size_t>(i)]);
  }
  for (int idx = static_cast<int>(ts.size()) - 1; idx >= 0; --idx) {
    const int t = ts[static_cast<std::size_t>(idx)];
    const int t_prev = idx > 0 ? ts[static_cast<std::size_t>(idx - 1)] : -1;
    const double ab = schedule.alpha_bars[static_cast<std::size_t>(t)];
    const double ab_prev = t_prev >= 0 ? schedule.alpha_bars[static_cast<std::size_t>(t_prev)] : 1.0;
    const std::vector<int> tvec(static_cast<std::size_t>(n), t);
    const nn::Tensor eps = predict(z, tvec);
    const double beta = 1.0 - ab / ab_prev;
    const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c_z = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(std::max(0.0, beta * (1.0 - ab_prev) / (1.0 - ab)));
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab), sqrt_1mab = std::sqrt(1.0 - ab);
    for (int i = 0; i < n; ++i) {
      float* zp = z.sample(i);
      const float* ep = eps.sample(i);
      for (std::size_t k = 0; k < z.sample_size(); ++k) {
        const double x0 = (zp[k] - sqrt_1mab * ep[k]) * inv_sqrt_ab;
        if (t_prev < 0) {
          zp[k] = static_cast<float>(x0);
        } else {
          zp[k] = static_cast<float>(c_x0 * x0 + c_z * zp[k] + sigma * normals[static_cast<std::size_t>(i)](rngs[static_cast<std::size_t>(i)]));
        }
      }
    }
  }
  return z;
}

}  // namespace difuzcam
