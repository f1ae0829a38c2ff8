#include "difuzcam/nn.hpp"

#include <algorithm>
#include <stdexcept>

#include <Eigen/Dense>

#include "difuzcam/hash.hpp"

namespace difuzcam::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// Upper bound on floats held by one im2col buffer.
constexpr std::size_t kColBudget = std::size_t{1} << 22;

void init_uniform(std::vector<float>& v, float bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-bound, bound);
  for (auto& x : v) x = u(rng);
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

std::string Tensor::shape_str() const {
  return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (!same_shape(o)) throw std::invalid_argument("Tensor +=: shape mismatch " + shape_str() + " vs " + o.shape_str());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  return *this;
}

Tensor& Tensor::operator*=(float s) {
  for (auto& x : data) x *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}

void require_shape(const Tensor& t, int n, int c, int h, int w, const char* what) {
  if ((n >= 0 && t.n != n) || t.c != c || t.h != h || t.w != w) {
    throw std::invalid_argument(std::string(what) + ": unexpected shape " + t.shape_str());
  }
}

void zero_grads(const ParamList& params) {
  for (auto* p : params) p->zero_grad();
}

void set_trainable(const ParamList& params, bool trainable) {
  for (auto* p : params) p->trainable = trainable;
}

std::string params_hash(const ParamList& params) {
  Sha256 h;
  for (const auto* p : params) {
    h.update(p->name);
    h.update(p->value.data(), p->value.size() * sizeof(float));
  }
  return h.hex();
}

void copy_values(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]->value.size() != to[i]->value.size()) throw std::invalid_argument("copy_values: size mismatch at " + from[i]->name);
    to[i]->value = from[i]->value;
  }
}

void register_params(AdamW<float>& opt, const ParamList& params) {
  for (auto* p : params) {
    if (p->trainable) opt.add(std::span<float>(p->value), std::span<const float>(p->grad));
  }
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int cin, int cout, int kernel, int stride, std::mt19937_64& rng, bool zero_init)
    : cin_(cin), cout_(cout), k_(kernel), stride_(stride), pad_(kernel / 2) {
  if (cin <= 0 || cout <= 0 || kernel <= 0 || kernel % 2 == 0 || stride <= 0)
    throw std::invalid_argument("Conv2d: invalid configuration for " + name);
  const std::size_t kdim = static_cast<std::size_t>(cin) * kernel * kernel;
  weight = {name + ".weight", std::vector<float>(static_cast<std::size_t>(cout) * kdim, 0.0f),
            std::vector<float>(static_cast<std::size_t>(cout) * kdim, 0.0f), true};
  bias = {name + ".bias", std::vector<float>(static_cast<std::size_t>(cout), 0.0f),
          std::vector<float>(static_cast<std::size_t>(cout), 0.0f), true};
  if (!zero_init) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(kdim));
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
  }
}

namespace {

// Eigen's vectorized reductions peel by runtime address, so the summation order
// (and the result bits) would depend on where the allocator put the buffer.
float ordered_sum(const float* p, Eigen::Index n, Eigen::Index stride) {
  float acc = 0.0f;
  for (Eigen::Index i = 0; i < n; ++i) acc += p[i * stride];
  return acc;
}

struct ConvGeom {
  int cin, h, w, k, stride, pad, ho, wo;
  std::size_t kdim() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t hwo() const { return static_cast<std::size_t>(ho) * wo; }
};

// cols[(ci*k + ky)*k + kx][s*hwo + oy*wo + ox] for samples [n0, n0 + count)
void im2col(const Tensor& x, const ConvGeom& g, int n0, int count, float* cols) {
  const std::size_t hwo = g.hwo();
  const std::size_t ld = hwo * static_cast<std::size_t>(count);
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = cols + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * ld;
        for (int s = 0; s < count; ++s) {
          const float* src = x.sample(n0 + s) + static_cast<std::size_t>(ci) * g.h * g.w;
          float* dst = row + static_cast<std::size_t>(s) * hwo;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            float* d = dst + static_cast<std::size_t>(oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, 0.0f);
              continue;
            }
            const float* srow = src + static_cast<std::size_t>(iy) * g.w;
            if (g.stride == 1) {
              const int shift = kx - g.pad;
              for (int ox = 0; ox < g.wo; ++ox) {
                const int ix = ox + shift;
                d[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
              }
            } else {
              for (int ox = 0; ox < g.wo; ++ox) {
                const int ix = ox * g.stride - g.pad + kx;
                d[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
              }
            }
          }
        }
      }
    }
  }
}

void col2im(const float* cols, const ConvGeom& g, int n0, int count, Tensor& dx) {
  const std::size_t hwo = g.hwo();
  const std::size_t ld = hwo * static_cast<std::size_t>(count);
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = cols + (static_cast<std::size_t>(ci * g.k + ky) * g.k + kx) * ld;
        for (int s = 0; s < count; ++s) {
          float* dst = dx.sample(n0 + s) + static_cast<std::size_t>(ci) * g.h * g.w;
          const float* src = row + static_cast<std::size_t>(s) * hwo;
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            float* drow = dst + static_cast<std::size_t>(iy) * g.w;
            const float* srow = src + static_cast<std::size_t>(oy) * g.wo;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

int chunk_samples(const ConvGeom& g, int n) {
  const std::size_t per = g.kdim() * g.hwo();
  return std::clamp(static_cast<int>(kColBudget / std::max<std::size_t>(per, 1)), 1, n);
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c != cin_) throw std::invalid_argument("Conv2d " + weight.name + ": expected " + std::to_string(cin_) + " channels, got " + x.shape_str());
  x_ = x;
  ConvGeom g{cin_, x.h, x.w, k_, stride_, pad_, (x.h + 2 * pad_ - k_) / stride_ + 1, (x.w + 2 * pad_ - k_) / stride_ + 1};
  Tensor y(x.n, cout_, g.ho, g.wo);
  const std::size_t hwo = g.hwo();
  CMapRM wmat(weight.value.data(), cout_, static_cast<Eigen::Index>(g.kdim()));
  const int chunk = chunk_samples(g, x.n);
  std::vector<float> cols, out;
  for (int n0 = 0; n0 < x.n; n0 += chunk) {
    const int count = std::min(chunk, x.n - n0);
    const auto ncols = static_cast<Eigen::Index>(hwo * static_cast<std::size_t>(count));
    cols.resize(g.kdim() * static_cast<std::size_t>(ncols));
    out.resize(static_cast<std::size_t>(cout_) * static_cast<std::size_t>(ncols));
    im2col(x, g, n0, count, cols.data());
    MapRM omat(out.data(), cout_, ncols);
    omat.noalias() = wmat * CMapRM(cols.data(), static_cast<Eigen::Index>(g.kdim()), ncols);
    for (int s = 0; s < count; ++s) {
      float* dst = y.sample(n0 + s);
      for (int co = 0; co < cout_; ++co) {
        const float b = bias.value[static_cast<std::size_t>(co)];
        const float* src = out.data() + static_cast<std::size_t>(co) * static_cast<std::size_t>(ncols) + static_cast<std::size_t>(s) * hwo;
        float* d = dst + static_cast<std::size_t>(co) * hwo;
        for (std::size_t p = 0; p < hwo; ++p) d[p] = src[p] + b;
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  const Tensor& x = x_;
  ConvGeom g{cin_, x.h, x.w, k_, stride_, pad_, (x.h + 2 * pad_ - k_) / stride_ + 1, (x.w + 2 * pad_ - k_) / stride_ + 1};
  require_shape(dy, x.n, cout_, g.ho, g.wo, "Conv2d::backward");
  Tensor dx(x.n, cin_, x.h, x.w);
  const std::size_t hwo = g.hwo();
  const bool train = weight.trainable;
  CMapRM wmat(weight.value.data(), cout_, static_cast<Eigen::Index>(g.kdim()));
  MapRM dw(weight.grad.data(), cout_, static_cast<Eigen::Index>(g.kdim()));
  const int chunk = chunk_samples(g, x.n);
  std::vector<float> cols, dout;
  for (int n0 = 0; n0 < x.n; n0 += chunk) {
    const int count = std::min(chunk, x.n - n0);
    const auto ncols = static_cast<Eigen::Index>(hwo * static_cast<std::size_t>(count));
    dout.resize(static_cast<std::size_t>(cout_) * static_cast<std::size_t>(ncols));
    for (int s = 0; s < count; ++s) {
      const float* src = dy.sample(n0 + s);
      for (int co = 0; co < cout_; ++co) {
        std::copy_n(src + static_cast<std::size_t>(co) * hwo, hwo,
                    dout.data() + static_cast<std::size_t>(co) * static_cast<std::size_t>(ncols) + static_cast<std::size_t>(s) * hwo);
      }
    }
    CMapRM dmat(dout.data(), cout_, ncols);
    cols.resize(g.kdim() * static_cast<std::size_t>(ncols));
    if (train) {
      im2col(x, g, n0, count, cols.data());
      dw.noalias() += dmat * CMapRM(cols.data(), static_cast<Eigen::Index>(g.kdim()), ncols).transpose();
      for (int co = 0; co < cout_; ++co) bias.grad[static_cast<std::size_t>(co)] += ordered_sum(dout.data() + static_cast<std::size_t>(co) * static_cast<std::size_t>(ncols), ncols, 1);
    }
    MapRM(cols.data(), static_cast<Eigen::Index>(g.kdim()), ncols).noalias() = wmat.transpose() * dmat;
    col2im(cols.data(), g, n0, count, dx);
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in, int out, std::mt19937_64& rng, bool zero_init) : in_(in), out_(out) {
  weight = {name + ".weight", std::vector<float>(static_cast<std::size_t>(in) * out, 0.0f),
            std::vector<float>(static_cast<std::size_t>(in) * out, 0.0f), true};
  bias = {name + ".bias", std::vector<float>(static_cast<std::size_t>(out), 0.0f),
          std::vector<float>(static_cast<std::size_t>(out), 0.0f), true};
  if (!zero_init) {
    const float bound = 1.0f / std::sqrt(static_cast<float>(in));
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
  }
}

Tensor Linear::forward(const Tensor& x) {
  require_shape(x, -1, in_, 1, 1, ("Linear " + weight.name).c_str());
  x_ = x;
  Tensor y(x.n, out_, 1, 1);
  CMapRM xm(x.data.data(), x.n, in_);
  CMapRM wm(weight.value.data(), out_, in_);
  MapRM ym(y.data.data(), x.n, out_);
  ym.noalias() = xm * wm.transpose();
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < out_; ++o) ym(i, o) += bias.value[static_cast<std::size_t>(o)];
  return y;
}

Tensor Linear::backward(const Tensor& dy) {
  require_shape(dy, x_.n, out_, 1, 1, "Linear::backward");
  CMapRM dym(dy.data.data(), dy.n, out_);
  CMapRM xm(x_.data.data(), x_.n, in_);
  CMapRM wm(weight.value.data(), out_, in_);
  if (weight.trainable) {
    MapRM(weight.grad.data(), out_, in_).noalias() += dym.transpose() * xm;
    for (int o = 0; o < out_; ++o) bias.grad[static_cast<std::size_t>(o)] += ordered_sum(dy.data.data() + o, dy.n, out_);
  }
  Tensor dx(dy.n, in_, 1, 1);
  MapRM(dx.data.data(), dy.n, in_).noalias() = dym * wm;
  return dx;
}

// ---------------------------------------------------------------- SiLU

Tensor SiLU::forward(const Tensor& x) {
  x_ = x;
  Tensor y = x;
  for (auto& v : y.data) v = v * sigmoid(v);
  return y;
}

Tensor SiLU::backward(const Tensor& dy) const {
  if (!dy.same_shape(x_)) throw std::invalid_argument("SiLU::backward: shape mismatch");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.data.size(); ++i) {
    const float x = x_.data[i];
    const float s = sigmoid(x);
    dx.data[i] *= s * (1.0f + x * (1.0f - s));
  }
  return dx;
}

Tensor upsample2x(const Tensor& x) {
  Tensor y(x.n, x.c, 2 * x.h, 2 * x.w);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int i = 0; i < y.h; ++i)
        for (int j = 0; j < y.w; ++j) y.at(n, c, i, j) = x.at(n, c, i / 2, j / 2);
  return y;
}

Tensor upsample2x_backward(const Tensor& dy) {
  if (dy.h % 2 != 0 || dy.w % 2 != 0) throw std::invalid_argument("upsample2x_backward: odd shape");
  Tensor dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int n = 0; n < dy.n; ++n)
    for (int c = 0; c < dy.c; ++c)
      for (int i = 0; i < dy.h; ++i)
        for (int j = 0; j < dy.w; ++j) dx.at(n, c, i / 2, j / 2) += dy.at(n, c, i, j);
  return dx;
}

// ---------------------------------------------------------------- ResBlock

ResBlock::ResBlock(const std::string& name, int channels, int emb_dim, std::mt19937_64& rng)
    : conv1_(name + ".conv1", channels, channels, 3, 1, rng),
      conv2_(name + ".conv2", channels, channels, 3, 1, rng),
      film_(name + ".film", emb_dim, 2 * channels, rng),
      channels_(channels) {}

void ResBlock::params(ParamList& out) {
  conv1_.params(out);
  conv2_.params(out);
  film_.params(out);
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& emb) {
  if (emb.n != x.n) throw std::invalid_argument("ResBlock: batch mismatch between features and embedding");
  b_ = conv1_.forward(act1_.forward(x));
  film_out_ = film_.forward(emb);
  Tensor c = b_;
  const std::size_t hw = c.plane_size();
  for (int n = 0; n < c.n; ++n) {
    for (int ch = 0; ch < channels_; ++ch) {
      const float scale = 1.0f + film_out_.at(n, ch, 0, 0);
      const float shift = film_out_.at(n, channels_ + ch, 0, 0);
      float* p = c.sample(n) + static_cast<std::size_t>(ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * scale + shift;
    }
  }
  Tensor out = conv2_.forward(act2_.forward(c));
  out += x;
  return out;
}

Tensor ResBlock::backward(const Tensor& dy, Tensor& demb) {
  Tensor dc = act2_.backward(conv2_.backward(dy));
  Tensor dfilm(dc.n, 2 * channels_, 1, 1);
  const std::size_t hw = dc.plane_size();
  for (int n = 0; n < dc.n; ++n) {
    for (int ch = 0; ch < channels_; ++ch) {
      const float scale = 1.0f + film_out_.at(n, ch, 0, 0);
      float* g = dc.sample(n) + static_cast<std::size_t>(ch) * hw;
      const float* b = b_.sample(n) + static_cast<std::size_t>(ch) * hw;
      double ds = 0.0, dsh = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        ds += static_cast<double>(g[i]) * b[i];
        dsh += g[i];
        g[i] *= scale;
      }
      dfilm.at(n, ch, 0, 0) = static_cast<float>(ds);
      dfilm.at(n, channels_ + ch, 0, 0) = static_cast<float>(dsh);
    }
  }
  demb += film_.backward(dfilm);
  Tensor dx = act1_.backward(conv1_.backward(dc));
  dx += dy;
  return dx;
}

// ---------------------------------------------------------------- misc

Tensor timestep_features(std::span<const int> t, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("timestep_features: dim must be even");
  Tensor out(static_cast<int>(t.size()), dim, 1, 1);
  const int half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double a = static_cast<double>(t[n]) * freq;
      out.at(static_cast<int>(n), i, 0, 0) = static_cast<float>(std::sin(a));
      out.at(static_cast<int>(n), half + i, 0, 0) = static_cast<float>(std::cos(a));
    }
  }
  return out;
}

float mse(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - target.data[i];
    acc += d * d;
  }
  return static_cast<float>(acc / static_cast<double>(pred.data.size()));
}

Tensor mse_grad(const Tensor& pred, const Tensor& target) {
  if (!pred.same_shape(target)) throw std::invalid_argument("mse_grad: shape mismatch");
  Tensor g = pred;
  const float scale = 2.0f / static_cast<float>(pred.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = scale * (pred.data[i] - target.data[i]);
  return g;
}

}  // namespace difuzcam::nn
