#pragma once

// Minimal float32 NCHW layers with explicit backward passes. Each layer caches
// what its backward needs from the most recent forward call, so a forward /
// backward pair must not be interleaved with another forward on the same layer.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace difuzcam::nn {

struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_str() const;

  float& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  float at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  float* sample(int in) { return data.data() + static_cast<std::size_t>(in) * sample_size(); }
  const float* sample(int in) const { return data.data() + static_cast<std::size_t>(in) * sample_size(); }

  Tensor& operator+=(const Tensor& o);
  Tensor& operator*=(float s);
};

Tensor operator+(Tensor a, const Tensor& b);
void require_shape(const Tensor& t, int n, int c, int h, int w, const char* what);

struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;
  bool trainable = true;

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

using ParamList = std::vector<Param*>;

void zero_grads(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);
/// SHA-256 over names and values.
std::string params_hash(const ParamList& params);
/// Copies values between two structurally identical lists.
void copy_values(const ParamList& from, const ParamList& to);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int cin, int cout, int kernel, int stride, std::mt19937_64& rng, bool zero_init = false);

  Tensor forward(const Tensor& x);
  /// Accumulates weight/bias gradients when trainable; returns dL/dx.
  Tensor backward(const Tensor& dy);

  void params(ParamList& out) { out.push_back(&weight); out.push_back(&bias); }
  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }

  Param weight, bias;

 private:
  int cin_ = 0, cout_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Tensor x_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, std::mt19937_64& rng, bool zero_init = false);

  /// x: [N, in, 1, 1]
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out) { out.push_back(&weight); out.push_back(&bias); }

  Param weight, bias;

 private:
  int in_ = 0, out_ = 0;
  Tensor x_;
};

class SiLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dy) const;

 private:
  Tensor x_;
};

Tensor upsample2x(const Tensor& x);
/// Adjoint of nearest upsampling: sums each 2x2 block.
Tensor upsample2x_backward(const Tensor& dy);

/// Residual block with FiLM conditioning: x + conv2(silu(film(conv1(silu(x)), emb))).
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(const std::string& name, int channels, int emb_dim, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, const Tensor& emb);
  /// Returns dL/dx; accumulates dL/demb into `demb` (shape [N, emb_dim]).
  Tensor backward(const Tensor& dy, Tensor& demb);
  void params(ParamList& out);

 private:
  SiLU act1_, act2_;
  Conv2d conv1_, conv2_;
  Linear film_;
  int channels_ = 0;
  Tensor b_, film_out_;
};

/// Sinusoidal timestep features, [N, dim, 1, 1].
Tensor timestep_features(std::span<const int> t, int dim);

float mse(const Tensor& pred, const Tensor& target);
/// Gradient of the per-element mean squared error.
Tensor mse_grad(const Tensor& pred, const Tensor& target);

/// Decoupled-weight-decay Adam over spans of one scalar type.
template <typename T>
class AdamW {
 public:
  struct Slot {
    std::span<T> value;
    std::span<const T> grad;
    std::vector<T> m, v;
  };

  AdamW(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void add(std::span<T> value, std::span<const T> grad) {
    slots_.push_back({value, grad, std::vector<T>(value.size(), T(0)), std::vector<T>(value.size(), T(0))});
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      for (std::size_t i = 0; i < s.value.size(); ++i) {
        const double g = static_cast<double>(s.grad[i]);
        const double m = b1_ * static_cast<double>(s.m[i]) + (1.0 - b1_) * g;
        const double v = b2_ * static_cast<double>(s.v[i]) + (1.0 - b2_) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        double p = static_cast<double>(s.value[i]);
        p -= lr_ * wd_ * p;
        p -= lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
        s.value[i] = static_cast<T>(p);
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<Slot>& slots() { return slots_; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  std::int64_t t_ = 0;
  std::vector<Slot> slots_;
};

/// Registers every trainable param of `params` with `opt`.
void register_params(AdamW<float>& opt, const ParamList& params);

}  // namespace difuzcam::nn
