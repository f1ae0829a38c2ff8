#include <doctest.h>

#include <stdexcept>

#include <random>

#include "difuzcam/nn.hpp"

using namespace difuzcam::nn;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng, float scale = 1.0f) {
  Tensor t(n, c, h, w);
  std::normal_distribution<float> d(0.0f, scale);
  for (auto& v : t.data) v = d(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

// Direct zero-padded convolution, weights laid out [cout][cin][k][k].
Tensor naive_conv(const Tensor& x, const std::vector<float>& w, const std::vector<float>& b, int cout, int k,
                  int stride) {
  const int pad = k / 2;
  const int ho = (x.h + 2 * pad - k) / stride + 1, wo = (x.w + 2 * pad - k) / stride + 1;
  Tensor y(x.n, cout, ho, wo);
  for (int n = 0; n < x.n; ++n)
    for (int co = 0; co < cout; ++co)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = b[co];
          for (int ci = 0; ci < x.c; ++ci)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const int yy = i * stride + ki - pad, xx = j * stride + kj - pad;
                if (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w) continue;
                acc += static_cast<double>(w[((co * x.c + ci) * k + ki) * k + kj]) * x.at(n, ci, yy, xx);
              }
          y.at(n, co, i, j) = static_cast<float>(acc);
        }
  return y;
}

}  // namespace

TEST_CASE("conv forward matches a direct convolution") {
  std::mt19937_64 rng(1);
  for (int k : {1, 3}) {
    for (int stride : {1, 2}) {
      Conv2d conv("c", 3, 5, k, stride, rng);
      const Tensor x = random_tensor(2, 3, 8, 6, rng);
      const Tensor y = conv.forward(x);
      const Tensor ref = naive_conv(x, conv.weight.value, conv.bias.value, 5, k, stride);
      REQUIRE(y.same_shape(ref));
      for (std::size_t i = 0; i < y.data.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("conv rejects invalid configurations") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(Conv2d("c", 3, 4, 2, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(Conv2d("c", 0, 4, 3, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(Conv2d("c", 3, 4, 3, 0, rng), std::invalid_argument);
}

TEST_CASE("zero-initialized conv outputs zeros") {
  std::mt19937_64 rng(2);
  Conv2d conv("z", 4, 4, 3, 1, rng, true);
  const Tensor y = conv.forward(random_tensor(1, 4, 5, 5, rng));
  for (float v : y.data) CHECK(v == 0.0f);
}

// The probe loss <r, layer(x)> is linear in x and in the weights for conv and
// linear layers, so a central difference with a unit step is exact up to rounding.
TEST_CASE("conv backward is the adjoint of forward") {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    Conv2d conv("c", 2, 3, 3, stride, rng);
    const Tensor x = random_tensor(2, 2, 6, 6, rng);
    const Tensor y = conv.forward(x);
    const Tensor r = random_tensor(y.n, y.c, y.h, y.w, rng);
    conv.weight.zero_grad();
    conv.bias.zero_grad();
    conv.forward(x);
    const Tensor dx = conv.backward(r);

    const Tensor u = random_tensor(x.n, x.c, x.h, x.w, rng);
    CHECK(dot(conv.forward(u), r) - dot(conv.forward(Tensor(x.n, x.c, x.h, x.w)), r) ==
          doctest::Approx(dot(u, dx)).epsilon(1e-4));

    for (std::size_t idx : {std::size_t{0}, std::size_t{7}, conv.weight.value.size() - 1}) {
      const float saved = conv.weight.value[idx];
      conv.weight.value[idx] = saved + 1.0f;
      const double up = dot(conv.forward(x), r);
      conv.weight.value[idx] = saved - 1.0f;
      const double dn = dot(conv.forward(x), r);
      conv.weight.value[idx] = saved;
      CHECK(conv.weight.grad[idx] == doctest::Approx((up - dn) / 2.0).epsilon(1e-4));
    }
    double bias_sum = 0.0;
    for (int n = 0; n < r.n; ++n)
      for (int i = 0; i < r.h; ++i)
        for (int j = 0; j < r.w; ++j) bias_sum += r.at(n, 1, i, j);
    CHECK(conv.bias.grad[1] == doctest::Approx(bias_sum).epsilon(1e-5));
  }
}

TEST_CASE("frozen conv leaves gradients untouched") {
  std::mt19937_64 rng(4);
  Conv2d conv("c", 2, 2, 3, 1, rng);
  conv.weight.trainable = conv.bias.trainable = false;
  conv.weight.zero_grad();
  const Tensor x = random_tensor(1, 2, 4, 4, rng);
  conv.forward(x);
  conv.backward(random_tensor(1, 2, 4, 4, rng));
  for (float g : conv.weight.grad) CHECK(g == 0.0f);
}

TEST_CASE("linear backward matches differences") {
  std::mt19937_64 rng(5);
  Linear lin("l", 6, 4, rng);
  const Tensor x = random_tensor(3, 6, 1, 1, rng);
  const Tensor r = random_tensor(3, 4, 1, 1, rng);
  lin.weight.zero_grad();
  lin.forward(x);
  const Tensor dx = lin.backward(r);
  for (std::size_t idx = 0; idx < lin.weight.value.size(); idx += 5) {
    const float saved = lin.weight.value[idx];
    lin.weight.value[idx] = saved + 1.0f;
    const double up = dot(lin.forward(x), r);
    lin.weight.value[idx] = saved - 1.0f;
    const double dn = dot(lin.forward(x), r);
    lin.weight.value[idx] = saved;
    CHECK(lin.weight.grad[idx] == doctest::Approx((up - dn) / 2.0).epsilon(1e-4));
  }
  for (std::size_t idx = 0; idx < x.data.size(); ++idx) {
    Tensor xp = x, xm = x;
    xp.data[idx] += 1.0f;
    xm.data[idx] -= 1.0f;
    CHECK(dx.data[idx] == doctest::Approx((dot(lin.forward(xp), r) - dot(lin.forward(xm), r)) / 2.0).epsilon(1e-4));
  }
}

TEST_CASE("silu backward matches differences") {
  std::mt19937_64 rng(6);
  SiLU act;
  const Tensor x = random_tensor(1, 2, 3, 3, rng, 2.0f);
  act.forward(x);
  const Tensor ones(1, 2, 3, 3, 1.0f);
  const Tensor dx = act.backward(ones);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double v = x.data[i];
    const double sig = 1.0 / (1.0 + std::exp(-v));
    CHECK(dx.data[i] == doctest::Approx(sig * (1.0 + v * (1.0 - sig))).epsilon(1e-5));
  }
}

TEST_CASE("upsample backward is the adjoint of upsample") {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor(2, 3, 4, 5, rng);
  const Tensor y = random_tensor(2, 3, 8, 10, rng);
  const Tensor up = upsample2x(x);
  REQUIRE(up.same_shape(y));
  CHECK(up.at(1, 2, 7, 9) == x.at(1, 2, 3, 4));
  CHECK(dot(up, y) == doctest::Approx(dot(x, upsample2x_backward(y))).epsilon(1e-5));
}

TEST_CASE("resblock backward matches central differences") {
  std::mt19937_64 rng(8);
  ResBlock block("rb", 4, 6, rng);
  const Tensor x = random_tensor(2, 4, 5, 5, rng);
  const Tensor emb = random_tensor(2, 6, 1, 1, rng);
  const Tensor r = random_tensor(2, 4, 5, 5, rng);
  ParamList ps;
  block.params(ps);
  zero_grads(ps);
  block.forward(x, emb);
  Tensor demb(2, 6, 1, 1);
  const Tensor dx = block.backward(r, demb);

  const float h = 1e-2f;
  auto probe = [&](const Tensor& xx, const Tensor& ee) { return dot(block.forward(xx, ee), r); };
  double num = 0.0, err = 0.0;
  for (std::size_t i = 0; i < x.data.size(); i += 3) {
    Tensor xp = x, xm = x;
    xp.data[i] += h;
    xm.data[i] -= h;
    const double fd = (probe(xp, emb) - probe(xm, emb)) / (2.0 * h);
    err += (fd - dx.data[i]) * (fd - dx.data[i]);
    num += fd * fd;
  }
  for (std::size_t i = 0; i < emb.data.size(); ++i) {
    Tensor ep = emb, em = emb;
    ep.data[i] += h;
    em.data[i] -= h;
    const double fd = (probe(x, ep) - probe(x, em)) / (2.0 * h);
    err += (fd - demb.data[i]) * (fd - demb.data[i]);
    num += fd * fd;
  }
  for (Param* p : ps) {
    for (std::size_t i = 0; i < p->value.size(); i += 11) {
      const float saved = p->value[i];
      p->value[i] = saved + h;
      const double up = probe(x, emb);
      p->value[i] = saved - h;
      const double dn = probe(x, emb);
      p->value[i] = saved;
      const double fd = (up - dn) / (2.0 * h);
      err += (fd - p->grad[i]) * (fd - p->grad[i]);
      num += fd * fd;
    }
  }
  CHECK(std::sqrt(err / num) < 1e-2);
}

TEST_CASE("resblock rejects mismatched batches") {
  std::mt19937_64 rng(9);
  ResBlock block("rb", 2, 4, rng);
  CHECK_THROWS_AS(block.forward(Tensor(2, 2, 3, 3), Tensor(1, 4, 1, 1)), std::invalid_argument);
}

TEST_CASE("timestep features") {
  const std::vector<int> t = {0, 17};
  const Tensor f = timestep_features(t, 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(f.at(0, i, 0, 0) == 0.0f);
    CHECK(f.at(0, 4 + i, 0, 0) == 1.0f);
  }
  CHECK(f.at(1, 0, 0, 0) == doctest::Approx(std::sin(17.0)));
  CHECK(f.at(1, 5, 0, 0) == doctest::Approx(std::cos(17.0 * std::pow(10000.0, -0.25))));
  CHECK_THROWS_AS(timestep_features(t, 7), std::invalid_argument);
}

TEST_CASE("mse and its gradient") {
  Tensor a(1, 1, 1, 4), b(1, 1, 1, 4);
  a.data = {1, 2, 3, 4};
  b.data = {1, 0, 3, 8};
  CHECK(mse(a, b) == doctest::Approx(5.0));
  const Tensor g = mse_grad(a, b);
  CHECK(g.data[1] == doctest::Approx(1.0));
  CHECK(g.data[3] == doctest::Approx(-2.0));
  CHECK_THROWS_AS(mse(a, Tensor(1, 1, 2, 2)), std::invalid_argument);
}

TEST_CASE("adamw matches a hand-computed update") {
  std::vector<double> w = {1.0, -2.0};
  std::vector<double> g = {0.5, -0.25};
  AdamW<double> opt(0.1, 0.9, 0.999, 1e-8, 0.01);
  opt.add(w, g);
  opt.step();
  // First step: the bias-corrected ratio is g / (|g| + eps).
  CHECK(w[0] == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(-2.0 - 0.1 * 0.01 * -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));

  g = {1.0, 0.0};
  const double w0 = w[0];
  opt.step();
  const double m = 0.9 * 0.05 + 0.1 * 1.0, v = 0.999 * 0.00025 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  CHECK(w[0] == doctest::Approx(w0 - 0.1 * 0.01 * w0 - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-9));
  CHECK(opt.steps() == 2);
}

TEST_CASE("params hash and copy") {
  std::mt19937_64 rng(10);
  Conv2d a("c", 2, 2, 3, 1, rng), b("c", 2, 2, 3, 1, rng);
  ParamList pa, pb;
  a.params(pa);
  b.params(pb);
  CHECK(params_hash(pa) != params_hash(pb));
  copy_values(pa, pb);
  CHECK(params_hash(pa) == params_hash(pb));
  b.weight.value[0] += 1e-3f;
  CHECK(params_hash(pa) != params_hash(pb));
}
