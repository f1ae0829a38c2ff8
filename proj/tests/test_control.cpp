#include <doctest.h>

#include <stdexcept>

#include <cstring>

#include "difuzcam/control.hpp"
#include "gradcheck.hpp"

using namespace difuzcam;
using nn::Tensor;

namespace {

DenoiserConfig small_config() {
  DenoiserConfig cfg;
  cfg.latent_channels = 2;
  cfg.base_channels = 8;
  cfg.emb_dim = 16;
  cfg.time_dim = 8;
  cfg.token_dim = 8;
  return cfg;
}

Tensor randn(int n, int c, int h, int w, std::mt19937_64& rng) {
  Tensor t(n, c, h, w);
  std::normal_distribution<float> d(0.0f, 1.0f);
  for (auto& v : t.data) v = d(rng);
  return t;
}

Denoiser trained_denoiser(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Denoiser d(small_config(), seed);
  gradcheck::jitter(d.all_params(), "", 0.05f, rng);
  d.trained = true;
  return d;
}

}  // namespace

TEST_CASE("zero-initialized branch leaves the base prediction bit-exact") {
  std::mt19937_64 rng(1);
  Denoiser d = trained_denoiser(2);
  TextEmbedder emb(8, 16, 3);
  ControlBranch branch = init_control_from_denoiser(d, 32, 8, 4);
  const Tensor z = randn(3, 2, 8, 8, rng), c_o = randn(3, 4, 32, 32, rng);
  const std::vector<int> t = {0, 57, 199};
  const Tensor text = emb.forward({"a red circle", "", "a ring"});
  const Tensor base = d.forward(z, d.embedding(t, text));
  const Tensor ctrl = controlled_predict(z, t, text, c_o, d, branch);
  REQUIRE(ctrl.same_shape(base));
  CHECK(std::memcmp(ctrl.data.data(), base.data.data(), base.data.size() * sizeof(float)) == 0);
}

TEST_CASE("branch copies the donor encoder under new names") {
  Denoiser d = trained_denoiser(5);
  ControlBranch branch = init_control_from_denoiser(d, 8, 8, 6);
  nn::ParamList donor, copy;
  d.encoder_params(donor);
  branch.copy_params(copy);
  REQUIRE(donor.size() == copy.size());
  for (std::size_t i = 0; i < donor.size(); ++i) {
    CHECK(copy[i]->value == donor[i]->value);
    CHECK(copy[i]->name.rfind("control.", 0) == 0);
    CHECK(copy[i]->trainable);
  }
  CHECK(branch.donor_hash == d.weights_hash());
  nn::ParamList proj;
  branch.projection_params(proj);
  for (nn::Param* p : proj)
    for (float v : p->value) CHECK(v == 0.0f);

  // training the copy must not touch the donor
  copy.front()->value[0] += 1.0f;
  CHECK(donor.front()->value[0] != copy.front()->value[0]);
}

TEST_CASE("branch construction rejects bad inputs") {
  Denoiser untrained(small_config(), 7);
  CHECK_THROWS_AS(init_control_from_denoiser(untrained, 16, 8, 1), std::invalid_argument);
  Denoiser d = trained_denoiser(8);
  CHECK_THROWS_AS(ControlBranch(d, 24, 8, 1), std::invalid_argument);
  CHECK_THROWS_AS(ControlBranch(d, 4, 8, 1), std::invalid_argument);
  ControlBranch branch(d, 16, 8, 1);
  std::mt19937_64 rng(9);
  const std::vector<int> t = {3};
  TextEmbedder emb(8, 16, 3);
  CHECK_THROWS_AS(branch.forward(randn(1, 2, 8, 8, rng), t, emb.forward({""}), randn(1, 4, 32, 32, rng)),
                  std::invalid_argument);
  CHECK_THROWS_AS(branch.forward(randn(1, 2, 8, 8, rng), t, emb.forward({""}), randn(1, 3, 16, 16, rng)),
                  std::invalid_argument);
}

TEST_CASE("total loss gradients match central differences") {
  for (double w_sep : {1.0, 0.0}) {
    const gradcheck::Result r = gradcheck::run(11, w_sep);
    CAPTURE(w_sep);
    CHECK(r.sep_loss < 1e-2);
    CHECK(r.total_sep < 1e-2);
    CHECK(r.total_branch < 1e-2);
  }
}

TEST_CASE("total loss splits into its parts") {
  gradcheck::Instance in = gradcheck::make_instance(12);
  ControlModels m{&in.denoiser, &in.embedder, &in.branch, &in.sep};
  const LossParts a = total_loss(in.batch, m, in.schedule, 1.0, in.draw, false);
  const LossParts b = total_loss(in.batch, m, in.schedule, 0.25, in.draw, false);
  CHECK(a.l_c == b.l_c);
  CHECK(a.total == doctest::Approx(a.l_c + a.l_sep));
  CHECK(b.total == doctest::Approx(b.l_c + 0.25 * b.l_sep));
  CHECK_THROWS_AS(total_loss(in.batch, m, in.schedule, -1.0, in.draw, false), std::invalid_argument);
  CHECK_THROWS_AS(total_loss(in.batch, m, in.schedule, 1.0, in.draw, true, nullptr), std::invalid_argument);
}

TEST_CASE("planes and tensors convert both ways") {
  std::mt19937_64 rng(13);
  std::vector<Planes> batch(2, Planes(4));
  for (auto& s : batch)
    for (auto& p : s) p = Matrix::Random(5, 6);
  const Tensor t = planes_to_tensor(batch);
  CHECK(t.n == 2);
  CHECK(t.c == 4);
  CHECK(t.h == 5);
  CHECK(t.w == 6);
  CHECK(t.at(1, 3, 4, 5) == static_cast<float>(batch[1][3](4, 5)));
  const auto back = tensor_to_planes(t);
  CHECK((back[0][2] - batch[0][2]).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("controlled sampling is deterministic per seed") {
  std::mt19937_64 rng(14);
  Denoiser d = trained_denoiser(15);
  TextEmbedder emb(8, 16, 16);
  ControlBranch branch = init_control_from_denoiser(d, 8, 8, 17);
  Autoencoder ae = Autoencoder::pixel_space(2);
  const NoiseSchedule s = build_schedule(50, 1e-3, 0.2);
  const Tensor c_o = randn(2, 4, 8, 8, rng);
  const std::vector<std::uint64_t> seeds = {5, 6};
  const Tensor a = sample_controlled(d, emb, branch, ae, c_o, {"a red circle", ""}, s, 10, seeds);
  const Tensor b = sample_controlled(d, emb, branch, ae, c_o, {"a red circle", ""}, s, 10, seeds);
  CHECK(a.data == b.data);
  CHECK(a.c == 2);
  CHECK(a.h == 8);
  Denoiser untrained(small_config(), 18);
  CHECK_THROWS_AS(sample_controlled(untrained, emb, branch, ae, c_o, {"", ""}, s, 10, seeds), std::invalid_argument);
  CHECK_THROWS_AS(sample_controlled(d, emb, branch, ae, c_o, {""}, s, 10, seeds), std::invalid_argument);
}
