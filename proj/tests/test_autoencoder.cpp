#include <doctest.h>

#include <stdexcept>

#include <cmath>

#include "difuzcam/autoencoder.hpp"
#include "difuzcam/scenes.hpp"

using namespace difuzcam;
using nn::Tensor;

namespace {

Tensor scene_batch(int n, int size, std::uint64_t seed) {
  Tensor t(n, 3, size, size);
  for (int i = 0; i < n; ++i) {
    const Scene s = generate_scene(size, seed + static_cast<std::uint64_t>(i), "s");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) t.at(i, c, y, x) = static_cast<float>(s.rgb[static_cast<std::size_t>(c)](y, x));
  }
  return t;
}

AutoencoderConfig small_arch() {
  AutoencoderConfig a;
  a.latent_channels = 4;
  a.width = 8;
  return a;
}

}  // namespace

TEST_CASE("pixel-space autoencoder is the identity") {
  Autoencoder ae = Autoencoder::pixel_space();
  const Tensor x = scene_batch(2, 16, 1);
  CHECK(ae.identity());
  CHECK(ae.downsample() == 1);
  CHECK(ae.latent_channels() == 3);
  CHECK(ae.encode(x).data == x.data);
  CHECK(ae.decode(x).data == x.data);
  CHECK(ae.all_params().empty());
}

TEST_CASE("latent geometry") {
  Autoencoder ae(small_arch(), 2);
  const Tensor z = ae.encode(scene_batch(2, 16, 2));
  CHECK(z.n == 2);
  CHECK(z.c == 4);
  CHECK(z.h == 4);
  CHECK(z.w == 4);
  const Tensor x = ae.decode(z);
  CHECK(x.c == 3);
  CHECK(x.h == 16);
  for (float v : x.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("training reduces reconstruction error and normalizes latents") {
  const Tensor images = scene_batch(64, 16, 100);
  AETrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch = 16;
  Autoencoder ae(small_arch(), 3);
  AutoencoderTrainer trainer(ae, images, cfg, 4);
  CHECK(trainer.total_steps() == 80);
  double first = trainer.step();
  double last = 0.0;
  while (!trainer.done()) last = trainer.step();
  trainer.finish();
  CHECK(last < 0.5 * first);
  CHECK(ae.frozen);
  CHECK(ae.trained);
  CHECK(tensor_std(ae.encode(images)) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  const Tensor images = scene_batch(32, 16, 200);
  AETrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 8;

  Autoencoder full(small_arch(), 5);
  AutoencoderTrainer t_full(full, images, cfg, 6);
  while (!t_full.done()) t_full.step();

  Autoencoder part(small_arch(), 5);
  AutoencoderTrainer t_part(part, images, cfg, 6);
  for (int i = 0; i < 5; ++i) t_part.step();

  Autoencoder resumed(small_arch(), 99);
  nn::copy_values(part.all_params(), resumed.all_params());
  AutoencoderTrainer t_res(resumed, images, cfg, 6);
  auto& src = t_part.optimizer().slots();
  auto& dst = t_res.optimizer().slots();
  REQUIRE(src.size() == dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].m = src[i].m;
    dst[i].v = src[i].v;
  }
  t_res.optimizer().set_steps(t_part.optimizer().steps());
  while (!t_res.done()) t_res.step();

  CHECK(resumed.weights_hash() == full.weights_hash());

  Autoencoder again(small_arch(), 5);
  AutoencoderTrainer t_again(again, images, cfg, 6);
  while (!t_again.done()) t_again.step();
  CHECK(again.weights_hash() == full.weights_hash());
}

TEST_CASE("train_autoencoder rejects tiny datasets") {
  const Tensor images = scene_batch(8, 16, 300);
  CHECK_THROWS_AS(train_autoencoder(images, small_arch(), AETrainConfig{}, 1, 256), std::invalid_argument);
  CHECK_THROWS_AS(train_autoencoder(Tensor(0, 3, 16, 16), small_arch(), AETrainConfig{}, 1, 0), std::invalid_argument);
}

TEST_CASE("batch slicing helpers") {
  const Tensor images = scene_batch(5, 16, 400);
  const Tensor s = slice_batch(images, 1, 3);
  CHECK(s.n == 3);
  CHECK(s.at(0, 2, 4, 4) == images.at(1, 2, 4, 4));
  const Tensor g = gather_batch(images, {4, 0, 4});
  CHECK(g.n == 3);
  CHECK(g.at(0, 1, 3, 3) == images.at(4, 1, 3, 3));
  CHECK(g.at(1, 1, 3, 3) == images.at(0, 1, 3, 3));
}
