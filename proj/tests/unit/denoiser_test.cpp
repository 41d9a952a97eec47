#include <gtest/gtest.h>

#include <cmath>

#include "ddc/denoiser.hpp"
#include "ddc/image_io.hpp"
#include "test_util.hpp"

namespace ddc {
namespace {

UNetConfig small_unet(bool variance = false) {
  UNetConfig c;
  c.widths = {8, 16};
  c.blocks_per_level = 1;
  c.max_groups = 4;
  c.time_embed_dim = 16;
  c.learn_variance = variance;
  return c;
}

TEST(UNet, OutputShapesAndZeroInitialHead) {
  const UNet<float> net(small_unet(true), 1);
  Rng rng(2);
  const auto x = rng.randn<float>({2, 3, 16, 16});
  const auto out = net.forward(x, {5, 900});
  EXPECT_EQ(out.main.shape(), x.shape());
  ASSERT_TRUE(out.variance.defined());
  EXPECT_EQ(out.variance.shape(), x.shape());
  for (float v : out.main.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_FALSE(UNet<float>(small_unet(false), 1).forward(x, {5, 900}).variance.defined());
}

TEST(UNet, SeededInitialisation) {
  const UNet<float> a(small_unet(), 3), b(small_unet(), 3), c(small_unet(), 4);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_EQ(a.parameters()[i].name, b.parameters()[i].name);
    EXPECT_EQ(a.parameters()[i].tensor.vec(), b.parameters()[i].tensor.vec());
    differs |= a.parameters()[i].tensor.vec() != c.parameters()[i].tensor.vec();
  }
  EXPECT_TRUE(differs);
}

TEST(UNet, RejectsBadInputs) {
  const UNet<float> net(small_unet(), 1);
  EXPECT_THROW(net.forward(Tensor::zeros({1, 3, 15, 16}), {1}), ShapeError);
  EXPECT_THROW(net.forward(Tensor::zeros({1, 4, 16, 16}), {1}), ShapeError);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 3, 16, 16}), {1}), ShapeError);
  UNetConfig bad = small_unet();
  bad.widths.clear();
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TimestepEmbedding, SinusoidalLayout) {
  const auto e = timestep_embedding<double>({0, 7}, 8);
  EXPECT_EQ(e.shape(), (Shape{2, 8}));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(e[k], 0.0);
    EXPECT_EQ(e[4 + k], 1.0);
  }
  EXPECT_NEAR(e[8], std::sin(7.0), 1e-15);
}

TEST(Denoiser, PredictRejectsTimestepsOutsideSchedule) {
  const DenoiserModel<float> m(small_unet(), ScheduleConfig{}, 1);
  EXPECT_THROW(m.predict(Tensor::zeros({1, 3, 16, 16}), 0), ScheduleError);
  EXPECT_THROW(m.predict(Tensor::zeros({1, 3, 16, 16}), 1001), ScheduleError);
  const auto p = m.predict(Tensor::zeros({1, 3, 16, 16}), 1000);
  EXPECT_FALSE(p.v.defined());
}

TEST(Denoiser, TrainingIsDeterministicAndFitsTinyDataset) {
  const auto data = synthetic_dataset(4, 16, 5).images;
  DenoiserTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.steps = 60;
  cfg.adam.learning_rate = 2e-3;
  cfg.ema_decay = 0.0;
  cfg.seed = 6;
  std::vector<double> la, lb;
  DenoiserModel<float> a(small_unet(true), ScheduleConfig{}, 7), b(small_unet(true), ScheduleConfig{}, 7);
  train_denoiser(a, data, cfg, [&](const TrainLogEntry& e) { la.push_back(e.loss); });
  train_denoiser(b, data, cfg, [&](const TrainLogEntry& e) { lb.push_back(e.loss); });
  EXPECT_EQ(la, lb);
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    EXPECT_EQ(a.parameters()[i].tensor.vec(), b.parameters()[i].tensor.vec());
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += la[i];
    last += la[la.size() - 1 - i];
  }
  EXPECT_LT(last, 0.7 * first);
  EXPECT_THROW(train_denoiser(a, {}, cfg), std::invalid_argument);
}

TEST(Denoiser, EmaWeightsAreCopiedBack) {
  const auto data = synthetic_dataset(2, 16, 8).images;
  DenoiserTrainConfig cfg;
  cfg.batch_size = 2;
  cfg.steps = 1;
  cfg.ema_decay = 0.0;
  DenoiserModel<float> raw(small_unet(), ScheduleConfig{}, 9), averaged(small_unet(), ScheduleConfig{}, 9);
  std::vector<std::vector<float>> init;
  for (const auto& p : raw.parameters()) init.push_back(p.tensor.vec());
  train_denoiser(raw, data, cfg);
  cfg.ema_decay = 0.25;
  train_denoiser(averaged, data, cfg);
  // One update: shadow = 0.25 init + 0.75 trained.
  for (std::size_t i = 0; i < init.size(); ++i) {
    const auto r = raw.parameters()[i].tensor.vec(), a = averaged.parameters()[i].tensor.vec();
    for (std::size_t k = 0; k < r.size(); ++k) ASSERT_NEAR(a[k], 0.25 * init[i][k] + 0.75 * r[k], 1e-6);
  }
}

TEST(Sampling, LastStepIsNoiseless) {
  const auto s = respace(make_linear_schedule(100, 1e-4, 0.05), {1, 50, 100});
  Rng rng(10);
  const auto x = rng.randn<double>({2, 1, 2, 2});
  const auto eps = rng.randn<double>({2, 1, 2, 2});
  auto r1 = per_sample_rngs(1, 0, 2), r2 = per_sample_rngs(2, 0, 2);
  EXPECT_EQ(ancestral_step(x, eps, 1, s, r1).vec(), ancestral_step(x, eps, 1, s, r2).vec());
  EXPECT_NE(ancestral_step(x, eps, 2, s, r1).vec(), ancestral_step(x, eps, 2, s, r2).vec());
  EXPECT_THROW(add_reverse_noise(x, 2, s, r1 = per_sample_rngs(1, 0, 1)), ShapeError);
}

TEST(Sampling, UnconditionalOutputsImagesInUnitRange) {
  const DenoiserModel<float> m(small_unet(), ScheduleConfig{}, 11);
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 3));
  auto rngs = per_sample_rngs(3, 0, 2);
  const auto img = sample_unconditional(m, s, rngs, {3, 16, 16});
  EXPECT_EQ(img.shape(), (Shape{2, 3, 16, 16}));
  for (float v : img.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

}  // namespace
}  // namespace ddc
