#include <gtest/gtest.h>

#include <cmath>

#include "ddc/ddc_train.hpp"
#include "ddc/image_io.hpp"
#include "test_util.hpp"

namespace ddc {
namespace {

using test::TensorD;

// Composite Simpson integration of p log(p / q) over +-14 standard deviations of p.
double kl_quadrature(double m1, double s1, double m2, double s2) {
  auto logpdf = [](double x, double m, double s) {
    const double z = (x - m) / s;
    return -0.5 * z * z - std::log(s) - 0.5 * std::log(2 * M_PI);
  };
  auto f = [&](double x) {
    const double lp = logpdf(x, m1, s1);
    return std::exp(lp) * (lp - logpdf(x, m2, s2));
  };
  const double lo = m1 - 14 * s1, hi = m1 + 14 * s1;
  const int n = 40000;
  const double h = (hi - lo) / n;
  double acc = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

TEST(KlGaussian, ClosedFormMatchesQuadrature) {
  Rng rng(11);
  for (int i = 0; i < 50; ++i) {
    const double m1 = rng.uniform(-2, 2), m2 = rng.uniform(-2, 2);
    const double s1 = rng.uniform(0.2, 2), s2 = rng.uniform(0.2, 2);
    EXPECT_NEAR(kl_gaussian(m1, s1, m2, s2), kl_quadrature(m1, s1, m2, s2), 1e-8);
  }
  EXPECT_NEAR(kl_gaussian(0.3, 0.7, 0.3, 0.7), 0.0, 1e-15);
}

// A single-element loss_kl is exactly the KL between the forward marginal of
// x_{t-1} and the reverse step built from x0_y.
TEST(LossKl, ScalarCaseMatchesQuadrature) {
  const auto s = make_linear_schedule(1000, 1e-4, 0.02);
  Rng rng(12);
  for (int i = 0; i < 30; ++i) {
    const std::size_t t = std::size_t(rng.uniform_int(2, 1000));
    const double x0 = rng.uniform(-1, 1), x0_y = rng.uniform(-1, 1), xt = rng.uniform(-2, 2);
    const auto c = posterior_coeffs(t, s);
    const double ab_prev = s.alpha_bar(t - 1);
    const double expected = kl_quadrature(std::sqrt(ab_prev) * x0, std::sqrt(1 - ab_prev),
                                          c.c_x0 * x0_y + c.c_xt * xt, std::sqrt(c.beta_tilde));
    const auto got = loss_kl(TensorD({1, 1, 1, 1}, {x0_y}), TensorD({1, 1, 1, 1}, {xt}),
                             TensorD({1, 1, 1, 1}, {x0}), {t}, s);
    EXPECT_NEAR(got.item(), expected, 1e-6) << "t=" << t;
  }
}

TEST(LossKl, FirstStepContributesNothingAndMinimumAtTarget) {
  const auto s = make_linear_schedule(100, 1e-4, 0.05);
  const auto x0 = test::random_tensor({2, 1, 2, 2}, 1), xt = test::random_tensor({2, 1, 2, 2}, 2);
  EXPECT_EQ(loss_kl(test::random_tensor({2, 1, 2, 2}, 3), xt, x0, {1, 1}, s).item(), 0.0);
  // x0_y = x0 gives means that differ only by the x_t coefficient term; the
  // gradient vanishes at the mean-matching x0_y.
  const std::size_t t = 40;
  const auto c = posterior_coeffs(t, s);
  const double ab_prev = s.alpha_bar(t - 1);
  std::vector<double> best(x0.numel());
  for (std::size_t i = 0; i < best.size(); ++i) best[i] = (std::sqrt(ab_prev) * x0[i] - c.c_xt * xt[i]) / c.c_x0;
  auto x0_y = TensorD(x0.shape(), best).set_requires_grad(true);
  loss_kl(x0_y, xt, x0, {t, t}, s).backward();
  for (double g : x0_y.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(LossKl, EmpiricalVariantIsFiniteAndZeroAtFirstStep) {
  const auto s = make_linear_schedule(100, 1e-4, 0.05);
  Rng rng(3);
  const auto x0 = test::random_tensor({2, 3, 8, 8}, 4), xt = test::random_tensor({2, 3, 8, 8}, 5);
  const auto v = loss_kl_empirical(x0, xt, x0, {50, 80}, s, rng).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(v, 0.0);
  EXPECT_EQ(loss_kl_empirical(x0, xt, x0, {1, 1}, s, rng).item(), 0.0);
}

TEST(Losses, MseAndPerceptualVanishAtTarget) {
  const FeatureExtractor<double> fx;
  const auto x = test::random_tensor({2, 3, 8, 8}, 6);
  EXPECT_EQ(loss_mse(x, x).item(), 0.0);
  EXPECT_NEAR(loss_perceptual(x, x, fx).item(), 0.0, 1e-20);
  EXPECT_GT(loss_perceptual(x, test::random_tensor({2, 3, 8, 8}, 7), fx).item(), 0.0);
}

TEST(Losses, TotalLossGradients) {
  const auto s = make_linear_schedule(100, 1e-4, 0.05);
  const FeatureExtractor<double> fx;
  const auto x0 = test::random_tensor({2, 3, 8, 8}, 8), xt = test::random_tensor({2, 3, 8, 8}, 9);
  const std::vector<std::size_t> ts{20, 70};
  const auto r = test::check_gradients(
      [&](const std::vector<TensorD>& v) { return total_loss(v[0], xt, x0, ts, s, LossWeights{}, fx); },
      {test::random_tensor({2, 3, 8, 8}, 10)});
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Losses, BreakdownAndZeroWeights) {
  const auto s = make_linear_schedule(100, 1e-4, 0.05);
  const FeatureExtractor<double> fx;
  const auto x0 = test::random_tensor({1, 3, 8, 8}, 11), xt = test::random_tensor({1, 3, 8, 8}, 12);
  const auto x0_y = test::random_tensor({1, 3, 8, 8}, 13);
  LossBreakdown b;
  const auto total = total_loss(x0_y, xt, x0, {30}, s, LossWeights{}, fx, &b);
  EXPECT_NEAR(b.total, b.mse + 0.1 * b.perceptual + 1e-3 * b.kl, 1e-12);
  EXPECT_EQ(total.item(), b.total);
  LossBreakdown only_mse;
  total_loss(x0_y, xt, x0, {30}, s, LossWeights{1, 0, 0}, fx, &only_mse);
  EXPECT_EQ(only_mse.perceptual, 0.0);
  EXPECT_EQ(only_mse.kl, 0.0);
  EXPECT_THROW(total_loss(x0_y, xt, x0, {30}, s, LossWeights{0, 0, 0}, fx), std::invalid_argument);
  EXPECT_THROW(total_loss(x0_y, xt, x0, {30}, s, LossWeights{1, 0, 1}, fx, nullptr, KlMode::Empirical),
               std::invalid_argument);
}

TEST(TaskPool, GeneralizedHasSixTasks) {
  const auto pool = TaskPool::generalized();
  ASSERT_EQ(pool.tasks.size(), 6u);
  std::vector<std::string> names;
  for (const auto& t : pool.tasks) names.push_back(t.name());
  EXPECT_EQ(names, (std::vector<std::string>{"sr4", "sr8", "blur", "inpaint", "jpeg10", "denoise"}));
  EXPECT_EQ(pool.sigma_min, 0.0);
  EXPECT_EQ(pool.sigma_max, 0.1);
  EXPECT_THROW((TaskPool{{}, 0, 0.1}.validate()), std::invalid_argument);
  EXPECT_THROW((TaskPool{pool.tasks, 0.2, 0.1}.validate()), std::invalid_argument);
}

UNetConfig tiny_unet() {
  UNetConfig c;
  c.widths = {8, 16};
  c.blocks_per_level = 1;
  c.time_embed_dim = 16;
  return c;
}

TEST(TrainingInstance, LiftsEveryTaskToImageShape) {
  DenoiserModel<float> den(tiny_unet(), ScheduleConfig{}, 1);
  den.freeze();
  Rng rng(5);
  const auto images = stack_constant(synthetic_dataset(6, 16, 4).images);
  const auto inst = sample_training_instance(TaskPool::generalized(), images, den, rng);
  EXPECT_EQ(inst.y_lifted.shape(), images.shape());
  EXPECT_EQ(inst.x0_hat.shape(), images.shape());
  EXPECT_EQ(inst.ops.size(), images.dim(0));
  for (double s : inst.sigmas) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 0.1);
  }
  for (float v : inst.x0_hat.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_FALSE(inst.x0_hat.requires_grad());
}

TEST(TrainDdc, LeavesDenoiserUntouched) {
  DenoiserModel<float> den(tiny_unet(), ScheduleConfig{}, 1);
  den.freeze();
  std::vector<std::vector<float>> before;
  for (const auto& p : den.parameters()) before.push_back(p.tensor.vec());
  ConsistencyModel<float> model(tiny_unet(), 2);
  std::vector<std::vector<float>> init;
  for (const auto& p : model.parameters()) init.push_back(p.tensor.vec());
  const auto data = synthetic_dataset(8, 16, 3).images;
  DdcTrainConfig cfg;
  cfg.batch_size = 4;
  cfg.steps = 3;
  cfg.ema_decay = 0.5;
  std::vector<DdcLogEntry> log;
  train_ddc(model, den, data, TaskPool::generalized(), cfg, [&](const DdcLogEntry& e) { log.push_back(e); });
  ASSERT_EQ(log.size(), 3u);
  for (const auto& e : log) EXPECT_TRUE(std::isfinite(e.loss.total));
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(den.parameters()[i].tensor.vec(), before[i]);
  bool changed = false;
  for (std::size_t i = 0; i < init.size(); ++i) changed |= model.parameters()[i].tensor.vec() != init[i];
  EXPECT_TRUE(changed);
}

}  // namespace
}  // namespace ddc
