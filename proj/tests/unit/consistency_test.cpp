#include <gtest/gtest.h>

#include <cmath>

#include "ddc/consistency.hpp"
#include "test_util.hpp"

namespace ddc {
namespace {

using test::TensorD;

UNetConfig tiny_unet() {
  UNetConfig c;
  c.widths = {4, 8};
  c.blocks_per_level = 1;
  c.max_groups = 2;
  c.time_embed_dim = 8;
  return c;
}

// Zero-initialised output convolutions make fresh networks constant; give
// every parameter a random value so gradients pass through all of them.
template <class Params>
void randomize(Params& params, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_data()) v = std::remove_reference_t<decltype(v)>(rng.uniform(-scale, scale));
}

TEST(DdcUpdate, NoisyImageFormMatchesTwoStageForm) {
  const auto parent = make_linear_schedule(1000, 1e-4, 0.02);
  for (const auto& s : {respace(parent, uniform_subsequence(1000, 1000)), respace(parent, uniform_subsequence(1000, 5))}) {
    for (std::size_t k = 1; k <= s.num_steps(); ++k) {
      const auto x_t = test::random_tensor({2, 3, 4, 4}, 3 * k, -2, 2);
      const auto eps = test::random_tensor({2, 3, 4, 4}, 3 * k + 1, -2, 2);
      const auto delta = test::random_tensor({2, 3, 4, 4}, 3 * k + 2);
      const auto two_stage = posterior_mean(sub(tweedie_x0(x_t, eps, k, s), delta), x_t, k, s);
      const auto direct = ddc_noisy_update_mean(x_t, eps, delta, k, s);
      for (std::size_t i = 0; i < direct.numel(); ++i) ASSERT_NEAR(direct[i], two_stage[i], 1e-5) << "k=" << k;
    }
  }
}

TEST(Ddnm, CleanMeasurementIsReproducedExactly) {
  Rng rng(4);
  const ImageGeometry g{3, 16, 16};
  for (const auto& spec : {OperatorSpec::super_res(4), OperatorSpec::inpaint(), OperatorSpec::gaussian_blur(),
                           OperatorSpec::denoise()}) {
    const DegradationOperator op(spec, g, &rng);
    const auto y = op.apply(test::random_tensor({1, 3, 16, 16}, 5, 0, 1));
    const auto x0 = test::random_tensor({1, 3, 16, 16}, 6);
    const auto corrected = to_image_range(ddnm_update(x0, y, op, 1.0));
    const auto again = op.apply(corrected);
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(again[i], y[i], 1e-10) << spec.name();
    // The null-space part of the estimate is kept.
    const auto u = to_image_range(x0);
    const auto keep = sub(u, op.pseudo_inverse_apply(op.apply(u)));
    const auto kept = sub(corrected, op.pseudo_inverse_apply(op.apply(corrected)));
    for (std::size_t i = 0; i < keep.numel(); ++i) ASSERT_NEAR(kept[i], keep[i], 1e-10) << spec.name();
  }
}

TEST(Ddnm, RejectsNonlinearOperators) {
  const DegradationOperator op(OperatorSpec::jpeg(10), {3, 8, 8});
  EXPECT_THROW(ddnm_update(TensorD::zeros({1, 3, 8, 8}), TensorD::zeros({1, 3, 8, 8}), op, 1.0),
               UnsupportedOperation);
  EXPECT_EQ(default_ddnm_scale(0.0), 1.0);
  EXPECT_EQ(default_ddnm_scale(0.05), 0.5);
}

// Gradient of ||y - A(x0_hat(x_t))||^2 with respect to x_t, through the noise predictor.
TEST(Dps, GradientThroughPredictorMatchesFiniteDifferences) {
  DenoiserModel<double> m(tiny_unet(), ScheduleConfig{}, 7);
  randomize(m.parameters(), 8);
  m.freeze();
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 5));
  const std::size_t k = 3;
  const DegradationOperator op(OperatorSpec::super_res(2), {3, 8, 8});
  const auto y = op.apply(test::random_tensor({1, 3, 8, 8}, 9, 0, 1));
  const auto r = test::check_gradients(
      [&](const std::vector<TensorD>& v) {
        const auto eps = m.predict(v[0], s.timestep(k)).eps;
        return sum_squares(sub(y, op.apply_graph(to_image_range(tweedie_x0(v[0], eps, k, s)))));
      },
      {test::random_tensor({1, 3, 8, 8}, 10)});
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(Dps, UpdateStepsAgainstGradient) {
  DenoiserModel<double> m(tiny_unet(), ScheduleConfig{}, 11);
  randomize(m.parameters(), 12);
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 5));
  const DegradationOperator op(OperatorSpec::super_res(2), {3, 8, 8});
  const auto y = op.apply(test::random_tensor({1, 3, 8, 8}, 13, 0, 1));
  const auto x_t = test::random_tensor({1, 3, 8, 8}, 14);
  const auto x_prev = test::random_tensor({1, 3, 8, 8}, 15);
  EXPECT_THROW(dps_update(x_prev, x_t, y, op, 1.0, m, 3, s), std::logic_error);
  m.freeze();
  const double zeta = 0.5;
  const auto out = dps_update(x_prev, x_t, y, op, zeta, m, 3, s);
  // Oracle: same step built from an explicit gradient evaluation.
  auto leaf = x_t.detach().set_requires_grad(true);
  const auto loss = sum_squares(sub(y, op.apply_graph(to_image_range(tweedie_x0(leaf, m.predict(leaf, s.timestep(3)).eps, 3, s)))));
  loss.backward();
  const double norm = std::sqrt(loss.item());
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], x_prev[i] - zeta / norm * leaf.grad()[i], 1e-12);
  EXPECT_THROW(dps_update(x_prev, x_t, y, op, 0.0, m, 3, s), std::invalid_argument);
}

TEST(DeltaNetwork, ComposedForwardGradients) {
  ConsistencyModel<double> model(tiny_unet(), 16);
  randomize(model.parameters(), 17);
  const std::vector<std::size_t> ts{30, 700};
  const auto w = test::random_tensor({2, 3, 8, 8}, 18);
  auto f = [&](const TensorD& x0_hat, const TensorD& y_lifted) {
    return sum(mul(ddc_update(x0_hat, y_lifted, ts, model), w));
  };
  const auto r = test::check_gradients([&](const std::vector<TensorD>& v) { return f(v[0], v[1]); },
                                       {test::random_tensor({2, 3, 8, 8}, 19), test::random_tensor({2, 3, 8, 8}, 20, 0, 1)});
  EXPECT_LE(r.max_rel_error, 1e-4);

  // Parameter gradients, spot-checked on a few entries of every tensor.
  const auto x0 = test::random_tensor({2, 3, 8, 8}, 21), y = test::random_tensor({2, 3, 8, 8}, 22, 0, 1);
  zero_grads(model.parameters());
  f(x0, y).backward();
  double worst = 0;
  const double h = 1e-6;
  for (auto& p : model.parameters()) {
    const std::vector<double> grad(p.tensor.grad().begin(), p.tensor.grad().end());
    for (std::size_t i = 0; i < p.tensor.numel(); i += std::max<std::size_t>(1, p.tensor.numel() / 3)) {
      auto data = p.tensor.mutable_data();
      const double orig = data[i];
      NoGradGuard guard;
      data[i] = orig + h;
      const double up = f(x0, y).item();
      data[i] = orig - h;
      const double down = f(x0, y).item();
      data[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double g = grad.empty() ? 0.0 : grad[i];
      worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-3}));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(DeltaNetwork, InputChannelsAreNormalised) {
  UNetConfig c = tiny_unet();
  c.learn_variance = true;
  const ConsistencyModel<float> model(c, 1);
  EXPECT_EQ(model.net().config().in_channels, 6u);
  EXPECT_FALSE(model.net().config().learn_variance);
}

TEST(Solve, NoneStrategyEqualsUnconditionalSampler) {
  DenoiserModel<float> m(tiny_unet(), ScheduleConfig{}, 23);
  randomize(m.parameters(), 24, 0.1);
  m.freeze();
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 5));
  const DegradationOperator op(OperatorSpec::super_res(4), {3, 16, 16});
  const auto y = op.apply(Tensor::full({2, 3, 16, 16}, 0.5f));
  auto rngs_a = per_sample_rngs(5, 0, 2), rngs_b = per_sample_rngs(5, 0, 2);
  const auto a = solve(y, op, ConsistencyStrategy<float>::none(), m, s, rngs_a);
  const auto b = sample_unconditional(m, s, rngs_b, {3, 16, 16});
  EXPECT_EQ(a.vec(), b.vec());
}

TEST(Solve, BatchingDoesNotChangeResults) {
  DenoiserModel<float> m(tiny_unet(), ScheduleConfig{}, 25);
  randomize(m.parameters(), 26, 0.1);
  m.freeze();
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 4));
  const DegradationOperator op(OperatorSpec::super_res(4), {3, 16, 16});
  const auto x = Tensor::cast_from(test::random_tensor({2, 3, 16, 16}, 27, 0, 1));
  const auto y = op.apply(x);
  for (const auto& strategy : {ConsistencyStrategy<float>::ddnm(), ConsistencyStrategy<float>::dps(0.5)}) {
    auto both = per_sample_rngs(9, 0, 2);
    const auto batched = solve(y, op, strategy, m, s, both);
    for (std::size_t i = 0; i < 2; ++i) {
      auto one = per_sample_rngs(9, i, 1);
      const auto single = solve(slice_batch(y, i, 1), op, strategy, m, s, one);
      const auto part = slice_batch(batched, i, 1);
      for (std::size_t j = 0; j < single.numel(); ++j) ASSERT_NEAR(single[j], part[j], 1e-5);
    }
  }
}

TEST(Solve, OutputInUnitRange) {
  DenoiserModel<float> m(tiny_unet(), ScheduleConfig{}, 28);
  randomize(m.parameters(), 29, 0.1);
  m.freeze();
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 5));
  const DegradationOperator op(OperatorSpec::super_res(4), {3, 16, 16});
  const auto x = Tensor::cast_from(test::random_tensor({1, 3, 16, 16}, 30, 0.2, 0.8));
  const auto y = op.apply(x);
  auto rngs = per_sample_rngs(1, 0, 1);
  const auto out = solve(y, op, ConsistencyStrategy<float>::ddnm(), m, s, rngs);
  for (float v : out.data()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Solve, IncompatibleStrategiesThrow) {
  DenoiserModel<float> m(tiny_unet(), ScheduleConfig{}, 31);
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 2));
  const DegradationOperator jpeg(OperatorSpec::jpeg(10), {3, 8, 8});
  auto rngs = per_sample_rngs(1, 0, 1);
  EXPECT_THROW(solve(Tensor::zeros({1, 3, 8, 8}), jpeg, ConsistencyStrategy<float>::ddnm(), m, s, rngs),
               UnsupportedOperation);
  ConsistencyStrategy<float> ddc;
  ddc.kind = StrategyKind::DDC;
  EXPECT_THROW(solve(Tensor::zeros({1, 3, 8, 8}), jpeg, ddc, m, s, rngs), std::invalid_argument);
  auto two = per_sample_rngs(1, 0, 2);
  EXPECT_THROW(solve(Tensor::zeros({1, 3, 8, 8}), jpeg, ConsistencyStrategy<float>::none(), m, s, two), ShapeError);
  EXPECT_THROW(parse_strategy("magic"), std::invalid_argument);
  EXPECT_EQ(parse_strategy("ddc"), StrategyKind::DDC);
  EXPECT_EQ(strategy_name(StrategyKind::DDNM), "ddnm");
}

TEST(Solve, KurtosisTrajectoryHasOnePointPerStep) {
  DenoiserModel<float> m(tiny_unet(), ScheduleConfig{}, 32);
  randomize(m.parameters(), 33, 0.1);
  m.freeze();
  const auto s = respace(m.schedule(), uniform_subsequence(1000, 6));
  const DegradationOperator op(OperatorSpec::super_res(4), {3, 16, 16});
  auto rngs = per_sample_rngs(2, 0, 1);
  const auto series =
      kurtosis_trajectory(op.apply(Tensor::full({1, 3, 16, 16}, 0.3f)), op, ConsistencyStrategy<float>::dps(), m, s, rngs);
  ASSERT_EQ(series.size(), 6u);
  EXPECT_EQ(series.front().step, 6u);
  EXPECT_EQ(series.front().timestep, 1000u);
  EXPECT_EQ(series.back().step, 1u);
}

TEST(Lift, MeasurementShapes) {
  const DegradationOperator sr(OperatorSpec::super_res(4), {3, 16, 16});
  EXPECT_EQ(lift_measurement(Tensor::zeros({2, 3, 4, 4}), sr).shape(), (Shape{2, 3, 16, 16}));
  const DegradationOperator jpeg(OperatorSpec::jpeg(10), {3, 16, 16});
  EXPECT_EQ(lift_measurement(Tensor::zeros({2, 3, 16, 16}), jpeg).shape(), (Shape{2, 3, 16, 16}));
  EXPECT_THROW(lift_measurement(Tensor::zeros({2, 3, 8, 8}), jpeg), ShapeError);
}

}  // namespace
}  // namespace ddc
