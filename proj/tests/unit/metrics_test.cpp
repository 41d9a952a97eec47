#include <gtest/gtest.h>

#include <cmath>

#include "ddc/metrics.hpp"
#include "test_util.hpp"

namespace ddc {
namespace {

using test::TensorD;

// Smooth pattern and a structured perturbation of it, both in [0, 1].
TensorD pattern(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = (std::sin(0.3 * double(i) + 0.7 * double(j)) + 1) / 2;
  return TensorD({1, h, w}, v);
}

TensorD perturbed(const TensorD& a, std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double x = a[i * w + j] + 0.2 * std::cos(1.3 * double(i) - 0.4 * double(j * j));
      v[i * w + j] = std::clamp(x, 0.0, 1.0);
    }
  return TensorD({1, h, w}, v);
}

TEST(Psnr, KnownMse) {
  const auto a = TensorD::full({1, 3, 4, 4}, 0.5);
  const auto b = TensorD::full({1, 3, 4, 4}, 0.6);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_THROW(psnr(a, TensorD::zeros({1, 3, 4, 5})), ShapeError);
}

TEST(Psnr, PerImage) {
  const auto a = TensorD::zeros({2, 1, 2, 2});
  const auto b = TensorD({2, 1, 2, 2}, {0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01});
  const auto p = psnr_per_image(a, b);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_NEAR(p[0], 20.0, 1e-9);
  EXPECT_NEAR(p[1], 40.0, 1e-9);
}

// Reference values from scipy.ndimage.gaussian_filter (sigma 1.5, radius 3)
// local statistics, cropped to windows fully inside the image.
TEST(Ssim, MatchesReferenceImplementation) {
  const auto a = pattern(16, 20);
  EXPECT_NEAR(ssim(a, perturbed(a, 16, 20)), 0.9097224051484508, 1e-9);
  std::vector<double> c(a.numel());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.6 * a[i] + 0.1;
  EXPECT_NEAR(ssim(a, TensorD(a.shape(), c)), 0.8641538002832226, 1e-9);
}

TEST(Ssim, IdentityAndSymmetry) {
  const auto a = pattern(16, 16);
  const auto b = perturbed(a, 16, 16);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
  EXPECT_LT(ssim(a, b), 1.0);
  EXPECT_THROW(ssim(TensorD::zeros({1, 6, 6}), TensorD::zeros({1, 6, 6})), ShapeError);
}

TEST(Kurtosis, RademacherIsMinusTwo) {
  std::vector<double> v(1000);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? 1.0 : -1.0;
  EXPECT_NEAR(kurtosis(TensorD({1000}, v)), -2.0, 1e-12);
}

TEST(Kurtosis, UniformIsMinusSixFifths) {
  // Evenly spaced grid: kurtosis of a discrete uniform on n points
  // is -6 (n^2 + 1) / (5 (n^2 - 1)).
  const std::size_t n = 101;
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = double(i);
  const double expected = -6.0 * double(n * n + 1) / (5.0 * double(n * n - 1));
  EXPECT_NEAR(kurtosis(TensorD({n}, v)), expected, 1e-12);
}

TEST(Kurtosis, GaussianSampleNearZeroAndShiftScaleInvariant) {
  Rng rng(7);
  const auto x = rng.randn<double>({200000});
  EXPECT_NEAR(kurtosis(x), 0.0, 0.05);
  EXPECT_NEAR(kurtosis(add_scalar(scale(x, 3.0), 2.0)), kurtosis(x), 1e-9);
  EXPECT_THROW(kurtosis(TensorD::full({10}, 1.0)), NumericError);
}

TEST(Frechet, MatchesReferenceOnSmallFeatureSets) {
  const std::size_t n = 10, d = 4;
  std::vector<std::vector<double>> a(n, std::vector<double>(d)), b = a;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      a[i][j] = std::sin(0.7 * double(i) + 1.3 * double(j)) + 0.1 * double(j);
      b[i][j] = std::cos(0.4 * double(i * j) + 0.5) + 0.3;
    }
  // Computed with scipy.linalg.sqrtm on the same data.
  EXPECT_NEAR(frechet_distance(a, b), 2.6772825970404965, 1e-7);
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-9);
}

TEST(Frechet, OneDimensionalClosedForm) {
  // Two samples each: mean and (unbiased) variance are exact.
  const std::vector<std::vector<double>> a{{0.0}, {2.0}}, b{{5.0}, {11.0}};
  const double va = 2.0 + 1e-6, vb = 18.0 + 1e-6;
  const double expected = (1.0 - 8.0) * (1.0 - 8.0) + va + vb - 2 * std::sqrt(va * vb);
  EXPECT_NEAR(frechet_distance(a, b), expected, 1e-9);
  EXPECT_THROW(frechet_distance({{1.0}}, b), std::invalid_argument);
}

TEST(Frechet, ProxyFlagsSmallSamples) {
  Rng rng(9);
  const auto x = rng.randn<float>({8, 3, 16, 16});
  const auto r = frechet_proxy(x, x);
  EXPECT_TRUE(r.small_sample);
  EXPECT_NEAR(r.value, 0.0, 1e-6);
  const FeatureExtractor<float> fx;
  EXPECT_EQ(fx.pooled(x).front().size(), FeatureExtractor<float>::kFeatureDim);
}

TEST(FeatureExtractor, FixedWeightsAreDeterministic) {
  const FeatureExtractor<float> a, b;
  ASSERT_EQ(a.weights().size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(a.weights()[l].vec(), b.weights()[l].vec());
}

}  // namespace
}  // namespace ddc
