#pragma once

// Image quality metrics, excess kurtosis and a Frechet distance over a
// fixed random convolutional feature extractor.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ddc/nn.hpp"
#include "ddc/ops.hpp"

namespace ddc {

inline constexpr double kPsnrCap = 100.0;

/// PSNR for images in [0, 1]; identical inputs give the 100 dB cap.
template <class T>
double psnr(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "psnr");
  double acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  const double mse = acc / double(a.numel());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// PSNR of each sample of two [N, ...] batches.
template <class T>
std::vector<double> psnr_per_image(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "psnr");
  std::vector<double> out;
  for (std::size_t i = 0; i < a.dim(0); ++i) out.push_back(psnr(slice_batch(a, i, 1), slice_batch(b, i, 1)));
  return out;
}

namespace detail {

inline const std::vector<double>& ssim_window() {
  static const std::vector<double> w = [] {
    std::vector<double> g(7);
    double total = 0;
    for (int i = 0; i < 7; ++i) {
      g[i] = std::exp(-double((i - 3) * (i - 3)) / (2.0 * 1.5 * 1.5));
      total += g[i];
    }
    for (auto& v : g) v /= total;
    return g;
  }();
  return w;
}

}  // namespace detail

/// Mean SSIM over channels and all valid 7x7 Gaussian windows (sigma 1.5).
/// Accepts [C, H, W] or [N, C, H, W] (averaged over every plane).
template <class T>
double ssim(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "ssim");
  if (a.rank() < 2) throw ShapeError("ssim needs at least 2-D images");
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  constexpr std::size_t K = 7;
  if (h < K || w < K) {
    throw ShapeError("ssim: image " + shape_string(a.shape()) + " smaller than the 7x7 window");
  }
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  const auto& g = detail::ssim_window();
  const std::size_t planes = a.numel() / (h * w), oh = h - K + 1, ow = w - K + 1;
  double total = 0;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* pa = a.data().data() + p * h * w;
    const T* pb = b.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t i = 0; i < K; ++i)
          for (std::size_t j = 0; j < K; ++j) {
            const double wt = g[i] * g[j];
            const double va = pa[(y + i) * w + x + j], vb = pb[(y + i) * w + x + j];
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += (2 * ma * mb + C1) * (2 * cov + C2) /
                 ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
      }
  }
  return total / double(planes * oh * ow);
}

/// Population excess kurtosis E[((x - mu) / sigma)^4] - 3 over all elements.
template <class T>
double kurtosis(const BasicTensor<T>& x) {
  const std::size_t n = x.numel();
  if (n < 2) throw std::invalid_argument("kurtosis needs at least 2 elements");
  double mu = 0;
  for (T v : x.data()) mu += v;
  mu /= double(n);
  double m2 = 0, m4 = 0;
  for (T v : x.data()) {
    const double d = double(v) - mu, d2 = d * d;
    m2 += d2;
    m4 += d2 * d2;
  }
  m2 /= double(n);
  m4 /= double(n);
  if (m2 == 0.0) throw NumericError("kurtosis of a constant tensor is undefined");
  return m4 / (m2 * m2) - 3.0;
}

/// Fixed, seeded random conv pyramid: 3->16, pool, 16->32, pool, 32->64.
/// Its weights never take gradients, but gradients flow to the input.
template <class T = float>
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kSeed = 0x5eedfea7;
  static constexpr std::size_t kFeatureDim = 64;

  explicit FeatureExtractor(std::size_t in_channels = 3) {
    Rng rng(kSeed);
    const std::size_t widths[3] = {16, 32, kFeatureDim};
    std::size_t c = in_channels;
    for (std::size_t w : widths) {
      // He-style uniform bound keeps activations from vanishing through ReLUs.
      const double bound = std::sqrt(6.0 / double(c * 9));
      weights_.push_back(uniform_init<T>(rng, {w, c, 3, 3}, bound));
      biases_.push_back(BasicTensor<T>::zeros({w}));
      c = w;
    }
  }

  /// Activations after each ReLU, for inputs in [0, 1] (scaled to [-1, 1] internally).
  std::vector<BasicTensor<T>> features(const BasicTensor<T>& x01) const {
    std::vector<BasicTensor<T>> out;
    auto h = add_scalar(scale(x01, T(2)), T(-1));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      if (l > 0) h = avg_pool2d(h, 2);
      h = relu(conv2d(h, weights_[l], biases_[l], 1, 1));
      out.push_back(h);
    }
    return out;
  }

  const std::vector<BasicTensor<T>>& weights() const { return weights_; }
  const std::vector<BasicTensor<T>>& biases() const { return biases_; }

  /// Spatially averaged final-layer features: [N, 64] as row-major doubles.
  std::vector<std::vector<double>> pooled(const BasicTensor<T>& x01) const {
    NoGradGuard guard;
    const auto f = features(x01).back();
    const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
    std::vector<std::vector<double>> rows(n, std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < hw; ++k) acc += f[(i * c + j) * hw + k];
        rows[i][j] = acc / double(hw);
      }
    return rows;
  }

 private:
  std::vector<BasicTensor<T>> weights_, biases_;
};

/// Frechet distance between Gaussian fits of two feature sets (rows = samples).
/// Covariances get +eps*I; the trace term uses sqrt(Sa) Sb sqrt(Sa).
inline double frechet_distance(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b, double eps = 1e-6) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("Frechet distance needs >= 2 samples per set");
  const std::size_t d = a.front().size();
  auto fit = [&](const std::vector<std::vector<double>>& rows, Eigen::VectorXd& mu,
                 Eigen::MatrixXd& cov) {
    Eigen::MatrixXd m(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != d) throw ShapeError("Frechet distance: ragged feature rows");
      for (std::size_t j = 0; j < d; ++j) m(i, j) = rows[i][j];
    }
    mu = m.colwise().mean().transpose();
    const Eigen::MatrixXd c = m.rowwise() - mu.transpose();
    cov = c.transpose() * c / double(rows.size() - 1);
    cov += eps * Eigen::MatrixXd::Identity(d, d);
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit(a, mu_a, cov_a);
  fit(b, mu_b, cov_b);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd prod = sqrt_a * cov_b * sqrt_a;
  prod = 0.5 * (prod + prod.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(prod, Eigen::EigenvaluesOnly);
  const double tr_sqrt = ep.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

inline constexpr std::size_t kFrechetRecommendedSamples = 128;

struct FrechetResult {
  double value = 0;
  /// Set when either set is smaller than the recommended 128 images.
  bool small_sample = false;
};

/// Frechet proxy between two image sets [N, 3, H, W] in [0, 1].
template <class T>
FrechetResult frechet_proxy(const BasicTensor<T>& set_a, const BasicTensor<T>& set_b,
                            const FeatureExtractor<T>& fx = FeatureExtractor<T>{}) {
  FrechetResult r;
  r.value = frechet_distance(fx.pooled(set_a), fx.pooled(set_b));
  r.small_sample = set_a.dim(0) < kFrechetRecommendedSamples || set_b.dim(0) < kFrechetRecommendedSamples;
  return r;
}

}  // namespace ddc
