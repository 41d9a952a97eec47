#pragma once

// Degradation operators for image inverse problems.
//
// Every operator acts identically on each channel plane of an NCHW batch.
// Linear kinds expose their adjoint and Moore-Penrose pseudo-inverse; the
// JPEG kind is a deterministic nonlinear map (no bitstream coding).

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/ops.hpp"
#include "ddc/random.hpp"

namespace ddc {

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OperatorKind { SuperRes, GaussianBlur, Inpaint, Jpeg, Denoise };
enum class DownsampleKernel { AveragePool, Bicubic };

/// Task description; instantiated into a DegradationOperator for a given image geometry.
struct OperatorSpec {
  OperatorKind kind = OperatorKind::Denoise;
  std::size_t factor = 4;                              // SuperRes
  DownsampleKernel kernel = DownsampleKernel::AveragePool;
  std::size_t kernel_size = 9;                         // GaussianBlur
  double blur_sigma = 1.5;
  double spectral_floor = 3e-2;                        // blur spectrum truncation
  double mask_ratio = 0.92;                            // Inpaint: fraction of pixels removed
  int quality = 10;                                    // Jpeg

  static OperatorSpec super_res(std::size_t f, DownsampleKernel k = DownsampleKernel::AveragePool) {
    OperatorSpec s;
    s.kind = OperatorKind::SuperRes;
    s.factor = f;
    s.kernel = k;
    return s;
  }
  static OperatorSpec gaussian_blur(std::size_t size = 9, double sigma = 1.5) {
    OperatorSpec s;
    s.kind = OperatorKind::GaussianBlur;
    s.kernel_size = size;
    s.blur_sigma = sigma;
    return s;
  }
  static OperatorSpec inpaint(double ratio = 0.92) {
    OperatorSpec s;
    s.kind = OperatorKind::Inpaint;
    s.mask_ratio = ratio;
    return s;
  }
  static OperatorSpec jpeg(int quality = 10) {
    OperatorSpec s;
    s.kind = OperatorKind::Jpeg;
    s.quality = quality;
    return s;
  }
  static OperatorSpec denoise() { return {}; }

  bool is_linear() const { return kind != OperatorKind::Jpeg; }

  std::string name() const {
    switch (kind) {
      case OperatorKind::SuperRes:
        return "sr" + std::to_string(factor) + (kernel == DownsampleKernel::Bicubic ? "_bicubic" : "");
      case OperatorKind::GaussianBlur: return "blur";
      case OperatorKind::Inpaint: return "inpaint";
      case OperatorKind::Jpeg: return "jpeg" + std::to_string(quality);
      case OperatorKind::Denoise: return "denoise";
    }
    return "unknown";
  }
};

/// Image geometry of a single sample: channels, height, width.
struct ImageGeometry {
  std::size_t channels = 3, height = 32, width = 32;
  Shape shape() const { return {channels, height, width}; }
  std::size_t plane() const { return height * width; }
  bool operator==(const ImageGeometry&) const = default;
};

namespace detail {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline const std::array<int, 64>& jpeg_luminance_table() {
  static const std::array<int, 64> table = {
      16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
      14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
      18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
      49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  return table;
}

/// Orthonormal 8-point DCT-II matrix.
inline const MatD& dct8() {
  static const MatD d = [] {
    MatD m(8, 8);
    for (int u = 0; u < 8; ++u)
      for (int x = 0; x < 8; ++x) {
        const double c = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        m(u, x) = c * std::cos((2.0 * x + 1.0) * u * M_PI / 16.0);
      }
    return m;
  }();
  return d;
}

/// Keys cubic convolution kernel, a = -0.5.
inline double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

/// Antialiased bicubic downsampling matrix (n / f) x n with edge clamping.
inline MatD bicubic_matrix(std::size_t n, std::size_t f) {
  const std::size_t m = n / f;
  MatD d = MatD::Zero(m, n);
  const double support = 2.0 * double(f);
  for (std::size_t i = 0; i < m; ++i) {
    const double center = (double(i) + 0.5) * double(f) - 0.5;
    const auto lo = std::ptrdiff_t(std::floor(center - support));
    const auto hi = std::ptrdiff_t(std::ceil(center + support));
    double total = 0;
    for (std::ptrdiff_t j = lo; j <= hi; ++j) {
      const double w = cubic_weight((double(j) - center) / double(f));
      if (w == 0.0) continue;
      const auto jj = std::size_t(std::clamp<std::ptrdiff_t>(j, 0, std::ptrdiff_t(n) - 1));
      d(i, jj) += w;
      total += w;
    }
    d.row(i) /= total;
  }
  return d;
}

inline MatD pinv_svd(const MatD& a, double rel_tol = 1e-10) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double tol = rel_tol * (s.size() ? s(0) : 0.0);
  Eigen::VectorXd inv(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) inv(i) = s(i) > tol ? 1.0 / s(i) : 0.0;
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Symmetric circulant matrix of a centred 1-D kernel wrapped onto n samples.
inline MatD circulant(const std::vector<double>& g, std::size_t n) {
  MatD c = MatD::Zero(n, n);
  const auto r = std::ptrdiff_t(g.size() / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < g.size(); ++m) {
      const std::ptrdiff_t j =
          ((std::ptrdiff_t(i) + std::ptrdiff_t(m) - r) % std::ptrdiff_t(n) + std::ptrdiff_t(n)) %
          std::ptrdiff_t(n);
      c(i, std::size_t(j)) += g[m];
    }
  return c;
}

}  // namespace detail

/// Normalised 1-D Gaussian taps; the 2-D kernel is their outer product.
inline std::vector<double> gaussian_taps(std::size_t size, double sigma) {
  if (size % 2 == 0) throw std::invalid_argument("blur kernel size must be odd");
  std::vector<double> g(size);
  const double r = double(size / 2);
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = double(i) - r;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

/// Quantisation table for quality factor QF in [1, 100].
inline std::array<double, 64> jpeg_quant_table(int quality) {
  if (quality < 1 || quality > 100) {
    throw std::invalid_argument("JPEG quality factor " + std::to_string(quality) +
                                " outside [1, 100]");
  }
  const double scale = quality < 50 ? 5000.0 / quality : 200.0 - 2.0 * quality;
  std::array<double, 64> q{};
  const auto& base = detail::jpeg_luminance_table();
  for (std::size_t i = 0; i < 64; ++i)
    q[i] = std::max(1.0, std::round(base[i] * scale / 100.0));
  return q;
}

/// Blockwise DCT quantisation of one plane with values in [0, 1].
inline void jpeg_plane(std::span<const double> in, std::span<double> out, std::size_t h,
                       std::size_t w, const std::array<double, 64>& q) {
  using detail::MatD;
  const MatD& d = detail::dct8();
  const std::size_t hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  MatD block(8, 8);
  for (std::size_t by = 0; by < hp; by += 8)
    for (std::size_t bx = 0; bx < wp; bx += 8) {
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t sy = std::min(by + y, h - 1), sx = std::min(bx + x, w - 1);
          block(y, x) = in[sy * w + sx] * 255.0 - 128.0;
        }
      MatD coef = d * block * d.transpose();
      for (std::size_t i = 0; i < 64; ++i) {
        double& c = coef.data()[i];
        c = std::round(c / q[i]) * q[i];
      }
      block = d.transpose() * coef * d;
      for (std::size_t y = 0; y < 8 && by + y < h; ++y)
        for (std::size_t x = 0; x < 8 && bx + x < w; ++x)
          out[(by + y) * w + bx + x] = std::clamp((block(y, x) + 128.0) / 255.0, 0.0, 1.0);
    }
}

class DegradationOperator {
 public:
  DegradationOperator() = default;

  /// `rng` is only consumed by Inpaint (mask sampling).
  DegradationOperator(const OperatorSpec& spec, ImageGeometry geom, Rng* rng = nullptr)
      : spec_(spec), in_(geom), out_(geom) {
    using detail::MatD;
    switch (spec.kind) {
      case OperatorKind::SuperRes: {
        if (spec.factor == 0 || geom.height % spec.factor || geom.width % spec.factor) {
          throw ShapeError("super-resolution factor " + std::to_string(spec.factor) +
                           " does not divide " + shape_string(geom.shape()));
        }
        out_.height = geom.height / spec.factor;
        out_.width = geom.width / spec.factor;
        if (spec.kernel == DownsampleKernel::Bicubic) {
          rows_ = std::make_shared<MatD>(detail::bicubic_matrix(geom.height, spec.factor));
          cols_ = std::make_shared<MatD>(detail::bicubic_matrix(geom.width, spec.factor));
          rows_pinv_ = std::make_shared<MatD>(detail::pinv_svd(*rows_));
          cols_pinv_ = std::make_shared<MatD>(detail::pinv_svd(*cols_));
        }
        break;
      }
      case OperatorKind::GaussianBlur: {
        const auto g = gaussian_taps(spec.kernel_size, spec.blur_sigma);
        auto eig = [&](std::size_t n, std::shared_ptr<const MatD>& basis, std::vector<double>& values) {
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(detail::circulant(g, n));
          basis = std::make_shared<MatD>(es.eigenvectors());
          values.assign(es.eigenvalues().data(), es.eigenvalues().data() + n);
        };
        eig(geom.height, rows_, eig_rows_);
        eig(geom.width, cols_, eig_cols_);
        break;
      }
      case OperatorKind::Inpaint: {
        if (!rng) throw std::invalid_argument("inpainting operator needs an rng for its mask");
        mask_.resize(geom.plane());
        for (auto& m : mask_) m = rng->bernoulli(1.0 - spec.mask_ratio) ? 1.0 : 0.0;
        break;
      }
      case OperatorKind::Jpeg:
        quant_ = jpeg_quant_table(spec.quality);
        break;
      case OperatorKind::Denoise:
        break;
    }
  }

  /// Inpainting with an explicit mask (1 = observed), shared by all channels.
  static DegradationOperator inpaint_with_mask(ImageGeometry geom, std::vector<double> mask) {
    if (mask.size() != geom.plane()) throw ShapeError("inpainting mask size mismatch");
    DegradationOperator op;
    op.spec_ = OperatorSpec::inpaint();
    op.in_ = op.out_ = geom;
    for (double m : mask)
      if (m != 0.0 && m != 1.0) throw std::invalid_argument("inpainting mask must be binary");
    op.mask_ = std::move(mask);
    return op;
  }

  const OperatorSpec& spec() const { return spec_; }
  OperatorKind kind() const { return spec_.kind; }
  bool is_linear() const { return spec_.is_linear(); }
  const ImageGeometry& input_geometry() const { return in_; }
  const ImageGeometry& output_geometry() const { return out_; }
  const std::vector<double>& mask() const { return mask_; }
  std::string name() const { return spec_.name(); }

  Shape output_shape(std::size_t batch) const {
    return {batch, out_.channels, out_.height, out_.width};
  }
  Shape input_shape(std::size_t batch) const {
    return {batch, in_.channels, in_.height, in_.width};
  }

  /// y = A(x) for x[N, C, H, W].
  template <class T>
  BasicTensor<T> apply(const BasicTensor<T>& x) const {
    const std::size_t n = check_input(x);
    std::vector<T> out(shape_numel(output_shape(n)));
    forward_raw<T>(x.data(), out);
    return BasicTensor<T>(output_shape(n), std::move(out));
  }

  /// A(x) recorded on the autodiff graph. Linear kinds backpropagate through
  /// the exact adjoint; JPEG uses a straight-through gradient masked by the
  /// output clamp.
  template <class T>
  BasicTensor<T> apply_graph(const BasicTensor<T>& x) const {
    const std::size_t n = check_input(x);
    auto self = *this;
    if (is_linear()) {
      return linear_map<T>(
          x, output_shape(n), [self](std::span<const T> in, std::span<T> out) { self.forward_raw<T>(in, out); },
          [self](std::span<const T> in, std::span<T> out) { self.adjoint_raw<T>(in, out); },
          "degrade_" + name());
    }
    return custom_map<T>(
        x, output_shape(n), [self](std::span<const T> in, std::span<T> out) { self.forward_raw<T>(in, out); },
        [](std::span<const T>, std::span<const T> y, std::span<const T> dy, std::span<T> dx) {
          for (std::size_t i = 0; i < dx.size(); ++i)
            if (y[i] > T(0) && y[i] < T(1)) dx[i] += dy[i];
        },
        "degrade_" + name());
  }

  /// A^T y.
  template <class T>
  BasicTensor<T> adjoint(const BasicTensor<T>& y) const {
    require_linear("adjoint");
    const std::size_t n = check_output(y);
    std::vector<T> out(shape_numel(input_shape(n)));
    adjoint_raw<T>(y.data(), out);
    return BasicTensor<T>(input_shape(n), std::move(out));
  }

  /// A^+ y (Moore-Penrose pseudo-inverse).
  template <class T>
  BasicTensor<T> pseudo_inverse_apply(const BasicTensor<T>& y) const {
    require_linear("pseudo_inverse_apply");
    const std::size_t n = check_output(y);
    std::vector<T> out(shape_numel(input_shape(n)));
    per_plane<T>(y.data(), out, n, out_.plane(), in_.plane(),
                 [this](std::span<const double> a, std::span<double> b) { pinv_plane(a, b); });
    return BasicTensor<T>(input_shape(n), std::move(out));
  }

 private:
  void require_linear(const char* what) const {
    if (!is_linear()) throw UnsupportedOperation(std::string(what) + " is undefined for " + name());
  }

  template <class T>
  std::size_t check_input(const BasicTensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != in_.channels || x.dim(2) != in_.height ||
        x.dim(3) != in_.width) {
      throw ShapeError(name() + ": input " + shape_string(x.shape()) + " does not match " +
                       shape_string(in_.shape()));
    }
    return x.dim(0);
  }

  template <class T>
  std::size_t check_output(const BasicTensor<T>& y) const {
    if (y.rank() != 4 || y.dim(1) != out_.channels || y.dim(2) != out_.height ||
        y.dim(3) != out_.width) {
      throw ShapeError(name() + ": measurement " + shape_string(y.shape()) + " does not match " +
                       shape_string(out_.shape()));
    }
    return y.dim(0);
  }

  template <class T, class F>
  void per_plane(std::span<const T> in, std::span<T> out, std::size_t n, std::size_t in_plane,
                 std::size_t out_plane, F f) const {
    std::vector<double> a(in_plane), b(out_plane);
    const std::size_t planes = n * in_.channels;
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t i = 0; i < in_plane; ++i) a[i] = double(in[p * in_plane + i]);
      std::fill(b.begin(), b.end(), 0.0);
      f(std::span<const double>(a), std::span<double>(b));
      for (std::size_t i = 0; i < out_plane; ++i) out[p * out_plane + i] = T(b[i]);
    }
  }

  template <class T>
  void forward_raw(std::span<const T> in, std::span<T> out) const {
    const std::size_t n = in.size() / (in_.channels * in_.plane());
    per_plane<T>(in, out, n, in_.plane(), out_.plane(),
                 [this](std::span<const double> a, std::span<double> b) { forward_plane(a, b); });
  }

  template <class T>
  void adjoint_raw(std::span<const T> in, std::span<T> out) const {
    const std::size_t n = in.size() / (out_.channels * out_.plane());
    per_plane<T>(in, out, n, out_.plane(), in_.plane(),
                 [this](std::span<const double> a, std::span<double> b) { adjoint_plane(a, b); });
  }

  using ConstPlane = Eigen::Map<const detail::MatD>;
  using Plane = Eigen::Map<detail::MatD>;

  // Blur in the eigenbasis: coefficients scaled by f(lambda) where the
  // product eigenvalue survives the spectral floor.
  template <class F>
  void blur_spectral(std::span<const double> a, std::span<double> b, F f) const {
    ConstPlane x(a.data(), in_.height, in_.width);
    detail::MatD z = rows_->transpose() * x * (*cols_);
    for (std::size_t i = 0; i < in_.height; ++i)
      for (std::size_t j = 0; j < in_.width; ++j) {
        const double lam = eig_rows_[i] * eig_cols_[j];
        z(i, j) = std::abs(lam) >= spec_.spectral_floor ? f(lam) * z(i, j) : 0.0;
      }
    Plane(b.data(), in_.height, in_.width).noalias() = (*rows_) * z * cols_->transpose();
  }

  void forward_plane(std::span<const double> a, std::span<double> b) const {
    switch (spec_.kind) {
      case OperatorKind::SuperRes:
        if (spec_.kernel == DownsampleKernel::AveragePool) {
          const std::size_t f = spec_.factor;
          const double inv = 1.0 / double(f * f);
          for (std::size_t y = 0; y < in_.height; ++y)
            for (std::size_t x = 0; x < in_.width; ++x)
              b[(y / f) * out_.width + x / f] += a[y * in_.width + x] * inv;
        } else {
          Plane(b.data(), out_.height, out_.width).noalias() =
              (*rows_) * ConstPlane(a.data(), in_.height, in_.width) * cols_->transpose();
        }
        break;
      case OperatorKind::GaussianBlur:
        blur_spectral(a, b, [](double lam) { return lam; });
        break;
      case OperatorKind::Inpaint:
        for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] * mask_[i];
        break;
      case OperatorKind::Jpeg:
        jpeg_plane(a, b, in_.height, in_.width, quant_);
        break;
      case OperatorKind::Denoise:
        std::copy(a.begin(), a.end(), b.begin());
        break;
    }
  }

  void adjoint_plane(std::span<const double> a, std::span<double> b) const {
    switch (spec_.kind) {
      case OperatorKind::SuperRes:
        if (spec_.kernel == DownsampleKernel::AveragePool) {
          const std::size_t f = spec_.factor;
          const double inv = 1.0 / double(f * f);
          for (std::size_t y = 0; y < in_.height; ++y)
            for (std::size_t x = 0; x < in_.width; ++x)
              b[y * in_.width + x] = a[(y / f) * out_.width + x / f] * inv;
        } else {
          Plane(b.data(), in_.height, in_.width).noalias() =
              rows_->transpose() * ConstPlane(a.data(), out_.height, out_.width) * (*cols_);
        }
        break;
      case OperatorKind::GaussianBlur:
        blur_spectral(a, b, [](double lam) { return lam; });
        break;
      case OperatorKind::Inpaint:
        for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] * mask_[i];
        break;
      case OperatorKind::Denoise:
        std::copy(a.begin(), a.end(), b.begin());
        break;
      case OperatorKind::Jpeg:
        throw UnsupportedOperation("adjoint is undefined for " + name());
    }
  }

  void pinv_plane(std::span<const double> a, std::span<double> b) const {
    switch (spec_.kind) {
      case OperatorKind::SuperRes:
        if (spec_.kernel == DownsampleKernel::AveragePool) {
          const std::size_t f = spec_.factor;
          for (std::size_t y = 0; y < in_.height; ++y)
            for (std::size_t x = 0; x < in_.width; ++x)
              b[y * in_.width + x] = a[(y / f) * out_.width + x / f];
        } else {
          Plane(b.data(), in_.height, in_.width).noalias() =
              (*rows_pinv_) * ConstPlane(a.data(), out_.height, out_.width) *
              cols_pinv_->transpose();
        }
        break;
      case OperatorKind::GaussianBlur:
        blur_spectral(a, b, [](double lam) { return 1.0 / lam; });
        break;
      case OperatorKind::Inpaint:
      case OperatorKind::Denoise:
        adjoint_plane(a, b);
        break;
      case OperatorKind::Jpeg:
        throw UnsupportedOperation("pseudo-inverse is undefined for " + name());
    }
  }

  OperatorSpec spec_;
  ImageGeometry in_, out_;
  std::vector<double> mask_;
  std::array<double, 64> quant_{};
  // Bicubic: separable row/column matrices. Blur: orthonormal eigenbases.
  std::shared_ptr<const detail::MatD> rows_, cols_, rows_pinv_, cols_pinv_;
  std::vector<double> eig_rows_, eig_cols_;
};

/// y + sigma * e with e standard normal; sigma = 0 returns y unchanged.
template <class T>
BasicTensor<T> add_noise(const BasicTensor<T>& y, double sigma, Rng& rng) {
  if (sigma < 0.0) throw std::invalid_argument("noise level must be non-negative");
  if (sigma == 0.0) return y.detach();
  std::vector<T> out(y.vec());
  for (auto& v : out) v = T(double(v) + sigma * rng.normal());
  return BasicTensor<T>(y.shape(), std::move(out));
}

}  // namespace ddc
