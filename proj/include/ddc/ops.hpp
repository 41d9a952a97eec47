#pragma once

// Differentiable operations on BasicTensor.
//
// Broadcasting is limited to the forms the networks need: per-channel bias,
// per-(sample, channel) embedding injection and per-sample scalar factors.
// Image tensors use NCHW layout.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ddc/tensor.hpp"

namespace ddc {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, std::string_view op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(s));
  }
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Applies f elementwise; backward multiplies by df(x, y).
template <class T, class F, class DF>
BasicTensor<T> unary(const BasicTensor<T>& x, std::string_view name, F f, DF df) {
  const auto& xs = x.vec();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  auto xi = x.impl();
  return make_result<T>(x.shape(), std::move(out), name, {&x},
                        [xi, df](const TensorImpl<T>& o) {
                          auto& g = xi->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += o.grad[i] * df(xi->data[i], o.data[i]);
                          }
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "add", {&a, &b},
                                [ai, bi](const detail::TensorImpl<T>& o) {
                                  for (auto* in : {ai.get(), bi.get()}) {
                                    if (!in->requires_grad) continue;
                                    auto& g = in->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {&a, &b},
                                [ai, bi](const detail::TensorImpl<T>& o) {
                                  if (ai->requires_grad) {
                                    auto& g = ai->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                  if (bi->requires_grad) {
                                    auto& g = bi->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {&a, &b},
                                [ai, bi](const detail::TensorImpl<T>& o) {
                                  if (ai->requires_grad) {
                                    auto& g = ai->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += o.grad[i] * bi->data[i];
                                  }
                                  if (bi->requires_grad) {
                                    auto& g = bi->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += o.grad[i] * ai->data[i];
                                  }
                                });
}

template <class T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
BasicTensor<T> operator*(const BasicTensor<T>& x, T s) { return scale(x, s); }
template <class T>
BasicTensor<T> operator*(T s, const BasicTensor<T>& x) { return scale(x, s); }
template <class T>
BasicTensor<T> operator-(const BasicTensor<T>& x) { return scale(x, T(-1)); }

template <class T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
  return detail::unary(
      x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  // Derivative at exactly 0 is 0.
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return detail::unary(
      x, "tanh", [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Clamp with a pass-through gradient inside (lo, hi) and zero outside.
template <class T>
BasicTensor<T> clamp(const BasicTensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Broadcasts over the leading batch dimension

/// x[N, C, ...] + b[C]
template <class T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: " + shape_string(x.shape()) + " + " +
                     shape_string(b.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  std::vector<T> out(x.vec());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      T* p = out.data() + (i * c + j) * inner;
      for (std::size_t k = 0; k < inner; ++k) p[k] += b[j];
    }
  auto xi = x.impl(), bi = b.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), "add_channel_bias", {&x, &b},
      [xi, bi, n, c, inner](const detail::TensorImpl<T>& o) {
        if (xi->requires_grad) {
          auto& g = xi->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
          auto& g = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const T* p = o.grad.data() + (i * c + j) * inner;
              double acc = 0;
              for (std::size_t k = 0; k < inner; ++k) acc += p[k];
              g[j] += T(acc);
            }
        }
      });
}

/// x[N, C, H, W] + e[N, C] (one value per sample and channel)
template <class T>
BasicTensor<T> add_sample_channel(const BasicTensor<T>& x, const BasicTensor<T>& e) {
  if (x.rank() < 2 || e.rank() != 2 || e.dim(0) != x.dim(0) || e.dim(1) != x.dim(1)) {
    throw ShapeError("add_sample_channel: " + shape_string(x.shape()) + " + " +
                     shape_string(e.shape()));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), inner = x.numel() / nc;
  std::vector<T> out(x.vec());
  for (std::size_t j = 0; j < nc; ++j) {
    T* p = out.data() + j * inner;
    for (std::size_t k = 0; k < inner; ++k) p[k] += e[j];
  }
  auto xi = x.impl(), ei = e.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "add_sample_channel", {&x, &e},
                                [xi, ei, nc, inner](const detail::TensorImpl<T>& o) {
                                  if (xi->requires_grad) {
                                    auto& g = xi->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                  if (ei->requires_grad) {
                                    auto& g = ei->grad_buffer();
                                    for (std::size_t j = 0; j < nc; ++j) {
                                      const T* p = o.grad.data() + j * inner;
                                      double acc = 0;
                                      for (std::size_t k = 0; k < inner; ++k) acc += p[k];
                                      g[j] += T(acc);
                                    }
                                  }
                                });
}

/// x[N, ...] * s[n] with constant per-sample factors.
template <class T>
BasicTensor<T> scale_per_sample(const BasicTensor<T>& x, std::vector<T> s) {
  if (x.rank() < 1 || s.size() != x.dim(0)) {
    throw ShapeError("scale_per_sample: " + std::to_string(s.size()) + " factors for " +
                     shape_string(x.shape()));
  }
  const std::size_t inner = x.numel() / s.size();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t k = 0; k < inner; ++k) out[i * inner + k] = x[i * inner + k] * s[i];
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "scale_per_sample", {&x},
                                [xi, s = std::move(s), inner](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < s.size(); ++i)
                                    for (std::size_t k = 0; k < inner; ++k)
                                      g[i * inner + k] += o.grad[i * inner + k] * s[i];
                                });
}

/// x[N, ...] + s[n] with constant per-sample offsets.
template <class T>
BasicTensor<T> add_per_sample(const BasicTensor<T>& x, std::vector<T> s) {
  if (x.rank() < 1 || s.size() != x.dim(0)) {
    throw ShapeError("add_per_sample: " + std::to_string(s.size()) + " offsets for " +
                     shape_string(x.shape()));
  }
  const std::size_t inner = x.numel() / s.size();
  std::vector<T> out(x.vec());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t k = 0; k < inner; ++k) out[i * inner + k] += s[i];
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "add_per_sample", {&x},
                                [xi](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                });
}

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return detail::make_result<T>({1}, {T(acc)}, "sum", {&x}, [xi](const detail::TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  auto xi = x.impl();
  return detail::make_result<T>({1}, {T(acc / n)}, "mean", {&x},
                                [xi, n](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  const T d = T(o.grad[0] / n);
                                  for (auto& v : g) v += d;
                                });
}

/// Mean over all non-batch dimensions: [N, ...] -> [N].
template <class T>
BasicTensor<T> mean_per_sample(const BasicTensor<T>& x) {
  const std::size_t n = x.dim(0), inner = x.numel() / n;
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0;
    for (std::size_t k = 0; k < inner; ++k) acc += x[i * inner + k];
    out[i] = T(acc / double(inner));
  }
  auto xi = x.impl();
  return detail::make_result<T>({n}, std::move(out), "mean_per_sample", {&x},
                                [xi, n, inner](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const T d = T(o.grad[i] / double(inner));
                                    for (std::size_t k = 0; k < inner; ++k) g[i * inner + k] += d;
                                  }
                                });
}

/// Sum of squares, the squared Frobenius norm.
template <class T>
BasicTensor<T> sum_squares(const BasicTensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += double(v) * double(v);
  auto xi = x.impl();
  return detail::make_result<T>({1}, {T(acc)}, "sum_squares", {&x},
                                [xi](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += T(2) * xi->data[i] * o.grad[0];
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[M, K] x b[K, N]
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  using detail::ConstMatMap;
  using detail::MatMap;
  std::vector<T> out(m * n);
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.vec().data(), m, k) * ConstMatMap<T>(b.vec().data(), k, n);
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(
      {m, n}, std::move(out), "matmul", {&a, &b}, [ai, bi, m, k, n](const detail::TensorImpl<T>& o) {
        ConstMatMap<T> go(o.grad.data(), m, n);
        if (ai->requires_grad) {
          MatMap<T>(ai->grad_buffer().data(), m, k).noalias() +=
              go * ConstMatMap<T>(bi->data.data(), k, n).transpose();
        }
        if (bi->requires_grad) {
          MatMap<T>(bi->grad_buffer().data(), k, n).noalias() +=
              ConstMatMap<T>(ai->data.data(), m, k).transpose() * go;
        }
      });
}

/// x[N, in] * w[out, in]^T + b[out]
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  detail::require_rank(x.shape(), 2, "linear");
  detail::require_rank(w.shape(), 2, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = w.dim(0);
  if (w.dim(1) != in || b.rank() != 1 || b.dim(0) != out_f) {
    throw ShapeError("linear: x " + shape_string(x.shape()) + ", w " + shape_string(w.shape()) +
                     ", b " + shape_string(b.shape()));
  }
  using detail::ConstMatMap;
  using detail::MatMap;
  std::vector<T> out(n * out_f);
  MatMap<T> om(out.data(), n, out_f);
  om.noalias() = ConstMatMap<T>(x.vec().data(), n, in) *
                 ConstMatMap<T>(w.vec().data(), out_f, in).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < out_f; ++j) om(i, j) += b[j];
  auto xi = x.impl(), wi = w.impl(), bi = b.impl();
  return detail::make_result<T>(
      {n, out_f}, std::move(out), "linear", {&x, &w, &b},
      [xi, wi, bi, n, in, out_f](const detail::TensorImpl<T>& o) {
        ConstMatMap<T> go(o.grad.data(), n, out_f);
        if (xi->requires_grad) {
          MatMap<T>(xi->grad_buffer().data(), n, in).noalias() +=
              go * ConstMatMap<T>(wi->data.data(), out_f, in);
        }
        if (wi->requires_grad) {
          MatMap<T>(wi->grad_buffer().data(), out_f, in).noalias() +=
              go.transpose() * ConstMatMap<T>(xi->data.data(), n, in);
        }
        if (bi->requires_grad) {
          auto& g = bi->grad_buffer();
          for (std::size_t j = 0; j < out_f; ++j) {
            double acc = 0;
            for (std::size_t i = 0; i < n; ++i) acc += go(i, j);
            g[j] += T(acc);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

namespace detail {

struct ConvGeometry {
  std::size_t c_in, h, w, k, stride, pad, h_out, w_out;
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t hw_out = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          T* dst = row + oy * g.w_out;
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) {
            std::fill(dst, dst + g.w_out, T(0));
            continue;
          }
          const T* src = img + (c * g.h + std::size_t(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            dst[ox] = (ix < 0 || ix >= std::ptrdiff_t(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t hw_out = g.h_out * g.w_out;
  for (std::size_t c = 0; c < g.c_in; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < g.h_out; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * g.stride + ky) - std::ptrdiff_t(g.pad);
          if (iy < 0 || iy >= std::ptrdiff_t(g.h)) continue;
          T* dst = img + (c * g.h + std::size_t(iy)) * g.w;
          const T* src = row + oy * g.w_out;
          for (std::size_t ox = 0; ox < g.w_out; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * g.stride + kx) - std::ptrdiff_t(g.pad);
            if (ix >= 0 && ix < std::ptrdiff_t(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution (cross-correlation). x[N, Cin, H, W], w[Cout, Cin, k, k], b[Cout].
/// Pass an undefined tensor for b to omit the bias.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                      std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d");
  const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t c_out = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c_in || w.dim(3) != k || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + ", weight " +
                     shape_string(w.shape()));
  }
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != c_out)) {
    throw ShapeError("conv2d: bias " + shape_string(b.shape()));
  }
  const detail::ConvGeometry g{c_in, h, wd, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                               (wd + 2 * pad - k) / stride + 1};
  const std::size_t hw_out = g.h_out * g.w_out, kk = c_in * k * k;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  using detail::ConstMatMap;
  using detail::MatMap;
  std::vector<T> out(n * c_out * hw_out);
  std::vector<T> col(direct ? 0 : kk * hw_out);
  ConstMatMap<T> wm(w.vec().data(), c_out, kk);
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = x.vec().data() + i * c_in * h * wd;
    const T* cp = img;
    if (!direct) {
      detail::im2col(img, g, col.data());
      cp = col.data();
    }
    MatMap<T> om(out.data() + i * c_out * hw_out, c_out, hw_out);
    om.noalias() = wm * ConstMatMap<T>(cp, kk, hw_out);
    if (has_bias)
      for (std::size_t c = 0; c < c_out; ++c) om.row(c).array() += b[c];
  }

  auto xi = x.impl(), wi = w.impl();
  auto bi = has_bias ? b.impl() : nullptr;
  auto backward = [xi, wi, bi, g, n, c_out, hw_out, kk, direct](const detail::TensorImpl<T>& o) {
    std::vector<T> col(direct ? 0 : kk * hw_out);
    std::vector<T> dcol(kk * hw_out);
    ConstMatMap<T> wm(wi->data.data(), c_out, kk);
    const std::size_t img_size = g.c_in * g.h * g.w;
    for (std::size_t i = 0; i < n; ++i) {
      ConstMatMap<T> go(o.grad.data() + i * c_out * hw_out, c_out, hw_out);
      const T* img = xi->data.data() + i * img_size;
      if (wi->requires_grad) {
        const T* cp = img;
        if (!direct) {
          detail::im2col(img, g, col.data());
          cp = col.data();
        }
        MatMap<T>(wi->grad_buffer().data(), c_out, kk).noalias() +=
            go * ConstMatMap<T>(cp, kk, hw_out).transpose();
      }
      if (xi->requires_grad) {
        T* gx = xi->grad_buffer().data() + i * img_size;
        if (direct) {
          MatMap<T>(gx, kk, hw_out).noalias() += wm.transpose() * go;
        } else {
          MatMap<T>(dcol.data(), kk, hw_out).noalias() = wm.transpose() * go;
          detail::col2im(dcol.data(), g, gx);
        }
      }
      if (bi && bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t c = 0; c < c_out; ++c) {
          double acc = 0;
          for (std::size_t p = 0; p < hw_out; ++p) acc += go(c, p);
          gb[c] += T(acc);
        }
      }
    }
  };
  if (has_bias) {
    return detail::make_result<T>({n, c_out, g.h_out, g.w_out}, std::move(out), "conv2d",
                                  {&x, &w, &b}, std::move(backward));
  }
  return detail::make_result<T>({n, c_out, g.h_out, g.w_out}, std::move(out), "conv2d", {&x, &w},
                                std::move(backward));
}

/// Non-overlapping f x f average pooling.
template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t f) {
  detail::require_rank(x.shape(), 4, "avg_pool2d");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (f == 0 || h % f || w % f) {
    throw ShapeError("avg_pool2d: factor " + std::to_string(f) + " on " + shape_string(x.shape()));
  }
  const std::size_t ho = h / f, wo = w / f;
  const T inv = T(1) / T(f * f);
  std::vector<T> out(nc * ho * wo, T(0));
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(p * ho + y / f) * wo + xx / f] += x[(p * h + y) * w + xx] * inv;
  auto xi = x.impl();
  return detail::make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), "avg_pool2d", {&x},
                                [xi, nc, h, w, ho, wo, f, inv](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t p = 0; p < nc; ++p)
                                    for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t xx = 0; xx < w; ++xx)
                                        g[(p * h + y) * w + xx] +=
                                            o.grad[(p * ho + y / f) * wo + xx / f] * inv;
                                });
}

/// Nearest-neighbour upsampling by an integer factor.
template <class T>
BasicTensor<T> upsample_nearest2d(const BasicTensor<T>& x, std::size_t f) {
  detail::require_rank(x.shape(), 4, "upsample_nearest2d");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * f, wo = w * f;
  std::vector<T> out(nc * ho * wo);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx)
        out[(p * ho + y) * wo + xx] = x[(p * h + y / f) * w + xx / f];
  auto xi = x.impl();
  return detail::make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), "upsample_nearest2d",
                                {&x}, [xi, nc, h, w, ho, wo, f](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t p = 0; p < nc; ++p)
                                    for (std::size_t y = 0; y < ho; ++y)
                                      for (std::size_t xx = 0; xx < wo; ++xx)
                                        g[(p * h + y / f) * w + xx / f] +=
                                            o.grad[(p * ho + y) * wo + xx];
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  auto xi = x.impl();
  return detail::make_result<T>(std::move(shape), x.vec(), "reshape", {&x},
                                [xi](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                });
}

/// Concatenates along dim 1: [N, Ca, ...] ++ [N, Cb, ...] -> [N, Ca + Cb, ...].
template <class T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2)) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " ++ " +
                     shape_string(b.shape()));
  }
  const std::size_t n = a.dim(0), inner = a.numel() / (n * a.dim(1));
  const std::size_t sa = a.dim(1) * inner, sb = b.dim(1) * inner;
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  std::vector<T> out(n * (sa + sb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.vec().data() + i * sa, sa, out.data() + i * (sa + sb));
    std::copy_n(b.vec().data() + i * sb, sb, out.data() + i * (sa + sb) + sa);
  }
  auto ai = a.impl(), bi = b.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "concat_channels", {&a, &b},
                                [ai, bi, n, sa, sb](const detail::TensorImpl<T>& o) {
                                  for (std::size_t i = 0; i < n; ++i) {
                                    const T* src = o.grad.data() + i * (sa + sb);
                                    if (ai->requires_grad) {
                                      T* g = ai->grad_buffer().data() + i * sa;
                                      for (std::size_t k = 0; k < sa; ++k) g[k] += src[k];
                                    }
                                    if (bi->requires_grad) {
                                      T* g = bi->grad_buffer().data() + i * sb;
                                      for (std::size_t k = 0; k < sb; ++k) g[k] += src[sa + k];
                                    }
                                  }
                                });
}

/// Channels [start, start + count) of x[N, C, ...].
template <class T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() < 2 || start + count > x.dim(1)) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") of " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.numel() / (n * c);
  Shape shape = x.shape();
  shape[1] = count;
  std::vector<T> out(n * count * inner);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.vec().data() + (i * c + start) * inner, count * inner,
                out.data() + i * count * inner);
  auto xi = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "slice_channels", {&x},
                                [xi, n, c, inner, start, count](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < n; ++i) {
                                    T* dst = g.data() + (i * c + start) * inner;
                                    const T* src = o.grad.data() + i * count * inner;
                                    for (std::size_t k = 0; k < count * inner; ++k) dst[k] += src[k];
                                  }
                                });
}

/// Samples [start, start + count) of x[N, ...].
template <class T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::size_t start, std::size_t count) {
  if (x.rank() < 1 || start + count > x.dim(0)) {
    throw ShapeError("slice_batch: [" + std::to_string(start) + ", +" + std::to_string(count) +
                     ") of " + shape_string(x.shape()));
  }
  const std::size_t inner = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  std::vector<T> out(x.vec().begin() + std::ptrdiff_t(start * inner),
                     x.vec().begin() + std::ptrdiff_t((start + count) * inner));
  auto xi = x.impl();
  return detail::make_result<T>(std::move(shape), std::move(out), "slice_batch", {&x},
                                [xi, start, inner](const detail::TensorImpl<T>& o) {
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t k = 0; k < o.grad.size(); ++k)
                                    g[start * inner + k] += o.grad[k];
                                });
}

/// Stacks equally shaped tensors along a new leading dimension (constants only).
template <class T>
BasicTensor<T> stack_constant(const std::vector<BasicTensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack_constant: empty list");
  Shape inner = items.front().shape();
  std::vector<T> out;
  out.reserve(items.size() * shape_numel(inner));
  for (const auto& t : items) {
    detail::require_same_shape(t.shape(), inner, "stack_constant");
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  Shape shape{items.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  return BasicTensor<T>(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Normalisation

/// Group normalisation over (C / groups, H, W) per sample with affine gamma/beta[C].
template <class T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = 1e-5) {
  detail::require_rank(x.shape(), 4, "group_norm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups || gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups on " +
                     shape_string(x.shape()));
  }
  const std::size_t cg = c / groups, gsize = cg * hw;
  std::vector<T> xhat(x.numel()), out(x.numel());
  std::vector<T> inv_std(n * groups);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const std::size_t base = (i * c + gi * cg) * hw;
      double s = 0, s2 = 0;
      for (std::size_t k = 0; k < gsize; ++k) s += x[base + k];
      const double mu = s / double(gsize);
      for (std::size_t k = 0; k < gsize; ++k) {
        const double d = double(x[base + k]) - mu;
        s2 += d * d;
      }
      const double is = 1.0 / std::sqrt(s2 / double(gsize) + eps);
      inv_std[i * groups + gi] = T(is);
      for (std::size_t ch = 0; ch < cg; ++ch) {
        const std::size_t cc = gi * cg + ch;
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t idx = base + ch * hw + p;
          xhat[idx] = T((double(x[idx]) - mu) * is);
          out[idx] = xhat[idx] * gamma[cc] + beta[cc];
        }
      }
    }
  auto xi = x.impl(), gmi = gamma.impl(), bti = beta.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), "group_norm", {&x, &gamma, &beta},
      [xi, gmi, bti, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, groups, cg,
       gsize](const detail::TensorImpl<T>& o) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t gi = 0; gi < groups; ++gi) {
            const std::size_t base = (i * c + gi * cg) * hw;
            double sum_d = 0, sum_dx = 0;
            for (std::size_t ch = 0; ch < cg; ++ch) {
              const T gmv = gmi->data[gi * cg + ch];
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = base + ch * hw + p;
                const double d = double(o.grad[idx]) * gmv;
                sum_d += d;
                sum_dx += d * xhat[idx];
              }
            }
            if (gmi->requires_grad || bti->requires_grad) {
              for (std::size_t ch = 0; ch < cg; ++ch) {
                double ag = 0, ab = 0;
                for (std::size_t p = 0; p < hw; ++p) {
                  const std::size_t idx = base + ch * hw + p;
                  ag += double(o.grad[idx]) * xhat[idx];
                  ab += o.grad[idx];
                }
                if (gmi->requires_grad) gmi->grad_buffer()[gi * cg + ch] += T(ag);
                if (bti->requires_grad) bti->grad_buffer()[gi * cg + ch] += T(ab);
              }
            }
            if (xi->requires_grad) {
              auto& g = xi->grad_buffer();
              const double md = sum_d / double(gsize), mdx = sum_dx / double(gsize);
              const double is = inv_std[i * groups + gi];
              for (std::size_t ch = 0; ch < cg; ++ch) {
                const T gmv = gmi->data[gi * cg + ch];
                for (std::size_t p = 0; p < hw; ++p) {
                  const std::size_t idx = base + ch * hw + p;
                  const double d = double(o.grad[idx]) * gmv;
                  g[idx] += T(is * (d - md - double(xhat[idx]) * mdx));
                }
              }
            }
          }
      });
}

/// Rescales every spatial position's channel vector to unit L2 norm.
template <class T>
BasicTensor<T> channel_unit_normalize(const BasicTensor<T>& x, double eps = 1e-10) {
  detail::require_rank(x.shape(), 4, "channel_unit_normalize");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel()), inv_norm(n * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = x[(i * c + ch) * hw + p];
        s += v * v;
      }
      const double inv = 1.0 / std::sqrt(s + eps);
      inv_norm[i * hw + p] = T(inv);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t idx = (i * c + ch) * hw + p;
        out[idx] = T(x[idx] * inv);
      }
    }
  auto xi = x.impl();
  return detail::make_result<T>(
      x.shape(), std::move(out), "channel_unit_normalize", {&x},
      [xi, inv_norm = std::move(inv_norm), n, c, hw](const detail::TensorImpl<T>& o) {
        auto& g = xi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < hw; ++p) {
            double dot = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = (i * c + ch) * hw + p;
              dot += double(o.grad[idx]) * o.data[idx];
            }
            const double inv = inv_norm[i * hw + p];
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t idx = (i * c + ch) * hw + p;
              g[idx] += T(inv * (double(o.grad[idx]) - double(o.data[idx]) * dot));
            }
          }
      });
}

// ---------------------------------------------------------------------------
// User-supplied linear maps

/// Applies a linear map given its forward action and adjoint. The backward
/// pass uses the adjoint, so the pair must be consistent.
template <class T>
using LinearAction = std::function<void(std::span<const T> in, std::span<T> out)>;

template <class T>
BasicTensor<T> linear_map(const BasicTensor<T>& x, Shape out_shape, LinearAction<T> forward,
                          LinearAction<T> adjoint, std::string_view name = "linear_map") {
  std::vector<T> out(shape_numel(out_shape), T(0));
  forward(x.data(), out);
  auto xi = x.impl();
  return detail::make_result<T>(std::move(out_shape), std::move(out), name, {&x},
                                [xi, adjoint = std::move(adjoint)](const detail::TensorImpl<T>& o) {
                                  std::vector<T> tmp(xi->data.size(), T(0));
                                  adjoint(o.grad, tmp);
                                  auto& g = xi->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += tmp[i];
                                });
}

/// Arbitrary map with a caller-supplied vector-Jacobian product.
/// vjp(x, y, dy, dx) must accumulate J^T dy into dx.
template <class T>
using VjpAction = std::function<void(std::span<const T> x, std::span<const T> y,
                                     std::span<const T> dy, std::span<T> dx)>;

template <class T>
BasicTensor<T> custom_map(const BasicTensor<T>& x, Shape out_shape,
                          std::function<void(std::span<const T>, std::span<T>)> forward,
                          VjpAction<T> vjp, std::string_view name) {
  std::vector<T> out(shape_numel(out_shape), T(0));
  forward(x.data(), out);
  auto xi = x.impl();
  return detail::make_result<T>(std::move(out_shape), std::move(out), name, {&x},
                                [xi, vjp = std::move(vjp)](const detail::TensorImpl<T>& o) {
                                  vjp(xi->data, o.data, o.grad, xi->grad_buffer());
                                });
}

/// Stop-gradient: same values, no graph participation.
template <class T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x) {
  return x.detach();
}

}  // namespace ddc
