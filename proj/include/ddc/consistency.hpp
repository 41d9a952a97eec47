#pragma once

// Data-consistency strategies and the conditional sampler.
//
// Conventions: the sampler state x_t and x0 estimates live in [-1, 1];
// measurements y and operators act on images in [0, 1].

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/denoiser.hpp"
#include "ddc/metrics.hpp"
#include "ddc/operators.hpp"

namespace ddc {

/// Network Delta_phi(y_lifted, x0_hat, t): 6 input channels (x0 estimate and
/// lifted measurement, both in [-1, 1]) and 3 output channels.
template <class T = float>
class ConsistencyModel {
 public:
  ConsistencyModel() = default;
  ConsistencyModel(UNetConfig cfg, std::uint64_t seed) : net_(normalize(std::move(cfg)), seed) {}

  const UNet<T>& net() const { return net_; }
  ParameterList<T>& parameters() { return net_.parameters(); }
  const ParameterList<T>& parameters() const { return net_.parameters(); }

  /// Delta for x0_hat in [-1, 1] and y_lifted in [0, 1].
  BasicTensor<T> delta(const BasicTensor<T>& x0_hat, const BasicTensor<T>& y_lifted,
                       const std::vector<std::size_t>& ts) const {
    detail::require_same_shape(x0_hat.shape(), y_lifted.shape(), "consistency model");
    return net_.forward(concat_channels(x0_hat, to_model_range(y_lifted)), ts).main;
  }

  static UNetConfig normalize(UNetConfig cfg) {
    cfg.in_channels = 2 * cfg.out_channels;
    cfg.learn_variance = false;
    return cfg;
  }

 private:
  UNet<T> net_;
};

/// Full-resolution image-space view of y: A^+ y for linear operators, y itself for JPEG.
template <class T>
BasicTensor<T> lift_measurement(const BasicTensor<T>& y, const DegradationOperator& op) {
  if (op.is_linear()) return op.pseudo_inverse_apply(y);
  if (y.rank() != 4 || y.dim(1) != op.output_geometry().channels ||
      y.dim(2) != op.output_geometry().height || y.dim(3) != op.output_geometry().width) {
    throw ShapeError("measurement " + shape_string(y.shape()) + " does not match " + op.name());
  }
  return y.detach();
}

/// x0_hat_y = x0_hat - Delta_phi(y_lifted, x0_hat, t).
template <class T>
BasicTensor<T> ddc_update(const BasicTensor<T>& x0_hat, const BasicTensor<T>& y_lifted,
                          const std::vector<std::size_t>& ts, const ConsistencyModel<T>& m) {
  return sub(x0_hat, m.delta(x0_hat, y_lifted, ts));
}

template <class T>
BasicTensor<T> ddc_update(const BasicTensor<T>& x0_hat, const BasicTensor<T>& y_lifted,
                          std::size_t t, const ConsistencyModel<T>& m) {
  return ddc_update(x0_hat, y_lifted, std::vector<std::size_t>(x0_hat.dim(0), t), m);
}

/// Range-null-space correction, computed on images in [0, 1]:
/// u - sigma_scale * A^+(A u - y), with u = (x0_hat + 1) / 2.
template <class T>
BasicTensor<T> ddnm_update(const BasicTensor<T>& x0_hat, const BasicTensor<T>& y,
                           const DegradationOperator& op, double sigma_scale) {
  if (!op.is_linear()) throw UnsupportedOperation("DDNM needs a linear operator, got " + op.name());
  NoGradGuard guard;
  const auto u = to_image_range(x0_hat);
  const auto r = op.pseudo_inverse_apply(sub(op.apply(u), y));
  return to_model_range(sub(u, scale(r, T(sigma_scale))));
}

/// DDNM scale: full replacement for clean measurements, half otherwise.
inline double default_ddnm_scale(double sigma_y) { return sigma_y > 0.0 ? 0.5 : 1.0; }

/// x_{k-1} = c_x0 x0_hat_y + c_xt x_t + sigma z (noiseless at k = 1).
template <class T, class Schedule>
BasicTensor<T> consistent_posterior_step(const BasicTensor<T>& x_t, const BasicTensor<T>& x0_y,
                                         std::size_t k, const Schedule& s, std::vector<Rng>& rngs,
                                         const BasicTensor<T>& v = {}) {
  NoGradGuard guard;
  return add_reverse_noise(posterior_mean(x0_y, x_t, k, s), k, s, rngs, v);
}

/// Noisy-image form of the DDC step: unconditional posterior mean minus c_x0 * Delta.
template <class T, class Schedule>
BasicTensor<T> ddc_noisy_update_mean(const BasicTensor<T>& x_t, const BasicTensor<T>& eps,
                                     const BasicTensor<T>& delta, std::size_t k,
                                     const Schedule& s) {
  NoGradGuard guard;
  const double b = s.beta(k), ab = s.alpha_bar(k);
  const auto uncond =
      scale(sub(x_t, scale(eps, T(b / std::sqrt(1.0 - ab)))), T(1.0 / std::sqrt(1.0 - b)));
  return sub(uncond, scale(delta, T(posterior_coeffs(k, s).c_x0)));
}

namespace detail {

/// Gradient step on ||y - A(x0_hat(x_t))||^2 given eps computed on the graph
/// from the leaf `x_t`. Each sample is normalised by its own residual norm;
/// samples with a zero residual keep x_prev.
template <class T, class Schedule>
BasicTensor<T> dps_correction(const BasicTensor<T>& x_prev, const BasicTensor<T>& x_t,
                              const BasicTensor<T>& eps, const BasicTensor<T>& y,
                              const DegradationOperator& op, double zeta, std::size_t k,
                              const Schedule& s) {
  const auto x0_hat = tweedie_x0(x_t, eps, k, s);
  const auto residual = sub(y, op.apply_graph(to_image_range(x0_hat)));
  const std::size_t n = x_t.dim(0);
  const std::size_t r_inner = residual.numel() / n, x_inner = x_prev.numel() / n;
  std::vector<double> norms(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < r_inner; ++j) {
      const double r = double(residual[i * r_inner + j]);
      norms[i] += r * r;
    }
    norms[i] = std::sqrt(norms[i]);
  }
  sum_squares(residual).backward();
  const auto g = x_t.grad();
  std::vector<T> out(x_prev.vec());
  for (std::size_t i = 0; i < n; ++i) {
    if (norms[i] == 0.0) continue;
    const double step = zeta / norms[i];
    for (std::size_t j = i * x_inner; j < (i + 1) * x_inner; ++j) out[j] = T(double(out[j]) - step * double(g[j]));
  }
  return BasicTensor<T>(x_prev.shape(), std::move(out));
}

template <class T>
void require_frozen(const ParameterList<T>& params) {
  for (const auto& p : params)
    if (p.tensor.requires_grad()) {
      throw std::logic_error("DPS needs a frozen noise predictor (parameter '" + p.name +
                             "' is trainable)");
    }
}

}  // namespace detail

/// DPS: x_prev - (zeta / ||r||) grad_{x_t} ||r||^2 with r = y - A(x0_hat(x_t)), per sample.
/// The gradient flows through the (frozen) noise predictor.
template <class T, class Schedule>
BasicTensor<T> dps_update(const BasicTensor<T>& x_prev, const BasicTensor<T>& x_t,
                          const BasicTensor<T>& y, const DegradationOperator& op, double zeta,
                          const DenoiserModel<T>& m, std::size_t k, const Schedule& s) {
  if (!(zeta > 0.0)) throw std::invalid_argument("DPS step size must be positive");
  detail::require_frozen(m.parameters());
  auto leaf = x_t.detach();
  leaf.set_requires_grad(true);
  const auto eps = m.predict(leaf, s.timestep(k)).eps;
  return detail::dps_correction(x_prev, leaf, eps, y, op, zeta, k, s);
}

enum class StrategyKind { None, DDC, DPS, DDNM };

inline std::string strategy_name(StrategyKind k) {
  switch (k) {
    case StrategyKind::None: return "none";
    case StrategyKind::DDC: return "ddc";
    case StrategyKind::DPS: return "dps";
    case StrategyKind::DDNM: return "ddnm";
  }
  return "unknown";
}

inline StrategyKind parse_strategy(const std::string& s) {
  if (s == "none") return StrategyKind::None;
  if (s == "ddc") return StrategyKind::DDC;
  if (s == "dps") return StrategyKind::DPS;
  if (s == "ddnm") return StrategyKind::DDNM;
  throw std::invalid_argument("unknown strategy '" + s + "' (expected none, ddc, dps or ddnm)");
}

template <class T = float>
struct ConsistencyStrategy {
  StrategyKind kind = StrategyKind::None;
  const ConsistencyModel<T>* model = nullptr;  // DDC
  double zeta = 1.0;                           // DPS
  std::optional<double> sigma_scale;           // DDNM; defaults from the noise level
  /// Clip x0 estimates to [-1, 1] before the DDC/DDNM update.
  bool clip_x0 = false;

  static ConsistencyStrategy none() { return {}; }
  static ConsistencyStrategy ddc(const ConsistencyModel<T>& m) {
    ConsistencyStrategy s;
    s.kind = StrategyKind::DDC;
    s.model = &m;
    return s;
  }
  static ConsistencyStrategy dps(double zeta = 1.0) {
    ConsistencyStrategy s;
    s.kind = StrategyKind::DPS;
    s.zeta = zeta;
    return s;
  }
  static ConsistencyStrategy ddnm(std::optional<double> scale = std::nullopt) {
    ConsistencyStrategy s;
    s.kind = StrategyKind::DDNM;
    s.sigma_scale = scale;
    return s;
  }
};

/// Called after each step with the step index and the predicted noise.
template <class T>
using StepObserver = std::function<void(std::size_t k, std::size_t t, const BasicTensor<T>& eps)>;

/// Conditional sampler. `rngs` holds one generator per measurement in the batch.
template <class T>
BasicTensor<T> solve(const BasicTensor<T>& y, const DegradationOperator& op,
                     const ConsistencyStrategy<T>& strategy, const DenoiserModel<T>& m,
                     const RespacedSchedule& s, std::vector<Rng>& rngs, double sigma_y = 0.0,
                     const StepObserver<T>& observer = {}) {
  const std::size_t n = y.dim(0);
  if (rngs.size() != n) throw ShapeError("solve: one generator per measurement required");
  if (strategy.kind == StrategyKind::DDNM && !op.is_linear()) {
    throw UnsupportedOperation("DDNM needs a linear operator, got " + op.name());
  }
  if (strategy.kind == StrategyKind::DDC && !strategy.model) {
    throw std::invalid_argument("DDC strategy without a consistency model");
  }
  if (strategy.kind == StrategyKind::DPS) detail::require_frozen(m.parameters());
  const auto image_shape = op.input_geometry().shape();
  const auto y_lifted = strategy.kind == StrategyKind::DDC ? lift_measurement(y, op) : BasicTensor<T>{};
  const double ddnm_scale = strategy.sigma_scale.value_or(default_ddnm_scale(sigma_y));

  Shape shape{n};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  const std::size_t inner = shape_numel(image_shape);
  std::vector<T> init(shape_numel(shape));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) init[i * inner + j] = T(rngs[i].normal());
  BasicTensor<T> x(shape, std::move(init));

  for (std::size_t k = s.num_steps(); k >= 1; --k) {
    const std::size_t t = s.timestep(k);
    if (strategy.kind == StrategyKind::DPS) {
      auto leaf = x.detach();
      leaf.set_requires_grad(true);
      const auto p = m.predict(leaf, t);
      if (observer) observer(k, t, p.eps.detach());
      const auto x_prev = ancestral_step(leaf.detach(), p.eps.detach(), k, s, rngs, p.v.detach());
      x = detail::dps_correction(x_prev, leaf, p.eps, y, op, strategy.zeta, k, s);
      continue;
    }
    NoGradGuard guard;
    const auto p = m.predict(x, t);
    if (observer) observer(k, t, p.eps);
    if (strategy.kind == StrategyKind::None) {
      x = ancestral_step(x, p.eps, k, s, rngs, p.v);
      continue;
    }
    auto x0 = tweedie_x0(x, p.eps, k, s);
    if (strategy.clip_x0) x0 = clamp(x0, T(-1), T(1));
    const auto x0_y = strategy.kind == StrategyKind::DDC
                          ? ddc_update(x0, y_lifted, std::vector<std::size_t>(n, t), *strategy.model)
                          : ddnm_update(x0, y, op, ddnm_scale);
    x = consistent_posterior_step(x, x0_y, k, s, rngs, p.v);
  }
  return clamp_image(to_image_range(x));
}

struct KurtosisPoint {
  std::size_t step;
  std::size_t timestep;
  double kurtosis;
};

/// Runs `solve` and records the excess kurtosis of every predicted-noise tensor
/// (one series per call; the batch is treated as one sample).
template <class T>
std::vector<KurtosisPoint> kurtosis_trajectory(const BasicTensor<T>& y,
                                               const DegradationOperator& op,
                                               const ConsistencyStrategy<T>& strategy,
                                               const DenoiserModel<T>& m, const RespacedSchedule& s,
                                               std::vector<Rng>& rngs, double sigma_y = 0.0,
                                               BasicTensor<T>* result = nullptr) {
  std::vector<KurtosisPoint> series;
  auto out = solve(y, op, strategy, m, s, rngs, sigma_y,
                   StepObserver<T>([&](std::size_t k, std::size_t t, const BasicTensor<T>& eps) {
                     series.push_back({k, t, kurtosis(eps)});
                   }));
  if (result) *result = out;
  return series;
}

}  // namespace ddc
