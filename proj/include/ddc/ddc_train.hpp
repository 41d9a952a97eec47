#pragma once

// Training of the data-consistency network against a frozen noise predictor.

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/consistency.hpp"
#include "ddc/metrics.hpp"

namespace ddc {

struct LossWeights {
  double mse = 1.0;
  double perceptual = 0.1;
  double kl = 1e-3;

  void validate() const {
    if (mse < 0 || perceptual < 0 || kl < 0) throw std::invalid_argument("loss weights must be non-negative");
    if (mse == 0 && perceptual == 0 && kl == 0) throw std::invalid_argument("at least one loss weight must be positive");
  }
  bool operator==(const LossWeights&) const = default;
};

struct TaskPool {
  std::vector<OperatorSpec> tasks;
  double sigma_min = 0.0;
  double sigma_max = 0.1;

  /// SR x4, SR x8, Gaussian blur, 92% inpainting, JPEG-10 and denoising.
  static TaskPool generalized(double sigma_min = 0.0, double sigma_max = 0.1) {
    return {{OperatorSpec::super_res(4), OperatorSpec::super_res(8), OperatorSpec::gaussian_blur(),
             OperatorSpec::inpaint(), OperatorSpec::jpeg(10), OperatorSpec::denoise()},
            sigma_min,
            sigma_max};
  }

  void validate() const {
    if (tasks.empty()) throw std::invalid_argument("task pool is empty");
    if (!(sigma_min >= 0.0 && sigma_min <= sigma_max)) {
      throw std::invalid_argument("need 0 <= sigma_min <= sigma_max");
    }
  }
};

enum class KlMode { Analytic, Empirical };

// ---------------------------------------------------------------------------
// Losses. All image arguments are in [-1, 1].

template <class T>
BasicTensor<T> loss_mse(const BasicTensor<T>& x0_y, const BasicTensor<T>& x0) {
  return mean(square(sub(x0_y, x0)));
}

/// Perceptual proxy: summed MSE of channel-normalised features of a fixed
/// random conv pyramid.
template <class T>
BasicTensor<T> loss_perceptual(const BasicTensor<T>& x0_y, const BasicTensor<T>& x0,
                               const FeatureExtractor<T>& fx) {
  detail::require_same_shape(x0_y.shape(), x0.shape(), "loss_perceptual");
  const auto fa = fx.features(to_image_range(x0_y));
  const auto fb = fx.features(to_image_range(x0));
  BasicTensor<T> total;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const auto term = mean(square(sub(channel_unit_normalize(fa[l]), channel_unit_normalize(fb[l]))));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

/// KL( N(m1, s1^2) || N(m2, s2^2) ) for scalars.
inline double kl_gaussian(double m1, double s1, double m2, double s2) {
  return std::log(s2 / s1) + (s1 * s1 + (m1 - m2) * (m1 - m2)) / (2.0 * s2 * s2) - 0.5;
}

/// KL between the forward marginal N(sqrt(ab_{t-1}) x0, 1 - ab_{t-1}) and the
/// reverse step N(c_x0 x0_y + c_xt x_t, beta_tilde_t), averaged over elements.
/// Samples with t = 1 contribute 0.
template <class T>
BasicTensor<T> loss_kl(const BasicTensor<T>& x0_y, const BasicTensor<T>& x_t,
                       const BasicTensor<T>& x0, const std::vector<std::size_t>& ts,
                       const NoiseSchedule& s) {
  detail::require_same_shape(x0_y.shape(), x0.shape(), "loss_kl");
  detail::require_same_shape(x_t.shape(), x0.shape(), "loss_kl");
  const std::size_t n = x0.dim(0);
  if (ts.size() != n) throw ShapeError("loss_kl: one timestep per sample required");
  std::vector<T> c0(n), ct(n), inv_var(n), offset(n), target_scale(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = posterior_coeffs(ts[i], s);
    const double var = std::max(c.beta_tilde, kBetaTildeFloor);
    const double ab_prev = s.alpha_bar_prev(ts[i]);
    const double tv = 1.0 - ab_prev;
    const bool active = ts[i] > 1;
    c0[i] = T(c.c_x0);
    ct[i] = T(c.c_xt);
    target_scale[i] = T(std::sqrt(ab_prev));
    inv_var[i] = T(active ? 0.5 / var : 0.0);
    // 0.5 * (log(var / tv) + tv / var - 1): the part independent of the means.
    offset[i] = T(active ? 0.5 * (std::log(var / tv) + tv / var - 1.0) : 0.0);
  }
  BasicTensor<T> target;
  {
    NoGradGuard guard;
    target = sub(scale_per_sample(x0, target_scale), scale_per_sample(x_t, ct));
  }
  const auto diff = sub(scale_per_sample(x0_y, c0), target);  // mu - sqrt(ab_prev) x0
  const auto per_elem = add_per_sample(scale_per_sample(square(diff), inv_var), offset);
  return mean(per_elem);
}

/// Empirical variant: per image, the mean and variance of a sampled x_{t-1}
/// minus sqrt(ab_{t-1}) x0 are compared with N(0, 1 - ab_{t-1}).
template <class T>
BasicTensor<T> loss_kl_empirical(const BasicTensor<T>& x0_y, const BasicTensor<T>& x_t,
                                 const BasicTensor<T>& x0, const std::vector<std::size_t>& ts,
                                 const NoiseSchedule& s, Rng& rng) {
  detail::require_same_shape(x0_y.shape(), x0.shape(), "loss_kl_empirical");
  const std::size_t n = x0.dim(0);
  std::vector<T> c0(n), ct(n), sd(n), target_scale(n), inv_tv(n), log_tv(n), mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = posterior_coeffs(ts[i], s);
    const double ab_prev = s.alpha_bar_prev(ts[i]);
    c0[i] = T(c.c_x0);
    ct[i] = T(c.c_xt);
    sd[i] = T(std::sqrt(c.beta_tilde));
    target_scale[i] = T(std::sqrt(ab_prev));
    const double tv = std::max(1.0 - ab_prev, kBetaTildeFloor);
    inv_tv[i] = T(1.0 / tv);
    log_tv[i] = T(-std::log(tv));
    mask[i] = T(ts[i] > 1 ? 0.5 : 0.0);
  }
  BasicTensor<T> fixed;
  {
    NoGradGuard guard;
    auto z = rng.randn<T>(x0.shape());
    fixed = add(sub(scale_per_sample(x_t, ct), scale_per_sample(x0, target_scale)),
                scale_per_sample(z, sd));
  }
  const auto r = add(scale_per_sample(x0_y, c0), fixed);  // sampled x_{t-1} - sqrt(ab) x0
  const auto m = mean_per_sample(r);                        // [N]
  const auto r2 = mean_per_sample(square(r));
  const auto var = add_scalar(sub(r2, square(m)), T(kBetaTildeFloor));
  // KL(N(0, tv) || N(m, var)) = 0.5 * (log var - log tv + (tv + m^2) / var - 1)
  std::vector<T> tv(n);
  for (std::size_t i = 0; i < n; ++i) tv[i] = T(1.0 / double(inv_tv[i]));
  const auto log_var = log(var);
  const auto kl = add_scalar(add(add_per_sample(log_var, log_tv),
                                 mul(add_per_sample(square(m), tv), exp(scale(log_var, T(-1))))),
                             T(-1));
  return mean(scale_per_sample(kl, mask));
}

struct LossBreakdown {
  double mse = 0, perceptual = 0, kl = 0, total = 0;
};

/// w1 * L_mse + w2 * L_perceptual + w3 * L_kl. Terms with zero weight are skipped.
template <class T>
BasicTensor<T> total_loss(const BasicTensor<T>& x0_y, const BasicTensor<T>& x_t,
                          const BasicTensor<T>& x0, const std::vector<std::size_t>& ts,
                          const NoiseSchedule& s, const LossWeights& w,
                          const FeatureExtractor<T>& fx, LossBreakdown* parts = nullptr,
                          KlMode kl_mode = KlMode::Analytic, Rng* rng = nullptr) {
  BasicTensor<T> total;
  LossBreakdown b;
  auto accumulate = [&](double weight, const BasicTensor<T>& term, double& slot) {
    slot = double(term.item());
    const auto weighted = scale(term, T(weight));
    total = total.defined() ? add(total, weighted) : weighted;
  };
  if (w.mse > 0) accumulate(w.mse, loss_mse(x0_y, x0), b.mse);
  if (w.perceptual > 0) accumulate(w.perceptual, loss_perceptual(x0_y, x0, fx), b.perceptual);
  if (w.kl > 0) {
    if (kl_mode == KlMode::Empirical) {
      if (!rng) throw std::invalid_argument("empirical KL needs a generator");
      accumulate(w.kl, loss_kl_empirical(x0_y, x_t, x0, ts, s, *rng), b.kl);
    } else {
      accumulate(w.kl, loss_kl(x0_y, x_t, x0, ts, s), b.kl);
    }
  }
  if (!total.defined()) throw std::invalid_argument("all loss weights are zero");
  b.total = double(total.item());
  if (parts) *parts = b;
  return total;
}

template <class T>
struct TrainingInstance {
  std::vector<DegradationOperator> ops;  // one per sample
  std::vector<double> sigmas;
  BasicTensor<T> y_lifted;  // [N, C, H, W] in [0, 1]
  std::vector<std::size_t> ts;
  BasicTensor<T> x0;      // [-1, 1]
  BasicTensor<T> x_t;
  BasicTensor<T> x0_hat;  // from the frozen predictor, no gradient path
};

/// Draws a task, noise level and timestep for every clean image in `x0_images`
/// ([N, C, H, W] in [0, 1]) and evaluates the frozen predictor.
template <class T>
TrainingInstance<T> sample_training_instance(const TaskPool& pool, const BasicTensor<T>& x0_images,
                                             const DenoiserModel<T>& denoiser, Rng& rng,
                                             bool clip_x0 = true) {
  pool.validate();
  NoGradGuard guard;
  const std::size_t n = x0_images.dim(0);
  const ImageGeometry geom{x0_images.dim(1), x0_images.dim(2), x0_images.dim(3)};
  const auto& s = denoiser.schedule();
  TrainingInstance<T> inst;
  std::vector<BasicTensor<T>> lifted;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& spec = pool.tasks[std::size_t(rng.uniform_int(0, std::int64_t(pool.tasks.size()) - 1))];
    inst.ops.emplace_back(spec, geom, &rng);
    inst.sigmas.push_back(rng.uniform(pool.sigma_min, pool.sigma_max));
    inst.ts.push_back(std::size_t(rng.uniform_int(1, std::int64_t(s.T()))));
    const auto img = slice_batch(x0_images, i, 1);
    const auto y = add_noise(inst.ops.back().apply(img), inst.sigmas.back(), rng);
    lifted.push_back(reshape(lift_measurement(y, inst.ops.back()), geom.shape()));
  }
  inst.y_lifted = stack_constant(lifted);
  inst.x0 = to_model_range(x0_images);
  const auto eps = rng.randn<T>(x0_images.shape());
  inst.x_t = forward_diffuse(inst.x0, inst.ts, eps, s);
  inst.x0_hat = tweedie_x0(inst.x_t, denoiser.predict(inst.x_t, inst.ts).eps, inst.ts, s);
  if (clip_x0) inst.x0_hat = clamp(inst.x0_hat, T(-1), T(1));
  return inst;
}

struct DdcTrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 30000;
  std::size_t grad_accum = 1;
  AdamConfig adam{};
  double ema_decay = kDefaultEmaDecay;
  LossWeights weights{};
  KlMode kl_mode = KlMode::Analytic;
  /// Clip the predictor's x0 estimate to [-1, 1] before the network sees it.
  bool clip_x0 = true;
  std::uint64_t seed = 0;
};

struct DdcLogEntry {
  std::size_t step;
  LossBreakdown loss;
};

/// Trains `model` in place against the frozen `denoiser`; on return `model`
/// holds the EMA weights. The denoiser's parameters are never written.
template <class T>
void train_ddc(ConsistencyModel<T>& model, const DenoiserModel<T>& denoiser,
               const std::vector<BasicTensor<T>>& dataset, const TaskPool& pool,
               const DdcTrainConfig& cfg, const std::function<void(const DdcLogEntry&)>& log = {}) {
  if (dataset.empty()) throw std::invalid_argument("DDC training needs a non-empty dataset");
  if (cfg.batch_size == 0 || cfg.grad_accum == 0) {
    throw std::invalid_argument("batch size and gradient accumulation must be positive");
  }
  pool.validate();
  cfg.weights.validate();
  auto& params = model.parameters();
  OptimizerState<T> opt(cfg.adam, params);
  EmaState<T> ema(cfg.ema_decay, params);
  const FeatureExtractor<T> fx(dataset.front().dim(0));
  Rng rng(cfg.seed);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    LossBreakdown mean_parts;
    for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
      std::vector<std::size_t> idx(cfg.batch_size);
      for (auto& i : idx) i = std::size_t(rng.uniform_int(0, std::int64_t(dataset.size()) - 1));
      const auto inst = sample_training_instance(pool, stack_batch(dataset, idx), denoiser, rng, cfg.clip_x0);
      const auto x0_y = ddc_update(inst.x0_hat, inst.y_lifted, inst.ts, model);
      LossBreakdown parts;
      const auto loss = total_loss(x0_y, inst.x_t, inst.x0, inst.ts, denoiser.schedule(),
                                   cfg.weights, fx, &parts, cfg.kl_mode, &rng);
      if (!std::isfinite(parts.total)) {
        throw DivergenceError(step, "loss is " + std::to_string(parts.total));
      }
      const double inv = 1.0 / double(cfg.grad_accum);
      mean_parts.mse += parts.mse * inv;
      mean_parts.perceptual += parts.perceptual * inv;
      mean_parts.kl += parts.kl * inv;
      mean_parts.total += parts.total * inv;
      scale(loss, T(inv)).backward();
    }
    adam_step(params, opt);
    zero_grads(params);
    ema.update(params);
    if (log) log({step, mean_parts});
  }
  ema.copy_to(params);
}

}  // namespace ddc
