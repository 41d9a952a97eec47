#pragma once

// Noise-prediction diffusion model: training, one-step clean-image
// prediction and unconditional ancestral sampling.
//
// Images enter and leave in [0, 1]; diffusion runs in [-1, 1].

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/optim.hpp"
#include "ddc/schedule.hpp"
#include "ddc/unet.hpp"

namespace ddc {

/// Training loss became non-finite.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericError("training diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct ScheduleConfig {
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  NoiseSchedule make() const { return make_linear_schedule(T, beta_start, beta_end); }
  bool operator==(const ScheduleConfig&) const = default;
};

template <class T>
BasicTensor<T> to_model_range(const BasicTensor<T>& x01) {
  return add_scalar(scale(x01, T(2)), T(-1));
}

template <class T>
BasicTensor<T> to_image_range(const BasicTensor<T>& x) {
  return scale(add_scalar(x, T(1)), T(0.5));
}

template <class T>
BasicTensor<T> clamp_image(const BasicTensor<T>& x01) {
  NoGradGuard guard;
  return clamp(x01, T(0), T(1));
}

template <class T = float>
class DenoiserModel {
 public:
  struct Prediction {
    BasicTensor<T> eps;
    BasicTensor<T> v;  // in [0, 1] when the variance head is enabled, else undefined
  };

  DenoiserModel() = default;
  DenoiserModel(UNetConfig net, ScheduleConfig schedule, std::uint64_t seed)
      : net_(std::move(net), seed), schedule_cfg_(schedule), schedule_(schedule.make()) {
    if (net_.config().in_channels != net_.config().out_channels) {
      throw std::invalid_argument("noise predictor needs equal input and output channels");
    }
  }

  const UNet<T>& net() const { return net_; }
  ParameterList<T>& parameters() { return net_.parameters(); }
  const ParameterList<T>& parameters() const { return net_.parameters(); }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ScheduleConfig& schedule_config() const { return schedule_cfg_; }
  bool learns_variance() const { return net_.config().learn_variance; }

  /// Frozen parameters take no gradient; required for DPS and DDC training.
  void freeze() { set_trainable(parameters(), false); }
  void unfreeze() { set_trainable(parameters(), true); }

  /// eps_theta(x_t, t) with t the (parent) timestep of each sample.
  Prediction predict(const BasicTensor<T>& x_t, const std::vector<std::size_t>& ts) const {
    for (auto t : ts) (void)schedule_.beta(t);
    auto out = net_.forward(x_t, ts);
    Prediction p{out.main, {}};
    if (out.variance.defined()) p.v = scale(add_scalar(out.variance, T(1)), T(0.5));
    return p;
  }

  Prediction predict(const BasicTensor<T>& x_t, std::size_t t) const {
    return predict(x_t, std::vector<std::size_t>(x_t.dim(0), t));
  }

 private:
  UNet<T> net_;
  ScheduleConfig schedule_cfg_;
  NoiseSchedule schedule_;
};

template <class T>
BasicTensor<T> predict_eps(const DenoiserModel<T>& m, const BasicTensor<T>& x_t, std::size_t t) {
  return m.predict(x_t, t).eps;
}

/// x0_hat = (x_t - sqrt(1 - alpha_bar) eps) / sqrt(alpha_bar), per-sample step index.
template <class T, class Schedule>
BasicTensor<T> tweedie_x0(const BasicTensor<T>& x_t, const BasicTensor<T>& eps,
                          const std::vector<std::size_t>& ks, const Schedule& s) {
  detail::require_same_shape(x_t.shape(), eps.shape(), "tweedie_x0");
  std::vector<T> a(ks.size()), b(ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double ab = s.alpha_bar(ks[i]);
    a[i] = T(1.0 / std::sqrt(ab));
    b[i] = T(-std::sqrt(1.0 - ab) / std::sqrt(ab));
  }
  return add(scale_per_sample(x_t, std::move(a)), scale_per_sample(eps, std::move(b)));
}

template <class T, class Schedule>
BasicTensor<T> tweedie_x0(const BasicTensor<T>& x_t, const BasicTensor<T>& eps, std::size_t k,
                          const Schedule& s) {
  return tweedie_x0(x_t, eps, std::vector<std::size_t>(x_t.dim(0), k), s);
}

/// Posterior mean c_x0 * x0 + c_xt * x_t at step k.
template <class T, class Schedule>
BasicTensor<T> posterior_mean(const BasicTensor<T>& x0, const BasicTensor<T>& x_t, std::size_t k,
                              const Schedule& s) {
  const auto c = posterior_coeffs(k, s);
  return add(scale(x0, T(c.c_x0)), scale(x_t, T(c.c_xt)));
}

/// Per-sample standard deviation of the reverse step; sqrt(beta_tilde) unless
/// a variance-head output v is supplied. Returns a tensor shaped like x.
template <class T, class Schedule>
BasicTensor<T> reverse_stddev(const BasicTensor<T>& like, std::size_t k, const Schedule& s,
                              const BasicTensor<T>& v) {
  if (v.defined()) return sqrt(variance_from_v(v, k, s));
  return BasicTensor<T>::full(like.shape(), T(std::sqrt(s.beta_tilde(k))));
}

/// x_{k-1} = mean + sigma z, with `mean` already computed; no noise at k = 1.
/// One generator per sample keeps results independent of batching.
template <class T, class Schedule>
BasicTensor<T> add_reverse_noise(const BasicTensor<T>& mean, std::size_t k, const Schedule& s,
                                 std::vector<Rng>& rngs, const BasicTensor<T>& v = {}) {
  if (k == 1) return mean.detach();
  if (rngs.size() != mean.dim(0)) throw ShapeError("one generator per sample required");
  NoGradGuard guard;
  const auto sd = reverse_stddev(mean, k, s, v);
  const std::size_t inner = mean.numel() / mean.dim(0);
  std::vector<T> out(mean.vec());
  for (std::size_t i = 0; i < mean.dim(0); ++i)
    for (std::size_t j = 0; j < inner; ++j)
      out[i * inner + j] += T(double(sd[i * inner + j]) * rngs[i].normal());
  return BasicTensor<T>(mean.shape(), std::move(out));
}

/// One unconditional reverse step in noise-prediction form.
template <class T, class Schedule>
BasicTensor<T> ancestral_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps, std::size_t k,
                              const Schedule& s, std::vector<Rng>& rngs,
                              const BasicTensor<T>& v = {}) {
  NoGradGuard guard;
  const double b = s.beta(k), ab = s.alpha_bar(k);
  const auto mean = scale(sub(x_t, scale(eps, T(b / std::sqrt(1.0 - ab)))), T(1.0 / std::sqrt(1.0 - b)));
  return add_reverse_noise(mean, k, s, rngs, v);
}

inline std::vector<Rng> per_sample_rngs(std::uint64_t seed, std::size_t first, std::size_t n) {
  std::vector<Rng> r;
  r.reserve(n);
  for (std::size_t i = 0; i < n; ++i) r.push_back(Rng::stream(seed, first + i));
  return r;
}

/// Unconditional generation over a respaced schedule; returns images in [0, 1].
template <class T>
BasicTensor<T> sample_unconditional(const DenoiserModel<T>& m, const RespacedSchedule& s,
                                    std::vector<Rng>& rngs, const Shape& image_shape) {
  NoGradGuard guard;
  Shape shape{rngs.size()};
  shape.insert(shape.end(), image_shape.begin(), image_shape.end());
  const std::size_t inner = shape_numel(image_shape);
  std::vector<T> init(shape_numel(shape));
  for (std::size_t i = 0; i < rngs.size(); ++i)
    for (std::size_t j = 0; j < inner; ++j) init[i * inner + j] = T(rngs[i].normal());
  BasicTensor<T> x(shape, std::move(init));
  for (std::size_t k = s.num_steps(); k >= 1; --k) {
    const auto p = m.predict(x, s.timestep(k));
    x = ancestral_step(x, p.eps, k, s, rngs, p.v);
  }
  return clamp_image(to_image_range(x));
}

struct DenoiserTrainConfig {
  std::size_t batch_size = 16;
  std::size_t steps = 30000;
  std::size_t grad_accum = 1;
  AdamConfig adam{};
  double ema_decay = kDefaultEmaDecay;
  /// Weight of the variational term that trains the variance head.
  double vlb_weight = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainLogEntry {
  std::size_t step;
  double loss;
};

/// Variational term for the variance head: KL between the true posterior and
/// N(mean(stop_grad(eps)), var(v)), averaged over elements; t = 1 contributes 0.
template <class T>
BasicTensor<T> variance_vlb(const BasicTensor<T>& x0, const BasicTensor<T>& x_t,
                            const BasicTensor<T>& eps_hat, const BasicTensor<T>& v,
                            const std::vector<std::size_t>& ts, const NoiseSchedule& s) {
  const std::size_t n = x0.dim(0), inner = x0.numel() / n;
  BasicTensor<T> mean_model, mean_true;
  std::vector<T> keep(n), c0(n), ct(n);
  {
    NoGradGuard guard;
    const auto x0_hat = tweedie_x0(x_t, eps_hat.detach(), ts, s);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = posterior_coeffs(ts[i], s);
      c0[i] = T(c.c_x0);
      ct[i] = T(c.c_xt);
      keep[i] = ts[i] > 1 ? T(1) : T(0);
    }
    mean_model = add(scale_per_sample(x0_hat, c0), scale_per_sample(x_t, ct));
    mean_true = add(scale_per_sample(x0, c0), scale_per_sample(x_t, ct));
  }
  std::vector<T> bt(n);
  for (std::size_t i = 0; i < n; ++i) bt[i] = T(s.beta_tilde(ts[i]));
  const auto var = variance_from_v(v, ts, s);
  // 0.5 * (log(var / bt) + (bt + (mu_t - mu_m)^2) / var - 1)
  std::vector<T> num(x0.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < inner; ++j) {
      const double d = double(mean_true[i * inner + j]) - double(mean_model[i * inner + j]);
      num[i * inner + j] = T(double(bt[i]) + d * d);
    }
  std::vector<T> neg_log_bt(n);
  for (std::size_t i = 0; i < n; ++i) neg_log_bt[i] = T(-std::log(double(bt[i])));
  const BasicTensor<T> numer(x0.shape(), std::move(num));
  auto kl = add_scalar(add(add_per_sample(log(var), neg_log_bt), mul(numer, exp(scale(log(var), T(-1))))),
                       T(-1));
  return scale(mean(scale_per_sample(kl, keep)), T(0.5));
}

template <class T>
BasicTensor<T> stack_batch(const std::vector<BasicTensor<T>>& images,
                           const std::vector<std::size_t>& idx) {
  std::vector<BasicTensor<T>> items;
  items.reserve(idx.size());
  for (auto i : idx) items.push_back(images[i]);
  return stack_constant(items);
}

/// Trains the noise predictor in place; on return `m` holds the EMA weights.
/// `log` (optional) receives the mean loss of every optimizer step.
template <class T>
void train_denoiser(DenoiserModel<T>& m, const std::vector<BasicTensor<T>>& dataset,
                    const DenoiserTrainConfig& cfg,
                    const std::function<void(const TrainLogEntry&)>& log = {}) {
  if (dataset.empty()) throw std::invalid_argument("denoiser training needs a non-empty dataset");
  if (cfg.batch_size == 0 || cfg.grad_accum == 0) {
    throw std::invalid_argument("batch size and gradient accumulation must be positive");
  }
  auto& params = m.parameters();
  OptimizerState<T> opt(cfg.adam, params);
  EmaState<T> ema(cfg.ema_decay, params);
  Rng rng(cfg.seed);
  const auto& s = m.schedule();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double step_loss = 0;
    for (std::size_t a = 0; a < cfg.grad_accum; ++a) {
      std::vector<std::size_t> idx(cfg.batch_size), ts(cfg.batch_size);
      for (auto& i : idx) i = std::size_t(rng.uniform_int(0, std::int64_t(dataset.size()) - 1));
      for (auto& t : ts) t = std::size_t(rng.uniform_int(1, std::int64_t(s.T())));
      const auto x0 = to_model_range(stack_batch(dataset, idx));
      const auto eps = rng.randn<T>(x0.shape());
      const auto x_t = forward_diffuse(x0, ts, eps, s);
      const auto p = m.predict(x_t, ts);
      auto loss = mean(square(sub(p.eps, eps)));
      if (p.v.defined()) loss = add(loss, scale(variance_vlb(x0, x_t, p.eps, p.v, ts, s), T(cfg.vlb_weight)));
      const double value = loss.item();
      if (!std::isfinite(value)) throw DivergenceError(step, "loss is " + std::to_string(value));
      step_loss += value / double(cfg.grad_accum);
      scale(loss, T(1.0 / double(cfg.grad_accum))).backward();
    }
    adam_step(params, opt);
    zero_grads(params);
    ema.update(params);
    if (log) log({step, step_loss});
  }
  ema.copy_to(params);
}

}  // namespace ddc
