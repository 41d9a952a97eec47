#pragma once

// Adaptive-moment optimizer and exponential moving average of parameters.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ddc/nn.hpp"

namespace ddc {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct OptimizerState {
  AdamConfig config;
  std::int64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  OptimizerState() = default;
  OptimizerState(AdamConfig cfg, const ParameterList<T>& params) : config(cfg) {
    for (const auto& p : params) {
      first_moment.emplace_back(p.tensor.numel(), 0.0);
      second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
};

/// One bias-corrected Adam step using the gradients stored on the parameters.
/// Parameters without a gradient are treated as having a zero gradient.
template <class T>
void adam_step(ParameterList<T>& params, OptimizerState<T>& state, double grad_scale = 1.0) {
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " +
                     std::to_string(state.first_moment.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  ++state.step_count;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, double(state.step_count));
  const double bc2 = 1.0 - std::pow(c.beta2, double(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != t.numel()) {
      throw ShapeError("adam_step: moment size mismatch for '" + params[i].name + "'");
    }
    auto data = t.mutable_data();
    auto grad = t.grad();
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double g = grad.empty() ? 0.0 : double(grad[k]) * grad_scale;
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      data[k] = T(double(data[k]) - c.learning_rate * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

template <class T>
class EmaState {
 public:
  EmaState(double decay, const ParameterList<T>& params) : decay_(decay) {
    if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("EMA decay must be in [0, 1)");
    for (const auto& p : params) shadow_.push_back({p.name, p.tensor.detach()});
  }

  double decay() const { return decay_; }
  const ParameterList<T>& shadow() const { return shadow_; }

  /// shadow <- decay * shadow + (1 - decay) * params
  void update(const ParameterList<T>& params) {
    if (params.size() != shadow_.size()) throw ShapeError("ema_update: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].tensor.shape() != shadow_[i].tensor.shape()) {
        throw ShapeError("ema_update: shape mismatch for '" + params[i].name + "'");
      }
      auto s = shadow_[i].tensor.mutable_data();
      auto p = params[i].tensor.data();
      for (std::size_t k = 0; k < s.size(); ++k) {
        s[k] = T(decay_ * double(s[k]) + (1.0 - decay_) * double(p[k]));
      }
    }
  }

  /// Writes the shadow values into `params`.
  void copy_to(ParameterList<T>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto d = params[i].tensor.mutable_data();
      auto s = shadow_[i].tensor.data();
      std::copy(s.begin(), s.end(), d.begin());
    }
  }

 private:
  double decay_;
  ParameterList<T> shadow_;
};

inline constexpr double kDefaultEmaDecay = 0.9999;

template <class T>
void ema_update(EmaState<T>& ema, const ParameterList<T>& params) {
  ema.update(params);
}

}  // namespace ddc
