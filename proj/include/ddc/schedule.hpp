#pragma once

// Variance-preserving discrete noise schedules.
//
// Timesteps are 1-based: t = 1..T, with the convention alpha_bar(0) = 1.
// All coefficients are kept in double precision and converted at use.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/ops.hpp"

namespace ddc {

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Coefficients of the DDPM posterior q(x_{t-1} | x_t, x_0):
/// mean = c_x0 * x0 + c_xt * x_t, variance = beta_tilde.
struct PosteriorCoeffs {
  double c_x0;
  double c_xt;
  double beta_tilde;
};

/// Floor applied to beta_tilde before taking its logarithm.
inline constexpr double kBetaTildeFloor = 1e-20;

class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw ScheduleError("schedule needs at least one step");
    alpha_bar_.assign(beta_.size() + 1, 1.0);
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) {
        throw ScheduleError("beta_" + std::to_string(i + 1) + " = " + std::to_string(beta_[i]) +
                            " outside (0, 1)");
      }
      alpha_bar_[i + 1] = alpha_bar_[i] * (1.0 - beta_[i]);
    }
  }

  std::size_t T() const { return beta_.size(); }
  std::size_t num_steps() const { return T(); }
  std::size_t timestep(std::size_t k) const { return check(k); }

  double beta(std::size_t t) const { return beta_[check(t) - 1]; }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const {
    if (t > T()) throw ScheduleError("timestep " + std::to_string(t) + " out of range");
    return alpha_bar_[t];
  }
  double alpha_bar_prev(std::size_t t) const { return alpha_bar_[check(t) - 1]; }
  double beta_tilde(std::size_t t) const {
    return beta(t) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
  }

  const std::vector<double>& betas() const { return beta_; }
  /// alpha_bar(0..T); element 0 is 1.
  const std::vector<double>& alpha_bars() const { return alpha_bar_; }

 private:
  std::size_t check(std::size_t t) const {
    if (t < 1 || t > T()) {
      throw ScheduleError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(T()) +
                          "]");
    }
    return t;
  }

  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

inline NoiseSchedule make_linear_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw ScheduleError("T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ScheduleError("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> b(T);
  for (std::size_t i = 0; i < T; ++i) {
    b[i] = T == 1 ? beta_start
                  : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
  }
  return NoiseSchedule(std::move(b));
}

/// A trained schedule evaluated on a strictly increasing subsequence S of its
/// timesteps. Step k = 1..|S| corresponds to parent timestep S_k.
class RespacedSchedule {
 public:
  RespacedSchedule() = default;

  RespacedSchedule(const NoiseSchedule& parent, std::vector<std::size_t> S)
      : parent_T_(parent.T()), parent_beta_(parent.betas()), timesteps_(std::move(S)) {
    validate(parent.T());
    alpha_bar_.reserve(timesteps_.size() + 1);
    alpha_bar_.push_back(1.0);
    for (auto t : timesteps_) alpha_bar_.push_back(parent.alpha_bar(t));
    derive();
  }

  std::size_t num_steps() const { return timesteps_.size(); }
  std::size_t parent_T() const { return parent_T_; }
  const std::vector<std::size_t>& timesteps() const { return timesteps_; }

  std::size_t timestep(std::size_t k) const { return timesteps_[check(k) - 1]; }
  double alpha_bar(std::size_t k) const { return alpha_bar_[check(k)]; }
  double alpha_bar_prev(std::size_t k) const { return alpha_bar_[check(k) - 1]; }
  double beta(std::size_t k) const { return beta_[check(k) - 1]; }
  double alpha(std::size_t k) const { return 1.0 - beta(k); }
  double beta_tilde(std::size_t k) const { return beta_tilde_[check(k) - 1]; }

  /// alpha_bar at a parent timestep that belongs to S.
  double alpha_bar_at_timestep(std::size_t t) const {
    for (std::size_t k = 0; k < timesteps_.size(); ++k)
      if (timesteps_[k] == t) return alpha_bar_[k + 1];
    throw ScheduleError("timestep " + std::to_string(t) + " not in the subsequence");
  }

  /// Re-spaces this schedule onto S' (a subsequence of S, in parent timesteps).
  RespacedSchedule respace(std::vector<std::size_t> sub) const {
    RespacedSchedule r;
    r.parent_T_ = parent_T_;
    r.parent_beta_ = parent_beta_;
    r.timesteps_ = std::move(sub);
    r.validate(parent_T_);
    r.alpha_bar_.push_back(1.0);
    for (auto t : r.timesteps_) r.alpha_bar_.push_back(alpha_bar_at_timestep(t));
    r.derive();
    return r;
  }

 private:
  void validate(std::size_t T) const {
    if (timesteps_.empty()) throw ScheduleError("empty subsequence");
    for (std::size_t k = 0; k < timesteps_.size(); ++k) {
      if (timesteps_[k] < 1 || timesteps_[k] > T) {
        throw ScheduleError("subsequence element " + std::to_string(timesteps_[k]) +
                            " outside [1, " + std::to_string(T) + "]");
      }
      if (k > 0 && timesteps_[k] <= timesteps_[k - 1]) {
        throw ScheduleError("subsequence is not strictly increasing");
      }
    }
  }

  void derive() {
    beta_.resize(timesteps_.size());
    beta_tilde_.resize(timesteps_.size());
    for (std::size_t k = 1; k <= timesteps_.size(); ++k) {
      // Adjacent parent timesteps keep the parent's beta bit-for-bit.
      const std::size_t prev = k > 1 ? timesteps_[k - 2] : 0;
      beta_[k - 1] = timesteps_[k - 1] == prev + 1 ? parent_beta_[prev]
                                                   : 1.0 - alpha_bar_[k] / alpha_bar_[k - 1];
      beta_tilde_[k - 1] = (1.0 - alpha_bar_[k - 1]) / (1.0 - alpha_bar_[k]) * beta_[k - 1];
    }
  }

  std::size_t check(std::size_t k) const {
    if (k < 1 || k > timesteps_.size()) {
      throw ScheduleError("step " + std::to_string(k) + " outside [1, " +
                          std::to_string(timesteps_.size()) + "]");
    }
    return k;
  }

  std::size_t parent_T_ = 0;
  std::vector<double> parent_beta_;
  std::vector<std::size_t> timesteps_;
  std::vector<double> alpha_bar_;  // index 0 holds 1
  std::vector<double> beta_;
  std::vector<double> beta_tilde_;
};

inline RespacedSchedule respace(const NoiseSchedule& s, std::vector<std::size_t> S) {
  return RespacedSchedule(s, std::move(S));
}

/// K timesteps evenly spread over 1..T, always including 1 and T (K >= 2).
inline std::vector<std::size_t> uniform_subsequence(std::size_t T, std::size_t K) {
  if (K < 1 || K > T) throw ScheduleError("cannot pick " + std::to_string(K) + " of " +
                                          std::to_string(T) + " timesteps");
  if (K == 1) return {T};
  std::vector<std::size_t> S(K);
  const double stride = double(T - 1) / double(K - 1);
  for (std::size_t i = 0; i < K; ++i) S[i] = 1 + std::size_t(std::llround(double(i) * stride));
  return S;
}

/// Works for NoiseSchedule (k = t) and RespacedSchedule (k indexes S).
template <class Schedule>
PosteriorCoeffs posterior_coeffs(std::size_t k, const Schedule& s) {
  const double ab = s.alpha_bar(k), ab_prev = s.alpha_bar_prev(k), b = s.beta(k);
  return {std::sqrt(ab_prev) * b / (1.0 - ab), std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab),
          b * (1.0 - ab_prev) / (1.0 - ab)};
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, one timestep per sample.
template <class T, class Schedule>
BasicTensor<T> forward_diffuse(const BasicTensor<T>& x0, const std::vector<std::size_t>& ks,
                               const BasicTensor<T>& eps, const Schedule& s) {
  detail::require_same_shape(x0.shape(), eps.shape(), "forward_diffuse");
  std::vector<T> a(ks.size()), b(ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double ab = s.alpha_bar(ks[i]);
    a[i] = T(std::sqrt(ab));
    b[i] = T(std::sqrt(1.0 - ab));
  }
  return add(scale_per_sample(x0, std::move(a)), scale_per_sample(eps, std::move(b)));
}

template <class T, class Schedule>
BasicTensor<T> forward_diffuse(const BasicTensor<T>& x0, std::size_t k, const BasicTensor<T>& eps,
                               const Schedule& s) {
  return forward_diffuse(x0, std::vector<std::size_t>(x0.dim(0), k), eps, s);
}

/// Learned-variance interpolation between beta (v = 1) and beta_tilde (v = 0)
/// in log space; v is clamped to [0, 1]. One step index per sample.
template <class T, class Schedule>
BasicTensor<T> variance_from_v(const BasicTensor<T>& v, const std::vector<std::size_t>& ks,
                               const Schedule& s) {
  std::vector<T> slope(ks.size()), offset(ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const double log_b = std::log(s.beta(ks[i]));
    const double log_bt = std::log(std::max(s.beta_tilde(ks[i]), kBetaTildeFloor));
    slope[i] = T(log_b - log_bt);
    offset[i] = T(log_bt);
  }
  return exp(add_per_sample(scale_per_sample(clamp(v, T(0), T(1)), std::move(slope)),
                            std::move(offset)));
}

template <class T, class Schedule>
BasicTensor<T> variance_from_v(const BasicTensor<T>& v, std::size_t k, const Schedule& s) {
  return variance_from_v(v, std::vector<std::size_t>(v.dim(0), k), s);
}

}  // namespace ddc
