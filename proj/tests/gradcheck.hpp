#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ddc/random.hpp"
#include "ddc/tensor.hpp"

namespace ddc::test {

using TensorD = BasicTensor<double>;

inline TensorD random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TensorD(std::move(shape), std::move(v));
}

struct GradCheck {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Error is |g - g_fd| / max(|g|, |g_fd|, floor) per element.
inline GradCheck check_gradients(const std::function<TensorD(const std::vector<TensorD>&)>& f,
                                 std::vector<TensorD> inputs, double h = 1e-6, double floor = 1e-3) {
  for (auto& x : inputs) x = x.detach().set_requires_grad(true);
  const auto out = f(inputs);
  out.backward();
  GradCheck r;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    const std::vector<double> analytic(inputs[a].grad().begin(), inputs[a].grad().end());
    for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
      auto eval = [&](double delta) {
        std::vector<TensorD> shifted;
        for (std::size_t b = 0; b < inputs.size(); ++b) {
          auto c = inputs[b].detach();
          if (b == a) c.mutable_data()[i] += delta;
          shifted.push_back(c);
        }
        NoGradGuard guard;
        return f(shifted).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double g = analytic.empty() ? 0.0 : analytic[i];
      const double err = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), floor});
      r.max_rel_error = std::max(r.max_rel_error, err);
      ++r.checked;
    }
  }
  return r;
}

}  // namespace ddc::test
