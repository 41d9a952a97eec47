#pragma once

// Parameterised layers and a flat, ordered parameter registry.

#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ddc/ops.hpp"
#include "ddc/random.hpp"

namespace ddc {

template <class T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <class T>
using ParameterList = std::vector<NamedParameter<T>>;

/// Collects parameters in registration order; names are hierarchical ("enc.0.conv.w").
template <class T>
class ParameterRegistry {
 public:
  BasicTensor<T> add(std::string name, BasicTensor<T> t) {
    t.set_requires_grad(true);
    params_.push_back({std::move(name), t});
    return t;
  }
  const ParameterList<T>& list() const { return params_; }
  ParameterList<T>& list() { return params_; }

 private:
  ParameterList<T> params_;
};

template <class T>
BasicTensor<T> uniform_init(Rng& rng, Shape shape, double bound) {
  const std::size_t n = shape_numel(shape);
  std::vector<T> v(n);
  for (auto& x : v) x = T(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

template <class T>
struct Conv2d {
  BasicTensor<T> weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParameterRegistry<T>& reg, const std::string& name, std::size_t c_in, std::size_t c_out,
         std::size_t k, Rng& rng, bool zero_init = false, std::size_t stride_ = 1)
      : stride(stride_), pad(k / 2) {
    const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(double(c_in * k * k));
    weight = reg.add(name + ".w", uniform_init<T>(rng, {c_out, c_in, k, k}, bound));
    bias = reg.add(name + ".b", uniform_init<T>(rng, {c_out}, bound));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return conv2d(x, weight, bias, stride, pad);
  }
};

template <class T>
struct Linear {
  BasicTensor<T> weight, bias;

  Linear() = default;
  Linear(ParameterRegistry<T>& reg, const std::string& name, std::size_t in, std::size_t out,
         Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(in));
    weight = reg.add(name + ".w", uniform_init<T>(rng, {out, in}, bound));
    bias = reg.add(name + ".b", uniform_init<T>(rng, {out}, bound));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }
};

template <class T>
struct GroupNorm {
  BasicTensor<T> gamma, beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterRegistry<T>& reg, const std::string& name, std::size_t channels,
            std::size_t max_groups)
      : groups(std::gcd(channels, max_groups)) {
    gamma = reg.add(name + ".g", BasicTensor<T>::full({channels}, T(1)));
    beta = reg.add(name + ".b", BasicTensor<T>::zeros({channels}));
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return group_norm(x, groups, gamma, beta);
  }
};

/// Copies values from `src` into the parameters with matching names.
/// Throws if a name is missing or a shape disagrees.
template <class T, class U>
void load_parameter_values(ParameterList<T>& dst, const std::map<std::string, BasicTensor<U>>& src,
                           const std::string& prefix = "") {
  for (auto& p : dst) {
    auto it = src.find(prefix + p.name);
    if (it == src.end()) throw std::runtime_error("missing parameter '" + prefix + p.name + "'");
    if (it->second.shape() != p.tensor.shape()) {
      throw ShapeError("parameter '" + p.name + "' has shape " + shape_string(p.tensor.shape()) +
                       ", stored " + shape_string(it->second.shape()));
    }
    auto out = p.tensor.mutable_data();
    auto in = it->second.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(in[i]);
  }
}

template <class T>
void zero_grads(ParameterList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class T>
void set_trainable(ParameterList<T>& params, bool trainable) {
  for (auto& p : params) {
    p.tensor.set_requires_grad(trainable);
    if (!trainable) p.tensor.zero_grad();
  }
}

template <class T>
std::size_t parameter_count(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace ddc
