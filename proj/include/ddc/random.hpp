#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ddc/tensor.hpp"

namespace ddc {

/// Seeded generator. Independent streams are derived from a master seed and
/// a stream index so results do not depend on how work is scheduled.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  static Rng stream(std::uint64_t master, std::uint64_t index) {
    std::seed_seq seq{std::uint32_t(master), std::uint32_t(master >> 32), std::uint32_t(index),
                      std::uint32_t(index >> 32), 0x9e3779b9u};
    Rng r;
    r.engine_.seed(seq);
    return r;
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  std::vector<T> normal_vector(std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = T(normal());
    return v;
  }

  template <class T>
  BasicTensor<T> randn(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return BasicTensor<T>(std::move(shape), normal_vector<T>(n));
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ddc
