#pragma once

// Small time-conditioned U-Net used by both the noise predictor and the
// data-consistency network.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ddc/nn.hpp"

namespace ddc {

struct UNetConfig {
  std::size_t in_channels = 3;
  std::size_t out_channels = 3;
  std::vector<std::size_t> widths = {32, 64, 128};
  std::size_t blocks_per_level = 2;
  std::size_t max_groups = 8;
  std::size_t time_embed_dim = 128;
  /// Adds `out_channels` extra outputs (variance interpolation logits).
  bool learn_variance = false;

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("U-Net needs at least one level");
    if (blocks_per_level == 0) throw std::invalid_argument("U-Net needs at least one block per level");
    if (time_embed_dim == 0 || time_embed_dim % 2) {
      throw std::invalid_argument("time embedding dimension must be even and positive");
    }
    for (auto w : widths)
      if (w == 0) throw std::invalid_argument("U-Net widths must be positive");
  }

  /// Input height/width must be divisible by this.
  std::size_t spatial_multiple() const { return std::size_t(1) << (widths.size() - 1); }

  bool operator==(const UNetConfig&) const = default;
};

/// Sinusoidal embedding of integer timesteps: [N, dim].
template <class T>
BasicTensor<T> timestep_embedding(const std::vector<std::size_t>& ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> out(ts.size() * dim);
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
      const double a = double(ts[i]) * freq;
      out[i * dim + k] = T(std::sin(a));
      out[i * dim + half + k] = T(std::cos(a));
    }
  return BasicTensor<T>({ts.size(), dim}, std::move(out));
}

template <class T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> time_proj;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterRegistry<T>& reg, const std::string& name, std::size_t c_in, std::size_t c_out,
           std::size_t tdim, std::size_t max_groups, Rng& rng)
      : norm1(reg, name + ".norm1", c_in, max_groups),
        conv1(reg, name + ".conv1", c_in, c_out, 3, rng),
        time_proj(reg, name + ".time", tdim, c_out, rng),
        has_skip(c_in != c_out) {
    norm2 = GroupNorm<T>(reg, name + ".norm2", c_out, max_groups);
    conv2 = Conv2d<T>(reg, name + ".conv2", c_out, c_out, 3, rng);
    if (has_skip) skip = Conv2d<T>(reg, name + ".skip", c_in, c_out, 1, rng);
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x, const BasicTensor<T>& temb) const {
    auto h = conv1(silu(norm1(x)));
    h = add_sample_channel(h, time_proj(temb));
    h = conv2(silu(norm2(h)));
    return add(has_skip ? skip(x) : x, h);
  }
};


template <class T>
class UNet {
 public:
  struct Output {
    BasicTensor<T> main;      // [N, out_channels, H, W]
    BasicTensor<T> variance;  // undefined unless learn_variance
  };

  UNet() = default;
  UNet(UNetConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t td = cfg_.time_embed_dim;
    const auto& w = cfg_.widths;
    time1_ = Linear<T>(reg_, "time.0", td, td, rng);
    time2_ = Linear<T>(reg_, "time.1", td, td, rng);
    in_conv_ = Conv2d<T>(reg_, "in", cfg_.in_channels, w[0], 3, rng);
    std::size_t ch = w[0];
    for (std::size_t l = 0; l < w.size(); ++l) {
      down_.emplace_back();
      for (std::size_t b = 0; b < cfg_.blocks_per_level; ++b) {
        down_[l].emplace_back(reg_, "down." + std::to_string(l) + "." + std::to_string(b), ch, w[l],
                              td, cfg_.max_groups, rng);
        ch = w[l];
      }
    }
    mid_ = ResBlock<T>(reg_, "mid", ch, ch, td, cfg_.max_groups, rng);
    up_.resize(w.size());
    for (std::size_t l = w.size() - 1; l-- > 0;) {
      for (std::size_t b = 0; b < cfg_.blocks_per_level; ++b) {
        const std::size_t c_in = b == 0 ? ch + w[l] : w[l];
        up_[l].emplace_back(reg_, "up." + std::to_string(l) + "." + std::to_string(b), c_in, w[l],
                            td, cfg_.max_groups, rng);
      }
      ch = w[l];
    }
    out_norm_ = GroupNorm<T>(reg_, "out.norm", ch, cfg_.max_groups);
    const std::size_t outs = cfg_.out_channels * (cfg_.learn_variance ? 2 : 1);
    out_conv_ = Conv2d<T>(reg_, "out.conv", ch, outs, 3, rng, /*zero_init=*/true);
  }

  const UNetConfig& config() const { return cfg_; }
  ParameterList<T>& parameters() { return reg_.list(); }
  const ParameterList<T>& parameters() const { return reg_.list(); }

  /// x[N, in_channels, H, W]; ts holds one timestep per sample.
  Output forward(const BasicTensor<T>& x, const std::vector<std::size_t>& ts) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || ts.size() != x.dim(0)) {
      throw ShapeError("U-Net input " + shape_string(x.shape()) + " with " +
                       std::to_string(ts.size()) + " timesteps; expected " +
                       std::to_string(cfg_.in_channels) + " channels");
    }
    const std::size_t m = cfg_.spatial_multiple();
    if (x.dim(2) % m || x.dim(3) % m) {
      throw ShapeError("U-Net spatial size " + shape_string(x.shape()) + " not divisible by " +
                       std::to_string(m));
    }
    const auto temb = silu(time2_(silu(time1_(timestep_embedding<T>(ts, cfg_.time_embed_dim)))));
    const std::size_t levels = cfg_.widths.size();
    auto h = in_conv_(x);
    std::vector<BasicTensor<T>> skips;
    for (std::size_t l = 0; l < levels; ++l) {
      for (const auto& blk : down_[l]) h = blk(h, temb);
      skips.push_back(h);
      if (l + 1 < levels) h = avg_pool2d(h, 2);
    }
    h = mid_(h, temb);
    for (std::size_t l = levels - 1; l-- > 0;) {
      h = concat_channels(upsample_nearest2d(h, 2), skips[l]);
      for (const auto& blk : up_[l]) h = blk(h, temb);
    }
    auto out = out_conv_(silu(out_norm_(h)));
    if (!cfg_.learn_variance) return {out, {}};
    return {slice_channels(out, 0, cfg_.out_channels),
            slice_channels(out, cfg_.out_channels, cfg_.out_channels)};
  }

 private:
  UNetConfig cfg_;
  ParameterRegistry<T> reg_;
  Linear<T> time1_, time2_;
  Conv2d<T> in_conv_;
  std::vector<std::vector<ResBlock<T>>> down_, up_;
  ResBlock<T> mid_;
  GroupNorm<T> out_norm_;
  Conv2d<T> out_conv_;
};

}  // namespace ddc
