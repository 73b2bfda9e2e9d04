// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/numerics/layers.hpp"
#include "cfdiff/numerics/ops.hpp"

namespace cfdiff {

class DenoiserError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Receives every cross-attention probability tensor during a forward pass.
/// `probs` is laid out [batch, heads, queries, keys]. Returning true means the
/// probabilities were modified.
class AttentionController {
 public:
  virtual ~AttentionController() = default;
  virtual bool on_attention(int layer, std::span<float> probs, int batch, int heads, int queries, int keys) = 0;
};

struct UNetConfig {
  int in_channels = 4;
  int resolution = 8;
  std::vector<int> widths{32, 64, 128};
  int time_dim = 128;
  int context_dim = 64;
  int heads = 4;
  int groups = 8;
  int num_timesteps = 1000;
};

/// Sinusoidal embedding of integer timesteps: [B, dim] with sin then cos halves.
inline Tensor timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  std::vector<float> out(t.size() * static_cast<std::size_t>(dim));
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double a = t[b] * freq;
      out[b * dim + k] = static_cast<float>(std::sin(a));
      out[b * dim + half + k] = static_cast<float>(std::cos(a));
    }
  }
  return Tensor::from_data({static_cast<int>(t.size()), dim}, std::move(out));
}

namespace nn {

struct ResBlock {
  GroupNorm n1, n2;
  Conv2d c1, c2, skip;
  Linear temb;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterSet& ps, const std::string& name, Rng& rng, int in, int out, int time_dim, int groups)
      : n1(ps, name + ".n1", in, std::min(groups, in)),
        n2(ps, name + ".n2", out, std::min(groups, out)),
        c1(ps, name + ".c1", rng, in, out, 3),
        c2(ps, name + ".c2", rng, out, out, 3),
        temb(ps, name + ".temb", rng, time_dim, out),
        has_skip(in != out) {
    if (has_skip) skip = Conv2d(ps, name + ".skip", rng, in, out, 1);
  }

  Tensor operator()(const Tensor& x, const Tensor& t) const {
    auto h = c1(ops::silu(n1(x)));
    auto tb = temb(t);
    h = ops::add(h, ops::reshape(tb, {tb.dim(0), tb.dim(1), 1, 1}));
    h = c2(ops::silu(n2(h)));
    return ops::add(has_skip ? skip(x) : x, h);
  }
};

struct CrossAttentionBlock {
  GroupNorm norm;
  MultiHeadAttention attn;
  int layer = 0;

  CrossAttentionBlock() = default;
  CrossAttentionBlock(ParameterSet& ps, const std::string& name, Rng& rng, int channels, int context_dim, int heads,
                      int groups, int layer_)
      : norm(ps, name + ".norm", channels, std::min(groups, channels)),
        attn(ps, name + ".attn", rng, channels, context_dim, channels, heads),
        layer(layer_) {}

  Tensor operator()(const Tensor& x, const Tensor& context, AttentionController* ctl) const {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto seq = ops::permute(ops::reshape(norm(x), {B, C, H * W}), {0, 2, 1});
    ops::AttentionHook<float> hook;
    if (ctl) {
      const int heads = attn.heads, lyr = layer;
      hook = [ctl, heads, lyr](std::span<float> probs, int bh, int q, int k) {
        return ctl->on_attention(lyr, probs, bh / heads, heads, q, k);
      };
    }
    auto out = attn(seq, context, ctl ? &hook : nullptr);
    return ops::add(x, ops::reshape(ops::permute(out, {0, 2, 1}), {B, C, H, W}));
  }
};

}  // namespace nn

/// Conditional noise predictor over latents [B, C, R, R] with two
/// downsamplings and cross-attention at every resolution.
class UNet {
 public:
  /// Cross-attention layer indices in call order.
  static constexpr int kMidAttention = 0;
  static constexpr int kUpAttention1 = 1;
  static constexpr int kUpAttention0 = 2;
  static constexpr int kNumAttentionLayers = 3;

  explicit UNet(const UNetConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    if (cfg.widths.size() != 3) throw DenoiserError("UNet expects three channel widths");
    if (cfg.resolution % 4 != 0) throw DenoiserError("UNet resolution must be divisible by 4");
    Rng rng(seed);
    const int w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2], td = cfg.time_dim, g = cfg.groups;
    time1_ = nn::Linear(params_, "unet.time1", rng, td, td);
    time2_ = nn::Linear(params_, "unet.time2", rng, td, td);
    conv_in_ = nn::Conv2d(params_, "unet.conv_in", rng, cfg.in_channels, w0, 3);
    down0_ = nn::ResBlock(params_, "unet.down0", rng, w0, w0, td, g);
    ds0_ = nn::Conv2d(params_, "unet.ds0", rng, w0, w0, 3, 2);
    down1_ = nn::ResBlock(params_, "unet.down1", rng, w0, w1, td, g);
    ds1_ = nn::Conv2d(params_, "unet.ds1", rng, w1, w1, 3, 2);
    mid0_ = nn::ResBlock(params_, "unet.mid0", rng, w1, w2, td, g);
    mid_attn_ = nn::CrossAttentionBlock(params_, "unet.mid_attn", rng, w2, cfg.context_dim, cfg.heads, g, kMidAttention);
    mid1_ = nn::ResBlock(params_, "unet.mid1", rng, w2, w2, td, g);
    up1_ = nn::ResBlock(params_, "unet.up1", rng, w2 + w1, w1, td, g);
    up1_attn_ = nn::CrossAttentionBlock(params_, "unet.up1_attn", rng, w1, cfg.context_dim, cfg.heads, g, kUpAttention1);
    up0_ = nn::ResBlock(params_, "unet.up0", rng, w1 + w0, w0, td, g);
    up0_attn_ = nn::CrossAttentionBlock(params_, "unet.up0_attn", rng, w0, cfg.context_dim, cfg.heads, g, kUpAttention0);
    out_norm_ = nn::GroupNorm(params_, "unet.out_norm", w0, std::min(g, w0));
    // Zero init makes the initial prediction exactly zero.
    conv_out_ = nn::Conv2d(params_, "unet.conv_out", rng, w0, cfg.in_channels, 3, 1, -1, true);
  }

  const UNetConfig& config() const { return cfg_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Set by training or by loading a checkpoint; sampling refuses otherwise.
  bool trained() const { return trained_; }
  void set_trained(bool on) { trained_ = on; }

  /// Spatial size of each attention layer's query grid.
  int attention_resolution(int layer) const {
    switch (layer) {
      case kMidAttention: return cfg_.resolution / 4;
      case kUpAttention1: return cfg_.resolution / 2;
      default: return cfg_.resolution;
    }
  }

  Tensor forward(const Tensor& z, const std::vector<int>& t, const Tensor& context,
                 AttentionController* ctl = nullptr) const {
    check_inputs(z, t, context);
    auto temb = time2_(ops::silu(time1_(timestep_embedding(t, cfg_.time_dim))));
    auto h0 = down0_(conv_in_(z), temb);
    auto h1 = down1_(ds0_(h0), temb);
    auto m = mid0_(ds1_(h1), temb);
    m = mid_attn_(m, context, ctl);
    m = mid1_(m, temb);
    auto u1 = up1_(ops::concat<float>({ops::upsample2x(m), h1}, 1), temb);
    u1 = up1_attn_(u1, context, ctl);
    auto u0 = up0_(ops::concat<float>({ops::upsample2x(u1), h0}, 1), temb);
    u0 = up0_attn_(u0, context, ctl);
    return conv_out_(ops::silu(out_norm_(u0)));
  }

  /// Single timestep shared by the whole batch.
  Tensor forward(const Tensor& z, int t, const Tensor& context, AttentionController* ctl = nullptr) const {
    return forward(z, std::vector<int>(static_cast<std::size_t>(z.dim(0)), t), context, ctl);
  }

 private:
  void check_inputs(const Tensor& z, const std::vector<int>& t, const Tensor& context) const {
    if (z.rank() != 4 || z.dim(1) != cfg_.in_channels || z.dim(2) != cfg_.resolution || z.dim(3) != cfg_.resolution) {
      throw DenoiserError("unet: latent " + shape_str(z.shape()) + " does not match [N, " +
                          std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.resolution) + ", " +
                          std::to_string(cfg_.resolution) + "]");
    }
    if (static_cast<int>(t.size()) != z.dim(0)) throw DenoiserError("unet: one timestep per sample required");
    for (int ti : t) {
      if (ti < 0 || ti >= cfg_.num_timesteps) throw DenoiserError("unet: timestep " + std::to_string(ti) + " out of range");
    }
    if (context.rank() != 3 || context.dim(0) != z.dim(0) || context.dim(2) != cfg_.context_dim) {
      throw DenoiserError("unet: context " + shape_str(context.shape()) + " does not match batch " +
                          std::to_string(z.dim(0)) + " and width " + std::to_string(cfg_.context_dim));
    }
  }

  UNetConfig cfg_;
  ParameterSet params_;
  bool trained_ = false;
  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_, ds0_, ds1_, conv_out_;
  nn::ResBlock down0_, down1_, mid0_, mid1_, up1_, up0_;
  nn::CrossAttentionBlock mid_attn_, up1_attn_, up0_attn_;
  nn::GroupNorm out_norm_;
};

}  // namespace cfdiff
