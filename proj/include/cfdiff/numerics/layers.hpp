// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "cfdiff/numerics/ops.hpp"
#include "cfdiff/numerics/rng.hpp"
#include "cfdiff/numerics/tensor.hpp"

namespace cfdiff {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Ordered, named registry of a model's trainable tensors.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : params_) {
      if (n == name) throw NumericsError("duplicate parameter name '" + name + "'");
    }
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
  }

  const NamedTensors& named() const { return params_; }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [_, t] : params_) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& [_, t] : params_) {
      t.set_requires_grad(on);
      if (!on) t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Overwrites values from a loaded table; names and shapes must match exactly.
  void assign(const NamedTensors& values) {
    if (values.size() != params_.size()) {
      throw NumericsError("parameter count mismatch: expected " + std::to_string(params_.size()) + ", got " +
                          std::to_string(values.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, t] = params_[i];
      const auto& [vname, v] = values[i];
      if (name != vname || t.shape() != v.shape()) {
        throw NumericsError("parameter '" + name + "' " + shape_str(t.shape()) + " does not match '" + vname +
                            "' " + shape_str(v.shape()));
      }
      auto dst = t.mutable_data();
      std::copy(v.data().begin(), v.data().end(), dst.begin());
    }
  }

  /// FNV-1a over names, shapes and raw float bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, t] : params_) {
      feed(name.data(), name.size());
      for (int d : t.shape()) feed(&d, sizeof d);
      feed(t.data().data(), t.numel() * sizeof(float));
    }
    return h;
  }

 private:
  NamedTensors params_;
};

namespace nn {

inline Tensor init_normal(const Shape& shape, Rng& rng, double fan_in) {
  return Tensor::randn(shape, rng, 1.0 / std::sqrt(fan_in));
}

struct Conv2d {
  Tensor weight, bias;
  ops::Conv2dGeometry geo;

  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, Rng& rng, int in, int out, int kernel, int stride = 1,
         int padding = -1, bool zero_init = false)
      : geo{stride, padding < 0 ? kernel / 2 : padding} {
    const Shape ws{out, in, kernel, kernel};
    weight = ps.add(name + ".weight", zero_init ? Tensor::zeros(ws) : init_normal(ws, rng, in * kernel * kernel));
    bias = ps.add(name + ".bias", Tensor::zeros({out}));
  }

  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, geo); }
};

struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, Rng& rng, int in, int out, bool with_bias = true,
         bool zero_init = false) {
    weight = ps.add(name + ".weight", zero_init ? Tensor::zeros({in, out}) : init_normal({in, out}, rng, in));
    if (with_bias) bias = ps.add(name + ".bias", Tensor::zeros({out}));
  }

  Tensor operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterSet& ps, const std::string& name, int channels, int groups_)
      : groups(groups_) {
    gamma = ps.add(name + ".gamma", Tensor::full({channels}, 1.0f));
    beta = ps.add(name + ".beta", Tensor::zeros({channels}));
  }

  Tensor operator()(const Tensor& x) const { return ops::group_norm(x, groups, gamma, beta); }
};

/// Layer norm over the last axis of [..., d], composed from group_norm.
struct LayerNorm {
  GroupNorm gn;
  int dim = 0;

  LayerNorm() = default;
  LayerNorm(ParameterSet& ps, const std::string& name, int d) : gn(ps, name, d, 1), dim(d) {}

  Tensor operator()(const Tensor& x) const {
    const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(dim));
    // [rows, d, 1] makes each row its own sample with d channels in one group.
    auto y = gn(ops::reshape(x, {rows, dim, 1}));
    return ops::reshape(y, x.shape());
  }
};

/// [B, L, heads*dh] <-> [B*heads, L, dh].
inline Tensor split_heads(const Tensor& x, int heads) {
  const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
  auto y = ops::permute(ops::reshape(x, {B, L, heads, D / heads}), {0, 2, 1, 3});
  return ops::reshape(y, {B * heads, L, D / heads});
}

inline Tensor merge_heads(const Tensor& x, int heads) {
  const int B = x.dim(0) / heads, L = x.dim(1), dh = x.dim(2);
  auto y = ops::permute(ops::reshape(x, {B, heads, L, dh}), {0, 2, 1, 3});
  return ops::reshape(y, {B, L, heads * dh});
}

/// Multi-head attention from queries [B, Lq, dq] to a key/value source
/// [B, Lk, dkv]. The hook sees probabilities laid out [B*heads, Lq, Lk].
struct MultiHeadAttention {
  Linear to_q, to_k, to_v, to_out;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& ps, const std::string& name, Rng& rng, int query_dim, int source_dim, int inner,
                     int heads_, bool zero_out = false)
      : to_q(ps, name + ".q", rng, query_dim, inner, false),
        to_k(ps, name + ".k", rng, source_dim, inner, false),
        to_v(ps, name + ".v", rng, source_dim, inner, false),
        to_out(ps, name + ".out", rng, inner, query_dim, true, zero_out),
        heads(heads_) {
    if (inner % heads_ != 0) throw NumericsError(name + ": inner dim not divisible by heads");
  }

  Tensor operator()(const Tensor& x, const Tensor& source, const ops::AttentionHook<float>* hook = nullptr) const {
    auto q = split_heads(to_q(x), heads);
    auto k = split_heads(to_k(source), heads);
    auto v = split_heads(to_v(source), heads);
    return to_out(merge_heads(ops::attention(q, k, v, hook), heads));
  }
};

}  // namespace nn
}  // namespace cfdiff
