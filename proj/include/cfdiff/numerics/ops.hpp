// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cfdiff/numerics/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes the forward
// values eagerly and registers a backward rule through make_op_result.
namespace cfdiff::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] inline void fail(const char* op, const std::string& msg) {
  throw NumericsError(std::string(op) + ": " + msg);
}

// Describes how a smaller operand maps onto a larger one when its non-unit
// dimensions form one contiguous block: small[(i / inner) % mid].
struct Broadcast {
  std::size_t inner = 1;
  std::size_t mid = 1;
};

inline bool plan_broadcast(const Shape& big, const Shape& small, Broadcast& plan) {
  if (small.size() > big.size()) return false;
  Shape padded(big.size() - small.size(), 1);
  padded.insert(padded.end(), small.begin(), small.end());
  int first = -1, last = -1;
  for (std::size_t i = 0; i < big.size(); ++i) {
    if (padded[i] != 1) {
      if (padded[i] != big[i]) return false;
      if (first < 0) first = static_cast<int>(i);
      last = static_cast<int>(i);
    }
  }
  plan = {};
  if (first < 0) {
    plan.inner = shape_numel(big);
    return true;
  }
  for (int i = first; i <= last; ++i) {
    if (padded[static_cast<std::size_t>(i)] != big[static_cast<std::size_t>(i)]) return false;
    plan.mid *= static_cast<std::size_t>(big[static_cast<std::size_t>(i)]);
  }
  for (std::size_t i = static_cast<std::size_t>(last) + 1; i < big.size(); ++i) {
    plan.inner *= static_cast<std::size_t>(big[i]);
  }
  return true;
}

inline std::size_t bcast_index(std::size_t i, const Broadcast& p) { return (i / p.inner) % p.mid; }

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

/// Elementwise sum. `b` may broadcast into `a` (or vice versa) when its
/// non-unit dimensions form one contiguous block, e.g. a [C,1,1] bias.
template <std::floating_point T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() == b.shape()) {
    Buffer<T> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return make_op_result<T>("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        auto g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }
  detail::Broadcast plan;
  if (!detail::plan_broadcast(a.shape(), b.shape(), plan)) {
    if (detail::plan_broadcast(b.shape(), a.shape(), plan)) return add(b, a);
    detail::fail("add", "cannot broadcast " + shape_str(b.shape()) + " to " + shape_str(a.shape()));
  }
  Buffer<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[detail::bcast_index(i, plan)];
  return make_op_result<T>("add", a.shape(), std::move(out), {a, b}, [plan](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[detail::bcast_index(i, plan)] += self.grad[i];
    }
  });
}

/// Elementwise product with the same broadcasting rule as add().
template <std::floating_point T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::Broadcast plan;
  if (a.shape() != b.shape() && !detail::plan_broadcast(a.shape(), b.shape(), plan)) {
    if (detail::plan_broadcast(b.shape(), a.shape(), plan)) return mul(b, a);
    detail::fail("mul", "cannot broadcast " + shape_str(b.shape()) + " to " + shape_str(a.shape()));
  }
  if (a.shape() == b.shape()) plan = {1, a.numel()};
  Buffer<T> out(a.numel());
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[detail::bcast_index(i, plan)];
  return make_op_result<T>("mul", a.shape(), std::move(out), {a, b}, [plan](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    const auto& x = pa->data;
    const auto& y = pb->data;
    if (pa->requires_grad) {
      auto g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[detail::bcast_index(i, plan)];
    }
    if (pb->requires_grad) {
      auto g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[detail::bcast_index(i, plan)] += self.grad[i] * x[i];
    }
  });
}

template <std::floating_point T>
BasicTensor<T> scale(const BasicTensor<T>& x, T s) {
  Buffer<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * v[i];
  return make_op_result<T>("scale", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// a*x + b*y with the products accumulated in double precision.
template <std::floating_point T>
BasicTensor<T> combine(double a, const BasicTensor<T>& x, double b, const BasicTensor<T>& y) {
  if (x.shape() != y.shape()) detail::fail("combine", shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  Buffer<T> out(x.numel());
  auto xv = x.data();
  auto yv = y.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(a * static_cast<double>(xv[i]) + b * static_cast<double>(yv[i]));
  }
  return make_op_result<T>("combine", x.shape(), std::move(out), {x, y}, [a, b](Node<T>& self) {
    auto& px = self.parents[0];
    auto& py = self.parents[1];
    if (px->requires_grad) {
      auto g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(a * self.grad[i]);
    }
    if (py->requires_grad) {
      auto g = py->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(b * self.grad[i]);
    }
  });
}

template <std::floating_point T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <std::floating_point T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    detail::fail("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  return make_op_result<T>("reshape", std::move(shape), Buffer<T>(x.data().begin(), x.data().end()), {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <std::floating_point T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) detail::fail("permute", "rank mismatch");
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::size_t> in_strides(static_cast<std::size_t>(r));
  {
    std::size_t s = 1;
    for (int i = r - 1; i >= 0; --i) {
      in_strides[static_cast<std::size_t>(i)] = s;
      s *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
    }
  }
  std::vector<std::size_t> src_stride(static_cast<std::size_t>(r));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)]) detail::fail("permute", "invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(p)];
    src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(p)];
  }
  // map[i] = source flat index of output element i
  std::vector<std::size_t> map(x.numel());
  std::vector<int> counter(static_cast<std::size_t>(r), 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    map[i] = src;
    for (int d = r - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      src += src_stride[du];
      if (++counter[du] < out_shape[du]) break;
      src -= src_stride[du] * static_cast<std::size_t>(out_shape[du]);
      counter[du] = 0;
    }
  }
  Buffer<T> out(map.size());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[map[i]];
  return make_op_result<T>("permute", std::move(out_shape), std::move(out), {x},
                           [map = std::move(map)](Node<T>& self) {
                             auto g = self.parents[0]->grad_buffer();
                             for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
                           });
}

/// a [..., M, K] x b [K, N] -> [..., M, N], or batched a [B, M, K] x b [B, K, N].
template <std::floating_point T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (a.rank() < 2) detail::fail("matmul", "lhs must have rank >= 2, got " + shape_str(a.shape()));
  const int K = a.dim(-1);
  if (b.rank() == 2) {
    if (b.dim(0) != K) detail::fail("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int N = b.dim(1);
    const int rows = static_cast<int>(a.numel() / static_cast<std::size_t>(K));
    Shape out_shape = a.shape();
    out_shape.back() = N;
    Buffer<T> out(static_cast<std::size_t>(rows) * static_cast<std::size_t>(N));
    MatMap<T>(out.data(), rows, N).noalias() =
        ConstMatMap<T>(a.data().data(), rows, K) * ConstMatMap<T>(b.data().data(), K, N);
    return make_op_result<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                             [rows, K, N](Node<T>& self) {
                               auto& pa = self.parents[0];
                               auto& pb = self.parents[1];
                               ConstMatMap<T> dy(self.grad.data(), rows, N);
                               if (pa->requires_grad) {
                                 MatMap<T>(pa->grad_buffer().data(), rows, K).noalias() +=
                                     dy * ConstMatMap<T>(pb->data.data(), K, N).transpose();
                               }
                               if (pb->requires_grad) {
                                 MatMap<T>(pb->grad_buffer().data(), K, N).noalias() +=
                                     ConstMatMap<T>(pa->data.data(), rows, K).transpose() * dy;
                               }
                             });
  }
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || b.dim(1) != K) {
    detail::fail("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int B = a.dim(0), M = a.dim(1), N = b.dim(2);
  Buffer<T> out(static_cast<std::size_t>(B) * M * N);
  for (int i = 0; i < B; ++i) {
    MatMap<T>(out.data() + static_cast<std::size_t>(i) * M * N, M, N).noalias() =
        ConstMatMap<T>(a.data().data() + static_cast<std::size_t>(i) * M * K, M, K) *
        ConstMatMap<T>(b.data().data() + static_cast<std::size_t>(i) * K * N, K, N);
  }
  return make_op_result<T>("matmul", {B, M, N}, std::move(out), {a, b}, [B, M, K, N](Node<T>& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    for (int i = 0; i < B; ++i) {
      ConstMatMap<T> dy(self.grad.data() + static_cast<std::size_t>(i) * M * N, M, N);
      if (pa->requires_grad) {
        MatMap<T>(pa->grad_buffer().data() + static_cast<std::size_t>(i) * M * K, M, K).noalias() +=
            dy * ConstMatMap<T>(pb->data.data() + static_cast<std::size_t>(i) * K * N, K, N).transpose();
      }
      if (pb->requires_grad) {
        MatMap<T>(pb->grad_buffer().data() + static_cast<std::size_t>(i) * K * N, K, N).noalias() +=
            ConstMatMap<T>(pa->data.data() + static_cast<std::size_t>(i) * M * K, M, K).transpose() * dy;
      }
    }
  });
}

/// Dense layer over the last axis: x [..., in] W [in, out] (+ bias [out]).
template <std::floating_point T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  auto y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
};

namespace detail {

template <class T>
void im2col(const T* x, int C, int H, int W, int KH, int KW, int stride, int pad, int Ho, int Wo, T* col) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < KH; ++kh) {
      for (int kw = 0; kw < KW; ++kw) {
        T* row = col + (static_cast<std::size_t>((c * KH + kh) * KW + kw)) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            row[oh * Wo + ow] =
                (ih >= 0 && ih < H && iw >= 0 && iw < W) ? x[(static_cast<std::size_t>(c) * H + ih) * W + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int C, int H, int W, int KH, int KW, int stride, int pad, int Ho, int Wo, T* dx) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < KH; ++kh) {
      for (int kw = 0; kw < KW; ++kw) {
        const T* row = col + (static_cast<std::size_t>((c * KH + kh) * KW + kw)) * Ho * Wo;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) dx[(static_cast<std::size_t>(c) * H + ih) * W + iw] += row[oh * Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation, x [N,C,H,W] weight [O,C,KH,KW] bias [O] (optional).
template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                      Conv2dGeometry geo = {}) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1)) {
    detail::fail("conv2d", "input " + shape_str(x.shape()) + " weight " + shape_str(weight.shape()));
  }
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  const int s = geo.stride, p = geo.padding;
  if (s < 1 || p < 0) detail::fail("conv2d", "invalid stride/padding");
  const int Ho = (H + 2 * p - KH) / s + 1;
  const int Wo = (W + 2 * p - KW) / s + 1;
  if (Ho <= 0 || Wo <= 0) detail::fail("conv2d", "kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.numel() != static_cast<std::size_t>(O))) detail::fail("conv2d", "bias size");
  const int CKK = C * KH * KW;
  const int HWo = Ho * Wo;
  const bool pointwise = KH == 1 && KW == 1 && s == 1 && p == 0;

  Buffer<T> out(static_cast<std::size_t>(N) * O * HWo);
  Buffer<T> col(pointwise ? 0 : static_cast<std::size_t>(CKK) * HWo);
  ConstMatMap<T> wmat(weight.data().data(), O, CKK);
  for (int n = 0; n < N; ++n) {
    const T* xn = x.data().data() + static_cast<std::size_t>(n) * C * H * W;
    const T* cm = xn;
    if (!pointwise) {
      detail::im2col(xn, C, H, W, KH, KW, s, p, Ho, Wo, col.data());
      cm = col.data();
    }
    MatMap<T> on(out.data() + static_cast<std::size_t>(n) * O * HWo, O, HWo);
    on.noalias() = wmat * ConstMatMap<T>(cm, CKK, HWo);
    if (has_bias) {
      for (int o = 0; o < O; ++o) on.row(o).array() += bias.data()[static_cast<std::size_t>(o)];
    }
  }
  std::vector<BasicTensor<T>> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_op_result<T>(
      "conv2d", {N, O, Ho, Wo}, std::move(out), parents,
      [=](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        Buffer<T> colbuf(pointwise ? 0 : static_cast<std::size_t>(CKK) * HWo);
        Buffer<T> dcol(pointwise ? 0 : static_cast<std::size_t>(CKK) * HWo);
        ConstMatMap<T> wm(pw->data.data(), O, CKK);
        for (int n = 0; n < N; ++n) {
          ConstMatMap<T> dy(self.grad.data() + static_cast<std::size_t>(n) * O * HWo, O, HWo);
          const T* xn = px->data.data() + static_cast<std::size_t>(n) * C * H * W;
          if (pw->requires_grad) {
            const T* cm = xn;
            if (!pointwise) {
              detail::im2col(xn, C, H, W, KH, KW, s, p, Ho, Wo, colbuf.data());
              cm = colbuf.data();
            }
            MatMap<T>(pw->grad_buffer().data(), O, CKK).noalias() += dy * ConstMatMap<T>(cm, CKK, HWo).transpose();
          }
          if (px->requires_grad) {
            T* dxn = px->grad_buffer().data() + static_cast<std::size_t>(n) * C * H * W;
            if (pointwise) {
              MatMap<T>(dxn, C, HWo).noalias() += wm.transpose() * dy;
            } else {
              MatMap<T>(dcol.data(), CKK, HWo).noalias() = wm.transpose() * dy;
              detail::col2im(dcol.data(), C, H, W, KH, KW, s, p, Ho, Wo, dxn);
            }
          }
          if (has_bias && self.parents[2]->requires_grad) {
            auto gb = self.parents[2]->grad_buffer();
            for (int o = 0; o < O; ++o) gb[static_cast<std::size_t>(o)] += dy.row(o).sum();
          }
        }
      });
}

/// Group normalization over x [N, C, ...] with per-channel affine terms.
template <std::floating_point T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, int groups, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 2) detail::fail("group_norm", "rank < 2");
  const int N = x.dim(0), C = x.dim(1);
  if (groups <= 0 || C % groups != 0) detail::fail("group_norm", "channels not divisible by groups");
  if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C)) {
    detail::fail("group_norm", "affine parameter size");
  }
  const std::size_t S = x.numel() / (static_cast<std::size_t>(N) * C);
  const int cpg = C / groups;
  const std::size_t group_size = S * static_cast<std::size_t>(cpg);
  Buffer<T> xhat(x.numel());
  Buffer<T> inv_std(static_cast<std::size_t>(N) * groups);
  Buffer<T> out(x.numel());
  auto v = x.data();
  auto ga = gamma.data();
  auto be = beta.data();
  for (int n = 0; n < N; ++n) {
    for (int g = 0; g < groups; ++g) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * cpg) * S;
      double mean = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) mean += v[base + i];
      mean /= static_cast<double>(group_size);
      double var = 0.0;
      for (std::size_t i = 0; i < group_size; ++i) {
        const double d = v[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(group_size);
      const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      inv_std[static_cast<std::size_t>(n) * groups + g] = istd;
      for (std::size_t i = 0; i < group_size; ++i) {
        const std::size_t c = static_cast<std::size_t>(g) * cpg + i / S;
        const T xh = static_cast<T>(v[base + i] - mean) * istd;
        xhat[base + i] = xh;
        out[base + i] = xh * ga[c] + be[c];
      }
    }
  }
  return make_op_result<T>(
      "group_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& gam = pg->data;
        const auto& dy = self.grad;
        if (pg->requires_grad || pb->requires_grad) {
          auto gg = pg->requires_grad ? pg->grad_buffer() : std::span<T>{};
          auto gbv = pb->requires_grad ? pb->grad_buffer() : std::span<T>{};
          for (std::size_t i = 0; i < dy.size(); ++i) {
            const std::size_t c = (i / S) % static_cast<std::size_t>(C);
            if (!gg.empty()) gg[c] += dy[i] * xhat[i];
            if (!gbv.empty()) gbv[c] += dy[i];
          }
        }
        if (!px->requires_grad) return;
        auto gx = px->grad_buffer();
        for (int n = 0; n < N; ++n) {
          for (int g = 0; g < groups; ++g) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * cpg) * S;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < group_size; ++i) {
              const std::size_t c = static_cast<std::size_t>(g) * cpg + i / S;
              const double dxh = static_cast<double>(dy[base + i]) * gam[c];
              m1 += dxh;
              m2 += dxh * xhat[base + i];
            }
            m1 /= static_cast<double>(group_size);
            m2 /= static_cast<double>(group_size);
            const T istd = inv_std[static_cast<std::size_t>(n) * groups + g];
            for (std::size_t i = 0; i < group_size; ++i) {
              const std::size_t c = static_cast<std::size_t>(g) * cpg + i / S;
              const double dxh = static_cast<double>(dy[base + i]) * gam[c];
              gx[base + i] += static_cast<T>((dxh - m1 - xhat[base + i] * m2) * istd);
            }
          }
        }
      });
}

/// Softmax along the last axis.
template <std::floating_point T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const std::size_t L = static_cast<std::size_t>(x.dim(-1));
  const std::size_t rows = x.numel() / L;
  Buffer<T> out(x.numel());
  auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = v.data() + r * L;
    T* yr = out.data() + r * L;
    const T mx = *std::max_element(xr, xr + L);
    T sum = 0;
    for (std::size_t j = 0; j < L; ++j) sum += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < L; ++j) yr[j] /= sum;
  }
  return make_op_result<T>("softmax", x.shape(), std::move(out), {x}, [L, rows](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * L;
      const T* dy = self.grad.data() + r * L;
      T dot = 0;
      for (std::size_t j = 0; j < L; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < L; ++j) g[r * L + j] += y[j] * (dy[j] - dot);
    }
  });
}

namespace detail {

template <class T, class F, class D>
BasicTensor<T> unary(const char* op, const BasicTensor<T>& x, F f, D df) {
  Buffer<T> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  return make_op_result<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& self) {
    auto& p = self.parents[0];
    auto g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p->data[i], self.data[i]);
  });
}

}  // namespace detail

template <std::floating_point T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  return detail::unary(
      "silu", x, [](T v) { return v * detail::sigmoid(v); },
      [](T v, T) {
        const T s = detail::sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Exact (erf-based) GELU.
template <std::floating_point T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <std::floating_point T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary(
      "sigmoid", x, [](T v) { return detail::sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

/// Scaled dot-product attention, q [B,Lq,d] k [B,Lk,d] v [B,Lk,dv] -> [B,Lq,dv].
///
/// The optional hook sees the softmaxed probabilities [B,Lq,Lk] before they
/// are applied to `v`; it may record them, and may overwrite them in place,
/// returning true if it did. Overwritten probabilities are treated as
/// constants by the backward rule.
template <std::floating_point T>
using AttentionHook = std::function<bool(std::span<T> probs, int batch, int queries, int keys)>;

template <std::floating_point T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const AttentionHook<T>* hook = nullptr) {
  using detail::ConstMatMap;
  using detail::MatMap;
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
      q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1)) {
    detail::fail("attention", "q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                                  shape_str(v.shape()));
  }
  const int B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), D = q.dim(2), Dv = v.dim(2);
  const T sc = T(1) / std::sqrt(static_cast<T>(D));
  Buffer<T> probs(static_cast<std::size_t>(B) * Lq * Lk);
  for (int b = 0; b < B; ++b) {
    MatMap<T> pm(probs.data() + static_cast<std::size_t>(b) * Lq * Lk, Lq, Lk);
    pm.noalias() = ConstMatMap<T>(q.data().data() + static_cast<std::size_t>(b) * Lq * D, Lq, D) *
                   ConstMatMap<T>(k.data().data() + static_cast<std::size_t>(b) * Lk * D, Lk, D).transpose();
    pm *= sc;
    for (int i = 0; i < Lq; ++i) {
      auto row = pm.row(i);
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
  }
  bool overridden = false;
  if (hook && *hook) overridden = (*hook)(std::span<T>(probs), B, Lq, Lk);
  Buffer<T> out(static_cast<std::size_t>(B) * Lq * Dv);
  for (int b = 0; b < B; ++b) {
    MatMap<T>(out.data() + static_cast<std::size_t>(b) * Lq * Dv, Lq, Dv).noalias() =
        ConstMatMap<T>(probs.data() + static_cast<std::size_t>(b) * Lq * Lk, Lq, Lk) *
        ConstMatMap<T>(v.data().data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv);
  }
  return make_op_result<T>(
      "attention", {B, Lq, Dv}, std::move(out), {q, k, v},
      [=, probs = std::move(probs)](Node<T>& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        detail::RowMat<T> dp(Lq, Lk);
        for (int b = 0; b < B; ++b) {
          ConstMatMap<T> dO(self.grad.data() + static_cast<std::size_t>(b) * Lq * Dv, Lq, Dv);
          ConstMatMap<T> P(probs.data() + static_cast<std::size_t>(b) * Lq * Lk, Lq, Lk);
          ConstMatMap<T> V(pv->data.data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv);
          if (pv->requires_grad) {
            MatMap<T>(pv->grad_buffer().data() + static_cast<std::size_t>(b) * Lk * Dv, Lk, Dv).noalias() +=
                P.transpose() * dO;
          }
          if (overridden || !(pq->requires_grad || pk->requires_grad)) continue;
          dp.noalias() = dO * V.transpose();
          for (int i = 0; i < Lq; ++i) {
            const T dot = dp.row(i).dot(P.row(i));
            dp.row(i) = (P.row(i).array() * (dp.row(i).array() - dot)).matrix() * sc;
          }
          ConstMatMap<T> Q(pq->data.data() + static_cast<std::size_t>(b) * Lq * D, Lq, D);
          ConstMatMap<T> K(pk->data.data() + static_cast<std::size_t>(b) * Lk * D, Lk, D);
          if (pq->requires_grad) {
            MatMap<T>(pq->grad_buffer().data() + static_cast<std::size_t>(b) * Lq * D, Lq, D).noalias() += dp * K;
          }
          if (pk->requires_grad) {
            MatMap<T>(pk->grad_buffer().data() + static_cast<std::size_t>(b) * Lk * D, Lk, D).noalias() +=
                dp.transpose() * Q;
          }
        }
      });
}

template <std::floating_point T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double s = 0.0;
  for (T v : x.data()) s += v;
  return make_op_result<T>("sum", {1}, {static_cast<T>(s)}, {x}, [](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <std::floating_point T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <std::floating_point T>
BasicTensor<T> mse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape()) {
    detail::fail("mse_loss", shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  }
  auto d = sub(pred, target);
  return mean(mul(d, d));
}

/// Mean over all axes after the first two: [N, C, ...] -> [N, C].
template <std::floating_point T>
BasicTensor<T> spatial_mean(const BasicTensor<T>& x) {
  if (x.rank() < 3) detail::fail("spatial_mean", "rank < 3");
  const int N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (static_cast<std::size_t>(N) * C);
  Buffer<T> out(static_cast<std::size_t>(N) * C);
  auto v = x.data();
  for (std::size_t r = 0; r < out.size(); ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < S; ++i) s += v[r * S + i];
    out[r] = static_cast<T>(s / static_cast<double>(S));
  }
  return make_op_result<T>("spatial_mean", {N, C}, std::move(out), {x}, [S](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t r = 0; r < self.grad.size(); ++r) {
      for (std::size_t i = 0; i < S; ++i) g[r * S + i] += self.grad[r] * inv;
    }
  });
}

/// Concatenate along `axis`; all other dimensions must agree.
template <std::floating_point T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) detail::fail("concat", "no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) detail::fail("concat", "rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        detail::fail("concat", shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(out_shape[static_cast<std::size_t>(i)]);
  const std::size_t out_block = static_cast<std::size_t>(out_shape[static_cast<std::size_t>(axis)]) * inner;
  std::vector<std::size_t> blocks;
  Buffer<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t blk = static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]) * inner;
    blocks.push_back(blk);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * blk, blk, out.data() + o * out_block + offset);
    }
    offset += blk;
  }
  return make_op_result<T>("concat", std::move(out_shape), std::move(out), parts,
                           [outer, out_block, blocks](Node<T>& self) {
                             std::size_t off = 0;
                             for (std::size_t k = 0; k < blocks.size(); ++k) {
                               auto& p = self.parents[k];
                               if (p->requires_grad) {
                                 auto g = p->grad_buffer();
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t i = 0; i < blocks[k]; ++i) {
                                     g[o * blocks[k] + i] += self.grad[o * out_block + off + i];
                                   }
                                 }
                               }
                               off += blocks[k];
                             }
                           });
}

/// Slice [start, start+length) along `axis`.
template <std::floating_point T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int axis, int start, int length) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || length <= 0 || start + length > x.dim(axis)) {
    detail::fail("narrow", "range out of bounds for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(x.shape()[static_cast<std::size_t>(i)]);
  const std::size_t in_block = static_cast<std::size_t>(x.dim(axis)) * inner;
  const std::size_t blk = static_cast<std::size_t>(length) * inner;
  const std::size_t off = static_cast<std::size_t>(start) * inner;
  Buffer<T> out(outer * blk);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * in_block + off, blk, out.data() + o * blk);
  return make_op_result<T>("narrow", std::move(out_shape), std::move(out), {x},
                           [outer, in_block, blk, off](Node<T>& self) {
                             auto g = self.parents[0]->grad_buffer();
                             for (std::size_t o = 0; o < outer; ++o) {
                               for (std::size_t i = 0; i < blk; ++i) g[o * in_block + off + i] += self.grad[o * blk + i];
                             }
                           });
}

/// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <std::floating_point T>
BasicTensor<T> upsample2x(const BasicTensor<T>& x) {
  if (x.rank() != 4) detail::fail("upsample2x", "expects NCHW");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(N) * C;
  Buffer<T> out(planes * 4 * H * W);
  auto v = x.data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (int h = 0; h < 2 * H; ++h) {
      for (int w = 0; w < 2 * W; ++w) {
        out[(pl * 2 * H + h) * 2 * W + w] = v[(pl * H + h / 2) * W + w / 2];
      }
    }
  }
  return make_op_result<T>("upsample2x", {N, C, 2 * H, 2 * W}, std::move(out), {x}, [planes, H, W](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      for (int h = 0; h < 2 * H; ++h) {
        for (int w = 0; w < 2 * W; ++w) g[(pl * H + h / 2) * W + w / 2] += self.grad[(pl * 2 * H + h) * 2 * W + w];
      }
    }
  });
}

/// Row lookup: table [V, d], ids -> [ids.size(), d].
template <std::floating_point T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::vector<int> ids) {
  if (table.rank() != 2) detail::fail("gather_rows", "table must be 2-D");
  const int V = table.dim(0), D = table.dim(1);
  Buffer<T> out(ids.size() * static_cast<std::size_t>(D));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= V) detail::fail("gather_rows", "index " + std::to_string(ids[r]) + " out of range");
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[r]) * D, D, out.data() + r * D);
  }
  const int n = static_cast<int>(ids.size());
  return make_op_result<T>("gather_rows", {n, D}, std::move(out), {table}, [ids = std::move(ids), D](Node<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      for (int j = 0; j < D; ++j) g[static_cast<std::size_t>(ids[r]) * D + j] += self.grad[r * D + j];
    }
  });
}

/// Scale each row of [R, d] to unit Euclidean norm.
template <std::floating_point T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps = T(1e-12)) {
  const std::size_t D = static_cast<std::size_t>(x.dim(-1));
  const std::size_t R = x.numel() / D;
  Buffer<T> out(x.numel());
  Buffer<T> norms(R);
  auto v = x.data();
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < D; ++j) s += static_cast<double>(v[r * D + j]) * v[r * D + j];
    const T nrm = static_cast<T>(std::max(std::sqrt(s), static_cast<double>(eps)));
    norms[r] = nrm;
    for (std::size_t j = 0; j < D; ++j) out[r * D + j] = v[r * D + j] / nrm;
  }
  return make_op_result<T>("l2_normalize", x.shape(), std::move(out), {x},
                           [D, R, norms = std::move(norms)](Node<T>& self) {
                             auto g = self.parents[0]->grad_buffer();
                             for (std::size_t r = 0; r < R; ++r) {
                               const T* y = self.data.data() + r * D;
                               const T* dy = self.grad.data() + r * D;
                               T dot = 0;
                               for (std::size_t j = 0; j < D; ++j) dot += y[j] * dy[j];
                               for (std::size_t j = 0; j < D; ++j) g[r * D + j] += (dy[j] - y[j] * dot) / norms[r];
                             }
                           });
}

/// Mean over rows of -sum_k target[k] * log softmax(logits)[k]; targets are
/// probability rows (one-hot or soft).
template <std::floating_point T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  if (logits.rank() != 2 || logits.shape() != targets.shape()) {
    detail::fail("softmax_cross_entropy", shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
  }
  const std::size_t B = static_cast<std::size_t>(logits.dim(0));
  const std::size_t K = static_cast<std::size_t>(logits.dim(1));
  Buffer<T> probs(B * K);
  double loss = 0.0;
  auto z = logits.data();
  auto t = targets.data();
  for (std::size_t b = 0; b < B; ++b) {
    T mx = z[b * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[b * K + k]);
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) se += std::exp(static_cast<double>(z[b * K + k] - mx));
    const double lse = static_cast<double>(mx) + std::log(se);
    for (std::size_t k = 0; k < K; ++k) {
      probs[b * K + k] = static_cast<T>(std::exp(z[b * K + k] - lse));
      loss -= static_cast<double>(t[b * K + k]) * (static_cast<double>(z[b * K + k]) - lse);
    }
  }
  loss /= static_cast<double>(B);
  return make_op_result<T>("softmax_cross_entropy", {1}, {static_cast<T>(loss)}, {logits, targets},
                           [B, K, probs = std::move(probs)](Node<T>& self) {
                             auto& pz = self.parents[0];
                             auto& pt = self.parents[1];
                             const T gs = self.grad[0] / static_cast<T>(B);
                             if (pz->requires_grad) {
                               auto g = pz->grad_buffer();
                               for (std::size_t b = 0; b < B; ++b) {
                                 T mass = 0;
                                 for (std::size_t k = 0; k < K; ++k) mass += pt->data[b * K + k];
                                 for (std::size_t k = 0; k < K; ++k) {
                                   g[b * K + k] += gs * (probs[b * K + k] * mass - pt->data[b * K + k]);
                                 }
                               }
                             }
                             if (pt->requires_grad) {
                               auto g = pt->grad_buffer();
                               for (std::size_t i = 0; i < B * K; ++i) g[i] -= gs * std::log(std::max(probs[i], T(1e-30)));
                             }
                           });
}

/// Mean binary cross-entropy on logits.
template <std::floating_point T>
BasicTensor<T> bce_with_logits(const BasicTensor<T>& logits, const BasicTensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    detail::fail("bce_with_logits", shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
  }
  const std::size_t n = logits.numel();
  double loss = 0.0;
  auto z = logits.data();
  auto t = targets.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = z[i];
    // max(x,0) - x*t + log(1 + exp(-|x|))
    loss += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  return make_op_result<T>("bce_with_logits", {1}, {static_cast<T>(loss)}, {logits, targets}, [n](Node<T>& self) {
    auto& pz = self.parents[0];
    auto& pt = self.parents[1];
    const T gs = self.grad[0] / static_cast<T>(n);
    if (pz->requires_grad) {
      auto g = pz->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += gs * (detail::sigmoid(pz->data[i]) - pt->data[i]);
    }
    if (pt->requires_grad) {
      auto g = pt->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] -= gs * pz->data[i];
    }
  });
}

}  // namespace cfdiff::ops
