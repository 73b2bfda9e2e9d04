// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cfdiff/numerics/gradcheck.hpp"
#include "cfdiff/numerics/ops.hpp"

namespace cfdiff {

struct PrimitiveCheck {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

// Each check contracts the op output with fixed random weights so every
// output coordinate contributes a generic, non-degenerate gradient.
inline std::vector<PrimitiveCheck> primitive_checks() {
  using T = TensorD;
  auto weighted = [](const T& y, Rng& rng) { return T::randn(y.shape(), rng); };
  auto param = [](const Shape& s, Rng& rng, double sd = 1.0) {
    auto t = T::randn(s, rng, sd);
    t.set_requires_grad();
    return t;
  };
  auto check = [weighted](std::uint64_t seed, Rng& rng, std::vector<T> params, std::function<T()> op) {
    auto probe = op();
    auto w = weighted(probe, rng);
    std::function<T()> f = [op, w] { return ops::sum(ops::mul(op(), w)); };
    return finite_diff_check<double>(f, std::move(params), {.step = 1e-4, .samples_per_param = 24, .seed = seed});
  };

  std::vector<PrimitiveCheck> out;
  auto reg = [&out](std::string name, std::function<double(std::uint64_t)> fn) {
    out.push_back({std::move(name), std::move(fn)});
  };

  reg("add", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({3, 4}, r), b = param({3, 4}, r);
    return check(s, r, {a, b}, [=] { return ops::add(a, b); });
  });
  reg("add_broadcast", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3, 2, 2}, r), b = param({3, 1, 1}, r);
    return check(s, r, {a, b}, [=] { return ops::add(a, b); });
  });
  reg("mul", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({5}, r), b = param({5}, r);
    return check(s, r, {a, b}, [=] { return ops::mul(a, b); });
  });
  reg("mul_broadcast", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3, 4}, r), b = param({4}, r);
    return check(s, r, {a, b}, [=] { return ops::mul(a, b); });
  });
  reg("scale", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({4}, r);
    return check(s, r, {a}, [=] { return ops::scale(a, -1.7); });
  });
  reg("combine", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3}, r), b = param({2, 3}, r);
    return check(s, r, {a, b}, [=] { return ops::combine(0.7, a, -1.3, b); });
  });
  reg("reshape", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 6}, r);
    return check(s, r, {a}, [=] { return ops::reshape(a, {3, 4}); });
  });
  reg("permute", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3, 4}, r);
    return check(s, r, {a}, [=] { return ops::permute(a, {2, 0, 1}); });
  });
  reg("matmul", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3, 4}, r), b = param({4, 5}, r);
    return check(s, r, {a, b}, [=] { return ops::matmul(a, b); });
  });
  reg("matmul_batched", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3, 4}, r), b = param({2, 4, 2}, r);
    return check(s, r, {a, b}, [=] { return ops::matmul(a, b); });
  });
  reg("conv2d", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 3, 5, 5}, r), w = param({4, 3, 3, 3}, r, 0.5), b = param({4}, r);
    return check(s, r, {x, w, b}, [=] { return ops::conv2d(x, w, b, {1, 1}); });
  });
  reg("conv2d_strided", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({1, 2, 6, 6}, r), w = param({3, 2, 3, 3}, r, 0.5), b = param({3}, r);
    return check(s, r, {x, w, b}, [=] { return ops::conv2d(x, w, b, {2, 1}); });
  });
  reg("conv2d_pointwise", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 3, 3, 3}, r), w = param({2, 3, 1, 1}, r), b = param({2}, r);
    return check(s, r, {x, w, b}, [=] { return ops::conv2d(x, w, b, {1, 0}); });
  });
  reg("group_norm", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 4, 3, 3}, r), g = param({4}, r), b = param({4}, r);
    return check(s, r, {x, g, b}, [=] { return ops::group_norm(x, 2, g, b); });
  });
  reg("softmax", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({3, 5}, r, 2.0);
    return check(s, r, {x}, [=] { return ops::softmax(x); });
  });
  reg("silu", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({7}, r, 2.0);
    return check(s, r, {x}, [=] { return ops::silu(x); });
  });
  reg("gelu", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({7}, r, 2.0);
    return check(s, r, {x}, [=] { return ops::gelu(x); });
  });
  reg("sigmoid", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({7}, r, 2.0);
    return check(s, r, {x}, [=] { return ops::sigmoid(x); });
  });
  reg("attention", [=](std::uint64_t s) {
    Rng r(s);
    auto q = param({2, 4, 3}, r), k = param({2, 5, 3}, r), v = param({2, 5, 2}, r);
    return check(s, r, {q, k, v}, [=] { return ops::attention(q, k, v); });
  });
  reg("sum", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 3}, r);
    return check(s, r, {x}, [=] { return ops::sum(x); });
  });
  reg("mean", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 3}, r);
    return check(s, r, {x}, [=] { return ops::mean(x); });
  });
  reg("spatial_mean", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({2, 3, 2, 2}, r);
    return check(s, r, {x}, [=] { return ops::spatial_mean(x); });
  });
  reg("concat", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 1, 3}, r), b = param({2, 2, 3}, r);
    return check(s, r, {a, b}, [=] { return ops::concat<double>({a, b}, 1); });
  });
  reg("narrow", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({3, 4}, r);
    return check(s, r, {a}, [=] { return ops::narrow(a, 1, 1, 2); });
  });
  reg("upsample2x", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({1, 2, 2, 3}, r);
    return check(s, r, {a}, [=] { return ops::upsample2x(a); });
  });
  reg("gather_rows", [=](std::uint64_t s) {
    Rng r(s);
    auto t = param({5, 3}, r);
    return check(s, r, {t}, [=] { return ops::gather_rows(t, {4, 0, 4, 2}); });
  });
  reg("l2_normalize", [=](std::uint64_t s) {
    Rng r(s);
    auto x = param({3, 4}, r);
    return check(s, r, {x}, [=] { return ops::l2_normalize(x); });
  });
  reg("softmax_cross_entropy", [=](std::uint64_t s) {
    Rng r(s);
    auto z = param({3, 4}, r, 2.0);
    auto t = ops::softmax(T::randn({3, 4}, r));
    return check(s, r, {z}, [=] { return ops::softmax_cross_entropy(z, t); });
  });
  reg("bce_with_logits", [=](std::uint64_t s) {
    Rng r(s);
    auto z = param({6}, r, 2.0);
    auto t = T::uniform({6}, r, 0.0, 1.0);
    return check(s, r, {z}, [=] { return ops::bce_with_logits(z, t); });
  });
  reg("mse_loss", [=](std::uint64_t s) {
    Rng r(s);
    auto a = param({2, 3}, r), b = param({2, 3}, r);
    return check(s, r, {a, b}, [=] { return ops::mse_loss(a, b); });
  });
  return out;
}

}  // namespace cfdiff
