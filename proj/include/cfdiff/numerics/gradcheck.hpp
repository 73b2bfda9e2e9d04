// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cfdiff/numerics/rng.hpp"
#include "cfdiff/numerics/tensor.hpp"

namespace cfdiff {

struct GradCheckOptions {
  double step = 1e-3;
  /// Coordinates probed per parameter; all of them when the tensor is smaller.
  int samples_per_param = 24;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of a scalar function with central
/// differences. Returns max |ad - fd| / (|fd| + 1e-8) over the probed
/// coordinates. Throws if `f` is not deterministic.
template <std::floating_point T>
double finite_diff_check(const std::function<BasicTensor<T>()>& f, std::vector<BasicTensor<T>> params,
                         const GradCheckOptions& opts = {}) {
  if (opts.step <= 0) throw NumericsError("finite_diff_check: step must be positive");
  {
    NoGradGuard ng;
    const T a = f().item();
    const T b = f().item();
    if (a != b) throw NumericsError("finite_diff_check: function is not deterministic");
  }
  for (auto& p : params) p.zero_grad();
  backward(f());

  Rng rng(opts.seed);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad_data().begin(), p.grad_data().end(), analytic.begin());
    std::vector<std::size_t> coords;
    if (static_cast<int>(p.numel()) <= opts.samples_per_param) {
      for (std::size_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    } else {
      for (int s = 0; s < opts.samples_per_param; ++s) coords.push_back(rng.below(p.numel()));
    }
    auto w = p.mutable_data();
    for (std::size_t i : coords) {
      const T saved = w[i];
      NoGradGuard ng;
      w[i] = static_cast<T>(saved + opts.step);
      const double up = f().item();
      w[i] = static_cast<T>(saved - opts.step);
      const double down = f().item();
      w[i] = saved;
      const double fd = (up - down) / (2.0 * opts.step);
      worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  return worst;
}

}  // namespace cfdiff
