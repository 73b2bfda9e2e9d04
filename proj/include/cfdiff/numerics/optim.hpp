// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "cfdiff/numerics/tensor.hpp"

namespace cfdiff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected adaptive-moment optimizer. Parameters are updated in place.
template <std::floating_point T>
class BasicAdam {
 public:
  BasicAdam(std::vector<BasicTensor<T>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    first_.reserve(params_.size());
    second_.reserve(params_.size());
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0);
      second_.emplace_back(p.numel(), 0.0);
    }
  }

  /// Applies one update using each parameter's accumulated gradient.
  void step() {
    std::vector<BasicTensor<T>> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(p.grad());
    step(grads);
  }

  /// Applies one update with explicitly supplied gradients.
  void step(std::span<const BasicTensor<T>> grads) {
    if (grads.size() != params_.size()) throw NumericsError("adam: gradient count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (grads[i].shape() != params_[i].shape()) {
        throw NumericsError("adam: gradient shape " + shape_str(grads[i].shape()) + " vs parameter " +
                            shape_str(params_[i].shape()));
      }
      check_finite<T>(grads[i].data(), "adam", "gradient");
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i].mutable_data();
      auto g = grads[i].data();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double update = cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::uint64_t steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::span<const std::vector<double>> first_moments() const { return first_; }
  std::span<const std::vector<double>> second_moments() const { return second_; }

 private:
  std::vector<BasicTensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t steps_ = 0;
};

using Adam = BasicAdam<float>;

/// Cosine decay from `base` at step 0 to `base * floor` at the last step.
inline double cosine_lr(double base, int step, int total, double floor = 0.1) {
  if (total <= 1) return base;
  const double f = static_cast<double>(step) / (total - 1);
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * f)));
}

}  // namespace cfdiff
