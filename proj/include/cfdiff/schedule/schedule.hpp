// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfdiff/numerics/ops.hpp"
#include "cfdiff/numerics/tensor.hpp"

namespace cfdiff {

class ScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BetaKind { linear, scaled_linear };

inline const char* to_string(BetaKind k) { return k == BetaKind::linear ? "linear" : "scaled_linear"; }

inline BetaKind beta_kind_from_string(const std::string& s) {
  if (s == "linear") return BetaKind::linear;
  if (s == "scaled_linear") return BetaKind::scaled_linear;
  throw ScheduleError("unknown beta schedule '" + s + "'");
}

/// Timestep sentinel for the clean sample (alpha_bar = 1), i.e. the end of
/// a sampling chain and the start of an inversion chain.
inline constexpr int kCleanStep = -1;

/// Variance tables for DDPM noising and DDIM stepping. Immutable once built.
class DiffusionSchedule {
 public:
  static DiffusionSchedule make(BetaKind kind, int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ScheduleError("schedule needs at least one timestep");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
      throw ScheduleError("beta bounds must satisfy 0 < start <= end < 1");
    }
    if (steps == 1 && beta_start != beta_end) {
      throw ScheduleError("a single-step schedule needs beta_start == beta_end");
    }
    DiffusionSchedule s;
    s.kind_ = kind;
    s.beta_start_ = beta_start;
    s.beta_end_ = beta_end;
    s.betas_.resize(static_cast<std::size_t>(steps));
    const double denom = steps > 1 ? static_cast<double>(steps - 1) : 1.0;
    for (int t = 0; t < steps; ++t) {
      const double f = static_cast<double>(t) / denom;
      double b = 0.0;
      if (kind == BetaKind::linear) {
        b = beta_start + f * (beta_end - beta_start);
      } else {
        const double r = std::sqrt(beta_start) + f * (std::sqrt(beta_end) - std::sqrt(beta_start));
        b = r * r;
      }
      s.betas_[static_cast<std::size_t>(t)] = b;
    }
    // The endpoints are the configured values, not a sqrt/square round trip.
    s.betas_.front() = beta_start;
    s.betas_.back() = beta_end;
    s.alphas_.resize(s.betas_.size());
    s.alpha_bars_.resize(s.betas_.size());
    double prod = 1.0;
    for (std::size_t t = 0; t < s.betas_.size(); ++t) {
      s.alphas_[t] = 1.0 - s.betas_[t];
      prod *= s.alphas_[t];
      s.alpha_bars_[t] = prod;
    }
    return s;
  }

  int num_steps() const { return static_cast<int>(betas_.size()); }
  BetaKind kind() const { return kind_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

  /// alpha_bar at `t`, with kCleanStep mapping to 1.
  double alpha_bar(int t) const {
    if (t == kCleanStep) return 1.0;
    check_step(t);
    return alpha_bars_[static_cast<std::size_t>(t)];
  }

  void check_step(int t) const {
    if (t < 0 || t >= num_steps()) {
      throw ScheduleError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps() - 1) + "]");
    }
  }

 private:
  BetaKind kind_ = BetaKind::scaled_linear;
  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> betas_, alphas_, alpha_bars_;
};

enum class PlanDirection { sampling, inversion };

/// Inference timesteps, stored ascending. Sampling walks them from the back
/// and finishes at kCleanStep; inversion walks kCleanStep -> front -> back.
struct TimestepPlan {
  std::vector<int> timesteps;
  PlanDirection direction = PlanDirection::sampling;

  std::size_t size() const { return timesteps.size(); }

  /// Ordered (from, to) pairs visited in this plan's direction.
  std::vector<std::pair<int, int>> transitions() const {
    std::vector<std::pair<int, int>> out;
    if (direction == PlanDirection::inversion) {
      int prev = kCleanStep;
      for (int t : timesteps) {
        out.emplace_back(prev, t);
        prev = t;
      }
    } else {
      for (std::size_t i = timesteps.size(); i-- > 0;) {
        out.emplace_back(timesteps[i], i == 0 ? kCleanStep : timesteps[i - 1]);
      }
    }
    return out;
  }

  TimestepPlan reversed() const {
    return {timesteps, direction == PlanDirection::sampling ? PlanDirection::inversion : PlanDirection::sampling};
  }
};

/// Uniform stride over [0, T-1] including both ends (a single step uses T-1).
inline TimestepPlan make_plan(const DiffusionSchedule& s, int steps, PlanDirection dir = PlanDirection::sampling) {
  const int T = s.num_steps();
  if (steps < 1 || steps > T) throw ScheduleError("plan step count must be in [1, T]");
  TimestepPlan plan;
  plan.direction = dir;
  if (steps == 1) {
    plan.timesteps = {T - 1};
    return plan;
  }
  for (int i = 0; i < steps; ++i) {
    const double pos = static_cast<double>(i) * (T - 1) / static_cast<double>(steps - 1);
    plan.timesteps.push_back(static_cast<int>(std::lround(pos)));
  }
  return plan;
}

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
template <std::floating_point T>
BasicTensor<T> add_noise(const BasicTensor<T>& x0, const BasicTensor<T>& eps, int t, const DiffusionSchedule& s) {
  if (x0.shape() != eps.shape()) throw ScheduleError("add_noise: sample and noise shapes differ");
  s.check_step(t);
  const double ab = s.alpha_bar(t);
  return ops::combine(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

/// Batched noising with one timestep per leading-axis sample.
template <std::floating_point T>
BasicTensor<T> add_noise(const BasicTensor<T>& x0, const BasicTensor<T>& eps, const std::vector<int>& t,
                         const DiffusionSchedule& s) {
  if (x0.shape() != eps.shape()) throw ScheduleError("add_noise: sample and noise shapes differ");
  if (static_cast<int>(t.size()) != x0.dim(0)) throw ScheduleError("add_noise: one timestep per sample required");
  const std::size_t per = x0.numel() / t.size();
  Buffer<T> out(x0.numel());
  for (std::size_t n = 0; n < t.size(); ++n) {
    s.check_step(t[n]);
    const double a = std::sqrt(s.alpha_bar(t[n]));
    const double b = std::sqrt(1.0 - s.alpha_bar(t[n]));
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) {
      out[i] = static_cast<T>(a * x0.data()[i] + b * eps.data()[i]);
    }
  }
  return BasicTensor<T>::from_data(x0.shape(), std::move(out));
}

/// Clean-sample estimate implied by a noise prediction at step t.
template <std::floating_point T>
BasicTensor<T> predict_x0(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_pred, int t, const DiffusionSchedule& s) {
  const double ab = s.alpha_bar(t);
  return ops::combine(1.0 / std::sqrt(ab), x_t, -std::sqrt(1.0 - ab) / std::sqrt(ab), eps_pred);
}

namespace detail {

// Coefficients (a, b) with x_to = a x_from + b eps for a deterministic DDIM
// move between any two steps; valid in both directions.
inline std::pair<double, double> ddim_coefficients(double ab_from, double ab_to) {
  const double a = std::sqrt(ab_to / ab_from);
  const double b = std::sqrt(1.0 - ab_to) - std::sqrt(ab_to) * std::sqrt(1.0 - ab_from) / std::sqrt(ab_from);
  return {a, b};
}

}  // namespace detail

/// Deterministic (eta = 0) DDIM update from t down to t_prev. t_prev may be
/// kCleanStep. Differentiable in x_t and eps_pred.
template <std::floating_point T>
BasicTensor<T> ddim_step(const BasicTensor<T>& x_t, const BasicTensor<T>& eps_pred, int t, int t_prev,
                         const DiffusionSchedule& s) {
  if (x_t.shape() != eps_pred.shape()) throw ScheduleError("ddim_step: sample and noise shapes differ");
  s.check_step(t);
  if (t_prev != kCleanStep) s.check_step(t_prev);
  if (t_prev > t) throw ScheduleError("ddim_step: t_prev must not exceed t");
  if (t_prev == t) return x_t;
  const auto [a, b] = detail::ddim_coefficients(s.alpha_bar(t), s.alpha_bar(t_prev));
  return ops::combine(a, x_t, b, eps_pred);
}

/// Algebraic inverse of ddim_step: moves from t_prev up to t.
template <std::floating_point T>
BasicTensor<T> ddim_invert_step(const BasicTensor<T>& x_prev, const BasicTensor<T>& eps_pred, int t_prev, int t,
                                const DiffusionSchedule& s) {
  if (x_prev.shape() != eps_pred.shape()) throw ScheduleError("ddim_invert_step: sample and noise shapes differ");
  s.check_step(t);
  if (t_prev != kCleanStep) s.check_step(t_prev);
  if (t_prev > t) throw ScheduleError("ddim_invert_step: t must not be below t_prev");
  if (t_prev == t) return x_prev;
  const auto [a, b] = detail::ddim_coefficients(s.alpha_bar(t_prev), s.alpha_bar(t));
  return ops::combine(a, x_prev, b, eps_pred);
}

}  // namespace cfdiff
