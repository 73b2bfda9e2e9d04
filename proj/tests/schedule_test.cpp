// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cfdiff/schedule/schedule.hpp"

using namespace cfdiff;

namespace {

DiffusionSchedule default_schedule() { return DiffusionSchedule::make(BetaKind::scaled_linear, 1000, 85e-5, 12e-3); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - b.data()[i]));
  return m;
}

// Reference values from an independent 40-digit product over the closed-form
// beta table (scaled_linear, T=1000, 85e-5 .. 12e-3).
constexpr double kAlphaBarLast = 0.0046600985130772404;
constexpr double kNoisedUnitPair = -0.92940231561797283;  // sqrt(ab) * 1 + sqrt(1-ab) * -1

}  // namespace

TEST(Schedule, EndpointsMatchConfiguredBetas) {
  const auto s = default_schedule();
  EXPECT_EQ(s.betas().front(), 85e-5);
  EXPECT_EQ(s.betas().back(), 12e-3);
  EXPECT_EQ(s.num_steps(), 1000);
}

TEST(Schedule, SingleStepLinear) {
  const auto s = DiffusionSchedule::make(BetaKind::linear, 1, 0.02, 0.02);
  ASSERT_EQ(s.betas().size(), 1u);
  EXPECT_EQ(s.betas()[0], 0.02);
  EXPECT_EQ(s.alpha_bars()[0], 1.0 - 0.02);
}

TEST(Schedule, TerminalAlphaBarMatchesIndependentProduct) {
  EXPECT_NEAR(default_schedule().alpha_bars().back(), kAlphaBarLast, 1e-15);
}

TEST(Schedule, AlphaBarsStrictlyDecreasingInUnitInterval) {
  for (auto kind : {BetaKind::linear, BetaKind::scaled_linear}) {
    const auto s = DiffusionSchedule::make(kind, 1000, 85e-5, 12e-3);
    for (std::size_t t = 0; t < s.alpha_bars().size(); ++t) {
      EXPECT_GT(s.alpha_bars()[t], 0.0);
      EXPECT_LT(s.alpha_bars()[t], 1.0);
      EXPECT_GT(s.betas()[t], 0.0);
      EXPECT_LT(s.betas()[t], 1.0);
      if (t > 0) {
        EXPECT_LT(s.alpha_bars()[t], s.alpha_bars()[t - 1]);
      }
    }
  }
}

TEST(Schedule, ScaledLinearHasAffineSquareRoot) {
  const auto s = default_schedule();
  const auto& b = s.betas();
  const double step = std::sqrt(b[1]) - std::sqrt(b[0]);
  for (std::size_t t = 1; t < b.size(); ++t) {
    EXPECT_NEAR(std::sqrt(b[t]) - std::sqrt(b[t - 1]), step, 1e-12);
  }
}

TEST(Schedule, ReproducibleBitForBit) {
  EXPECT_EQ(default_schedule().alpha_bars(), default_schedule().alpha_bars());
}

TEST(Schedule, RejectsInvalidBounds) {
  EXPECT_THROW(DiffusionSchedule::make(BetaKind::linear, 0, 1e-4, 2e-2), ScheduleError);
  EXPECT_THROW(DiffusionSchedule::make(BetaKind::linear, 10, 0.0, 2e-2), ScheduleError);
  EXPECT_THROW(DiffusionSchedule::make(BetaKind::linear, 10, 3e-2, 2e-2), ScheduleError);
  EXPECT_THROW(DiffusionSchedule::make(BetaKind::linear, 10, 1e-4, 1.0), ScheduleError);
}

TEST(Plan, UniformStrideCoversEnds) {
  const auto s = default_schedule();
  const auto p = make_plan(s, 20);
  ASSERT_EQ(p.size(), 20u);
  EXPECT_EQ(p.timesteps.front(), 0);
  EXPECT_EQ(p.timesteps.back(), 999);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_LT(p.timesteps[i - 1], p.timesteps[i]);
  EXPECT_THROW(make_plan(s, 0), ScheduleError);
  EXPECT_THROW(make_plan(s, 1001), ScheduleError);
}

TEST(Plan, TransitionsWalkBothDirections) {
  const auto s = DiffusionSchedule::make(BetaKind::linear, 10, 1e-3, 1e-2);
  const auto p = make_plan(s, 3);
  const auto down = p.transitions();
  ASSERT_EQ(down.size(), 3u);
  EXPECT_EQ(down.front(), std::make_pair(9, p.timesteps[1]));
  EXPECT_EQ(down.back(), std::make_pair(0, kCleanStep));
  const auto up = p.reversed().transitions();
  EXPECT_EQ(up.front(), std::make_pair(kCleanStep, 0));
  EXPECT_EQ(up.back(), std::make_pair(p.timesteps[1], 9));
}

TEST(AddNoise, ZeroNoiseScalesSample) {
  const auto s = default_schedule();
  auto x0 = Tensor::from_data({3}, {1, -2, 0.5f});
  auto xt = add_noise(x0, Tensor::zeros({3}), 400, s);
  const double a = std::sqrt(s.alpha_bar(400));
  for (int i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(xt.data()[i], float(a * x0.data()[i]));
}

TEST(AddNoise, ZeroSampleScalesNoise) {
  const auto s = default_schedule();
  auto eps = Tensor::from_data({2}, {1, -1});
  auto xt = add_noise(Tensor::zeros({2}), eps, 10, s);
  const double b = std::sqrt(1 - s.alpha_bar(10));
  EXPECT_FLOAT_EQ(xt.data()[0], float(b));
  EXPECT_FLOAT_EQ(xt.data()[1], float(-b));
}

TEST(AddNoise, TerminalStepMatchesOracle) {
  const auto s = default_schedule();
  auto xt = add_noise(Tensor::from_data({1}, {1}), Tensor::from_data({1}, {-1}), 999, s);
  EXPECT_NEAR(xt.item(), kNoisedUnitPair, 1e-6);
}

TEST(AddNoise, LinearSuperposition) {
  const auto s = default_schedule();
  Rng rng(1);
  auto a0 = Tensor::randn({8}, rng), a1 = Tensor::randn({8}, rng);
  auto b0 = Tensor::randn({8}, rng), b1 = Tensor::randn({8}, rng);
  auto lhs = add_noise(ops::add(a0, b0), ops::add(a1, b1), 321, s);
  auto rhs = ops::add(add_noise(a0, a1, 321, s), add_noise(b0, b1, 321, s));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-6);
  EXPECT_EQ(lhs.shape(), a0.shape());
}

TEST(AddNoise, RejectsBadArguments) {
  const auto s = default_schedule();
  EXPECT_THROW(add_noise(Tensor::zeros({2}), Tensor::zeros({3}), 0, s), ScheduleError);
  EXPECT_THROW(add_noise(Tensor::zeros({2}), Tensor::zeros({2}), 1000, s), ScheduleError);
  EXPECT_THROW(add_noise(Tensor::zeros({2}), Tensor::zeros({2}), -1, s), ScheduleError);
}

TEST(Ddim, ExactNoiseRecoversCleanEstimate) {
  const auto s = default_schedule();
  Rng rng(2);
  auto x0 = Tensor::randn({16}, rng), eps = Tensor::randn({16}, rng);
  for (int t : {0, 250, 999}) {
    auto xt = add_noise(x0, eps, t, s);
    EXPECT_LE(max_abs_diff(predict_x0(xt, eps, t, s), x0), 1e-5) << t;
  }
}

TEST(Ddim, DegenerateStepIsIdentity) {
  const auto s = default_schedule();
  Rng rng(3);
  auto x = Tensor::randn({5}, rng), e = Tensor::randn({5}, rng);
  EXPECT_EQ(ddim_step(x, e, 500, 500, s).to_vector(), x.to_vector());
}

TEST(Ddim, ChainWithExactNoiseReachesConstantImage) {
  const auto s = default_schedule();
  const auto plan = make_plan(s, 20);
  Rng rng(4);
  auto x0 = Tensor::full({4, 8, 8}, 0.7f);
  auto eps = Tensor::randn({4, 8, 8}, rng);
  auto x = add_noise(x0, eps, plan.timesteps.back(), s);
  for (auto [t, t_prev] : plan.transitions()) x = ddim_step(x, eps, t, t_prev, s);
  EXPECT_LE(max_abs_diff(x, x0), 1e-4);
}

TEST(Ddim, InvertStepWithZeroNoiseRescales) {
  const auto s = default_schedule();
  auto x = Tensor::from_data({2}, {1, -3});
  auto y = ddim_invert_step(x, Tensor::zeros({2}), 100, 700, s);
  const double r = std::sqrt(s.alpha_bar(700) / s.alpha_bar(100));
  EXPECT_FLOAT_EQ(y.data()[0], float(r));
  EXPECT_FLOAT_EQ(y.data()[1], float(-3 * r));
}

TEST(Ddim, StepAndInvertAreMutualInverses) {
  const auto s = default_schedule();
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    int t = rng.uniform_int(0, 999);
    int t_prev = rng.uniform_int(-1, t - 1 >= -1 ? t - 1 : -1);
    auto x = Tensor::randn({32}, rng), e = Tensor::randn({32}, rng);
    EXPECT_LE(max_abs_diff(ddim_step(ddim_invert_step(x, e, t_prev, t, s), e, t, t_prev, s), x), 1e-5);
    EXPECT_LE(max_abs_diff(ddim_invert_step(ddim_step(x, e, t, t_prev, s), e, t_prev, t, s), x), 1e-5);
  }
}

TEST(Ddim, RejectsWrongDirection) {
  const auto s = default_schedule();
  auto x = Tensor::zeros({2});
  EXPECT_THROW(ddim_step(x, x, 10, 20, s), ScheduleError);
  EXPECT_THROW(ddim_invert_step(x, x, 20, 10, s), ScheduleError);
  EXPECT_THROW(ddim_step(x, x, 1000, 10, s), ScheduleError);
}
