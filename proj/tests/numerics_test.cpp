// Copyright 2026 The cfdiff Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cfdiff/numerics/gradcheck.hpp"
#include "cfdiff/numerics/layers.hpp"
#include "cfdiff/numerics/ops.hpp"
#include "cfdiff/numerics/optim.hpp"
#include "cfdiff/numerics/primitive_checks.hpp"

using namespace cfdiff;

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from_data({3}, {0.5f, -2.0f, 4.0f});
  x.set_requires_grad();
  backward(ops::sum(x));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<float>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceInput) {
  auto x = Tensor::from_data({3}, {1, 2, 3});
  x.set_requires_grad();
  backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<float>{2, 4, 6}));
}

TEST(Backward, RejectsNonScalarLoss) {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  EXPECT_THROW(backward(ops::scale(x, 2.0f)), NumericsError);
}

TEST(Backward, NonParticipatingParameterGetsZeroGradient) {
  auto x = Tensor::from_data({2}, {1, 2});
  auto unused = Tensor::from_data({2}, {3, 4});
  x.set_requires_grad();
  unused.set_requires_grad();
  backward(ops::sum(x));
  EXPECT_EQ(unused.grad().to_vector(), (std::vector<float>{0, 0}));
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  // y = x*x used twice: d/dx sum(y + y) = 4x, so double visits would show up as 8x.
  auto x = Tensor::from_data({2}, {1, -3});
  x.set_requires_grad();
  auto y = ops::mul(x, x);
  backward(ops::sum(ops::add(y, y)));
  EXPECT_EQ(x.grad().to_vector(), (std::vector<float>{4, -12}));
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto x = TensorD::randn({4, 6}, rng);
    auto w1 = TensorD::randn({6, 8}, rng, 0.5);
    auto b1 = TensorD::randn({8}, rng, 0.1);
    auto w2 = TensorD::randn({8, 3}, rng, 0.5);
    auto b2 = TensorD::randn({3}, rng, 0.1);
    auto wt = TensorD::randn({4, 3}, rng);
    for (auto* p : {&w1, &b1, &w2, &b2}) p->set_requires_grad();
    std::function<TensorD()> f = [&] {
      auto h = ops::gelu(ops::linear(x, w1, b1));
      return ops::sum(ops::mul(ops::linear(h, w2, b2), wt));
    };
    EXPECT_LE(finite_diff_check<double>(f, {w1, b1, w2, b2}, {.step = 1e-3, .seed = seed}), 1e-3) << "seed " << seed;
  }
}

TEST(FiniteDiff, ExactForLinearFunction) {
  Rng rng(3);
  auto x = TensorD::randn({5}, rng);
  x.set_requires_grad();
  std::function<TensorD()> f = [&] { return ops::sum(x); };
  EXPECT_LE(finite_diff_check<double>(f, {x}), 1e-6);
}

TEST(FiniteDiff, SoftmaxCrossEntropy) {
  Rng rng(11);
  auto logits = TensorD::randn({4, 5}, rng, 2.0);
  logits.set_requires_grad();
  std::vector<double> t(20, 0.0);
  for (int r = 0; r < 4; ++r) t[static_cast<std::size_t>(r * 5 + r)] = 1.0;
  auto targets = TensorD::from_data({4, 5}, t);
  std::function<TensorD()> f = [&] { return ops::softmax_cross_entropy(logits, targets); };
  EXPECT_LE(finite_diff_check<double>(f, {logits}), 1e-3);
}

TEST(FiniteDiff, DetectsWrongBackwardRule) {
  Rng rng(5);
  auto x = TensorD::randn({6}, rng);
  x.set_requires_grad();
  // tanh with a sign-flipped derivative
  auto bad_tanh = [](const TensorD& in) {
    Buffer<double> out(in.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in.data()[i]);
    return make_op_result<double>("bad_tanh", in.shape(), std::move(out), {in}, [](Node<double>& self) {
      auto g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * (1 - self.data[i] * self.data[i]);
    });
  };
  std::function<TensorD()> f = [&] { return ops::sum(bad_tanh(x)); };
  EXPECT_GT(finite_diff_check<double>(f, {x}), 1e-1);
}

TEST(FiniteDiff, RejectsNondeterministicFunction) {
  auto x = TensorD::from_data({1}, {1.0});
  x.set_requires_grad();
  int calls = 0;
  std::function<TensorD()> f = [&] { return ops::scale(ops::sum(x), static_cast<double>(++calls)); };
  EXPECT_THROW(finite_diff_check<double>(f, {x}), NumericsError);
}

TEST(Primitives, EveryPrimitivePassesGradientCheckOnFiveSeeds) {
  for (const auto& check : primitive_checks()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const double err = check.run(seed);
      EXPECT_LE(err, 1e-3) << check.name << " seed " << seed;
    }
  }
}

TEST(Primitives, GradientAccumulationIsLinear) {
  Rng rng(8);
  auto x = Tensor::randn({3, 4}, rng);
  x.set_requires_grad();
  auto f = [&] { return ops::sum(ops::silu(x)); };
  auto g = [&] { return ops::sum(ops::softmax(x)); };
  backward(f());
  auto gf = x.grad();
  x.zero_grad();
  backward(g());
  auto gg = x.grad();
  x.zero_grad();
  backward(ops::add(f(), g()));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(x.grad().data()[i], gf.data()[i] + gg.data()[i], 1e-6);
  }
}

TEST(Primitives, ForwardIsBitwiseDeterministic) {
  auto run = [] {
    Rng rng(21);
    auto x = Tensor::randn({2, 3, 6, 6}, rng);
    auto w = Tensor::randn({4, 3, 3, 3}, rng);
    auto b = Tensor::randn({4}, rng);
    auto gam = Tensor::full({4}, 1.0f);
    auto bet = Tensor::zeros({4});
    return ops::silu(ops::group_norm(ops::conv2d(x, w, b, {1, 1}), 2, gam, bet)).to_vector();
  };
  EXPECT_EQ(run(), run());
}

TEST(Numerics, NonFiniteValuesAreRejectedWithOpName) {
  EXPECT_THROW(Tensor::from_data({1}, {std::nanf("")}), NumericsError);
  auto x = Tensor::from_data({1}, {1e30f});
  try {
    ops::scale(x, 1e30f);
    FAIL() << "expected overflow to be reported";
  } catch (const NumericsError& e) {
    EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
  }
}

TEST(Numerics, ShapeInvariantEnforced) {
  EXPECT_THROW(Tensor::from_data({2, 2}, {1, 2, 3}), NumericsError);
  EXPECT_THROW(Tensor::zeros({0, 3}), NumericsError);
  auto x = Tensor::zeros({2, 3});
  EXPECT_THROW(ops::reshape(x, {4, 2}), NumericsError);
}

TEST(Numerics, NoGradGuardSkipsRecording) {
  auto x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  NoGradGuard ng;
  auto y = ops::sum(ops::mul(x, x));
  EXPECT_FALSE(y.requires_grad());
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = Tensor::from_data({3}, {1, -2, 3});
  p.set_requires_grad();
  Adam opt({p}, {.lr = 0.1});
  for (int i = 0; i < 5; ++i) opt.step();
  EXPECT_EQ(p.to_vector(), (std::vector<float>{1, -2, 3}));
  EXPECT_EQ(opt.steps(), 5u);
}

TEST(Adam, ConstantGradientGivesBoundedStepsAgainstSign) {
  auto p = Tensor::from_data({2}, {0, 0});
  p.set_requires_grad();
  Adam opt({p}, {.lr = 0.05});
  const std::vector<Tensor> grads{Tensor::from_data({2}, {2.5f, -0.3f})};
  auto prev = p.to_vector();
  for (int i = 0; i < 50; ++i) {
    opt.step(grads);
    auto cur = p.to_vector();
    EXPECT_LT(cur[0], prev[0]);
    EXPECT_GT(cur[1], prev[1]);
    EXPECT_LE(std::abs(cur[0] - prev[0]), 0.05f + 1e-6f);
    EXPECT_LE(std::abs(cur[1] - prev[1]), 0.05f + 1e-6f);
    prev = cur;
  }
}

TEST(Adam, ConvergesOnOneDimensionalQuadratic) {
  auto x = Tensor::from_data({1}, {0});
  x.set_requires_grad();
  Adam opt({x}, {.lr = 0.1});
  const auto three = Tensor::from_data({1}, {3});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    auto d = ops::sub(x, three);
    backward(ops::sum(ops::mul(d, d)));
    opt.step();
  }
  EXPECT_LT(std::abs(x.item() - 3.0f), 0.05f);
}

TEST(Adam, RejectsMismatchedAndNonFiniteGradients) {
  auto p = Tensor::from_data({2}, {0, 0});
  Adam opt({p}, {});
  const std::vector<Tensor> wrong{Tensor::zeros({3})};
  EXPECT_THROW(opt.step(wrong), NumericsError);
  const std::vector<Tensor> none;
  EXPECT_THROW(opt.step(none), NumericsError);
  p.set_requires_grad();
  p.node().grad_buffer()[0] = std::nanf("");
  EXPECT_THROW(opt.step(), NumericsError);
}

TEST(Adam, StepCounterIncreasesAndMomentsMatchShapes) {
  auto p = Tensor::zeros({2, 3});
  p.set_requires_grad();
  Adam opt({p}, {});
  opt.step();
  opt.step();
  EXPECT_EQ(opt.steps(), 2u);
  EXPECT_EQ(opt.first_moments()[0].size(), p.numel());
  EXPECT_EQ(opt.second_moments()[0].size(), p.numel());
}
