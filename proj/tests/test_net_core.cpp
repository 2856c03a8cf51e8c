#include <gtest/gtest.h>

#include <cmath>

#include "subnet_unlearn/network.hpp"
#include "subnet_unlearn/optimizer.hpp"
#include "subnet_unlearn/selfcheck.hpp"

using namespace subnet_unlearn;

namespace {

ParamStore random_params(const NetShape& shape, std::uint64_t seed) {
  return init_params(shape, RngStream(seed, 0, Purpose::param_init));
}

}  // namespace

TEST(Forward, ZeroWeightsGiveZeroLogits) {
  const NetShape shape{3, {4, 4}, 3, 2};
  ParamStore p = random_params(shape, 1);
  for (auto& v : p.values) v = 0.0;
  const auto logits = forward(p, BitMask(p.size(), true), 2, Vec{1.0, -2.0, 0.5});
  for (double l : logits) EXPECT_EQ(l, 0.0);
}

TEST(Forward, MaskingEqualsZeroing) {
  const NetShape shape{3, {6}, 2, 1};
  const ParamStore p = random_params(shape, 2);
  BitMask m(p.size(), true);
  ParamStore zeroed = p;
  for (std::size_t j = 0; j < p.size(); j += 4) {
    m.reset(j);
    zeroed.values[j] = 0.0;
  }
  const Vec x{0.3, -1.2, 2.0};
  EXPECT_EQ(forward(p, m, 1, x), forward(zeroed, BitMask(p.size(), true), 1, x));
}

TEST(Forward, IdentityHead) {
  const NetShape shape{2, {}, 2, 1};
  ParamStore p{Layout(shape), Vec(6, 0.0)};
  p.values[0] = 1.0;  // row 0, col 0
  p.values[3] = 1.0;  // row 1, col 1
  EXPECT_EQ(forward(p, BitMask(6, true), 1, Vec{3.0, -1.0}), (Vec{3.0, -1.0}));
}

TEST(Forward, DimensionChecks) {
  const ParamStore p = random_params({3, {4}, 2, 1}, 3);
  EXPECT_THROW(forward(p, BitMask(p.size(), true), 1, Vec{1.0}), DimensionMismatch);
  EXPECT_THROW(forward(p, BitMask(p.size() + 1, true), 1, Vec{1.0, 2.0, 3.0}), DimensionMismatch);
  EXPECT_THROW(forward(p, BitMask(p.size(), true), 2, Vec{1.0, 2.0, 3.0}), UnknownTask);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  EXPECT_NEAR(cross_entropy(Vec{0.7, 0.7, 0.7, 0.7}, 2), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, ClosedForm) {
  EXPECT_NEAR(cross_entropy(Vec{1.0, 2.0}, 1), std::log1p(std::exp(-1.0)), 1e-15);
}

TEST(CrossEntropy, LargeLogitsStable) {
  const double v = cross_entropy(Vec{1000.0, 0.0}, 0);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.0, 1e-300);
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW(cross_entropy(Vec{1.0, 2.0}, 2), DimensionMismatch);
  EXPECT_THROW(cross_entropy(Vec{NAN, 2.0}, 0), NumericError);
}

TEST(UniformCrossEntropy, BoundedBelowByLogC) {
  EXPECT_NEAR(uniform_cross_entropy_term(Vec{2.0, 2.0, 2.0}).value, std::log(3.0), 1e-15);
  EXPECT_GT(uniform_cross_entropy_term(Vec{2.0, 0.0, -1.0}).value, std::log(3.0));
  const auto t = uniform_cross_entropy_term(Vec{1.5, 1.5});
  for (double g : t.dlogits) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(LogitMse, Examples) {
  EXPECT_EQ(logit_mse(Vec{0.4, -2.0}, Vec{0.4, -2.0}), 0.0);
  EXPECT_EQ(logit_mse(Vec{1.0, 0.0}, Vec{0.0, 1.0}), 2.0);
  EXPECT_THROW(logit_mse(Vec{1.0}, Vec{1.0, 2.0}), DimensionMismatch);
}

// Single head weight on x = 1 with target 0: loss = θ².
TEST(Backward, SquareLossGradient) {
  const NetShape shape{1, {}, 1, 1};
  ParamStore p{Layout(shape), Vec{3.0, 0.0}};
  const Vec eff = effective_weights(p, BitMask(2, true));
  Tape tape;
  const Vec logits = forward_effective(p.layout, eff, 1, Vec{1.0}, &tape);
  const auto loss = logit_mse_term(logits, Vec{0.0});
  EXPECT_EQ(loss.value, 9.0);
  Vec g(2, 0.0);
  backward(p.layout, eff, tape, loss.dlogits, g);
  EXPECT_EQ(g[0], 6.0);
}

TEST(Backward, MatchesFiniteDifferencesOnTwoLayerNet) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed)
    EXPECT_LT(gradient_check_error(seed, {3, {5}, 3, 1}), 1e-6) << "seed " << seed;
}

// x -> h (w1, b1) -> logit (w2, b2) with w2 masked out.
TEST(Backward, DeadWeightSlotGetsUpstreamTimesActivation) {
  const NetShape shape{1, {1}, 1, 1};
  ParamStore p{Layout(shape), Vec{2.0, 0.5, -0.7, 0.2}};
  BitMask m(4, true);
  m.reset(2);
  const Vec eff = effective_weights(p, m);
  Tape tape;
  const Vec logits = forward_effective(p.layout, eff, 1, Vec{1.5}, &tape);
  EXPECT_DOUBLE_EQ(logits[0], 0.2);
  const auto loss = logit_mse_term(logits, Vec{1.0});
  Vec g(4, 0.0);
  backward(p.layout, eff, tape, loss.dlogits, g);
  const double upstream = 2.0 * (0.2 - 1.0);
  const double h = 2.0 * 1.5 + 0.5;
  EXPECT_DOUBLE_EQ(g[2], upstream * h);
  EXPECT_EQ(g[0], 0.0);  // nothing flows back through a zero effective weight
  EXPECT_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[3], upstream);
}

TEST(Backward, RequiresRecordedTape) {
  const Layout L(NetShape{1, {1}, 1, 1});
  Vec eff(L.size(), 0.0), g(L.size(), 0.0);
  EXPECT_THROW(backward(L, eff, Tape{}, Vec{1.0}, g), Error);
}

TEST(Optimizer, SgdMomentumTwoSteps) {
  OptimizerState opt({OptimizerKind::sgd_momentum, 0.1, 0.9, 0.9, 0.999, 1e-8, 0.0}, 2);
  Vec v{0.0, 0.0};
  const Vec g{1.0, 1.0};
  const BitMask all(2, true);
  apply_update(v, g, opt, all);
  EXPECT_DOUBLE_EQ(v[0], -0.1);
  EXPECT_DOUBLE_EQ(v[1], -0.1);
  apply_update(v, g, opt, all);
  EXPECT_DOUBLE_EQ(v[0], -0.29);
  EXPECT_DOUBLE_EQ(v[1], -0.29);
}

TEST(Optimizer, ZeroMaskFreezesEverything) {
  for (auto kind : {OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
    OptimizerState opt({kind, 0.1, 0.9, 0.9, 0.999, 1e-8, 0.0005}, 3);
    Vec v{0.5, -1.0, 2.0};
    const Vec before = v;
    apply_update(v, Vec{1.0, 2.0, 3.0}, opt, BitMask(3));
    EXPECT_EQ(v, before);
  }
}

TEST(Optimizer, WeightDecayOnlyOnUpdatedIndices) {
  OptimizerState opt({OptimizerKind::sgd_momentum, 0.1, 0.9, 0.9, 0.999, 1e-8, 0.0005}, 2);
  Vec v{1.0, 1.0};
  apply_update(v, Vec{0.0, 0.0}, opt, BitMask::from_string("10"));
  EXPECT_DOUBLE_EQ(v[0], 1.0 - 0.1 * 0.0005);
  EXPECT_EQ(v[1], 1.0);
}

TEST(Optimizer, AdamFirstStepIsLrTimesSign) {
  OptimizerState opt({OptimizerKind::adam, 0.01, 0.9, 0.9, 0.999, 1e-8, 0.0}, 2);
  Vec v{0.0, 0.0};
  apply_update(v, Vec{3.0, -0.5}, opt, BitMask(2, true));
  EXPECT_NEAR(v[0], -0.01, 1e-9);
  EXPECT_NEAR(v[1], 0.01, 1e-9);
}

TEST(Optimizer, LengthMismatchThrows) {
  OptimizerState opt({}, 2);
  Vec v{0.0, 0.0};
  EXPECT_THROW(apply_update(v, Vec{1.0}, opt, BitMask(2, true)), DimensionMismatch);
}
