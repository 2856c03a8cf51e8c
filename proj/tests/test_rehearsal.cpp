#include <gtest/gtest.h>

#include <cmath>

#include "subnet_unlearn/engine.hpp"
#include "subnet_unlearn/rehearsal.hpp"
#include "subnet_unlearn/selfcheck.hpp"

using namespace subnet_unlearn;

namespace {

std::vector<Example> blob(std::size_t n, std::size_t dim, std::uint64_t seed) {
  RngStream r(seed, 0, Purpose::scenario);
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    Example e{Vec(dim), static_cast<int>(i % 2)};
    for (auto& v : e.x) v = r.normal();
    out.push_back(std::move(e));
  }
  return out;
}

// Head-only net whose logits are the head biases (b0, b1) for any input.
ParamStore bias_only(double b0, double b1) {
  const NetShape shape{1, {}, 2, 1};
  ParamStore p{Layout(shape), Vec(4, 0.0)};
  p.values[2] = b0;
  p.values[3] = b1;
  return p;
}

}  // namespace

TEST(Buffer, PerTaskCapacity) {
  EXPECT_EQ(per_task_capacity(500, 5), 100u);
  EXPECT_EQ(per_task_capacity(1000, 10), 100u);
  EXPECT_THROW(per_task_capacity(3, 5), InvalidShape);
  EXPECT_THROW(per_task_capacity(10, 0), InvalidShape);
}

TEST(Buffer, LargeCapacityKeepsEveryExemplarOnce) {
  const auto data = blob(12, 3, 1);
  const auto p = init_params(NetShape{3, {4}, 2, 1}, RngStream(1, 0, Purpose::param_init));
  const auto buf = fill_buffer(data, p, BitMask(p.size(), true), 1, 50,
                               RngStream(1, 1, Purpose::buffer_sample));
  ASSERT_EQ(buf.entries.size(), data.size());
  for (const auto& e : data) {
    const auto n = std::count_if(buf.entries.begin(), buf.entries.end(),
                                 [&](const BufferEntry& b) { return b.x == e.x; });
    EXPECT_EQ(n, 1);
  }
}

TEST(Buffer, StoredLogitsReplayExactly) {
  const auto data = blob(30, 3, 2);
  const auto p = init_params(NetShape{3, {6}, 2, 2}, RngStream(2, 0, Purpose::param_init));
  BitMask m(p.size());
  for (std::size_t j = 0; j < p.size(); j += 2) m.set(j);
  const auto buf = fill_buffer(data, p, m, 2, 10, RngStream(2, 2, Purpose::buffer_sample));
  ASSERT_EQ(buf.entries.size(), 10u);
  for (const auto& e : buf.entries) EXPECT_EQ(logit_mse(forward(p, m, 2, e.x), e.z), 0.0);
}

TEST(Buffer, DeleteIsIdempotent) {
  BufferSet set;
  set[3] = ReplayBuffer{3, 5, {}};
  EXPECT_TRUE(delete_buffer(set, 3));
  EXPECT_FALSE(set.contains(3));
  EXPECT_FALSE(delete_buffer(set, 3));
}

TEST(SampleBatch, SingleEntry) {
  ReplayBuffer b{1, 1, {BufferEntry{{1.0}, 0, {0.0, 0.0}}}};
  RngStream r(1, 1, Purpose::retrain_order);
  EXPECT_EQ(sample_batch(b, 5, r), (std::vector<std::size_t>(5, 0)));
  EXPECT_THROW(sample_batch(ReplayBuffer{}, 1, r), InvalidRequest);
}

TEST(SampleBatch, Deterministic) {
  ReplayBuffer b{1, 7, std::vector<BufferEntry>(7)};
  RngStream r1(4, 1, Purpose::retrain_order), r2(4, 1, Purpose::retrain_order);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_batch(b, 8, r1), sample_batch(b, 8, r2));
}

TEST(SampleBatch, UniformFrequencies) {
  ReplayBuffer b{1, 4, std::vector<BufferEntry>(4)};
  RngStream r(8, 1, Purpose::retrain_order);
  std::vector<int> hits(4, 0);
  const int n = 100000;
  for (auto i : sample_batch(b, n, r)) ++hits[i];
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(n), 0.25, 0.01);
}

TEST(ReplaySampler, TasksDrawIndependently) {
  BufferSet set;
  set[1] = ReplayBuffer{1, 6, std::vector<BufferEntry>(6)};
  set[2] = ReplayBuffer{2, 6, std::vector<BufferEntry>(6)};
  ReplaySampler both(5, 9), only2(5, 9);
  const std::vector<TaskId> t12{1, 2}, t2{2};
  for (int i = 0; i < 5; ++i) {
    const auto a = both.draw(set, t12, 4);
    const auto b = only2.draw(set, t2, 4);
    EXPECT_EQ(a[1].indices, b[0].indices);
  }
  const auto full = both.draw(set, t2, 0);
  EXPECT_EQ(full[0].indices, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
}

TEST(ReplayLoss, HandEvaluation) {
  // CE(label 0) = ln(1 + e^{b1 - b0}) = 0.7, stored z offset so the MSE is 0.4.
  const double b1 = std::log(std::expm1(0.7));
  const auto p = bias_only(0.0, b1);
  BufferSet set;
  set[1] = ReplayBuffer{1, 1, {BufferEntry{{0.0}, 0, {0.0, b1 + std::sqrt(0.4)}}}};
  const std::vector<ReplayBatch> batches{{1, {0}}};
  const BitMask all(p.size(), true);
  const auto loss = replay_loss(p, set, batches, 0.5, [&](TaskId) -> const BitMask& { return all; });
  EXPECT_NEAR(loss.ce, 0.7, 1e-12);
  EXPECT_NEAR(loss.logit, 0.4, 1e-12);
  EXPECT_NEAR(loss.value, 0.9, 1e-12);
}

TEST(ReplayLoss, BufferMeanNormalization) {
  const auto p = bias_only(0.0, 0.0);
  const double r2 = std::sqrt(2.0);
  BufferSet set;
  set[1] = ReplayBuffer{1, 2, {BufferEntry{{0.0}, 0, {1.0, 1.0}}, BufferEntry{{0.0}, 0, {r2, -r2}}}};
  const std::vector<ReplayBatch> batches{{1, {0, 1}}};
  const BitMask all(p.size(), true);
  const auto loss = replay_loss(p, set, batches, 1.0, [&](TaskId) -> const BitMask& { return all; });
  EXPECT_NEAR(loss.logit, 3.0, 1e-12);  // per-sample 2 and 4
}

TEST(ReplayLoss, BetaZeroMatchesStraightLineCe) {
  const auto p = init_params(NetShape{3, {5}, 2, 2}, RngStream(6, 0, Purpose::param_init));
  const BitMask all(p.size(), true);
  BufferSet set;
  set[1] = fill_buffer(blob(8, 3, 6), p, all, 1, 8, RngStream(6, 1, Purpose::buffer_sample));
  set[2] = fill_buffer(blob(6, 3, 7), p, all, 2, 6, RngStream(6, 2, Purpose::buffer_sample));
  const std::vector<ReplayBatch> batches{{1, {0, 3, 3, 7}}, {2, {1, 5}}};
  double expect = 0.0;
  for (const auto& b : batches) {
    double s = 0.0;
    for (auto i : b.indices) {
      const auto& e = set[b.task].entries[i];
      s += cross_entropy(forward(p, all, b.task, e.x), e.y);
    }
    expect += s / static_cast<double>(b.indices.size());
  }
  const auto loss = replay_loss(p, set, batches, 0.0, [&](TaskId) -> const BitMask& { return all; });
  EXPECT_NEAR(loss.value, expect, 1e-12);
  EXPECT_THROW(replay_loss(p, BufferSet{}, batches, 0.0, [&](TaskId) -> const BitMask& { return all; }),
               UnknownTask);
}

TEST(ReplayLoss, GradientDecomposition) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = eq6_check(seed);
    EXPECT_LE(c.decomposition_error, 1e-12);
    EXPECT_LE(c.er_error, 1e-12);
  }
}

TEST(ReplayLoss, HyperparamDefaults) {
  const Hyperparams hp;
  EXPECT_EQ(hp.n_f, 50);
  EXPECT_EQ(hp.beta, 0.5);
}

TEST(Retrain, BatchesNeverComeFromTheUnlearnedTask) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto setup = tiny_setup(seed, 4);
    setup.hp.alpha = 0.8;
    Learner l(Method::pall, setup.hp, setup.shape, seed, 4);
    for (TaskId t = 1; t <= 4; ++t) l.learn(t, setup.suite.task(t));
    l.unlearn(1);
    l.unlearn(3);
    ASSERT_FALSE(l.state().batch_log.empty());
    for (const auto& b : l.state().batch_log) {
      EXPECT_NE(b.source, b.unlearned);
      EXPECT_GT(b.source, b.unlearned);  // only tasks learned later
    }
  }
}
