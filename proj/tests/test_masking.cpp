#include <gtest/gtest.h>

#include "subnet_unlearn/engine.hpp"
#include "subnet_unlearn/masking.hpp"
#include "subnet_unlearn/selfcheck.hpp"

using namespace subnet_unlearn;

namespace {

ScoreStore scores_for(const Layout& L, std::initializer_list<double> body) {
  ScoreStore s{Vec(L.size(), 0.0), ~L.maskable()};
  std::size_t j = 0;
  for (double v : body) s.values[j++] = v;
  return s;
}

}  // namespace

TEST(TopK, TwoLargestMagnitudes) {
  const Layout L(NetShape{1, {2}, 2, 1});  // one group: 2 weights, 2 biases
  const auto m = topk_mask(scores_for(L, {0.5, -0.9, 0.1, 0.2}), 0.5, L, 0);
  EXPECT_EQ(m.to_string().substr(0, 4), "1100");
  EXPECT_EQ(m.count(), 2u);
}

TEST(TopK, AlphaOneSelectsAllMaskable) {
  const Layout L(NetShape{3, {4, 5}, 2, 2});
  ScoreStore s = ScoreStore::init(L, RngStream(1, 1, Purpose::score_init));
  const auto m = topk_mask(s, 1.0, L, 0);
  EXPECT_EQ(m, L.maskable());
}

TEST(TopK, LowestIndexWinsTies) {
  const Layout L(NetShape{2, {1}, 2, 1});  // group of 3
  const auto m = topk_mask(scores_for(L, {0.3, 0.3, 0.1}), 1.0 / 3.0, L, 0);
  EXPECT_EQ(m.to_string().substr(0, 3), "100");
}

TEST(TopK, TwentyPercentOfHundred) {
  const Layout L(NetShape{9, {10}, 2, 1});  // 90 weights + 10 biases
  const ScoreStore s = ScoreStore::init(L, RngStream(3, 1, Purpose::score_init));
  const auto m = topk_mask(s, 0.2, L, 1);
  EXPECT_EQ(m.count_range(0, 100), 20u);
  const auto hr = L.head_range(1);
  EXPECT_EQ(m.count_range(hr.begin, hr.end), hr.size());
}

TEST(TopK, PerGroupCountsAndHeadsExcluded) {
  const Layout L(NetShape{4, {6, 5}, 3, 3});
  const ScoreStore s = ScoreStore::init(L, RngStream(2, 1, Purpose::score_init));
  const auto m = topk_mask(s, 0.3, L, 2);
  for (const auto& g : L.groups()) EXPECT_EQ(m.count_range(g.begin, g.end), topk_count(0.3, g.size()));
  for (TaskId t : {1, 3}) {
    const auto r = L.head_range(t);
    EXPECT_EQ(m.count_range(r.begin, r.end), 0u);
  }
}

TEST(TopK, KeepsAtLeastOne) {
  EXPECT_EQ(topk_count(0.01, 10), 1u);
  EXPECT_EQ(topk_count(1.0, 10), 10u);
  EXPECT_EQ(topk_count(0.25, 10), 3u);  // llround(2.5) = 3
}

TEST(TopK, InvalidInputs) {
  const Layout L(NetShape{1, {2}, 2, 1});
  const auto s = scores_for(L, {1, 2, 3, 4});
  EXPECT_THROW(topk_mask(s, 0.0, L, 0), Error);
  EXPECT_THROW(topk_mask(s, 1.5, L, 0), Error);
  const Layout flat(NetShape{2, {}, 2, 1});
  EXPECT_THROW(topk_mask(ScoreStore{Vec(flat.size()), BitMask(flat.size())}, 0.5, flat, 0),
               InvalidShape);
}

TEST(TopK, AllowedSetRestrictsAndExhausts) {
  const Layout L(NetShape{1, {2}, 2, 1});
  const auto s = scores_for(L, {0.5, -0.9, 0.1, 0.2});
  BitMask allowed(L.size());
  allowed.set(2);
  allowed.set(3);
  const auto m = topk_mask(s, 0.5, L, 0, &allowed);
  EXPECT_EQ(m.to_string().substr(0, 4), "0011");
  allowed.reset(3);
  EXPECT_THROW(topk_mask(s, 0.5, L, 0, &allowed), CapacityExhausted);
}

TEST(Ste, ZeroWeightGivesZeroGradient) {
  const auto g = ste_score_grad(Vec{0.7, -1.1}, Vec{0.0, 2.0}, Vec{0.4, 0.3});
  EXPECT_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], -2.2);
}

TEST(Ste, LinearInWeight) {
  const Vec grads{0.3, -0.8, 1.7};
  const Vec scores{0.2, -0.5, 0.9};
  const auto a = ste_score_grad(grads, Vec{0.4, 1.2, -0.6}, scores);
  const auto b = ste_score_grad(grads, Vec{0.8, 2.4, -1.2}, scores);
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_DOUBLE_EQ(b[j], 2.0 * a[j]);
}

TEST(Ste, NegativeScoreFlipsDirection) {
  const auto g = ste_score_grad(Vec{1.0, 1.0, 1.0}, Vec{2.0, 2.0, 2.0}, Vec{0.5, -0.5, 0.0});
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], -2.0);
  EXPECT_EQ(g[2], 2.0);
}

TEST(Ste, MatchesManualChainRule) { EXPECT_LT(ste_manual_chain_error(), 1e-12); }

TEST(Ste, MatchesGateFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    EXPECT_LT(ste_check_error(seed, {3, {5, 4}, 3, 1}), 1e-6) << seed;
}

TEST(Ste, LengthMismatchThrows) {
  EXPECT_THROW(ste_score_grad(Vec{1.0}, Vec{1.0, 2.0}, Vec{1.0, 2.0}), DimensionMismatch);
}

TEST(Cumulative, Examples) {
  EXPECT_TRUE(cumulative_mask({}, 4).none());
  MaskRegistry r{{1, BitMask::from_string("1100")}, {2, BitMask::from_string("0110")}};
  EXPECT_EQ(cumulative_mask(r, 4).to_string(), "1110");
  const auto m = BitMask::from_string("0101");
  EXPECT_EQ(cumulative_mask({{1, m}, {2, m}}, 4), m);
}

TEST(Provenance, OwnedSubmask) {
  ProvenanceLedger ledger(4);
  const auto m1 = BitMask::from_string("0011");
  ledger.record(m1, 1);  // first task: nothing to share
  const std::vector<TaskId> ever{1, 2};
  EXPECT_EQ(owned_submask(ledger, 1, ever), m1);
  const auto m2 = BitMask::from_string("0111");
  ledger.record(and_not(m2, m1), 2);
  EXPECT_EQ(owned_submask(ledger, 2, ever).to_string(), "0100");
  clear_provenance(ledger, 2);
  EXPECT_TRUE(owned_submask(ledger, 2, ever).none());
  EXPECT_THROW(owned_submask(ledger, 3, ever), UnknownTask);
}

TEST(Provenance, AffectedParams) {
  ProvenanceLedger ledger(4);
  ledger.record(BitMask::from_string("0011"), 2);
  MaskRegistry reg{{1, BitMask::from_string("1000")},
                   {2, BitMask::from_string("0011")},
                   {3, BitMask::from_string("1010")}};
  const std::vector<TaskId> omega{1, 2, 3};
  EXPECT_EQ(affected_params(reg, ledger, 2, omega).to_string(), "0010");
  // Most recent task: nothing was built on top of it.
  ledger.record(BitMask::from_string("1000"), 3);
  EXPECT_TRUE(affected_params(reg, ledger, 3, omega).none());
  // Later masks that miss trained_by[t].
  reg[3] = BitMask::from_string("1100");
  EXPECT_TRUE(affected_params(reg, ledger, 2, omega).none());
  EXPECT_THROW(affected_params(reg, ledger, 4, omega), UnknownTask);
}

TEST(Provenance, RecordClearAndUnion) {
  ProvenanceLedger ledger(5);
  const auto j = BitMask::from_string("00100");
  record_provenance(ledger, j, 3);
  record_provenance(ledger, j, 4);
  EXPECT_TRUE(ledger.trained_by(3).test(2));
  EXPECT_TRUE(ledger.trained_by(4).test(2));
  record_provenance(ledger, BitMask::from_string("10000"), 3);
  EXPECT_EQ(ledger.trained_by(3).to_string(), "10100");
  clear_provenance(ledger, 3);
  EXPECT_TRUE(ledger.trained_by(3).none());
  EXPECT_FALSE(ledger.has(3));
  EXPECT_THROW(ledger.record(BitMask(4), 1), DimensionMismatch);
}

TEST(Provenance, DisjointBeforeAnyUnlearning) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto setup = tiny_setup(seed, 4);
    Learner l(Method::pall, setup.hp, setup.shape, seed, 4);
    for (TaskId t = 1; t <= 4; ++t) l.learn(t, setup.suite.task(t));
    const auto& e = l.state().ledger.entries();
    for (auto a = e.begin(); a != e.end(); ++a)
      for (auto b = std::next(a); b != e.end(); ++b)
        EXPECT_FALSE(a->second.intersects(b->second)) << a->first << " vs " << b->first;
  }
}
