#pragma once

// Built-in verification: finite-difference gradient checks, top-k goldens,
// rehearsal-objective decomposition, and the rewind oracle on a tiny
// scenario. Used by `subnet-unlearn selfcheck` and the test suites.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "engine.hpp"
#include "experiment.hpp"
#include "masking.hpp"
#include "network.hpp"
#include "rehearsal.hpp"

namespace subnet_unlearn {

struct CheckResult {
  std::string group;  // grad, topk, eq6, rewind
  std::string name;
  bool ok = false;
  std::string detail;
};

// (effective-weight grads, parameters, scores) -> score grads.
using SteFn = std::function<std::vector<double>(std::span<const double>, std::span<const double>,
                                                std::span<const double>)>;

inline std::vector<double> default_ste(std::span<const double> g, std::span<const double> p,
                                       std::span<const double> s) {
  return ste_score_grad(g, p, s);
}

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Relative error with the denominator floored at 1e-4. Central differences
// with h = 1e-5 on an O(1) loss resolve about 1e-11 absolute, so smaller
// components are compared at that resolution instead of relative to
// themselves.
inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-4);
}

namespace check {

// A random small problem: network, mask, one input and label, chosen so no
// ReLU pre-activation sits within 1e-3 of its kink.
struct GradProblem {
  ParamStore params;
  BitMask mask;
  Vec x;
  int label = 0;
};

inline GradProblem make_problem(std::uint64_t seed, const NetShape& shape, double keep = 0.7) {
  GradProblem p;
  const Layout layout(shape);
  p.params = init_params(layout, RngStream(seed, 0, Purpose::param_init));
  RngStream r(seed, 0, Purpose::scenario, 99);
  p.label = static_cast<int>(r.below(shape.classes_per_head));
  // A unit with every input masked sits exactly on its kink, so the mask is
  // redrawn along with the input.
  for (int attempt = 0; attempt < 10000; ++attempt) {
    p.mask = BitMask(layout.size());
    for (std::size_t j = 0; j < layout.size(); ++j)
      if (r.uniform01() < keep) p.mask.set(j);
    p.x.assign(shape.input_dim, 0.0);
    for (auto& v : p.x) v = r.uniform(-2.0, 2.0);
    Tape tape;
    const Vec eff = effective_weights(p.params, p.mask);
    forward_effective(layout, eff, 1, p.x, &tape);
    bool near_kink = false;
    for (const auto& pre : tape.pre)
      for (double z : pre) near_kink |= std::abs(z) < 1e-3;
    if (!near_kink) return p;
  }
  throw NumericError("make_problem: no kink-free problem found");
}

inline double loss_of_eff(const Layout& layout, const Vec& eff, const GradProblem& p) {
  return cross_entropy(forward_effective(layout, eff, 1, p.x), p.label);
}

inline Vec eff_grad(const Layout& layout, const Vec& eff, const GradProblem& p) {
  Tape tape;
  const Vec out = forward_effective(layout, eff, 1, p.x, &tape);
  const auto term = cross_entropy_term(out, p.label);
  Vec g(layout.size(), 0.0);
  backward(layout, eff, tape, term.dlogits, g);
  return g;
}

}  // namespace check

// Largest relative error between backprop and central differences (h = 1e-5)
// over every coordinate, for parameter gradients (through the mask) and for
// dense effective-weight gradients.
inline double gradient_check_error(std::uint64_t seed, const NetShape& shape) {
  using namespace check;
  const GradProblem p = make_problem(seed, shape);
  const Layout& L = p.params.layout;
  const double h = 1e-5;
  const Vec eff = effective_weights(p.params, p.mask);
  const Vec g_eff = eff_grad(L, eff, p);
  double worst = 0.0;
  for (std::size_t j = 0; j < L.size(); ++j) {
    // Effective-weight slot j, masked or not.
    Vec e1 = eff, e2 = eff;
    e1[j] += h;
    e2[j] -= h;
    const double fd_eff = (loss_of_eff(L, e1, p) - loss_of_eff(L, e2, p)) / (2 * h);
    worst = std::max(worst, rel_error(g_eff[j], fd_eff));
    // Raw parameter j: gradient is zero where the mask is zero.
    ParamStore q1 = p.params, q2 = p.params;
    q1.values[j] += h;
    q2.values[j] -= h;
    const double fd_param = (loss_of_eff(L, effective_weights(q1, p.mask), p) -
                             loss_of_eff(L, effective_weights(q2, p.mask), p)) / (2 * h);
    const double g_param = p.mask.test(j) ? g_eff[j] : 0.0;
    worst = std::max(worst, rel_error(g_param, fd_param));
  }
  return worst;
}

// Largest relative error between the straight-through score gradient and the
// derivative of ℓ(θ ⊙ c) where the gate c_j = m_j + |s_j + δ| - |s_j| follows
// the score magnitude, differentiated at δ = 0.
inline double ste_check_error(std::uint64_t seed, const NetShape& shape,
                              const SteFn& ste = default_ste) {
  using namespace check;
  const GradProblem p = make_problem(seed, shape);
  const Layout& L = p.params.layout;
  const Vec eff = effective_weights(p.params, p.mask);
  RngStream r(seed, 0, Purpose::score_init);
  Vec scores(L.size());
  for (auto& v : scores) {
    v = r.uniform(-1.0, 1.0);
    if (std::abs(v) < 1e-3) v = 0.5;  // keep |s ± h| on one side of the kink
  }
  const auto g_score = ste(eff_grad(L, eff, p), p.params.values, scores);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t j = 0; j < L.size(); ++j) {
    auto gated = [&](double delta) {
      Vec e = eff;
      const double gate = (p.mask.test(j) ? 1.0 : 0.0) + std::abs(scores[j] + delta) - std::abs(scores[j]);
      e[j] = p.params.values[j] * gate;
      return loss_of_eff(L, e, p);
    };
    const double fd = (gated(h) - gated(-h)) / (2 * h);
    worst = std::max(worst, rel_error(g_score[j], fd));
  }
  return worst;
}

// Hand chain rule for x -> w1 x + b1 -> relu -> (v_k h + c_k)_k with one
// hidden unit, compared with the STE score gradient at the first-layer weight
// (whose score is negative) and at v0 (positive score).
inline double ste_manual_chain_error(const SteFn& ste = default_ste) {
  NetShape shape{1, {1}, 2, 1};
  const Layout L(shape);
  ParamStore params{L, Vec(L.size())};
  // fc0.weight, fc0.bias, head1.weight (2x1), head1.bias (2)
  const double w1 = 0.8, b1 = 0.1, v0 = 1.5, v1 = -0.5, c0 = 0.2, c1 = -0.3, x = 1.25;
  params.values = {w1, b1, v0, v1, c0, c1};
  const BitMask all(L.size(), true);
  const Vec eff = effective_weights(params, all);
  Tape tape;
  const Vec in{x};
  const Vec logits = forward_effective(L, eff, 1, in, &tape);
  const auto term = cross_entropy_term(logits, 0);
  Vec g(L.size(), 0.0);
  backward(L, eff, tape, term.dlogits, g);
  const Vec scores{-0.4, 0.3, 0.7, 0.2, 0.1, 0.6};
  const auto gs = ste(g, params.values, scores);

  const double hdn = std::max(0.0, w1 * x + b1);
  const double z0 = v0 * hdn + c0, z1 = v1 * hdn + c1;
  const double mx = std::max(z0, z1);
  const double p0 = std::exp(z0 - mx) / (std::exp(z0 - mx) + std::exp(z1 - mx));
  const double p1 = 1.0 - p0;
  const double dh = (p0 - 1.0) * v0 + p1 * v1;
  const double dw1_eff = dh * (w1 * x + b1 > 0 ? 1.0 : 0.0) * x;
  const double dv0_eff = (p0 - 1.0) * hdn;
  return std::max(std::abs(gs[0] - dw1_eff * w1 * -1.0), std::abs(gs[2] - dv0_eff * v0));
}

struct Eq6Check {
  double decomposition_error = 0.0;  // max over β of |L(β) - L(0) - β·logit|
  double er_error = 0.0;             // |L(0) - straight-line ER loss|
};

// Rehearsal objective on two random buffers, whole-buffer batches.
inline Eq6Check eq6_check(std::uint64_t seed) {
  NetShape shape{4, {6}, 3, 2};
  const Layout L(shape);
  ParamStore params = init_params(L, RngStream(seed, 0, Purpose::param_init));
  RngStream r(seed, 0, Purpose::scenario, 7);
  MaskRegistry reg;
  BufferSet buffers;
  for (TaskId t = 1; t <= 2; ++t) {
    BitMask m(L.size());
    for (std::size_t j = 0; j < L.body_size(); ++j)
      if (r.uniform01() < 0.6) m.set(j);
    m |= L.head_mask(t);
    reg[t] = m;
    ReplayBuffer b{t, 5, {}};
    for (int i = 0; i < 5; ++i) {
      BufferEntry e;
      e.x.resize(4);
      for (auto& v : e.x) v = r.uniform(-1, 1);
      e.y = static_cast<int>(r.below(3));
      e.z.resize(3);
      for (auto& v : e.z) v = r.uniform(-2, 2);
      b.entries.push_back(e);
    }
    buffers[t] = b;
  }
  ReplaySampler sampler(seed, 0);
  const std::vector<TaskId> tasks{1, 2};
  const auto batches = sampler.draw(buffers, tasks, 0);
  auto mask_for = [&](TaskId t) -> const BitMask& { return reg.at(t); };
  Eq6Check out;
  const auto base = replay_loss(params, buffers, batches, 0.0, mask_for);
  for (double beta : {0.0, 0.5, 1.0}) {
    const auto l = replay_loss(params, buffers, batches, beta, mask_for);
    out.decomposition_error =
        std::max(out.decomposition_error, std::abs(l.value - (base.value + beta * l.logit)));
  }
  // Straight-line experience replay: per task, mean CE through its own mask.
  double er = 0.0;
  for (TaskId t : tasks) {
    double s = 0.0;
    for (const auto& e : buffers.at(t).entries) {
      const Vec z = forward(params, reg.at(t), t, e.x);
      double mx = z[0];
      for (double v : z) mx = std::max(mx, v);
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - mx);
      s += -(z[static_cast<std::size_t>(e.y)] - mx - std::log(sum));
    }
    er += s / static_cast<double>(buffers.at(t).entries.size());
  }
  out.er_error = std::abs(base.value - er);
  return out;
}

// Tiny PALL scenario for the rewind oracle.
struct TinySetup {
  TaskSuite suite;
  NetShape shape;
  Hyperparams hp;
};

inline TinySetup tiny_setup(std::uint64_t seed, int tasks = 3) {
  SyntheticParams sp;
  sp.dim = 4;
  sp.train_per_class = 16;
  sp.test_per_class = 16;
  TinySetup s;
  s.suite = suite_for_run(seed, tasks, sp);
  s.shape = shape_for(s.suite, {8, 8});
  s.hp.alpha = 0.5;
  s.hp.epochs = 2;
  s.hp.batch_size = 8;
  s.hp.n_f = 5;
  s.hp.buffer_total = 12;
  return s;
}

inline std::vector<CheckResult> run_selfcheck(const std::string& filter = "",
                                              const SteFn& ste = default_ste) {
  std::vector<CheckResult> out;
  auto want = [&](const std::string& group) { return filter.empty() || filter == group; };
  auto add = [&](std::string group, std::string name, bool ok, std::string detail) {
    out.push_back({std::move(group), std::move(name), ok, std::move(detail)});
  };

  if (want("grad")) {
    double worst = 0.0;
    for (std::uint64_t s = 1; s <= 5; ++s) worst = std::max(worst, gradient_check_error(s, {3, {5, 4}, 3, 1}));
    add("grad", "backprop_vs_finite_differences", worst < 1e-6, "max rel err " + sci(worst));
  }
  if (want("ste") || want("grad")) {
    double worst = 0.0;
    for (std::uint64_t s = 1; s <= 5; ++s) worst = std::max(worst, ste_check_error(s, {3, {5, 4}, 3, 1}, ste));
    add("ste", "ste_vs_gate_finite_differences", worst < 1e-6, "max rel err " + sci(worst));
    const double chain = ste_manual_chain_error(ste);
    add("ste", "ste_vs_manual_chain_rule", chain < 1e-12, "abs err " + sci(chain));
  }
  if (want("topk")) {
    NetShape shape{1, {2}, 2, 1};  // one group of 4: 2 weights + 2 biases
    const Layout L(shape);
    ScoreStore sc{Vec(L.size(), 0.0), ~L.maskable()};
    sc.values[0] = 0.5; sc.values[1] = -0.9; sc.values[2] = 0.1; sc.values[3] = 0.2;
    const auto m = topk_mask(sc, 0.5, L, 0);
    add("topk", "two_largest_magnitudes", m.test(0) && m.test(1) && m.count() == 2, m.to_string());
    NetShape shape3{1, {1}, 2, 1};  // group of 2
    const Layout L3(shape3);
    ScoreStore tie{Vec(L3.size(), 0.0), ~L3.maskable()};
    tie.values[0] = 0.3; tie.values[1] = 0.3;
    const auto mt = topk_mask(tie, 0.5, L3, 0);
    add("topk", "lowest_index_tie_break", mt.test(0) && !mt.test(1), mt.to_string());
    const auto full = topk_mask(sc, 1.0, L, 0);
    add("topk", "alpha_one_selects_all", full.count() == L.body_size(), full.to_string());
  }
  if (want("eq6")) {
    double dec = 0.0, er = 0.0;
    for (std::uint64_t s = 1; s <= 5; ++s) {
      const auto c = eq6_check(s);
      dec = std::max(dec, c.decomposition_error);
      er = std::max(er, c.er_error);
    }
    add("eq6", "beta_decomposition", dec <= 1e-12, "max err " + sci(dec));
    add("eq6", "beta_zero_is_experience_replay", er <= 1e-12, "max err " + sci(er));
  }
  if (want("rewind")) {
    for (const char* seq : {"L1,L2,U2", "L1,L2,U2,L3"}) {
      const auto setup = tiny_setup(11);
      const auto r = rewind_oracle(Method::pall, setup.hp, setup.shape, setup.suite,
                                   parse_compact(seq), 11);
      std::string detail;
      for (const auto& d : r.diff.differences) detail += d + "; ";
      add("rewind", std::string("rewind_") + seq, r.diff.ok(), detail.empty() ? "identical" : detail);
    }
  }
  return out;
}

}  // namespace subnet_unlearn
