#pragma once

// Request-driven learner lifecycle: subnetwork learning with provenance-tracked
// unlearning, plus the baselines evaluated against it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bitmask.hpp"
#include "errors.hpp"
#include "masking.hpp"
#include "network.hpp"
#include "optimizer.hpp"
#include "param_store.hpp"
#include "rehearsal.hpp"
#include "rng.hpp"
#include "scenario.hpp"

namespace subnet_unlearn {

enum class Method { pall, sequential, independent, er, derpp, static_sparse, dynamic_sparse };

inline constexpr Method kAllMethods[] = {Method::pall,          Method::sequential,
                                         Method::independent,   Method::er,
                                         Method::derpp,         Method::static_sparse,
                                         Method::dynamic_sparse};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::pall: return "pall";
    case Method::sequential: return "sequential";
    case Method::independent: return "independent";
    case Method::er: return "er";
    case Method::derpp: return "derpp";
    case Method::static_sparse: return "static_sparse";
    case Method::dynamic_sparse: return "dynamic_sparse";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  return std::nullopt;
}

// Methods whose unlearning leaves no trace of the task's data.
inline bool is_exact(Method m) {
  return m == Method::pall || m == Method::independent || m == Method::static_sparse ||
         m == Method::dynamic_sparse;
}
inline bool uses_masks(Method m) {
  return m == Method::pall || m == Method::static_sparse || m == Method::dynamic_sparse;
}
inline bool uses_buffers(Method m) {
  return m == Method::pall || m == Method::er || m == Method::derpp;
}

struct Hyperparams {
  double alpha = 0.2;  // per-layer connectivity rate
  int epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  int n_f = 50;     // retraining iterations after an unlearn
  double beta = 0.5;  // logit-matching weight in the rehearsal objective
  std::size_t buffer_total = 500;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidRequest("alpha must be in (0, 1]");
    if (epochs < 0) throw InvalidRequest("epochs must be non-negative");
    if (batch_size == 0) throw InvalidRequest("batch size must be positive");
    if (!(lr > 0.0)) throw InvalidRequest("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw InvalidRequest("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw InvalidRequest("weight decay must be non-negative");
    if (n_f < 0) throw InvalidRequest("N_f must be non-negative");
    if (beta < 0.0) throw InvalidRequest("beta must be non-negative");
  }

  OptimizerConfig param_optimizer() const {
    return {optimizer, lr, momentum, 0.9, 0.999, 1e-8, weight_decay};
  }
  OptimizerConfig score_optimizer() const {
    return {optimizer, lr, momentum, 0.9, 0.999, 1e-8, 0.0};
  }

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

// Summary of one unlearning request's reset and retraining.
struct RetrainRecord {
  TaskId task = 0;
  std::size_t reset = 0;     // |owned submask|
  std::size_t affected = 0;  // |θ̄|
  std::size_t d = 0;
  int steps = 0;
  double mean_abs_diff = 0.0;  // mean |θ_after - θ_reset| over θ̄, 0 if θ̄ is empty

  friend bool operator==(const RetrainRecord&, const RetrainRecord&) = default;
};

// Which buffer each retraining batch came from, for exclusion audits.
struct BatchLogEntry {
  TaskId unlearned = 0;
  TaskId source = 0;
  std::size_t count = 0;

  friend bool operator==(const BatchLogEntry&, const BatchLogEntry&) = default;
};

struct LearnerState {
  Method method = Method::pall;
  Hyperparams hp;
  NetShape shape;
  std::uint64_t seed = 0;
  int num_tasks = 0;  // T, fixes the per-task buffer split

  ParamStore params;
  std::map<TaskId, ParamStore> independent;
  MaskRegistry registry;
  BitMask cumulative;
  ProvenanceLedger ledger;
  BufferSet buffers;
  std::vector<TaskId> omega;  // learned set, in learning order
  std::vector<TaskId> ever_learned;
  std::vector<RetrainRecord> retrain_log;
  std::vector<BatchLogEntry> batch_log;

  bool learned(TaskId t) const { return std::find(omega.begin(), omega.end(), t) != omega.end(); }
  bool seen(TaskId t) const {
    return std::find(ever_learned.begin(), ever_learned.end(), t) != ever_learned.end();
  }
  std::vector<TaskId> unlearned() const {
    std::vector<TaskId> out;
    for (TaskId t : ever_learned)
      if (!learned(t)) out.push_back(t);
    std::sort(out.begin(), out.end());
    return out;
  }

  friend bool operator==(const LearnerState&, const LearnerState&) = default;
};

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const noexcept {
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  }
  friend bool operator==(const Accuracy&, const Accuracy&) = default;
};

// Accuracies after one request: one entry per task seen so far.
struct EvaluationRow {
  std::vector<TaskId> omega;
  std::map<TaskId, Accuracy> acc;
  std::map<TaskId, std::vector<int>> predictions;
};

class Learner {
 public:
  Learner(Method method, Hyperparams hp, NetShape shape, std::uint64_t seed, int num_tasks) {
    hp.validate();
    if (num_tasks < 1) throw InvalidShape("need at least one task");
    shape.num_heads = std::max(shape.num_heads, num_tasks);
    s_.method = method;
    s_.hp = hp;
    s_.shape = shape;
    s_.seed = seed;
    s_.num_tasks = num_tasks;
    const Layout layout(shape);
    s_.params = init_params(layout, pristine_stream());
    s_.cumulative = BitMask(layout.size());
    s_.ledger = ProvenanceLedger(layout.size());
  }

  explicit Learner(LearnerState state) : s_(std::move(state)) {}

  const LearnerState& state() const noexcept { return s_; }
  LearnerState& mutable_state() noexcept { return s_; }
  const Layout& layout() const noexcept { return s_.params.layout; }
  std::size_t d() const noexcept { return s_.params.size(); }

  // φ draws for the shared network; every reset restores these values.
  RngStream pristine_stream() const { return RngStream(s_.seed, 0, Purpose::param_init); }

  // -------------------------------------------------------------------------

  void learn(TaskId t, const TaskData& data) {
    if (s_.seen(t)) throw InvalidRequest("task " + std::to_string(t) + " was already learned");
    if (t < 1 || t > s_.shape.num_heads) throw UnknownTask("no head for task " + std::to_string(t));
    if (data.train.empty()) throw InvalidRequest("empty training set for task " + std::to_string(t));
    for (const auto& e : data.train)
      if (e.y < 0 || static_cast<std::size_t>(e.y) >= s_.shape.classes_per_head)
        throw InvalidRequest("label outside task " + std::to_string(t) + "'s label space");
    switch (s_.method) {
      case Method::pall: subnet_learn(t, data, /*restrict_to_free=*/false); break;
      case Method::dynamic_sparse: subnet_learn(t, data, /*restrict_to_free=*/true); break;
      case Method::static_sparse: static_learn(t, data); break;
      case Method::sequential: dense_learn(t, data, s_.params, false); break;
      case Method::er:
      case Method::derpp: dense_learn(t, data, s_.params, true); break;
      case Method::independent: {
        ParamStore p = init_params(layout(), RngStream(s_.seed, static_cast<std::uint64_t>(t),
                                                       Purpose::param_init));
        dense_learn(t, data, p, false);
        s_.independent.emplace(t, std::move(p));
        break;
      }
    }
    s_.omega.push_back(t);
    s_.ever_learned.push_back(t);
  }

  void unlearn(TaskId t) {
    if (!s_.learned(t)) throw InvalidRequest("task " + std::to_string(t) + " is not currently learned");
    switch (s_.method) {
      case Method::pall:
      case Method::static_sparse:
      case Method::dynamic_sparse: subnet_unlearn(t); break;
      case Method::sequential: break;
      case Method::er:
      case Method::derpp: replay_unlearn(t); break;
      case Method::independent: s_.independent.erase(t); break;
    }
    s_.omega.erase(std::find(s_.omega.begin(), s_.omega.end(), t));
  }

  // Unlearned tasks under exact methods answer uniformly at random, drawn from
  // the (task, evaluation) stream at index `draw`.
  int predict(TaskId t, std::span<const double> x, std::uint64_t draw = 0) const {
    if (!s_.seen(t)) throw UnknownTask("task " + std::to_string(t) + " was never learned");
    if (!s_.learned(t) && is_exact(s_.method)) {
      RngStream r(s_.seed, static_cast<std::uint64_t>(t), Purpose::evaluation, draw);
      return static_cast<int>(r.below(s_.shape.classes_per_head));
    }
    return argmax(logits(t, x));
  }

  Vec logits(TaskId t, std::span<const double> x) const {
    if (s_.method == Method::independent) {
      auto it = s_.independent.find(t);
      if (it == s_.independent.end()) throw UnknownTask("no model for task " + std::to_string(t));
      return forward(it->second, BitMask(d(), true), t, x);
    }
    if (uses_masks(s_.method)) {
      auto it = s_.registry.find(t);
      if (it == s_.registry.end()) throw UnknownTask("no mask for task " + std::to_string(t));
      return forward(s_.params, it->second, t, x);
    }
    return forward(s_.params, BitMask(d(), true), t, x);
  }

  EvaluationRow evaluate(const TaskSuite& suite, std::size_t request_index) const {
    EvaluationRow row;
    row.omega = s_.omega;
    std::vector<TaskId> tasks = s_.ever_learned;
    std::sort(tasks.begin(), tasks.end());
    for (TaskId t : tasks) {
      const auto& test = suite.task(t).test;
      Accuracy a{0, test.size()};
      std::vector<int> preds(test.size());
      const std::uint64_t base = static_cast<std::uint64_t>(request_index) << 32;
      // One effective-weight vector per task instead of per sample.
      if (s_.learned(t) || !is_exact(s_.method)) {
        const ParamStore& p = s_.method == Method::independent ? s_.independent.at(t) : s_.params;
        const BitMask mask = uses_masks(s_.method) ? s_.registry.at(t) : BitMask(d(), true);
        const Vec eff = effective_weights(p, mask);
        for (std::size_t i = 0; i < test.size(); ++i)
          preds[i] = argmax(forward_effective(layout(), eff, t, test[i].x));
      } else {
        for (std::size_t i = 0; i < test.size(); ++i) preds[i] = predict(t, test[i].x, base + i);
      }
      for (std::size_t i = 0; i < test.size(); ++i) a.correct += preds[i] == test[i].y;
      row.acc[t] = a;
      row.predictions[t] = std::move(preds);
    }
    return row;
  }

  EvaluationRow process_request(const Request& r, const TaskSuite& suite, std::size_t request_index) {
    if (r.is_learn()) learn(r.task, suite.task(r.task));
    else unlearn(r.task);
    return evaluate(suite, request_index);
  }

 private:
  // Shuffled minibatch index lists for one epoch.
  std::vector<std::vector<std::size_t>> epoch_batches(std::vector<std::size_t>& order,
                                                      RngStream& stream) const {
    stream.shuffle(std::span<std::size_t>(order));
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += s_.hp.batch_size) {
      const std::size_t end = std::min(order.size(), i + s_.hp.batch_size);
      out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                       order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
  }

  // Mean cross-entropy over the batch; accumulates dℓ/d(effective weights).
  double batch_ce(const Vec& eff, TaskId t, const TaskData& data,
                  std::span<const std::size_t> batch, std::vector<double>& d_eff) const {
    Tape tape;
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (std::size_t i : batch) {
      const auto& e = data.train[i];
      const Vec out = forward_effective(layout(), eff, t, e.x, &tape);
      auto term = cross_entropy_term(out, e.y);
      loss += term.value * inv;
      for (auto& g : term.dlogits) g *= inv;
      backward(layout(), eff, tape, term.dlogits, d_eff);
    }
    return loss;
  }

  void check_loss(double loss, TaskId t) const {
    if (!std::isfinite(loss))
      throw NumericError("non-finite training loss on task " + std::to_string(t));
  }

  // Score-optimized subnetwork learning. With restrict_to_free the top-k is
  // taken only over parameters outside the cumulative mask (no sharing).
  void subnet_learn(TaskId t, const TaskData& data, bool restrict_to_free) {
    const Layout& L = layout();
    const std::size_t dim = d();
    const BitMask prev = s_.cumulative;
    const BitMask head = L.head_mask(t);
    const BitMask free_body = and_not(L.body_mask(), prev);
    const BitMask update = and_not(L.body_mask() | head, prev);
    const BitMask maskable = L.maskable();
    const BitMask* allowed = restrict_to_free ? &free_body : nullptr;

    ScoreStore scores = ScoreStore::init(L, RngStream(s_.seed, static_cast<std::uint64_t>(t),
                                                      Purpose::score_init));
    // Fails here, before any state is touched, if a layer has no room left.
    BitMask m = topk_mask(scores, s_.hp.alpha, L, t, allowed);

    OptimizerState popt(s_.hp.param_optimizer(), dim);
    OptimizerState sopt(s_.hp.score_optimizer(), dim);
    RngStream order_stream(s_.seed, static_cast<std::uint64_t>(t), Purpose::data_order);
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> d_eff(dim);
    std::vector<double> g_param(dim);

    for (int epoch = 0; epoch < s_.hp.epochs; ++epoch) {
      for (const auto& batch : epoch_batches(order, order_stream)) {
        m = topk_mask(scores, s_.hp.alpha, L, t, allowed);
        const Vec eff = effective_weights(s_.params, m);
        std::fill(d_eff.begin(), d_eff.end(), 0.0);
        check_loss(batch_ce(eff, t, data, batch, d_eff), t);
        for (std::size_t j = 0; j < dim; ++j) g_param[j] = m.test(j) ? d_eff[j] : 0.0;
        const auto g_score = ste_score_grad(d_eff, s_.params.values, scores.values);
        popt.apply(s_.params.values, g_param, update);
        sopt.apply(scores.values, g_score, maskable);
      }
    }
    m = topk_mask(scores, s_.hp.alpha, L, t, allowed);
    finish_subnet(t, data, m, prev);
  }

  // Random fixed subnetwork over free parameters.
  void static_learn(TaskId t, const TaskData& data) {
    const Layout& L = layout();
    const std::size_t dim = d();
    const BitMask prev = s_.cumulative;
    RngStream pick(s_.seed, static_cast<std::uint64_t>(t), Purpose::score_init);
    BitMask m(dim);
    for (const auto& g : L.groups()) {
      std::vector<std::size_t> free;
      for (std::size_t j = g.begin; j < g.end; ++j)
        if (!prev.test(j)) free.push_back(j);
      const std::size_t k = topk_count(s_.hp.alpha, g.size());
      if (free.size() < k)
        throw CapacityExhausted("layer at offset " + std::to_string(g.begin) + " has " +
                                std::to_string(free.size()) + " free parameters, needs " +
                                std::to_string(k));
      for (std::size_t i : pick.sample_without_replacement(free.size(), k)) m.set(free[i]);
    }
    m |= L.head_mask(t);

    OptimizerState popt(s_.hp.param_optimizer(), dim);
    RngStream order_stream(s_.seed, static_cast<std::uint64_t>(t), Purpose::data_order);
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> d_eff(dim);
    for (int epoch = 0; epoch < s_.hp.epochs; ++epoch) {
      for (const auto& batch : epoch_batches(order, order_stream)) {
        const Vec eff = effective_weights(s_.params, m);
        std::fill(d_eff.begin(), d_eff.end(), 0.0);
        check_loss(batch_ce(eff, t, data, batch, d_eff), t);
        for (std::size_t j = 0; j < dim; ++j)
          if (!m.test(j)) d_eff[j] = 0.0;
        popt.apply(s_.params.values, d_eff, m);
      }
    }
    finish_subnet(t, data, m, prev);
  }

  // Shared end-of-task bookkeeping for mask-based methods.
  void finish_subnet(TaskId t, const TaskData& data, const BitMask& m, const BitMask& prev) {
    s_.registry[t] = m;
    s_.ledger.record(and_not(m, prev), t);
    s_.cumulative |= m;
    if (s_.method == Method::pall) {
      const RngStream bs(s_.seed, static_cast<std::uint64_t>(t), Purpose::buffer_sample);
      s_.buffers[t] = fill_buffer(data.train, s_.params, m, t,
                                  per_task_capacity(s_.hp.buffer_total, s_.num_tasks), bs);
    }
    reinitialize(s_.params, ~s_.cumulative, pristine_stream());
  }

  void subnet_unlearn(TaskId t) {
    const std::size_t dim = d();
    if (s_.buffers.contains(t)) delete_buffer(s_.buffers, t);
    const BitMask owned = s_.ledger.trained_by(t);
    const BitMask affected = affected_params(s_.registry, s_.ledger, t, s_.omega);
    reinitialize(s_.params, owned, pristine_stream());

    RetrainRecord rec{t, owned.count(), affected.count(), dim, 0, 0.0};
    std::vector<TaskId> later;
    {
      auto pos = std::find(s_.omega.begin(), s_.omega.end(), t);
      for (auto it = pos + 1; it != s_.omega.end(); ++it)
        if (s_.buffers.contains(*it)) later.push_back(*it);
    }
    if (affected.any() && s_.hp.n_f > 0 && !later.empty()) {
      std::vector<double> reset_values;
      affected.for_each_set([&](std::size_t j) { reset_values.push_back(s_.params.values[j]); });

      OptimizerState opt(s_.hp.param_optimizer(), dim);
      ReplaySampler sampler(s_.seed, static_cast<std::uint64_t>(t));
      auto mask_for = [&](TaskId tau) -> const BitMask& { return s_.registry.at(tau); };
      GradBuffer grad(dim);
      for (int step = 0; step < s_.hp.n_f; ++step) {
        const auto batches = sampler.draw(s_.buffers, later, s_.hp.batch_size);
        for (const auto& b : batches) s_.batch_log.push_back({t, b.task, b.indices.size()});
        grad.zero();
        const auto loss = replay_loss(s_.params, s_.buffers, batches, s_.hp.beta, mask_for, &grad);
        check_loss(loss.value, t);
        opt.apply(s_.params.values, grad.values, affected);
      }
      for (TaskId tau : later) s_.ledger.record(affected & s_.registry.at(tau), tau);

      double diff = 0.0;
      std::size_t k = 0;
      affected.for_each_set([&](std::size_t j) { diff += std::abs(s_.params.values[j] - reset_values[k++]); });
      rec.steps = s_.hp.n_f;
      rec.mean_abs_diff = diff / static_cast<double>(reset_values.size());
    }
    s_.retrain_log.push_back(rec);
    s_.ledger.clear(t);
    s_.registry.erase(t);
    s_.cumulative = cumulative_mask(s_.registry, dim);
  }

  double replay_beta() const { return s_.method == Method::derpp ? s_.hp.beta : 0.0; }

  // Full-network training of the body plus task t's head; with replay, each
  // step adds the rehearsal loss over the buffers of currently learned tasks.
  void dense_learn(TaskId t, const TaskData& data, ParamStore& p, bool replay) {
    const Layout& L = layout();
    const std::size_t dim = d();
    const BitMask all(dim, true);
    const BitMask update = L.body_mask() | L.head_mask(t);
    OptimizerState popt(s_.hp.param_optimizer(), dim);
    RngStream order_stream(s_.seed, static_cast<std::uint64_t>(t), Purpose::data_order);
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<TaskId> replay_tasks;
    if (replay)
      for (TaskId tau : s_.omega)
        if (s_.buffers.contains(tau)) replay_tasks.push_back(tau);
    ReplaySampler sampler(s_.seed, 0x10000ULL + static_cast<std::uint64_t>(t));
    auto mask_for = [&](TaskId) -> const BitMask& { return all; };

    std::vector<double> d_eff(dim);
    GradBuffer replay_grad(dim);
    for (int epoch = 0; epoch < s_.hp.epochs; ++epoch) {
      for (const auto& batch : epoch_batches(order, order_stream)) {
        std::fill(d_eff.begin(), d_eff.end(), 0.0);
        double loss = batch_ce(p.values, t, data, batch, d_eff);
        if (!replay_tasks.empty()) {
          const auto batches = sampler.draw(s_.buffers, replay_tasks, s_.hp.batch_size);
          replay_grad.zero();
          loss += replay_loss(p, s_.buffers, batches, replay_beta(), mask_for, &replay_grad).value;
          for (std::size_t j = 0; j < dim; ++j) d_eff[j] += replay_grad.values[j];
        }
        check_loss(loss, t);
        popt.apply(p.values, d_eff, update);
      }
    }
    if (replay) {
      const RngStream bs(s_.seed, static_cast<std::uint64_t>(t), Purpose::buffer_sample);
      s_.buffers[t] = fill_buffer(data.train, p, all, t,
                                  per_task_capacity(s_.hp.buffer_total, s_.num_tasks), bs);
    }
  }

  // N_f finetuning steps: rehearsal on the remaining buffers plus
  // cross-entropy to the uniform distribution on the unlearned task's buffer,
  // then the buffer is dropped.
  void replay_unlearn(TaskId t) {
    const Layout& L = layout();
    const std::size_t dim = d();
    const BitMask all(dim, true);
    const BitMask update = L.body_mask() | L.head_mask(t);
    std::vector<TaskId> remaining;
    for (TaskId tau : s_.omega)
      if (tau != t && s_.buffers.contains(tau)) remaining.push_back(tau);
    auto mask_for = [&](TaskId) -> const BitMask& { return all; };

    if (s_.buffers.contains(t) && s_.hp.n_f > 0) {
      OptimizerState opt(s_.hp.param_optimizer(), dim);
      ReplaySampler sampler(s_.seed, static_cast<std::uint64_t>(t));
      RngStream forget_stream(s_.seed, static_cast<std::uint64_t>(t), Purpose::retrain_order,
                              0x666f726765740000ULL);
      const auto& forget = s_.buffers.at(t);
      GradBuffer grad(dim);
      std::vector<double> d_eff(dim);
      Tape tape;
      for (int step = 0; step < s_.hp.n_f; ++step) {
        grad.zero();
        double loss = 0.0;
        if (!remaining.empty()) {
          const auto batches = sampler.draw(s_.buffers, remaining, s_.hp.batch_size);
          for (const auto& b : batches) s_.batch_log.push_back({t, b.task, b.indices.size()});
          loss += replay_loss(s_.params, s_.buffers, batches, replay_beta(), mask_for, &grad).value;
        }
        const auto idx = sample_batch(forget, s_.hp.batch_size, forget_stream);
        const double inv = 1.0 / static_cast<double>(idx.size());
        std::fill(d_eff.begin(), d_eff.end(), 0.0);
        for (std::size_t i : idx) {
          const auto out = forward_effective(L, s_.params.values, t, forget.entries[i].x, &tape);
          auto term = uniform_cross_entropy_term(out);
          loss += term.value * inv;
          for (auto& g : term.dlogits) g *= inv;
          backward(L, s_.params.values, tape, term.dlogits, d_eff);
        }
        for (std::size_t j = 0; j < dim; ++j) grad.values[j] += d_eff[j];
        check_loss(loss, t);
        opt.apply(s_.params.values, grad.values, update);
      }
    }
    s_.buffers.erase(t);
  }

  LearnerState s_;
};

}  // namespace subnet_unlearn
