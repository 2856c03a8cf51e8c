#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "engine.hpp"
#include "errors.hpp"
#include "scenario.hpp"

namespace subnet_unlearn {

// a_{i,t}: one row per processed request (row 0 is the state before any
// request). Tasks never learned up to row i have no entry.
struct AccuracyMatrix {
  struct Row {
    std::optional<Request> request;
    std::vector<TaskId> omega;
    std::map<TaskId, Accuracy> acc;
  };
  std::vector<Row> rows{Row{}};

  void append(const Request& r, const EvaluationRow& e) { rows.push_back({r, e.omega, e.acc}); }

  std::size_t num_requests() const noexcept { return rows.size() - 1; }

  double at(std::size_t i, TaskId t) const {
    auto it = rows.at(i).acc.find(t);
    if (it == rows.at(i).acc.end())
      throw UnknownTask("no accuracy for task " + std::to_string(t) + " at row " + std::to_string(i));
    return it->second.value();
  }

  // Hand-built matrices for tests: values[i-1] holds row i.
  static AccuracyMatrix from_values(const RequestSequence& seq,
                                    const std::vector<std::map<TaskId, double>>& values) {
    if (values.size() != seq.size()) throw DimensionMismatch("one value row per request");
    AccuracyMatrix m;
    std::vector<TaskId> omega;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (seq[i].is_learn()) omega.push_back(seq[i].task);
      else omega.erase(std::remove(omega.begin(), omega.end(), seq[i].task), omega.end());
      Row row{seq[i], omega, {}};
      for (const auto& [t, v] : values[i]) {
        // Decimal denominator: correct/total then rounds to the same double as v.
        constexpr std::size_t denom = 1'000'000'000;
        row.acc[t] = Accuracy{static_cast<std::size_t>(std::llround(v * static_cast<double>(denom))), denom};
      }
      m.rows.push_back(std::move(row));
    }
    return m;
  }
};

struct ActiveAccuracies {
  std::optional<double> learned;    // A_l
  std::optional<double> unlearned;  // A_u
};

inline ActiveAccuracies compute_A(const AccuracyMatrix& m, const std::vector<TaskId>& omega_r,
                                  const std::vector<TaskId>& unlearned) {
  const std::size_t r = m.num_requests();
  ActiveAccuracies out;
  if (!omega_r.empty()) {
    double s = 0.0;
    for (TaskId t : omega_r) s += m.at(r, t);
    out.learned = s / static_cast<double>(omega_r.size());
  }
  if (!unlearned.empty()) {
    double s = 0.0;
    for (TaskId t : unlearned) s += m.at(r, t);
    out.unlearned = s / static_cast<double>(unlearned.size());
  }
  return out;
}

// Final-row convenience: Ω_r from the last row, unlearned = seen \ Ω_r.
inline ActiveAccuracies compute_A(const AccuracyMatrix& m) {
  const auto& last = m.rows.back();
  std::vector<TaskId> unl;
  for (const auto& [t, a] : last.acc)
    if (std::find(last.omega.begin(), last.omega.end(), t) == last.omega.end()) unl.push_back(t);
  return compute_A(m, last.omega, unl);
}

struct ForgettingMetrics {
  double learn = 0.0;                  // F_l
  std::optional<double> unlearn;       // F_u, absent when N_u = 0
};

// Mean drop over a set, zero for an empty set.
inline double mean_drop(const AccuracyMatrix& m, std::size_t i, const std::vector<TaskId>& tasks) {
  if (tasks.empty()) return 0.0;
  double s = 0.0;
  for (TaskId t : tasks) s += m.at(i - 1, t) - m.at(i, t);
  return s / static_cast<double>(tasks.size());
}

inline ForgettingMetrics compute_F(const AccuracyMatrix& m, const RequestSequence& seq) {
  if (m.num_requests() != seq.size()) throw DimensionMismatch("compute_F: row count differs from sequence");
  const std::size_t T = count_learns(seq);
  const std::size_t Nu = count_unlearns(seq);
  ForgettingMetrics out;
  double fl = 0.0;
  double fu = 0.0;
  for (std::size_t i = 2; i <= seq.size(); ++i) {
    const auto& r = seq[i - 1];
    if (r.is_learn()) fl += mean_drop(m, i, m.rows[i - 1].omega);
    else fu += mean_drop(m, i, m.rows[i].omega);
  }
  // An unlearn can never be request 1 in a valid sequence.
  out.learn = T > 1 ? fl / static_cast<double>(T - 1) : 0.0;
  if (Nu > 0) out.unlearn = fu / static_cast<double>(Nu);
  return out;
}

// Largest single-task drop caused by any unlearning request.
inline std::optional<double> compute_Fu_max(const AccuracyMatrix& m, const RequestSequence& seq) {
  if (count_unlearns(seq) == 0) return std::nullopt;
  double best = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 2; i <= seq.size(); ++i) {
    if (!seq[i - 1].is_unlearn()) continue;
    for (TaskId t : m.rows[i].omega) {
      best = std::max(best, m.at(i - 1, t) - m.at(i, t));
      any = true;
    }
  }
  return any ? best : 0.0;
}

// Inference model size under a 32-bit parameter convention, masks at one bit
// per parameter.
inline std::uint64_t model_size_bytes(Method method, std::uint64_t d, std::size_t omega_size,
                                      std::size_t mask_count) {
  const std::uint64_t dense = 4 * d;
  if (method == Method::independent) return dense * omega_size;
  if (uses_masks(method)) return dense + mask_count * ((d + 7) / 8);
  return dense;
}

inline double to_mib(std::uint64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

struct RetrainStats {
  double ratio = 0.0;
  std::optional<double> mean_abs_diff;
};

inline RetrainStats retrain_stats(const RetrainRecord& r) {
  RetrainStats s;
  if (r.d) s.ratio = static_cast<double>(r.affected) / static_cast<double>(r.d);
  if (r.affected) s.mean_abs_diff = r.mean_abs_diff;
  return s;
}

struct AuditResult {
  bool ok = true;
  std::vector<std::string> violations;
};

// Exact-unlearning audit: for every unlearned task, no provenance, no buffer,
// no mask, and no dedicated model remain.
inline AuditResult audit_provenance(const LearnerState& s) {
  AuditResult r;
  for (TaskId t : s.unlearned()) {
    const auto tag = "task " + std::to_string(t) + ": ";
    if (s.ledger.trained_by(t).any()) r.violations.push_back(tag + "parameters still trained by its data");
    if (s.buffers.contains(t)) r.violations.push_back(tag + "replay buffer still present");
    if (s.registry.contains(t)) r.violations.push_back(tag + "mask still registered");
    if (s.independent.contains(t)) r.violations.push_back(tag + "independent model still present");
  }
  r.ok = r.violations.empty();
  return r;
}

// Structural invariants of mask-based learners.
inline AuditResult audit_masks(const LearnerState& s) {
  AuditResult r;
  const std::size_t d = s.params.size();
  std::set<TaskId> keys;
  for (const auto& [t, m] : s.registry) keys.insert(t);
  if (keys != std::set<TaskId>(s.omega.begin(), s.omega.end()))
    r.violations.push_back("registry keys differ from the learned set");
  if (!(cumulative_mask(s.registry, d) == s.cumulative))
    r.violations.push_back("cumulative mask differs from OR of registry");
  for (const auto& [t, owned] : s.ledger.entries()) {
    auto it = s.registry.find(t);
    if (it == s.registry.end()) {
      if (owned.any()) r.violations.push_back("provenance for task " + std::to_string(t) + " without a mask");
    } else if (!owned.is_subset_of(it->second)) {
      r.violations.push_back("task " + std::to_string(t) + " trained parameters outside its mask");
    }
  }
  r.ok = r.violations.empty();
  return r;
}

// ---------------------------------------------------------------------------
// Aggregation over seeds

struct MetricReport {
  std::string method;
  std::uint64_t seed = 0;
  int tasks = 0;
  int unlearns = 0;
  std::optional<double> A_l, A_u, F_l, F_u, F_u_max;  // percentage points
  std::uint64_t model_size_bytes = 0;
  double retrain_ratio = 0.0;                  // mean |θ̄|/d over unlearns
  std::optional<double> mean_abs_diff;         // mean over unlearns with θ̄ ≠ ∅
  std::optional<double> runtime_s;            // wall clock, seconds
};

struct Stat {
  double mean = 0.0, min = 0.0, max = 0.0;
  std::size_t n = 0;
};

inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  s.n = v.size();
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  return s;
}

struct AggregateSummary {
  std::string method;
  std::size_t runs = 0;
  std::map<std::string, Stat> metrics;  // keyed by column name
  // Worst cases across repetitions.
  std::optional<double> A_l_min;
  std::optional<double> F_u_max_max;
};

inline AggregateSummary aggregate(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw InvalidRequest("aggregate: no reports");
  AggregateSummary out;
  out.method = reports.front().method;
  out.runs = reports.size();
  std::map<std::string, std::vector<double>> cols;
  auto put = [&](const char* name, const std::optional<double>& v) {
    if (v) cols[name].push_back(*v);
  };
  for (const auto& r : reports) {
    put("A_l", r.A_l);
    put("A_u", r.A_u);
    put("F_l", r.F_l);
    put("F_u", r.F_u);
    put("F_u_max", r.F_u_max);
    put("model_size_bytes", static_cast<double>(r.model_size_bytes));
    put("retrain_ratio", r.retrain_ratio);
    put("mean_abs_diff", r.mean_abs_diff);
    put("runtime_s", r.runtime_s);
  }
  for (auto& [k, v] : cols) out.metrics[k] = summarize(v);
  if (out.metrics.contains("A_l")) out.A_l_min = out.metrics["A_l"].min;
  if (out.metrics.contains("F_u_max")) out.F_u_max_max = out.metrics["F_u_max"].max;
  return out;
}

}  // namespace subnet_unlearn
