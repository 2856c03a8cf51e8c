#pragma once

// Running request sequences end to end: per-request evaluation, metric
// reports, the exact-unlearning audit, and the rewind oracle.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "engine.hpp"
#include "metrics.hpp"
#include "scenario.hpp"

namespace subnet_unlearn {

struct TraceRow {
  std::size_t request = 0;
  Request req;
  std::vector<TaskId> omega;
  std::map<TaskId, Accuracy> acc;
};

struct RunOutcome {
  MetricReport report;
  AccuracyMatrix matrix;
  std::vector<TraceRow> trace;
  LearnerState final_state;
  // Learning requests after which some previously learned task's test-set
  // predictions changed in any position.
  std::size_t learn_prediction_changes = 0;
  // Audit findings collected after every unlearning request (exact methods).
  std::vector<std::string> audit_violations;
  bool audited = false;
};

struct RunOptions {
  bool audit = true;
  // Invoked after each request; lets tests inject faults or inspect state.
  std::function<void(Learner&, std::size_t, const Request&)> after_request;
};

inline NetShape shape_for(const TaskSuite& suite, std::vector<std::size_t> hidden) {
  NetShape s;
  s.input_dim = suite.dim;
  s.hidden = std::move(hidden);
  s.classes_per_head = suite.classes_per_task;
  s.num_heads = suite.num_tasks();
  return s;
}

inline MetricReport make_report(Method method, std::uint64_t seed, const AccuracyMatrix& m,
                                const RequestSequence& seq, const LearnerState& s) {
  MetricReport r;
  r.method = std::string(method_name(method));
  r.seed = seed;
  r.tasks = static_cast<int>(count_learns(seq));
  r.unlearns = static_cast<int>(count_unlearns(seq));
  const auto a = compute_A(m);
  auto pct = [](std::optional<double> v) -> std::optional<double> {
    if (v) return *v * 100.0;
    return std::nullopt;
  };
  r.A_l = pct(a.learned);
  r.A_u = pct(a.unlearned);
  const auto f = compute_F(m, seq);
  r.F_l = f.learn * 100.0;
  r.F_u = pct(f.unlearn);
  r.F_u_max = pct(compute_Fu_max(m, seq));
  r.model_size_bytes = model_size_bytes(method, s.params.size(), s.omega.size(), s.registry.size());
  if (!s.retrain_log.empty()) {
    double ratio = 0.0;
    double diff = 0.0;
    std::size_t n_diff = 0;
    for (const auto& rec : s.retrain_log) {
      const auto st = retrain_stats(rec);
      ratio += st.ratio;
      if (st.mean_abs_diff) {
        diff += *st.mean_abs_diff;
        ++n_diff;
      }
    }
    r.retrain_ratio = ratio / static_cast<double>(s.retrain_log.size());
    if (n_diff) r.mean_abs_diff = diff / static_cast<double>(n_diff);
  }
  return r;
}

inline RunOutcome run_sequence(Method method, const Hyperparams& hp, const NetShape& shape,
                               const TaskSuite& suite, const RequestSequence& seq,
                               std::uint64_t seed, const RunOptions& opts = {}) {
  if (auto v = validate_sequence(seq))
    throw InvalidRequest("invalid request sequence at index " + std::to_string(v->index) + ": " +
                         v->reason);
  const auto t0 = std::chrono::steady_clock::now();
  Learner learner(method, hp, shape, seed, suite.num_tasks());
  RunOutcome out;
  EvaluationRow prev;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& req = seq[i];
    EvaluationRow row = learner.process_request(req, suite, i + 1);
    if (opts.after_request) {
      opts.after_request(learner, i + 1, req);
      row = learner.evaluate(suite, i + 1);
    }
    if (req.is_learn()) {
      for (TaskId t : prev.omega)
        if (prev.predictions.at(t) != row.predictions.at(t)) {
          ++out.learn_prediction_changes;
          break;
        }
    } else if (opts.audit && is_exact(method)) {
      out.audited = true;
      const auto audit = audit_provenance(learner.state());
      for (const auto& v : audit.violations)
        out.audit_violations.push_back("request " + std::to_string(i + 1) + ": " + v);
      if (uses_masks(method)) {
        const auto masks = audit_masks(learner.state());
        for (const auto& v : masks.violations)
          out.audit_violations.push_back("request " + std::to_string(i + 1) + ": " + v);
      }
    }
    out.matrix.append(req, row);
    out.trace.push_back({i + 1, req, row.omega, row.acc});
    prev = std::move(row);
  }
  if (opts.audit && is_exact(method)) {
    out.audited = true;
    for (const auto& v : audit_provenance(learner.state()).violations)
      out.audit_violations.push_back("final: " + v);
  }
  out.final_state = learner.state();
  out.report = make_report(method, seed, out.matrix, seq, out.final_state);
  out.report.runtime_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Rewind oracle

struct StateDiff {
  std::vector<std::string> differences;
  bool ok() const noexcept { return differences.empty(); }
};

// Compares the retained state of two learners: learned set, masks, buffers,
// parameters under the cumulative mask, per-task models, and predictions on
// every learned task's test set.
inline StateDiff compare_retained(const Learner& a, const Learner& b, const TaskSuite& suite) {
  StateDiff d;
  const auto& sa = a.state();
  const auto& sb = b.state();
  auto sorted = [](std::vector<TaskId> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  if (sorted(sa.omega) != sorted(sb.omega)) {
    d.differences.push_back("learned sets differ");
    return d;
  }
  if (!(sa.registry == sb.registry)) d.differences.push_back("mask registries differ");
  if (!(sa.cumulative == sb.cumulative)) d.differences.push_back("cumulative masks differ");
  if (!(sa.buffers == sb.buffers)) d.differences.push_back("replay buffers differ");
  if (sa.params.size() != sb.params.size()) {
    d.differences.push_back("parameter counts differ");
    return d;
  }
  std::size_t n_param = 0;
  sa.cumulative.for_each_set([&](std::size_t j) {
    if (sa.params.values[j] != sb.params.values[j]) ++n_param;
  });
  if (n_param) d.differences.push_back(std::to_string(n_param) + " retained parameters differ");
  for (TaskId t : sa.omega) {
    auto ia = sa.independent.find(t);
    auto ib = sb.independent.find(t);
    if ((ia == sa.independent.end()) != (ib == sb.independent.end()) ||
        (ia != sa.independent.end() && !(ia->second == ib->second)))
      d.differences.push_back("independent model for task " + std::to_string(t) + " differs");
    for (const auto& e : suite.task(t).test)
      if (a.predict(t, e.x) != b.predict(t, e.x)) {
        d.differences.push_back("predictions for task " + std::to_string(t) + " differ");
        break;
      }
  }
  return d;
}

// Position of the first adjacent Learn(t), Unlearn(t) pair.
inline std::optional<std::size_t> find_rewind_pair(const RequestSequence& seq) {
  for (std::size_t i = 0; i + 1 < seq.size(); ++i)
    if (seq[i].is_learn() && seq[i + 1].is_unlearn() && seq[i].task == seq[i + 1].task) return i;
  return std::nullopt;
}

inline Learner run_learner(Method method, const Hyperparams& hp, const NetShape& shape,
                           const TaskSuite& suite, const RequestSequence& seq, std::uint64_t seed) {
  Learner l(method, hp, shape, seed, suite.num_tasks());
  for (const auto& r : seq) {
    if (r.is_learn()) l.learn(r.task, suite.task(r.task));
    else l.unlearn(r.task);
  }
  return l;
}

struct RewindResult {
  RequestSequence with_pair;
  RequestSequence without_pair;
  StateDiff diff;
};

// Runs the sequence with and without its first adjacent learn/unlearn pair
// and compares the retained state bit for bit.
inline RewindResult rewind_oracle(Method method, const Hyperparams& hp, const NetShape& shape,
                                  const TaskSuite& suite, const RequestSequence& seq,
                                  std::uint64_t seed) {
  const auto pos = find_rewind_pair(seq);
  if (!pos) throw InvalidRequest("sequence has no adjacent learn/unlearn pair to rewind");
  RewindResult r{seq, seq, {}};
  r.without_pair.erase(r.without_pair.begin() + static_cast<std::ptrdiff_t>(*pos),
                       r.without_pair.begin() + static_cast<std::ptrdiff_t>(*pos + 2));
  const Learner a = run_learner(method, hp, shape, suite, r.with_pair, seed);
  const Learner b = run_learner(method, hp, shape, suite, r.without_pair, seed);
  r.diff = compare_retained(a, b, suite);
  return r;
}

// ---------------------------------------------------------------------------
// Output formats

inline constexpr const char* kCsvHeader =
    "seed,method,T,N_u,A_l_pct,A_u_pct,F_l_pct,F_u_pct,F_u_max_pct,model_size_bytes,retrain_ratio,"
    "mean_abs_diff,runtime_s";
inline constexpr const char* kTraceSchema = "subnet-unlearn-trace/1";

inline std::string fmt_fixed(double v, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  if (std::string_view(buf).find_first_not_of("-0.") == std::string_view::npos && buf[0] == '-')
    return buf + 1;  // no "-0.000"
  return buf;
}
inline std::string fmt_opt(const std::optional<double>& v, int prec) {
  return v ? fmt_fixed(*v, prec) : "NA";
}

inline std::string csv_row(const MetricReport& r, bool with_timing) {
  std::ostringstream os;
  os << r.seed << ',' << r.method << ',' << r.tasks << ',' << r.unlearns << ','
     << fmt_opt(r.A_l, 6) << ',' << fmt_opt(r.A_u, 6) << ',' << fmt_opt(r.F_l, 6) << ','
     << fmt_opt(r.F_u, 6) << ',' << fmt_opt(r.F_u_max, 6) << ',' << r.model_size_bytes << ','
     << fmt_fixed(r.retrain_ratio, 8) << ',' << fmt_opt(r.mean_abs_diff, 8) << ','
     << (with_timing ? fmt_opt(r.runtime_s, 3) : std::string("NA"));
  return os.str();
}

// Inverse of csv_row. Throws FormatError on anything malformed.
inline MetricReport parse_csv_row(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  f.push_back(cur);
  if (f.size() != 13) throw FormatError("expected 13 fields, got " + std::to_string(f.size()));
  auto num = [](const std::string& s) -> double {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::logic_error&) {
      throw FormatError("not a number: '" + s + "'");
    }
    if (used != s.size() || !std::isfinite(v)) throw FormatError("not a number: '" + s + "'");
    return v;
  };
  auto opt = [&](const std::string& s) -> std::optional<double> {
    if (s == "NA") return std::nullopt;
    return num(s);
  };
  auto integer = [&](const std::string& s) -> std::uint64_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError("not a non-negative integer: '" + s + "'");
    return std::stoull(s);
  };
  MetricReport r;
  r.seed = integer(f[0]);
  if (f[1].empty()) throw FormatError("empty method name");
  r.method = f[1];
  r.tasks = static_cast<int>(integer(f[2]));
  r.unlearns = static_cast<int>(integer(f[3]));
  r.A_l = opt(f[4]);
  r.A_u = opt(f[5]);
  r.F_l = opt(f[6]);
  r.F_u = opt(f[7]);
  r.F_u_max = opt(f[8]);
  r.model_size_bytes = integer(f[9]);
  r.retrain_ratio = num(f[10]);
  r.mean_abs_diff = opt(f[11]);
  r.runtime_s = opt(f[12]);
  return r;
}

inline std::string trace_line(const MetricReport& r, const TraceRow& row) {
  nlohmann::ordered_json j;
  j["schema"] = kTraceSchema;
  j["seed"] = r.seed;
  j["method"] = r.method;
  j["request"] = row.request;
  j["op"] = row.req.is_learn() ? "learn" : "unlearn";
  j["task"] = row.req.task;
  j["omega"] = row.omega;
  nlohmann::ordered_json acc = nlohmann::ordered_json::object();
  for (const auto& [t, a] : row.acc)
    acc[std::to_string(t)] = {{"correct", a.correct}, {"total", a.total}, {"accuracy_pct", a.value() * 100.0}};
  j["acc"] = acc;
  return j.dump();
}

// Runs `n` jobs on up to `workers` threads; results land at their own index.
template <typename R, typename F>
std::vector<R> run_indexed(std::size_t n, std::size_t workers, F&& job) {
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        slots[i].emplace(job(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<R> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

}  // namespace subnet_unlearn
