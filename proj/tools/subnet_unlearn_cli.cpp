// subnet-unlearn: scenario generation, experiment runs, self-verification and
// report aggregation.
//
// Exit codes: 0 success, 1 selfcheck failure, 2 invalid flags or malformed
// input, 3 capacity exhaustion, 4 unlearning audit failure, 5 numeric or
// internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "subnet_unlearn/checkpoint.hpp"
#include "subnet_unlearn/experiment.hpp"
#include "subnet_unlearn/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace subnet_unlearn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitSelfcheck = 1;
constexpr int kExitUsage = 2;
constexpr int kExitCapacity = 3;
constexpr int kExitAudit = 4;
constexpr int kExitInternal = 5;

constexpr const char* kOutEnv = "SUBNET_UNLEARN_OUT";

struct UsageError : Error {
  using Error::Error;
};

std::vector<std::size_t> parse_hidden(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto w = parse_number<std::size_t>(tok);
    if (w == 0) throw UsageError("hidden widths must be positive");
    out.push_back(w);
  }
  if (out.empty()) throw UsageError("--hidden needs at least one width");
  return out;
}

std::vector<Method> parse_methods(const std::string& text) {
  std::vector<Method> out;
  if (text == "all") return {std::begin(kAllMethods), std::end(kAllMethods)};
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    auto m = parse_method(tok);
    if (!m) throw UsageError("unknown method '" + tok + "'");
    out.push_back(*m);
  }
  if (out.empty()) throw UsageError("--method is empty");
  return out;
}

// ---------------------------------------------------------------------------
// gen-scenario

struct ScenarioFlags {
  int tasks = 5;
  int unlearns = 3;
  std::uint64_t seed = 0;
  SyntheticParams data;
  std::string data_file;
};

void add_scenario_flags(CLI::App* app, ScenarioFlags& f) {
  app->add_option("--tasks", f.tasks, "number of tasks T");
  app->add_option("--unlearns", f.unlearns, "number of unlearning requests N_u");
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--classes", f.data.classes_per_task, "classes per task");
  app->add_option("--dim", f.data.dim, "input dimension");
  app->add_option("--train-per-class", f.data.train_per_class, "training samples per class");
  app->add_option("--test-per-class", f.data.test_per_class, "test samples per class");
  app->add_option("--spread", f.data.spread, "scale of class centers");
  app->add_option("--noise", f.data.noise, "per-coordinate noise standard deviation");
  app->add_option("--data", f.data_file, "CSV task data (task,split,label,x1..xD) instead of synthetic");
}

Scenario scenario_from_flags(const ScenarioFlags& f) {
  if (f.tasks < 1) throw UsageError("--tasks must be at least 1");
  if (f.unlearns < 0 || f.unlearns > f.tasks) throw UsageError("--unlearns must be in [0, tasks]");
  if (f.data.classes_per_task < 2) throw UsageError("--classes must be at least 2");
  if (f.data.dim < 1 || f.data.train_per_class < 1 || f.data.test_per_class < 1)
    throw UsageError("data sizes must be positive");
  Scenario s = make_scenario(f.seed, f.tasks, f.unlearns, f.data);
  s.data_file = f.data_file;
  return s;
}

int cmd_gen_scenario(const ScenarioFlags& f, const std::string& out) {
  const Scenario s = scenario_from_flags(f);
  if (out.empty() || out == "-") std::cout << write_scenario_text(s);
  else write_scenario_file(out, s);
  const auto v = validate_sequence(s.sequence);
  std::cerr << "sequence " << to_compact(s.sequence) << ": " << (v ? "INVALID" : "valid") << '\n';
  return v ? kExitUsage : kExitOk;
}

// ---------------------------------------------------------------------------
// run

struct RunFlags {
  std::string method = "pall";
  double alpha = 0.0;  // 0 means 1/T
  Hyperparams hp;
  std::string hidden = "64,64";
  std::string scenario_path;
  ScenarioFlags inline_scenario;
  std::string config_path;
  std::size_t seeds = 1;
  std::string out;
  bool checkpoint = false;
  bool keep_sequence = false;
  std::size_t jobs = 1;
  bool timing = false;
};

// Keys accepted in --config files; each maps onto the flag of the same name.
using Setter = std::function<void(RunFlags&, const std::string&)>;

const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = {
      {"method", [](RunFlags& f, const std::string& v) { f.method = v; }},
      {"alpha", [](RunFlags& f, const std::string& v) { f.alpha = parse_number<double>(v); }},
      {"nf", [](RunFlags& f, const std::string& v) { f.hp.n_f = parse_number<int>(v); }},
      {"beta", [](RunFlags& f, const std::string& v) { f.hp.beta = parse_number<double>(v); }},
      {"epochs", [](RunFlags& f, const std::string& v) { f.hp.epochs = parse_number<int>(v); }},
      {"lr", [](RunFlags& f, const std::string& v) { f.hp.lr = parse_number<double>(v); }},
      {"momentum", [](RunFlags& f, const std::string& v) { f.hp.momentum = parse_number<double>(v); }},
      {"weight-decay",
       [](RunFlags& f, const std::string& v) { f.hp.weight_decay = parse_number<double>(v); }},
      {"optimizer",
       [](RunFlags& f, const std::string& v) {
         if (v == "sgd") f.hp.optimizer = OptimizerKind::sgd_momentum;
         else if (v == "adam") f.hp.optimizer = OptimizerKind::adam;
         else throw UsageError("optimizer must be sgd or adam");
       }},
      {"batch", [](RunFlags& f, const std::string& v) { f.hp.batch_size = parse_number<std::size_t>(v); }},
      {"buffer", [](RunFlags& f, const std::string& v) { f.hp.buffer_total = parse_number<std::size_t>(v); }},
      {"hidden", [](RunFlags& f, const std::string& v) { f.hidden = v; }},
      {"scenario", [](RunFlags& f, const std::string& v) { f.scenario_path = v; }},
      {"seeds", [](RunFlags& f, const std::string& v) { f.seeds = parse_number<std::size_t>(v); }},
      {"out", [](RunFlags& f, const std::string& v) { f.out = v; }},
      {"jobs", [](RunFlags& f, const std::string& v) { f.jobs = parse_number<std::size_t>(v); }},
      {"tasks", [](RunFlags& f, const std::string& v) { f.inline_scenario.tasks = parse_number<int>(v); }},
      {"unlearns",
       [](RunFlags& f, const std::string& v) { f.inline_scenario.unlearns = parse_number<int>(v); }},
      {"seed",
       [](RunFlags& f, const std::string& v) { f.inline_scenario.seed = parse_number<std::uint64_t>(v); }},
  };
  return keys;
}

// Applies `key = value` lines for every key not already set on the command line.
void apply_config(const std::string& path, RunFlags& f, const CLI::App& app) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto c = line.find('#'); c != std::string::npos) line.erase(c);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto it = config_keys().find(key);
    if (it == config_keys().end())
      throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (app.count("--" + key) > 0) continue;
    try {
      it->second(f, val);
    } catch (const FormatError& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

struct RunJob {
  Method method;
  std::size_t index;
  std::uint64_t seed;
};

struct JobResult {
  RunOutcome outcome;
  RequestSequence sequence;
};

int cmd_run(RunFlags f, const CLI::App& app) {
  if (!f.config_path.empty()) apply_config(f.config_path, f, app);
  const auto methods = parse_methods(f.method);
  const auto hidden = parse_hidden(f.hidden);
  if (f.seeds == 0) throw UsageError("--seeds must be at least 1");
  if (f.jobs == 0) throw UsageError("--jobs must be at least 1");

  Scenario scenario;
  if (!f.scenario_path.empty()) {
    try {
      scenario = read_scenario_file(f.scenario_path);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
  } else {
    scenario = scenario_from_flags(f.inline_scenario);
  }
  if (!f.scenario_path.empty() && (app.count("--seed") > 0))
    scenario.seed = f.inline_scenario.seed;

  Hyperparams hp = f.hp;
  hp.alpha = f.alpha > 0.0 ? f.alpha : 1.0 / static_cast<double>(scenario.tasks);
  try {
    hp.validate();
  } catch (const InvalidRequest& e) {
    throw UsageError(e.what());
  }

  std::optional<TaskSuite> file_suite;
  if (!scenario.data_file.empty()) {
    try {
      file_suite = load_csv_tasks(scenario.data_file);
    } catch (const FormatError& e) {
      throw UsageError(e.what());
    }
    if (file_suite->num_tasks() != scenario.tasks)
      throw UsageError("data file has " + std::to_string(file_suite->num_tasks()) + " tasks, scenario expects " +
                       std::to_string(scenario.tasks));
  }

  std::string out_dir = f.out;
  if (out_dir.empty()) {
    const char* env = std::getenv(kOutEnv);
    out_dir = env && *env ? env : "results";
  }
  fs::create_directories(out_dir);
  if (f.checkpoint) fs::create_directories(fs::path(out_dir) / "checkpoints");

  const auto plan = seed_plan(scenario.seed, f.seeds);
  std::vector<RunJob> jobs;
  for (Method m : methods)
    for (std::size_t k = 0; k < plan.size(); ++k) jobs.push_back({m, k, plan[k]});

  auto results = run_indexed<JobResult>(jobs.size(), f.jobs, [&](std::size_t i) {
    const RunJob& job = jobs[i];
    RequestSequence seq = (f.keep_sequence || job.index == 0) && !scenario.sequence.empty()
                              ? scenario.sequence
                              : sequence_for_run(job.seed, scenario.tasks, scenario.unlearns);
    const TaskSuite suite = file_suite ? *file_suite : suite_for_run(job.seed, scenario.tasks, scenario.data);
    JobResult r{run_sequence(job.method, hp, shape_for(suite, hidden), suite, seq, job.seed), seq};
    if (f.checkpoint) {
      const auto name = std::string(method_name(job.method)) + "_" + std::to_string(job.seed) + ".ckpt";
      save_checkpoint((fs::path(out_dir) / "checkpoints" / name).string(), r.outcome.final_state);
    }
    return r;
  });

  bool audit_failed = false;
  for (std::size_t i = 0; i < results.size(); ++i)
    for (const auto& v : results[i].outcome.audit_violations) {
      std::cerr << "audit failure (" << method_name(jobs[i].method) << ", seed " << jobs[i].seed << "): " << v
                << '\n';
      audit_failed = true;
    }
  if (audit_failed) return kExitAudit;

  std::ofstream csv(fs::path(out_dir) / "results.csv", std::ios::binary);
  std::ofstream trace(fs::path(out_dir) / "trace.jsonl", std::ios::binary);
  if (!csv || !trace) throw UsageError("cannot write to " + out_dir);
  csv << kCsvHeader << '\n';
  for (const auto& r : results) {
    csv << csv_row(r.outcome.report, f.timing) << '\n';
    for (const auto& row : r.outcome.trace) trace << trace_line(r.outcome.report, row) << '\n';
  }
  std::cerr << "wrote " << results.size() << " rows to " << (fs::path(out_dir) / "results.csv").string()
            << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck

int cmd_selfcheck(const std::string& filter) {
  static const std::set<std::string> groups{"", "grad", "ste", "topk", "eq6", "rewind"};
  if (!groups.contains(filter)) throw UsageError("--filter must be one of grad, ste, topk, eq6, rewind");
  const auto results = run_selfcheck(filter);
  const CheckResult* first_failure = nullptr;
  for (const auto& r : results) {
    std::cout << (r.ok ? "PASS " : "FAIL ") << r.group << '/' << r.name << " (" << r.detail << ")\n";
    if (!r.ok && !first_failure) first_failure = &r;
  }
  if (first_failure) {
    std::cout << "selfcheck failed: " << first_failure->group << '/' << first_failure->name << '\n';
    return kExitSelfcheck;
  }
  std::cout << "selfcheck passed: " << results.size() << " checks\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// report

std::vector<MetricReport> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw UsageError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader) throw UsageError(path + ": unexpected header");
  std::vector<MetricReport> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      out.push_back(parse_csv_row(line));
    } catch (const FormatError& e) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& csv_out) {
  if (inputs.empty()) throw UsageError("report needs at least one CSV input");
  std::vector<std::string> order;
  std::map<std::string, std::vector<MetricReport>> by_method;
  for (const auto& path : inputs)
    for (auto& r : read_results_csv(path)) {
      if (!by_method.contains(r.method)) order.push_back(r.method);
      by_method[r.method].push_back(std::move(r));
    }
  if (order.empty()) throw UsageError("no result rows in input");

  static const std::vector<std::pair<std::string, std::string>> cols = {
      {"A_l", "%"}, {"A_u", "%"}, {"F_l", "pp"}, {"F_u", "pp"}, {"F_u_max", "pp"},
      {"model_size_bytes", "MiB"}, {"retrain_ratio", "frac"}};
  auto cell = [](const AggregateSummary& a, const std::string& key, bool mib) {
    auto it = a.metrics.find(key);
    if (it == a.metrics.end()) return std::string("NA");
    const double s = mib ? 1.0 / (1024.0 * 1024.0) : 1.0;
    const int prec = key == "retrain_ratio" ? 4 : 2;
    return fmt_fixed(it->second.mean * s, prec) + " [" + fmt_fixed(it->second.min * s, prec) + ", " +
           fmt_fixed(it->second.max * s, prec) + "]";
  };

  std::ostringstream table;
  table << "method | runs";
  for (const auto& [k, unit] : cols)
    table << " | " << (k == "model_size_bytes" ? "model_size" : k) << " (" << unit << ") mean [min, max]";
  table << " | A_l^min (%) | max F_u^max (pp)\n";
  std::vector<AggregateSummary> aggs;
  for (const auto& m : order) {
    const auto a = aggregate(by_method[m]);
    aggs.push_back(a);
    table << m << " | " << a.runs;
    for (const auto& [k, unit] : cols) table << " | " << cell(a, k, k == "model_size_bytes");
    table << " | " << fmt_opt(a.A_l_min, 2) << " | " << fmt_opt(a.F_u_max_max, 2) << '\n';
  }
  std::cout << table.str();

  if (!csv_out.empty()) {
    std::ofstream os(csv_out, std::ios::binary);
    if (!os) throw UsageError("cannot write " + csv_out);
    static const std::vector<std::string> keys = {"A_l_pct", "A_u_pct", "F_l_pct", "F_u_pct", "F_u_max_pct",
                                                  "model_size_bytes", "retrain_ratio", "mean_abs_diff"};
    static const std::vector<std::string> src = {"A_l", "A_u", "F_l", "F_u", "F_u_max",
                                                 "model_size_bytes", "retrain_ratio", "mean_abs_diff"};
    os << "method,runs";
    for (const auto& k : keys) os << ',' << k << "_mean," << k << "_min," << k << "_max";
    os << ",A_l_min_pct,F_u_max_max_pct\n";
    for (const auto& a : aggs) {
      os << a.method << ',' << a.runs;
      for (const auto& k : src) {
        auto it = a.metrics.find(k);
        if (it == a.metrics.end()) os << ",NA,NA,NA";
        else os << ',' << fmt_fixed(it->second.mean, 6) << ',' << fmt_fixed(it->second.min, 6) << ','
                << fmt_fixed(it->second.max, 6);
      }
      os << ',' << fmt_opt(a.A_l_min, 6) << ',' << fmt_opt(a.F_u_max_max, 6) << '\n';
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-incremental learning with exact task unlearning"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-scenario", "generate a scenario file");
  ScenarioFlags gen_flags;
  std::string gen_out;
  add_scenario_flags(gen, gen_flags);
  gen->add_option("-o,--output", gen_out, "output path (stdout when omitted)");

  auto* run = app.add_subcommand("run", "run methods over a scenario and write results.csv and trace.jsonl");
  RunFlags rf;
  std::string opt_name;
  run->add_option("--method", rf.method, "method name, comma-separated list, or 'all'");
  run->add_option("--alpha", rf.alpha, "per-layer connectivity rate (default 1/T)");
  run->add_option("--nf", rf.hp.n_f, "retraining iterations after unlearning");
  run->add_option("--beta", rf.hp.beta, "logit-matching weight in the rehearsal objective");
  run->add_option("--epochs", rf.hp.epochs, "training epochs per task");
  run->add_option("--lr", rf.hp.lr, "learning rate");
  run->add_option("--momentum", rf.hp.momentum, "SGD momentum");
  run->add_option("--weight-decay", rf.hp.weight_decay, "weight decay on parameters");
  run->add_option("--optimizer", opt_name, "sgd or adam");
  run->add_option("--batch", rf.hp.batch_size, "minibatch size");
  run->add_option("--buffer", rf.hp.buffer_total, "total replay buffer size");
  run->add_option("--hidden", rf.hidden, "hidden layer widths, comma-separated");
  run->add_option("--scenario", rf.scenario_path, "scenario file");
  add_scenario_flags(run, rf.inline_scenario);
  run->add_option("--config", rf.config_path, "key = value file; command-line flags take precedence");
  run->add_option("--seeds", rf.seeds, "number of repetitions");
  run->add_option("--out", rf.out, std::string("output directory (default $") + kOutEnv + " or ./results)");
  run->add_flag("--checkpoint", rf.checkpoint, "save each run's final learner state");
  run->add_flag("--keep-sequence", rf.keep_sequence, "use the scenario file's sequence for every repetition");
  run->add_option("--jobs", rf.jobs, "worker threads");
  run->add_flag("--timing", rf.timing, "record wall-clock runtime (makes output non-reproducible)");

  auto* sc = app.add_subcommand("selfcheck", "run built-in verification checks");
  std::string filter;
  sc->add_option("--filter", filter, "grad, ste, topk, eq6 or rewind");

  auto* rep = app.add_subcommand("report", "aggregate results CSV files per method");
  std::vector<std::string> inputs;
  std::string rep_csv;
  rep->add_option("inputs", inputs, "results CSV files");
  rep->add_option("--csv", rep_csv, "also write the aggregate as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_scenario(gen_flags, gen_out);
    if (*run) {
      if (!opt_name.empty()) config_keys().at("optimizer")(rf, opt_name);
      return cmd_run(rf, *run);
    }
    if (*sc) return cmd_selfcheck(filter);
    if (*rep) return cmd_report(inputs, rep_csv);
  } catch (const CapacityExhausted& e) {
    std::cerr << "capacity exhausted: " << e.what() << '\n';
    return kExitCapacity;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidRequest& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitUsage;
}
