#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "errors.hpp"
#include "network.hpp"
#include "param_store.hpp"
#include "rng.hpp"

namespace subnet_unlearn {

// Whole-string numeric parsing; trailing characters are an error.
template <typename T>
T parse_number(std::string_view text) {
  T v{};
  const char* end = text.data() + text.size();
  if constexpr (std::is_floating_point_v<T>) {
    std::string owned(text);
    std::size_t used = 0;
    try {
      v = static_cast<T>(std::stod(owned, &used));
    } catch (const std::logic_error&) {
      throw FormatError("not a number: '" + owned + "'");
    }
    if (owned.empty() || used != owned.size() || !std::isfinite(v))
      throw FormatError("not a number: '" + owned + "'");
  } else {
    auto [p, ec] = std::from_chars(text.data(), end, v);
    if (text.empty() || ec != std::errc{} || p != end)
      throw FormatError("not an integer: '" + std::string(text) + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Requests

struct Request {
  enum class Kind { learn, unlearn };
  Kind kind = Kind::learn;
  TaskId task = 0;

  static Request learn(TaskId t) { return {Kind::learn, t}; }
  static Request unlearn(TaskId t) { return {Kind::unlearn, t}; }
  bool is_learn() const noexcept { return kind == Kind::learn; }
  bool is_unlearn() const noexcept { return kind == Kind::unlearn; }

  friend bool operator==(const Request&, const Request&) = default;
};

inline std::string to_string(const Request& r) {
  return (r.is_learn() ? "learn " : "unlearn ") + std::to_string(r.task);
}

using RequestSequence = std::vector<Request>;

inline std::size_t count_learns(const RequestSequence& seq) {
  return static_cast<std::size_t>(
      std::count_if(seq.begin(), seq.end(), [](const Request& r) { return r.is_learn(); }));
}
inline std::size_t count_unlearns(const RequestSequence& seq) { return seq.size() - count_learns(seq); }

// Compact form "L1,L2,U2"; used by tests and diagnostics.
inline RequestSequence parse_compact(const std::string& text) {
  RequestSequence seq;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), ::isspace), tok.end());
    if (tok.size() < 2 || (tok[0] != 'L' && tok[0] != 'U'))
      throw FormatError("bad request token '" + tok + "'");
    const int t = parse_number<int>(tok.substr(1));
    seq.push_back(tok[0] == 'L' ? Request::learn(t) : Request::unlearn(t));
  }
  return seq;
}

inline std::string to_compact(const RequestSequence& seq) {
  std::string out;
  for (const auto& r : seq) {
    if (!out.empty()) out += ',';
    out += (r.is_learn() ? 'L' : 'U') + std::to_string(r.task);
  }
  return out;
}

struct SequenceViolation {
  std::size_t index = 0;
  std::string reason;
};

// Each task is learned at most once; an unlearn needs the task to be
// currently learned. Reports the first offending position.
inline std::optional<SequenceViolation> validate_sequence(const RequestSequence& seq) {
  std::set<TaskId> ever;
  std::set<TaskId> current;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& r = seq[i];
    if (r.task < 1) return SequenceViolation{i, "task ids start at 1"};
    if (r.is_learn()) {
      if (ever.contains(r.task))
        return SequenceViolation{i, "task " + std::to_string(r.task) + " learned twice"};
      ever.insert(r.task);
      current.insert(r.task);
    } else {
      if (!current.contains(r.task))
        return SequenceViolation{i, "unlearn of task " + std::to_string(r.task) +
                                        " which is not currently learned"};
      current.erase(r.task);
    }
  }
  return std::nullopt;
}

// Learns 1..T in order, then N_u distinct tasks have an unlearn inserted at a
// uniformly random position after their learn.
inline RequestSequence generate_sequence(int num_tasks, int num_unlearns, RngStream stream) {
  if (num_tasks < 1) throw InvalidRequest("generate_sequence: need at least one task");
  if (num_unlearns < 0 || num_unlearns > num_tasks)
    throw InvalidRequest("generate_sequence: unlearn count must be in [0, T]");
  RequestSequence seq;
  for (int t = 1; t <= num_tasks; ++t) seq.push_back(Request::learn(t));
  const auto chosen = stream.sample_without_replacement(static_cast<std::size_t>(num_tasks),
                                                        static_cast<std::size_t>(num_unlearns));
  for (std::size_t c : chosen) {
    const TaskId t = static_cast<TaskId>(c) + 1;
    const auto learn_pos = static_cast<std::size_t>(
        std::find(seq.begin(), seq.end(), Request::learn(t)) - seq.begin());
    // Insertion points learn_pos+1 .. seq.size() inclusive.
    const std::size_t slots = seq.size() - learn_pos;
    const std::size_t at = learn_pos + 1 + static_cast<std::size_t>(stream.below(slots));
    seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(at), Request::unlearn(t));
  }
  if (auto v = validate_sequence(seq)) throw Error("generate_sequence produced invalid sequence");
  return seq;
}

// Derived per-run seeds; pairwise distinct because the underlying map is a
// bijection of the counter.
inline std::vector<std::uint64_t> seed_plan(std::uint64_t master, std::size_t n) {
  if (n < 1) throw InvalidRequest("seed_plan: need at least one repeat");
  const RngStream s(master, 0, Purpose::scenario, 0x736565642d706c61ULL);
  std::vector<std::uint64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = s.at(i);
  return out;
}

// ---------------------------------------------------------------------------
// Data

struct Example {
  Vec x;
  int y = 0;  // label within the task's head

  friend bool operator==(const Example&, const Example&) = default;
};

struct TaskData {
  TaskId task = 0;
  std::vector<int> global_labels;  // head output k corresponds to global_labels[k]
  std::vector<Example> train;
  std::vector<Example> test;
  friend bool operator==(const TaskData&, const TaskData&) = default;
};

struct TaskSuite {
  std::size_t dim = 0;
  std::size_t classes_per_task = 0;
  std::vector<TaskData> tasks;  // tasks[t-1] holds task t

  int num_tasks() const noexcept { return static_cast<int>(tasks.size()); }
  const TaskData& task(TaskId t) const {
    if (t < 1 || t > num_tasks()) throw UnknownTask("no dataset for task " + std::to_string(t));
    return tasks[static_cast<std::size_t>(t - 1)];
  }
  friend bool operator==(const TaskSuite&, const TaskSuite&) = default;
};

struct SyntheticParams {
  int classes_per_task = 2;
  std::size_t dim = 8;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 200;
  double spread = 1.0;  // scale of class centers
  double noise = 1.0;   // per-coordinate standard deviation around a center

  friend bool operator==(const SyntheticParams&, const SyntheticParams&) = default;
};

// Isotropic Gaussian blobs. Centers are drawn for all T*C classes, then the
// classes are randomly allocated to tasks.
inline TaskSuite make_synthetic_tasks(int num_tasks, const SyntheticParams& p, RngStream stream) {
  if (num_tasks < 1 || p.classes_per_task < 2 || p.dim == 0 || p.train_per_class == 0 ||
      p.test_per_class == 0)
    throw InvalidShape("make_synthetic_tasks: degenerate sizes");
  if (!(p.spread > 0.0) || !(p.noise > 0.0))
    throw InvalidShape("make_synthetic_tasks: spread and noise must be positive");

  const std::size_t n_classes = static_cast<std::size_t>(num_tasks * p.classes_per_task);
  std::vector<Vec> centers(n_classes, Vec(p.dim));
  for (auto& c : centers)
    for (auto& v : c) v = p.spread * stream.normal();

  std::vector<int> allocation(n_classes);
  for (std::size_t i = 0; i < n_classes; ++i) allocation[i] = static_cast<int>(i);
  stream.shuffle(std::span<int>(allocation));

  TaskSuite suite;
  suite.dim = p.dim;
  suite.classes_per_task = static_cast<std::size_t>(p.classes_per_task);
  for (int t = 1; t <= num_tasks; ++t) {
    TaskData td;
    td.task = t;
    for (int k = 0; k < p.classes_per_task; ++k)
      td.global_labels.push_back(
          allocation[static_cast<std::size_t>((t - 1) * p.classes_per_task + k)]);
    auto draw = [&](std::size_t per_class, std::vector<Example>& out) {
      for (int k = 0; k < p.classes_per_task; ++k) {
        const Vec& c = centers[static_cast<std::size_t>(td.global_labels[static_cast<std::size_t>(k)])];
        for (std::size_t n = 0; n < per_class; ++n) {
          Example e{Vec(p.dim), k};
          for (std::size_t i = 0; i < p.dim; ++i) e.x[i] = c[i] + p.noise * stream.normal();
          out.push_back(std::move(e));
        }
      }
    };
    draw(p.train_per_class, td.train);
    draw(p.test_per_class, td.test);
    suite.tasks.push_back(std::move(td));
  }
  return suite;
}

// Rows: task,split,label,x1,...,xD with split in {train, test}; task ids
// 1..T, labels 0..C-1 within the task.
inline TaskSuite load_csv_tasks(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  std::map<TaskId, TaskData> by_task;
  std::size_t dim = 0;
  int max_label = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 4) throw FormatError(path + ":" + std::to_string(lineno) + ": too few columns");
    try {
      const TaskId t = parse_number<TaskId>(cells[0]);
      const int y = parse_number<int>(cells[2]);
      if (t < 1 || y < 0) throw FormatError("negative id");
      Example e{Vec(cells.size() - 3), y};
      for (std::size_t i = 3; i < cells.size(); ++i) e.x[i - 3] = parse_number<double>(cells[i]);
      if (dim == 0) dim = e.x.size();
      if (e.x.size() != dim) throw FormatError("inconsistent feature count");
      auto& td = by_task[t];
      td.task = t;
      if (cells[1] == "train") td.train.push_back(std::move(e));
      else if (cells[1] == "test") td.test.push_back(std::move(e));
      else throw FormatError("split must be train or test");
      max_label = std::max(max_label, y);
    } catch (const std::logic_error&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed row");
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (by_task.empty()) throw FormatError(path + ": no data rows");
  TaskSuite suite;
  suite.dim = dim;
  suite.classes_per_task = static_cast<std::size_t>(max_label + 1);
  int expect = 1;
  for (auto& [t, td] : by_task) {
    if (t != expect++) throw FormatError(path + ": task ids must be contiguous from 1");
    if (td.train.empty() || td.test.empty())
      throw FormatError(path + ": task " + std::to_string(t) + " lacks train or test rows");
    for (std::size_t k = 0; k < suite.classes_per_task; ++k)
      td.global_labels.push_back(static_cast<int>((t - 1) * static_cast<int>(suite.classes_per_task) +
                                                  static_cast<int>(k)));
    suite.tasks.push_back(std::move(td));
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Scenario files
//
//   # subnet-unlearn scenario v1
//   seed = 7
//   tasks = 5
//   unlearns = 3
//   classes_per_task = 2
//   ...
//   [sequence]
//   learn 1
//   unlearn 1

struct Scenario {
  std::uint64_t seed = 0;
  int tasks = 5;
  int unlearns = 0;
  SyntheticParams data;
  std::string data_file;  // CSV task data; synthetic when empty
  RequestSequence sequence;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

inline constexpr const char* kScenarioHeader = "# subnet-unlearn scenario v1";

// Sequence for run k of a scenario (k indexes seed_plan(seed, n)).
inline RequestSequence sequence_for_run(std::uint64_t run_seed, int tasks, int unlearns) {
  return generate_sequence(tasks, unlearns, RngStream(run_seed, 0, Purpose::scenario, 1));
}
inline TaskSuite suite_for_run(std::uint64_t run_seed, int tasks, const SyntheticParams& p) {
  return make_synthetic_tasks(tasks, p, RngStream(run_seed, 0, Purpose::scenario, 2));
}

inline Scenario make_scenario(std::uint64_t seed, int tasks, int unlearns, SyntheticParams data) {
  Scenario s{seed, tasks, unlearns, data, {}, {}};
  s.sequence = sequence_for_run(seed_plan(seed, 1)[0], tasks, unlearns);
  return s;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string write_scenario_text(const Scenario& s) {
  std::ostringstream os;
  os << kScenarioHeader << '\n'
     << "seed = " << s.seed << '\n'
     << "tasks = " << s.tasks << '\n'
     << "unlearns = " << s.unlearns << '\n'
     << "classes_per_task = " << s.data.classes_per_task << '\n'
     << "dim = " << s.data.dim << '\n'
     << "train_per_class = " << s.data.train_per_class << '\n'
     << "test_per_class = " << s.data.test_per_class << '\n'
     << "spread = " << format_double(s.data.spread) << '\n'
     << "noise = " << format_double(s.data.noise) << '\n';
  if (!s.data_file.empty()) os << "data_file = " << s.data_file << '\n';
  os << "[sequence]\n";
  for (const auto& r : s.sequence) os << to_string(r) << '\n';
  return os.str();
}

inline Scenario parse_scenario_text(const std::string& text) {
  Scenario s;
  std::istringstream in(text);
  std::string line;
  bool in_sequence = false;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError("scenario line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto c = line.find('#'); c != std::string::npos) line.erase(c);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t first = 0;
    while (first < line.size() && std::isspace(static_cast<unsigned char>(line[first]))) ++first;
    line.erase(0, first);
    if (line.empty()) continue;
    if (line == "[sequence]") {
      in_sequence = true;
      continue;
    }
    try {
      if (in_sequence) {
        std::istringstream ls(line);
        std::string op;
        int t = 0;
        if (!(ls >> op >> t)) fail("expected 'learn <t>' or 'unlearn <t>'");
        if (op == "learn") s.sequence.push_back(Request::learn(t));
        else if (op == "unlearn") s.sequence.push_back(Request::unlearn(t));
        else fail("unknown request '" + op + "'");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      auto trim = [](std::string v) {
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.pop_back();
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.erase(0, 1);
        return v;
      };
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key == "seed") s.seed = parse_number<std::uint64_t>(val);
      else if (key == "tasks") s.tasks = parse_number<int>(val);
      else if (key == "unlearns") s.unlearns = parse_number<int>(val);
      else if (key == "classes_per_task") s.data.classes_per_task = parse_number<int>(val);
      else if (key == "dim") s.data.dim = parse_number<std::size_t>(val);
      else if (key == "train_per_class") s.data.train_per_class = parse_number<std::size_t>(val);
      else if (key == "test_per_class") s.data.test_per_class = parse_number<std::size_t>(val);
      else if (key == "spread") s.data.spread = parse_number<double>(val);
      else if (key == "noise") s.data.noise = parse_number<double>(val);
      else if (key == "data_file") s.data_file = val;
      else fail("unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      fail("malformed value");
    }
  }
  if (auto v = validate_sequence(s.sequence))
    throw FormatError("scenario sequence invalid at index " + std::to_string(v->index) + ": " +
                      v->reason);
  if (s.tasks < 1 || s.unlearns < 0 || s.unlearns > s.tasks)
    throw FormatError("scenario needs tasks >= 1 and 0 <= unlearns <= tasks");
  if (!s.sequence.empty() && (count_learns(s.sequence) != static_cast<std::size_t>(s.tasks) ||
                              count_unlearns(s.sequence) != static_cast<std::size_t>(s.unlearns)))
    throw FormatError("scenario sequence does not match tasks/unlearns");
  return s;
}

inline Scenario read_scenario_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open scenario file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario_text(ss.str());
}

inline void write_scenario_file(const std::string& path, const Scenario& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write scenario file " + path);
  out << write_scenario_text(s);
}

}  // namespace subnet_unlearn
