#pragma once

// Binary learner checkpoints. All integers are little-endian uint64 (signed
// values two's complement), all reals are IEEE-754 binary64 stored by bit
// pattern, so a save/load round trip is bit-exact.
//
//   "SUBNETCK" | version | method | hyperparameters | shape | seed | T
//   params | independent models | mask registry | cumulative mask
//   provenance ledger | replay buffers | omega | ever learned
//   retrain log | batch log
//
// Replay buffers: per task, task id, capacity, entry count, x and z widths,
// then packed (x..., y, z...) records.

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "engine.hpp"
#include "errors.hpp"

namespace subnet_unlearn {

inline constexpr std::uint64_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'U', 'B', 'N', 'E', 'T', 'C', 'K'};

namespace ckpt {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xff));
}
inline void put_i64(std::ostream& os, std::int64_t v) { put_u64(os, static_cast<std::uint64_t>(v)); }
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw FormatError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}
inline std::int64_t get_i64(std::istream& is) { return static_cast<std::int64_t>(get_u64(is)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void put_vec(std::ostream& os, const std::vector<double>& v) {
  put_u64(os, v.size());
  for (double x : v) put_f64(os, x);
}
inline std::vector<double> get_vec(std::istream& is, std::uint64_t limit = 1ULL << 32) {
  const auto n = get_u64(is);
  if (n > limit) throw FormatError("checkpoint vector length implausible");
  std::vector<double> v(n);
  for (auto& x : v) x = get_f64(is);
  return v;
}

inline void put_tasks(std::ostream& os, const std::vector<TaskId>& v) {
  put_u64(os, v.size());
  for (TaskId t : v) put_i64(os, t);
}
inline std::vector<TaskId> get_tasks(std::istream& is) {
  const auto n = get_u64(is);
  if (n > (1ULL << 24)) throw FormatError("checkpoint task list implausible");
  std::vector<TaskId> v(n);
  for (auto& t : v) t = static_cast<TaskId>(get_i64(is));
  return v;
}

}  // namespace ckpt

inline void write_checkpoint(std::ostream& os, const LearnerState& s) {
  using namespace ckpt;
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  put_u64(os, kCheckpointVersion);
  put_u64(os, static_cast<std::uint64_t>(s.method));

  const auto& hp = s.hp;
  put_f64(os, hp.alpha);
  put_i64(os, hp.epochs);
  put_u64(os, hp.batch_size);
  put_f64(os, hp.lr);
  put_f64(os, hp.momentum);
  put_f64(os, hp.weight_decay);
  put_u64(os, static_cast<std::uint64_t>(hp.optimizer));
  put_i64(os, hp.n_f);
  put_f64(os, hp.beta);
  put_u64(os, hp.buffer_total);

  put_u64(os, s.shape.input_dim);
  put_u64(os, s.shape.hidden.size());
  for (auto w : s.shape.hidden) put_u64(os, w);
  put_u64(os, s.shape.classes_per_head);
  put_i64(os, s.shape.num_heads);
  put_u64(os, s.seed);
  put_i64(os, s.num_tasks);

  put_vec(os, s.params.values);
  put_u64(os, s.independent.size());
  for (const auto& [t, p] : s.independent) {
    put_i64(os, t);
    put_vec(os, p.values);
  }
  put_u64(os, s.registry.size());
  for (const auto& [t, m] : s.registry) {
    put_i64(os, t);
    m.write(os);
  }
  s.cumulative.write(os);
  put_u64(os, s.ledger.size());
  put_u64(os, s.ledger.entries().size());
  for (const auto& [t, m] : s.ledger.entries()) {
    put_i64(os, t);
    m.write(os);
  }
  put_u64(os, s.buffers.size());
  for (const auto& [t, b] : s.buffers) {
    put_i64(os, t);
    put_u64(os, b.capacity);
    put_u64(os, b.entries.size());
    const std::size_t xd = b.entries.empty() ? 0 : b.entries.front().x.size();
    const std::size_t zd = b.entries.empty() ? 0 : b.entries.front().z.size();
    put_u64(os, xd);
    put_u64(os, zd);
    for (const auto& e : b.entries) {
      for (double v : e.x) put_f64(os, v);
      put_i64(os, e.y);
      for (double v : e.z) put_f64(os, v);
    }
  }
  put_tasks(os, s.omega);
  put_tasks(os, s.ever_learned);
  put_u64(os, s.retrain_log.size());
  for (const auto& r : s.retrain_log) {
    put_i64(os, r.task);
    put_u64(os, r.reset);
    put_u64(os, r.affected);
    put_u64(os, r.d);
    put_i64(os, r.steps);
    put_f64(os, r.mean_abs_diff);
  }
  put_u64(os, s.batch_log.size());
  for (const auto& b : s.batch_log) {
    put_i64(os, b.unlearned);
    put_i64(os, b.source);
    put_u64(os, b.count);
  }
}

inline LearnerState read_checkpoint(std::istream& is) {
  using namespace ckpt;
  char magic[8];
  if (!is.read(magic, sizeof magic) || !std::equal(magic, magic + 8, kCheckpointMagic))
    throw FormatError("not a checkpoint file");
  if (get_u64(is) != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  LearnerState s;
  const auto method = get_u64(is);
  if (method > static_cast<std::uint64_t>(Method::dynamic_sparse)) throw FormatError("bad method tag");
  s.method = static_cast<Method>(method);

  auto& hp = s.hp;
  hp.alpha = get_f64(is);
  hp.epochs = static_cast<int>(get_i64(is));
  hp.batch_size = get_u64(is);
  hp.lr = get_f64(is);
  hp.momentum = get_f64(is);
  hp.weight_decay = get_f64(is);
  hp.optimizer = static_cast<OptimizerKind>(get_u64(is));
  hp.n_f = static_cast<int>(get_i64(is));
  hp.beta = get_f64(is);
  hp.buffer_total = get_u64(is);

  s.shape.input_dim = get_u64(is);
  s.shape.hidden.resize(get_u64(is));
  for (auto& w : s.shape.hidden) w = get_u64(is);
  s.shape.classes_per_head = get_u64(is);
  s.shape.num_heads = static_cast<int>(get_i64(is));
  s.seed = get_u64(is);
  s.num_tasks = static_cast<int>(get_i64(is));

  const Layout layout(s.shape);
  const std::size_t d = layout.size();
  s.params = ParamStore{layout, get_vec(is)};
  if (s.params.size() != d) throw FormatError("parameter count does not match shape");
  for (auto n = get_u64(is); n > 0; --n) {
    const auto t = static_cast<TaskId>(get_i64(is));
    ParamStore p{layout, get_vec(is)};
    if (p.size() != d) throw FormatError("independent model size mismatch");
    s.independent.emplace(t, std::move(p));
  }
  for (auto n = get_u64(is); n > 0; --n) {
    const auto t = static_cast<TaskId>(get_i64(is));
    s.registry.emplace(t, BitMask::read(is));
  }
  s.cumulative = BitMask::read(is);
  s.ledger = ProvenanceLedger(get_u64(is));
  for (auto n = get_u64(is); n > 0; --n) {
    const auto t = static_cast<TaskId>(get_i64(is));
    s.ledger.mutable_entries().emplace(t, BitMask::read(is));
  }
  for (auto n = get_u64(is); n > 0; --n) {
    ReplayBuffer b;
    b.task = static_cast<TaskId>(get_i64(is));
    b.capacity = get_u64(is);
    const auto count = get_u64(is);
    const auto xd = get_u64(is);
    const auto zd = get_u64(is);
    if (count > (1ULL << 28) || xd > (1ULL << 20) || zd > (1ULL << 20))
      throw FormatError("buffer header implausible");
    b.entries.resize(count);
    for (auto& e : b.entries) {
      e.x.resize(xd);
      for (auto& v : e.x) v = get_f64(is);
      e.y = static_cast<int>(get_i64(is));
      e.z.resize(zd);
      for (auto& v : e.z) v = get_f64(is);
    }
    s.buffers.emplace(b.task, std::move(b));
  }
  s.omega = get_tasks(is);
  s.ever_learned = get_tasks(is);
  for (auto n = get_u64(is); n > 0; --n) {
    RetrainRecord r;
    r.task = static_cast<TaskId>(get_i64(is));
    r.reset = get_u64(is);
    r.affected = get_u64(is);
    r.d = get_u64(is);
    r.steps = static_cast<int>(get_i64(is));
    r.mean_abs_diff = get_f64(is);
    s.retrain_log.push_back(r);
  }
  for (auto n = get_u64(is); n > 0; --n) {
    BatchLogEntry b;
    b.unlearned = static_cast<TaskId>(get_i64(is));
    b.source = static_cast<TaskId>(get_i64(is));
    b.count = get_u64(is);
    s.batch_log.push_back(b);
  }
  return s;
}

inline void save_checkpoint(const std::string& path, const LearnerState& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write checkpoint " + path);
  write_checkpoint(os, s);
}

inline LearnerState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace subnet_unlearn
