#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "bitmask.hpp"
#include "errors.hpp"
#include "param_store.hpp"

namespace subnet_unlearn {

// Per-parameter importance scores. Head indices are excluded from selection.
struct ScoreStore {
  std::vector<double> values;
  BitMask excluded;

  static ScoreStore init(const Layout& layout, const RngStream& stream) {
    ScoreStore s{std::vector<double>(layout.size(), 0.0), ~layout.maskable()};
    for (const auto& l : layout.layers())
      if (!l.is_head())
        for (std::size_t j = l.begin(); j < l.end(); ++j) s.values[j] = phi_at(l, stream, j);
    return s;
  }
};

// Number of bits kept in a group of n parameters.
inline std::size_t topk_count(double alpha, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::llround(alpha * static_cast<double>(n)));
  return std::clamp<std::size_t>(k, 1, n);
}

// Per-group top-k by |score|, lowest flat index wins ties. When `allowed` is
// given, only its set bits may be selected (and a group with fewer than k
// allowed bits raises CapacityExhausted). The active head is set in full.
inline BitMask topk_mask(const ScoreStore& scores, double alpha, const Layout& layout,
                         TaskId active_head, const BitMask* allowed = nullptr) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error("topk_mask: alpha must be in (0, 1]");
  if (layout.groups().empty()) throw InvalidShape("topk_mask: no maskable layers");
  if (scores.values.size() != layout.size()) throw DimensionMismatch("topk_mask: score length");
  BitMask m(layout.size());
  std::vector<std::size_t> idx;
  for (const auto& g : layout.groups()) {
    idx.clear();
    for (std::size_t j = g.begin; j < g.end; ++j)
      if (!scores.excluded.test(j) && (!allowed || allowed->test(j))) idx.push_back(j);
    const std::size_t k = topk_count(alpha, g.size());
    if (idx.size() < k)
      throw CapacityExhausted("layer at offset " + std::to_string(g.begin) + " has " +
                              std::to_string(idx.size()) + " free parameters, needs " +
                              std::to_string(k));
    auto better = [&](std::size_t a, std::size_t b) {
      const double sa = std::abs(scores.values[a]);
      const double sb = std::abs(scores.values[b]);
      return sa != sb ? sa > sb : a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                     better);
    for (std::size_t i = 0; i < k; ++i) m.set(idx[i]);
  }
  if (active_head != 0) {
    const auto hr = layout.head_range(active_head);
    m.set_range(hr.begin, hr.end);
  }
  return m;
}

// Straight-through surrogate for a mask ranked by |s|: the binarization is
// treated as identity in |s|, so dℓ/ds_j = dℓ/d(effective weight_j) · θ_j · sign(s_j),
// with sign(0) = +1. Without the sign factor a negative score moves away
// from zero when its weight hurts the loss, which keeps harmful weights
// selected.
inline std::vector<double> ste_score_grad(std::span<const double> effective_weight_grads,
                                          std::span<const double> params,
                                          std::span<const double> scores) {
  if (effective_weight_grads.size() != params.size() || scores.size() != params.size())
    throw DimensionMismatch("ste_score_grad: length mismatch");
  std::vector<double> g(params.size());
  for (std::size_t j = 0; j < g.size(); ++j)
    g[j] = effective_weight_grads[j] * params[j] * (scores[j] < 0.0 ? -1.0 : 1.0);
  return g;
}

// Task id -> subnetwork mask for every currently learned task.
using MaskRegistry = std::map<TaskId, BitMask>;

inline BitMask cumulative_mask(const MaskRegistry& registry, std::size_t d) {
  BitMask m(d);
  for (const auto& [t, mask] : registry) m |= mask;
  return m;
}

// Which tasks' data (dataset or buffer) shaped each parameter's current value.
class ProvenanceLedger {
 public:
  ProvenanceLedger() = default;
  explicit ProvenanceLedger(std::size_t d) : d_(d) {}

  std::size_t size() const noexcept { return d_; }

  void record(const BitMask& indices, TaskId t) {
    if (indices.size() != d_) throw DimensionMismatch("record_provenance: mask size");
    auto [it, inserted] = trained_by_.try_emplace(t, d_);
    it->second |= indices;
  }

  void clear(TaskId t) { trained_by_.erase(t); }

  // Empty mask for tasks with no recorded provenance.
  BitMask trained_by(TaskId t) const {
    auto it = trained_by_.find(t);
    return it == trained_by_.end() ? BitMask(d_) : it->second;
  }

  bool has(TaskId t) const { return trained_by_.contains(t); }

  const std::map<TaskId, BitMask>& entries() const noexcept { return trained_by_; }

  // Test hook for negative controls.
  std::map<TaskId, BitMask>& mutable_entries() noexcept { return trained_by_; }

  friend bool operator==(const ProvenanceLedger&, const ProvenanceLedger&) = default;

 private:
  std::size_t d_ = 0;
  std::map<TaskId, BitMask> trained_by_;
};

inline void record_provenance(ProvenanceLedger& ledger, const BitMask& indices, TaskId t) {
  ledger.record(indices, t);
}
inline void clear_provenance(ProvenanceLedger& ledger, TaskId t) { ledger.clear(t); }

inline BitMask owned_submask(const ProvenanceLedger& ledger, TaskId t,
                             std::span<const TaskId> ever_learned) {
  if (std::find(ever_learned.begin(), ever_learned.end(), t) == ever_learned.end())
    throw UnknownTask("owned_submask: task " + std::to_string(t) + " was never learned");
  return ledger.trained_by(t);
}

// ⋁_{τ after t in learning order} (m_τ ∧ trained_by[t]).
// `omega` is the learned set in learning order and must contain t.
inline BitMask affected_params(const MaskRegistry& registry, const ProvenanceLedger& ledger,
                               TaskId t, std::span<const TaskId> omega) {
  auto pos = std::find(omega.begin(), omega.end(), t);
  if (pos == omega.end()) throw UnknownTask("affected_params: task not in learned set");
  const BitMask owned = ledger.trained_by(t);
  BitMask out(ledger.size());
  for (auto it = pos + 1; it != omega.end(); ++it) {
    auto m = registry.find(*it);
    if (m != registry.end()) out |= (m->second & owned);
  }
  return out;
}

}  // namespace subnet_unlearn
