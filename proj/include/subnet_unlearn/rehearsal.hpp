#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "errors.hpp"
#include "log.hpp"
#include "masking.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "scenario.hpp"

namespace subnet_unlearn {

struct BufferEntry {
  Vec x;
  int y = 0;
  Vec z;  // logits at storage time

  friend bool operator==(const BufferEntry&, const BufferEntry&) = default;
};

struct ReplayBuffer {
  TaskId task = 0;
  std::size_t capacity = 0;
  std::vector<BufferEntry> entries;

  friend bool operator==(const ReplayBuffer&, const ReplayBuffer&) = default;
};

using BufferSet = std::map<TaskId, ReplayBuffer>;

// Total memory split evenly over the T tasks known a priori.
inline std::size_t per_task_capacity(std::size_t total, int num_tasks) {
  if (num_tasks < 1) throw InvalidShape("per_task_capacity: need at least one task");
  const std::size_t c = total / static_cast<std::size_t>(num_tasks);
  if (c < 1) throw InvalidShape("buffer capacity below one exemplar per task");
  return c;
}

// Samples min(capacity, |dataset|) exemplars without replacement and stores
// the logits of the frozen subnetwork.
inline ReplayBuffer fill_buffer(std::span<const Example> dataset, const ParamStore& params,
                                const BitMask& mask, TaskId t, std::size_t capacity,
                                RngStream stream) {
  if (dataset.empty()) throw InvalidRequest("fill_buffer: empty dataset");
  const std::size_t n = std::min(capacity, dataset.size());
  const auto picks = stream.sample_without_replacement(dataset.size(), n);
  const Vec eff = effective_weights(params, mask);
  ReplayBuffer buf{t, capacity, {}};
  buf.entries.reserve(n);
  for (std::size_t i : picks) {
    const auto& e = dataset[i];
    buf.entries.push_back({e.x, e.y, forward_effective(params.layout, eff, t, e.x)});
  }
  return buf;
}

// Returns false (and warns) when there was nothing to delete.
inline bool delete_buffer(BufferSet& buffers, TaskId t) {
  if (buffers.erase(t) == 0) {
    log_warning("delete_buffer: no buffer for task " + std::to_string(t));
    return false;
  }
  return true;
}

// Uniform with replacement; returns entry indices.
inline std::vector<std::size_t> sample_batch(const ReplayBuffer& buffer, std::size_t size,
                                             RngStream& stream) {
  if (buffer.entries.empty()) throw InvalidRequest("sample_batch: empty buffer");
  std::vector<std::size_t> idx(size);
  for (auto& i : idx) i = static_cast<std::size_t>(stream.below(buffer.entries.size()));
  return idx;
}

// One task's slice of a replay step.
struct ReplayBatch {
  TaskId task = 0;
  std::vector<std::size_t> indices;  // into buffers.at(task).entries
};

// Per-task batches; batch_size 0 means "the whole buffer, in storage order".
// Each task draws from its own stream so removing one task's buffer never
// shifts another task's batches.
class ReplaySampler {
 public:
  ReplaySampler(std::uint64_t seed, std::uint64_t salt) : seed_(seed), salt_(salt) {}

  std::vector<ReplayBatch> draw(const BufferSet& buffers, std::span<const TaskId> tasks,
                                std::size_t batch_size) {
    std::vector<ReplayBatch> out;
    for (TaskId t : tasks) {
      const auto& buf = buffers.at(t);
      ReplayBatch b{t, {}};
      if (batch_size == 0) {
        b.indices.resize(buf.entries.size());
        for (std::size_t i = 0; i < b.indices.size(); ++i) b.indices[i] = i;
      } else {
        auto it = streams_.try_emplace(t, seed_, static_cast<std::uint64_t>(t),
                                       Purpose::retrain_order, salt_).first;
        b.indices = sample_batch(buf, batch_size, it->second);
      }
      out.push_back(std::move(b));
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t salt_;
  std::map<TaskId, RngStream> streams_;
};

struct ReplayLoss {
  double ce = 0.0;     // Σ_τ mean cross-entropy over τ's batch
  double logit = 0.0;  // Σ_τ mean squared logit distance over τ's batch
  double value = 0.0;  // ce + β · logit
};

// Generalized rehearsal objective: for each task τ with a batch,
//   mean_batch CE(x, y; Θ ⊙ m_τ) + β · mean_batch ||f(x) - z||²
// summed over tasks. `mask_for(τ)` supplies the mask used for τ's forward
// pass. If `grad` is non-null the parameter gradient is accumulated into it
// (effective-weight gradient times the mask).
template <typename MaskFor>
ReplayLoss replay_loss(const ParamStore& params, const BufferSet& buffers,
                       std::span<const ReplayBatch> batches, double beta, MaskFor&& mask_for,
                       GradBuffer* grad = nullptr) {
  ReplayLoss out;
  if (batches.empty()) {
    log_warning("replay_loss: empty buffer set, loss is 0");
    return out;
  }
  const Layout& layout = params.layout;
  std::vector<double> d_eff;
  Tape tape;
  for (const auto& batch : batches) {
    auto bit = buffers.find(batch.task);
    if (bit == buffers.end())
      throw UnknownTask("replay_loss: no buffer for task " + std::to_string(batch.task));
    if (batch.indices.empty()) continue;
    const BitMask& mask = mask_for(batch.task);
    const Vec eff = effective_weights(params, mask);
    if (grad) d_eff.assign(layout.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(batch.indices.size());
    double ce_sum = 0.0;
    double logit_sum = 0.0;
    for (std::size_t i : batch.indices) {
      const auto& e = bit->second.entries.at(i);
      const Vec logits = forward_effective(layout, eff, batch.task, e.x, grad ? &tape : nullptr);
      auto ce = cross_entropy_term(logits, e.y);
      auto mse = logit_mse_term(logits, e.z);
      ce_sum += ce.value;
      logit_sum += mse.value;
      if (grad) {
        Vec dl(logits.size());
        for (std::size_t k = 0; k < dl.size(); ++k)
          dl[k] = inv * (ce.dlogits[k] + beta * mse.dlogits[k]);
        backward(layout, eff, tape, dl, d_eff);
      }
    }
    out.ce += ce_sum * inv;
    out.logit += logit_sum * inv;
    if (grad)
      mask.for_each_set([&](std::size_t j) { grad->values[j] += d_eff[j]; });
  }
  out.value = out.ce + beta * out.logit;
  return out;
}

}  // namespace subnet_unlearn
