#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "bitmask.hpp"
#include "errors.hpp"

namespace subnet_unlearn {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Per-parameter auxiliary state. A fresh state is created for every learn or
// unlearn phase.
class OptimizerState {
 public:
  OptimizerState(OptimizerConfig cfg, std::size_t d)
      : cfg_(cfg), first_(d, 0.0), second_(cfg.kind == OptimizerKind::adam ? d : 0, 0.0) {}

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return steps_; }
  std::span<const double> first_moment() const noexcept { return first_; }

  // Updates `values` only where `update_mask` is set; weight decay and the
  // auxiliary arrays follow the same mask.
  void apply(std::span<double> values, std::span<const double> grads, const BitMask& update_mask) {
    if (values.size() != first_.size() || grads.size() != first_.size() ||
        update_mask.size() != first_.size())
      throw DimensionMismatch("apply_update: length mismatch");
    ++steps_;
    const double lr = cfg_.lr;
    const double wd = cfg_.weight_decay;
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
      const double mu = cfg_.momentum;
      update_mask.for_each_set([&](std::size_t j) {
        const double g = grads[j] + wd * values[j];
        first_[j] = mu * first_[j] + g;
        values[j] -= lr * first_[j];
      });
    } else {
      const double b1 = cfg_.beta1;
      const double b2 = cfg_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
      update_mask.for_each_set([&](std::size_t j) {
        const double g = grads[j] + wd * values[j];
        first_[j] = b1 * first_[j] + (1.0 - b1) * g;
        second_[j] = b2 * second_[j] + (1.0 - b2) * g * g;
        const double mhat = first_[j] / c1;
        const double vhat = second_[j] / c2;
        values[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      });
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<double> first_;
  std::vector<double> second_;
  std::uint64_t steps_ = 0;
};

inline void apply_update(std::span<double> values, std::span<const double> grads,
                         OptimizerState& opt, const BitMask& update_mask) {
  opt.apply(values, grads, update_mask);
}

}  // namespace subnet_unlearn
