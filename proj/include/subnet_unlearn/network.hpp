#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "bitmask.hpp"
#include "errors.hpp"
#include "param_store.hpp"

namespace subnet_unlearn {

using Vec = std::vector<double>;

// θ ⊙ m over the whole flat vector.
inline Vec effective_weights(const ParamStore& p, const BitMask& mask) {
  if (mask.size() != p.size()) throw DimensionMismatch("mask length differs from parameter count");
  Vec eff(p.size());
  for (std::size_t j = 0; j < eff.size(); ++j) eff[j] = mask.test(j) ? p.values[j] : 0.0;
  return eff;
}

// Record of one forward evaluation, kept for the backward pass.
struct Tape {
  TaskId head = 0;
  std::vector<Vec> inputs;  // inputs[l] is the input to dense layer l (inputs[0] = x)
  std::vector<Vec> pre;     // pre-activations of body layers
  Vec logits;

  bool recorded() const noexcept { return !inputs.empty(); }
};

namespace detail {

inline void affine(std::span<const double> w, std::span<const double> b, std::size_t rows,
                   std::size_t cols, std::span<const double> in, Vec& out) {
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* wr = w.data() + r * cols;
    double acc = b[r];
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * in[c];
    out[r] = acc;
  }
}

}  // namespace detail

// Forward pass over effective (already masked) weights.
inline Vec forward_effective(const Layout& layout, std::span<const double> eff, TaskId head,
                             std::span<const double> x, Tape* tape = nullptr) {
  const auto& shape = layout.shape();
  if (x.size() != shape.input_dim) throw DimensionMismatch("input dimension mismatch");
  if (eff.size() != layout.size()) throw DimensionMismatch("weight vector length mismatch");
  const auto hr = layout.head_range(head);
  const auto& layers = layout.layers();

  if (tape) {
    tape->head = head;
    tape->inputs.clear();
    tape->pre.clear();
  }
  Vec a(x.begin(), x.end());
  Vec z;
  for (std::size_t l = 0; l < layout.num_dense_body(); ++l) {
    const auto& w = layers[2 * l];
    const auto& b = layers[2 * l + 1];
    detail::affine(eff.subspan(w.offset, w.size()), eff.subspan(b.offset, b.size()), w.rows,
                   w.cols, a, z);
    if (tape) {
      tape->inputs.push_back(a);
      tape->pre.push_back(z);
    }
    for (auto& v : z) v = v > 0.0 ? v : 0.0;
    a.swap(z);
  }
  const std::size_t classes = shape.classes_per_head;
  const std::size_t width = a.size();
  Vec logits;
  detail::affine(eff.subspan(hr.begin, classes * width),
                 eff.subspan(hr.begin + classes * width, classes), classes, width, a, logits);
  if (tape) {
    tape->inputs.push_back(a);
    tape->logits = logits;
  }
  return logits;
}

inline Vec forward(const ParamStore& params, const BitMask& mask, TaskId head,
                   std::span<const double> x) {
  const Vec eff = effective_weights(params, mask);
  return forward_effective(params.layout, eff, head, x);
}

// Accumulates dL/d(effective weight) for every weight slot used by the
// recorded pass, including slots whose mask bit is zero.
inline void backward(const Layout& layout, std::span<const double> eff, const Tape& tape,
                     std::span<const double> dlogits, std::span<double> d_eff) {
  if (!tape.recorded()) throw Error("backward: no recorded forward pass");
  if (d_eff.size() != layout.size()) throw DimensionMismatch("gradient buffer length mismatch");
  const std::size_t classes = layout.shape().classes_per_head;
  if (dlogits.size() != classes) throw DimensionMismatch("dlogits length mismatch");

  const auto hr = layout.head_range(tape.head);
  const std::size_t n_body = layout.num_dense_body();
  const Vec& a_last = tape.inputs[n_body];
  const std::size_t width = a_last.size();

  // Head.
  Vec delta_in(width, 0.0);
  for (std::size_t r = 0; r < classes; ++r) {
    const double g = dlogits[r];
    const std::size_t wrow = hr.begin + r * width;
    for (std::size_t c = 0; c < width; ++c) {
      d_eff[wrow + c] += g * a_last[c];
      delta_in[c] += eff[wrow + c] * g;
    }
    d_eff[hr.begin + classes * width + r] += g;
  }

  const auto& layers = layout.layers();
  for (std::size_t l = n_body; l-- > 0;) {
    const auto& w = layers[2 * l];
    const auto& b = layers[2 * l + 1];
    const Vec& pre = tape.pre[l];
    const Vec& in = tape.inputs[l];
    Vec delta(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) delta[r] = pre[r] > 0.0 ? delta_in[r] : 0.0;
    Vec next(w.cols, 0.0);
    for (std::size_t r = 0; r < w.rows; ++r) {
      const double g = delta[r];
      if (g == 0.0) continue;
      const std::size_t wrow = w.offset + r * w.cols;
      for (std::size_t c = 0; c < w.cols; ++c) {
        d_eff[wrow + c] += g * in[c];
        next[c] += eff[wrow + c] * g;
      }
      d_eff[b.offset + r] += g;
    }
    delta_in.swap(next);
  }
}

// Loss value and its gradient w.r.t. the logits.
struct LossTerm {
  double value = 0.0;
  Vec dlogits;
};

inline void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
}

inline LossTerm cross_entropy_term(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw DimensionMismatch("label outside the head's label space");
  check_finite(logits, "cross_entropy");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  Vec p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  LossTerm out;
  out.value = std::log(sum) - (logits[static_cast<std::size_t>(label)] - mx);
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out.dlogits[i] = p[i] / sum;
  out.dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return out;
}

inline double cross_entropy(std::span<const double> logits, int label) {
  return cross_entropy_term(logits, label).value;
}

// Cross-entropy against the uniform distribution over the head's classes.
inline LossTerm uniform_cross_entropy_term(std::span<const double> logits) {
  check_finite(logits, "uniform_cross_entropy");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  const double lse = mx + std::log(sum);
  const auto c = static_cast<double>(logits.size());
  LossTerm out;
  double mean_logit = 0.0;
  for (double l : logits) mean_logit += l;
  mean_logit /= c;
  out.value = lse - mean_logit;
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out.dlogits[i] = std::exp(logits[i] - lse) - 1.0 / c;
  return out;
}

// Squared L2 distance between two logit vectors.
inline LossTerm logit_mse_term(std::span<const double> logits, std::span<const double> stored) {
  if (logits.size() != stored.size()) throw DimensionMismatch("logit_mse: length mismatch");
  LossTerm out;
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double diff = logits[i] - stored[i];
    out.value += diff * diff;
    out.dlogits[i] = 2.0 * diff;
  }
  return out;
}

inline double logit_mse(std::span<const double> logits, std::span<const double> stored) {
  return logit_mse_term(logits, stored).value;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace subnet_unlearn
