#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bitmask.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace subnet_unlearn {

using TaskId = int;

enum class LayerRole { weight, bias, head_weight, head_bias };

// One contiguous block of the flat parameter vector.
struct LayerSpec {
  std::string name;
  LayerRole role = LayerRole::weight;
  std::size_t rows = 0;  // output units
  std::size_t cols = 1;  // input units (1 for biases)
  std::size_t fan_in = 0;
  std::size_t offset = 0;
  std::size_t dense = 0;  // index of the dense layer this block belongs to
  TaskId head = 0;        // owning task for head blocks, 0 for body blocks

  std::size_t size() const noexcept { return rows * cols; }
  std::size_t begin() const noexcept { return offset; }
  std::size_t end() const noexcept { return offset + size(); }
  bool is_head() const noexcept { return head != 0; }
};

// MLP with ReLU hidden layers and one linear output head per task.
struct NetShape {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t classes_per_head = 2;
  int num_heads = 5;

  friend bool operator==(const NetShape&, const NetShape&) = default;
};

// A contiguous group of flat indices scored and top-k'd together:
// one body dense layer (weights and bias).
struct MaskGroup {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};

class Layout {
 public:
  Layout() = default;

  explicit Layout(NetShape shape) : shape_(std::move(shape)) {
    if (shape_.input_dim == 0 || shape_.classes_per_head == 0 || shape_.num_heads <= 0)
      throw InvalidShape("network shape has a zero-sized dimension");
    std::size_t in = shape_.input_dim;
    std::size_t dense = 0;
    for (std::size_t width : shape_.hidden) {
      if (width == 0) throw InvalidShape("zero-width hidden layer");
      const std::size_t begin = offset_;
      add({"fc" + std::to_string(dense) + ".weight", LayerRole::weight, width, in, in, 0, dense, 0});
      add({"fc" + std::to_string(dense) + ".bias", LayerRole::bias, width, 1, in, 0, dense, 0});
      groups_.push_back({begin, offset_});
      in = width;
      ++dense;
    }
    body_end_ = offset_;
    for (int t = 1; t <= shape_.num_heads; ++t) {
      const std::string base = "head" + std::to_string(t);
      const std::size_t begin = offset_;
      add({base + ".weight", LayerRole::head_weight, shape_.classes_per_head, in, in, 0, dense, t});
      add({base + ".bias", LayerRole::head_bias, shape_.classes_per_head, 1, in, 0, dense, t});
      head_ranges_.push_back({begin, offset_});
    }
  }

  const NetShape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return offset_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<MaskGroup>& groups() const noexcept { return groups_; }
  std::size_t body_size() const noexcept { return body_end_; }
  std::size_t num_dense_body() const noexcept { return shape_.hidden.size(); }

  MaskGroup head_range(TaskId t) const {
    if (t < 1 || t > shape_.num_heads) throw UnknownTask("no head for task " + std::to_string(t));
    return head_ranges_[static_cast<std::size_t>(t - 1)];
  }

  const LayerSpec& layer_of(std::size_t flat) const {
    for (const auto& l : layers_)
      if (flat >= l.begin() && flat < l.end()) return l;
    throw DimensionMismatch("flat index out of range");
  }

  BitMask body_mask() const {
    BitMask m(size());
    m.set_range(0, body_end_);
    return m;
  }
  BitMask head_mask(TaskId t) const {
    const auto r = head_range(t);
    BitMask m(size());
    m.set_range(r.begin, r.end);
    return m;
  }
  // Indices that take part in score-based selection.
  BitMask maskable() const { return body_mask(); }

  friend bool operator==(const Layout& a, const Layout& b) { return a.shape_ == b.shape_; }

 private:
  void add(LayerSpec spec) {
    spec.offset = offset_;
    offset_ += spec.size();
    layers_.push_back(std::move(spec));
  }

  NetShape shape_;
  std::vector<LayerSpec> layers_;
  std::vector<MaskGroup> groups_;
  std::vector<MaskGroup> head_ranges_;
  std::size_t offset_ = 0;
  std::size_t body_end_ = 0;
};

// Kaiming-uniform bound for a layer.
inline double kaiming_bound(const LayerSpec& l) {
  return std::sqrt(6.0 / static_cast<double>(l.fan_in));
}

struct ParamStore {
  Layout layout;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const ParamStore&, const ParamStore&) = default;
};

struct GradBuffer {
  std::vector<double> values;

  explicit GradBuffer(std::size_t d = 0) : values(d, 0.0) {}
  void zero() {
    for (auto& v : values) v = 0.0;
  }
};

// φ draw for flat index j: uniform on [-b, b) with b = sqrt(6 / fan_in), taken
// at counter j of the stream. Keying by index makes every parameter's initial
// value independent of how many other draws happened before it.
inline double phi_at(const LayerSpec& layer, const RngStream& stream, std::size_t flat) {
  const double b = kaiming_bound(layer);
  return b * (2.0 * RngStream::to_unit(stream.at(flat)) - 1.0);
}

inline ParamStore init_params(const Layout& layout, const RngStream& stream) {
  if (layout.size() == 0) throw InvalidShape("empty layout");
  ParamStore p{layout, std::vector<double>(layout.size())};
  for (const auto& l : layout.layers())
    for (std::size_t j = l.begin(); j < l.end(); ++j) p.values[j] = phi_at(l, stream, j);
  return p;
}

inline ParamStore init_params(const NetShape& shape, const RngStream& stream) {
  return init_params(Layout(shape), stream);
}

// Restore the selected indices to their φ draws from `stream`.
inline void reinitialize(ParamStore& p, const BitMask& which, const RngStream& stream) {
  if (which.size() != p.size()) throw DimensionMismatch("reinitialize: mask size");
  for (const auto& l : p.layout.layers())
    for (std::size_t j = l.begin(); j < l.end(); ++j)
      if (which.test(j)) p.values[j] = phi_at(l, stream, j);
}

}  // namespace subnet_unlearn
