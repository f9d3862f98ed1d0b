#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

enum class Region : std::uint8_t { backbone = 0, side = 1, head = 2, baseline_insert = 3 };
inline constexpr std::size_t kRegionCount = 4;
inline constexpr std::array<Region, kRegionCount> kAllRegions = {Region::backbone, Region::side, Region::head,
                                                                 Region::baseline_insert};

inline std::string_view to_string(Region r) {
  switch (r) {
    case Region::backbone: return "backbone";
    case Region::side: return "side";
    case Region::head: return "head";
    case Region::baseline_insert: return "baseline-insert";
  }
  return "?";
}

enum class OpKind : std::uint8_t {
  constant,
  parameter,
  matmul,
  bmm,
  add,
  add_bias,
  scale,
  scale_by,
  gelu,
  layernorm,
  softmax,
  permute,
  reshape,
  concat_rows,
  slice_rows,
  mean_rows,
  sum,
  cross_entropy,
};

inline std::string_view to_string(OpKind op);

class UnknownParameterError : public std::out_of_range {
 public:
  explicit UnknownParameterError(const std::string& name) : std::out_of_range("unknown parameter: " + name) {}
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
struct Parameter {
  std::string name;
  std::shared_ptr<const Tensor<Scalar>> value;
  bool trainable = false;
};

/// Named parameter registry. Ids are stable insertion indices.
template <typename Scalar>
class ParameterStore {
 public:
  using Id = std::size_t;

  Id add(std::string name, Tensor<Scalar> value, bool trainable = false) {
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    const Id id = items_.size();
    index_.emplace(name, id);
    items_.push_back({std::move(name), std::make_shared<const Tensor<Scalar>>(std::move(value)), trainable});
    return id;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Id id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UnknownParameterError(name);
    return it->second;
  }

  const Parameter<Scalar>& operator[](Id id) const { return items_.at(id); }
  const Parameter<Scalar>& operator[](const std::string& name) const { return items_[id(name)]; }
  const Tensor<Scalar>& value(Id id) const { return *items_.at(id).value; }

  void set_value(Id id, Tensor<Scalar> value) {
    auto& p = items_.at(id);
    if (value.shape() != p.value->shape()) throw DimensionError("set_value " + p.name, p.value->shape(), value.shape());
    p.value = std::make_shared<const Tensor<Scalar>>(std::move(value));
  }

  void set_trainable(Id id, bool flag) { items_.at(id).trainable = flag; }
  void set_trainable(const std::string& name, bool flag) { set_trainable(id(name), flag); }

  void freeze_all() {
    for (auto& p : items_) p.trainable = false;
  }

  std::size_t size() const { return items_.size(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t trainable_elements() const {
    std::size_t n = 0;
    for (const auto& p : items_) {
      if (p.trainable) n += p.value->size();
    }
    return n;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& p : items_) n += p.value->size();
    return n;
  }

 private:
  std::vector<Parameter<Scalar>> items_;
  std::unordered_map<std::string, Id> index_;
};

// ---------------------------------------------------------------------------
// Tape

using NodeId = std::size_t;

/// Public view of one recorded operation.
struct TapeNode {
  OpKind op_kind = OpKind::constant;
  std::vector<NodeId> inputs;
  Shape shape;
  bool caches_output = false;
  bool requires_grad = false;
  std::uint64_t fwd_macs = 0;
  /// MACs of the backward rule given which inputs need gradients.
  std::uint64_t bwd_macs = 0;
  Region owning_region = Region::backbone;
};

struct RegionStats {
  std::uint64_t fwd_macs = 0;
  std::uint64_t bwd_macs = 0;
  std::uint64_t cached_bytes = 0;
};

struct TapeStats {
  std::uint64_t total_fwd_macs = 0;
  std::uint64_t total_bwd_macs = 0;
  std::uint64_t cached_bytes = 0;
  std::array<RegionStats, kRegionCount> per_region{};

  const RegionStats& region(Region r) const { return per_region[static_cast<std::size_t>(r)]; }
};

template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  NodeId id = 0;

  const Tensor<Scalar>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->node(id).requires_grad; }
};

template <typename Scalar>
class Tape {
 public:
  using TensorPtr = std::shared_ptr<const Tensor<Scalar>>;
  /// Adds dL/d(input j) into grads[j]; grads[j] is null when input j needs no gradient.
  using BackwardFn = std::function<void(const Tensor<Scalar>& grad_out, std::vector<Tensor<Scalar>*>& grads)>;

  /// Marker in a retain list that refers to the node being recorded.
  static constexpr NodeId kSelf = static_cast<NodeId>(-1);

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class RegionGuard {
   public:
    RegionGuard(Tape& tape, Region r) : tape_(tape), saved_(tape.region_) { tape_.region_ = r; }
    ~RegionGuard() { tape_.region_ = saved_; }
    RegionGuard(const RegionGuard&) = delete;
    RegionGuard& operator=(const RegionGuard&) = delete;

   private:
    Tape& tape_;
    Region saved_;
  };

  [[nodiscard]] RegionGuard scope(Region r) { return RegionGuard(*this, r); }
  Region region() const { return region_; }

  Var<Scalar> constant(Tensor<Scalar> value) {
    return record(OpKind::constant, {}, std::move(value), 0, {}, {}, nullptr);
  }

  /// Leaf for a registered parameter; repeated calls return the same node.
  Var<Scalar> param(const ParameterStore<Scalar>& store, typename ParameterStore<Scalar>::Id id) {
    const auto key = std::make_pair(static_cast<const void*>(&store), id);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return {this, it->second};
    const auto& p = store[id];
    Entry e;
    e.view.op_kind = OpKind::parameter;
    e.view.shape = p.value->shape();
    e.view.requires_grad = p.trainable;
    e.view.owning_region = region_;
    e.value = p.value;
    e.param_name = p.name;
    entries_.push_back(std::move(e));
    const NodeId nid = entries_.size() - 1;
    param_nodes_.emplace(key, nid);
    return {this, nid};
  }

  Var<Scalar> param(const ParameterStore<Scalar>& store, const std::string& name) {
    return param(store, store.id(name));
  }

  Var<Scalar> record(OpKind op, std::vector<NodeId> inputs, Tensor<Scalar> out, std::uint64_t fwd_macs,
                     std::vector<std::uint64_t> input_bwd_macs, std::vector<std::vector<NodeId>> retains,
                     BackwardFn backward) {
    if (!out.all_finite()) {
      throw NonFiniteError("non-finite output from op " + std::string(to_string(op)) + " " + to_string(out.shape()));
    }
    Entry e;
    e.view.op_kind = op;
    e.view.inputs = inputs;
    e.view.shape = out.shape();
    e.view.fwd_macs = fwd_macs;
    e.view.owning_region = region_;
    e.value = std::make_shared<const Tensor<Scalar>>(std::move(out));
    e.backward = std::move(backward);
    const NodeId self = entries_.size();
    bool any = false;
    for (std::size_t j = 0; j < inputs.size(); ++j) {
      if (!entries_.at(inputs[j]).view.requires_grad) continue;
      any = true;
      if (j < input_bwd_macs.size()) e.view.bwd_macs += input_bwd_macs[j];
      if (j < retains.size()) {
        for (NodeId r : retains[j]) {
          if (r == kSelf) {
            e.view.caches_output = true;
          } else {
            entries_.at(r).view.caches_output = true;
          }
        }
      }
    }
    e.view.requires_grad = any;
    if (!any) e.view.bwd_macs = 0;
    entries_.push_back(std::move(e));
    return {this, self};
  }

  const Tensor<Scalar>& value(NodeId id) const { return *entries_.at(id).value; }
  TensorPtr shared_value(NodeId id) const { return entries_.at(id).value; }
  const TapeNode& node(NodeId id) const { return entries_.at(id).view; }
  std::size_t size() const { return entries_.size(); }

  /// Reverse walk from a scalar loss. Visits only nodes that carry a gradient, i.e. that lie between
  /// the loss and some trainable parameter.
  GradientMap<Scalar> backward(Var<Scalar> loss) {
    if (loss.tape != this || loss.id >= entries_.size()) throw TapeError("loss is not recorded on this tape");
    if (value(loss.id).size() != 1) throw DimensionError("loss must be scalar", value(loss.id).shape(), Shape{});
    for (auto& e : entries_) e.visited = false;
    GradientMap<Scalar> out;
    if (!entries_[loss.id].view.requires_grad) {
      backward_done_ = true;
      return out;
    }
    std::vector<std::optional<Tensor<Scalar>>> grads(loss.id + 1);
    grads[loss.id] = Tensor<Scalar>::full(value(loss.id).shape(), Scalar(1));
    std::vector<Tensor<Scalar>*> slots;
    for (NodeId i = loss.id + 1; i-- > 0;) {
      auto& e = entries_[i];
      if (!grads[i] || !e.view.requires_grad) continue;
      e.visited = true;
      if (e.view.op_kind == OpKind::parameter) {
        auto [it, inserted] = out.emplace(e.param_name, std::move(*grads[i]));
        if (!inserted) throw TapeError("parameter recorded twice: " + e.param_name);
        grads[i].reset();
        continue;
      }
      slots.assign(e.view.inputs.size(), nullptr);
      for (std::size_t j = 0; j < e.view.inputs.size(); ++j) {
        const NodeId in = e.view.inputs[j];
        if (!entries_[in].view.requires_grad) continue;
        if (!grads[in]) grads[in] = Tensor<Scalar>::zeros(entries_[in].view.shape);
        slots[j] = &*grads[in];
      }
      if (e.backward) e.backward(*grads[i], slots);
      grads[i].reset();
    }
    backward_done_ = true;
    return out;
  }

  TapeStats stats() const {
    TapeStats s;
    for (const auto& e : entries_) {
      auto& r = s.per_region[static_cast<std::size_t>(e.view.owning_region)];
      r.fwd_macs += e.view.fwd_macs;
      if (e.visited) r.bwd_macs += e.view.bwd_macs;
      if (e.view.caches_output && e.view.op_kind != OpKind::parameter) r.cached_bytes += e.value->bytes();
    }
    for (const auto& r : s.per_region) {
      s.total_fwd_macs += r.fwd_macs;
      s.total_bwd_macs += r.bwd_macs;
      s.cached_bytes += r.cached_bytes;
    }
    return s;
  }

  bool backward_done() const { return backward_done_; }

 private:
  struct Entry {
    TapeNode view;
    TensorPtr value;
    BackwardFn backward;
    std::string param_name;
    bool visited = false;
  };

  struct PairHash {
    std::size_t operator()(const std::pair<const void*, std::size_t>& k) const {
      return std::hash<const void*>()(k.first) ^ (std::hash<std::size_t>()(k.second) * 0x9e3779b97f4a7c15ULL);
    }
  };

  std::vector<Entry> entries_;
  std::unordered_map<std::pair<const void*, std::size_t>, NodeId, PairHash> param_nodes_;
  Region region_ = Region::backbone;
  bool backward_done_ = false;
};

inline std::string_view to_string(OpKind op) {
  switch (op) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::matmul: return "matmul";
    case OpKind::bmm: return "bmm";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::scale: return "scale";
    case OpKind::scale_by: return "scale_by";
    case OpKind::gelu: return "gelu";
    case OpKind::layernorm: return "layernorm";
    case OpKind::softmax: return "softmax";
    case OpKind::permute: return "permute";
    case OpKind::reshape: return "reshape";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::sum: return "sum";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

}  // namespace losa

#include "losa/ops.hpp"
