#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "advpnml/tensor.hpp"

namespace advpnml {

/// Handle to a node on a Tape. Only meaningful for the tape that issued it.
struct Var {
  std::uint32_t index = 0;
  friend bool operator==(Var, Var) = default;
};

/// Gradients of one backward pass, one entry per registered leaf.
template <typename T>
class GradientMap {
 public:
  void insert(Var leaf, std::string name, Tensor<T> grad) {
    by_name_.emplace(name, entries_.size());
    by_var_.emplace(leaf.index, entries_.size());
    entries_.push_back({std::move(name), std::move(grad)});
  }

  const Tensor<T>& operator[](Var leaf) const {
    auto it = by_var_.find(leaf.index);
    if (it == by_var_.end()) throw ContractError("no gradient for leaf #" + std::to_string(leaf.index));
    return entries_[it->second].grad;
  }

  const Tensor<T>& operator[](std::string_view name) const {
    auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) throw ContractError("no gradient for leaf '" + std::string(name) + "'");
    return entries_[it->second].grad;
  }

  bool contains(std::string_view name) const { return by_name_.contains(std::string(name)); }
  std::size_t size() const noexcept { return entries_.size(); }

  struct Entry {
    std::string name;
    Tensor<T> grad;
  };
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::unordered_map<std::uint32_t, std::size_t> by_var_;
};

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Every op allocates a fresh output node whose parents precede it, so the
/// node order is already topological and backward is a single reverse sweep.
/// Nodes that cannot reach a registered leaf carry no backward closure.
template <typename T>
class Tape {
 public:
  /// Accumulates `grad` into the gradient of each parent, given the node's
  /// output gradient.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Registers a differentiable leaf; backward reports a gradient for it.
  Var leaf(Tensor<T> value, std::string name);
  /// A value that is never differentiated.
  Var constant(Tensor<T> value);
  /// Non-owning variants; `value` must outlive the tape.
  Var leaf_ref(const Tensor<T>& value, std::string name);
  Var constant_ref(const Tensor<T>& value);

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Records an op output. `fn` is dropped when no parent requires grad.
  Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn fn);

  /// Reverse sweep from a scalar loss.
  GradientMap<T> backward(Var loss);

  /// Used by backward closures.
  void accumulate(Var target, const Tensor<T>& grad);
  void accumulate(Var target, Tensor<T>&& grad);

 private:
  struct Node {
    Tensor<T> value;
    std::vector<Var> parents;
    BackwardFn backward;
    bool requires_grad = false;
    const Tensor<T>* external = nullptr;
  };
  struct LeafInfo {
    Var var;
    std::string name;
  };

  const Node& node(Var v) const {
    if (v.index >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    return nodes_[v.index];
  }

  std::vector<Node> nodes_;
  std::vector<LeafInfo> leaves_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_grad_;
};

enum class Reduction { kSum, kMean };

/// [m x k] . [k x n]
template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b);

/// x [N x in], weight [out x in], bias [out] -> x . weight^T + bias
template <typename T>
Var linear(Tape<T>& tape, Var x, Var weight, Var bias);

/// Stride-1 cross-correlation with zero padding. Input [C x H x W] or
/// [N x C x H x W]; kernels [C_out x C_in x k x k]; bias [C_out].
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernels, Var bias, std::size_t padding);

/// 2x2 window, stride 2. Ties route the gradient to the first cell in
/// row-major order.
template <typename T>
Var maxpool2d(Tape<T>& tape, Var input);

template <typename T>
Var relu(Tape<T>& tape, Var input);

template <typename T>
Var reshape(Tape<T>& tape, Var input, Shape shape);

template <typename T>
Var sum(Tape<T>& tape, Var input);

/// Cross entropy of logits [C] (one label) or [N x C] (one label per row),
/// reduced to a scalar.
template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels,
                          Reduction reduction = Reduction::kSum);

/// Row-wise log-softmax of [N x C].
template <typename T>
Var log_softmax(Tape<T>& tape, Var input);

/// out[r] = input[r, columns[r]] for input [M x C].
template <typename T>
Var pick(Tape<T>& tape, Var input, std::span<const int> columns);

/// out[r, ...] = input[rows[r], ...]; backward scatter-adds.
template <typename T>
Var gather_rows(Tape<T>& tape, Var input, std::span<const std::size_t> rows);

/// Forward value `forward`, backward identity into `input` (BPDA).
template <typename T>
Var straight_through(Tape<T>& tape, Var input, Tensor<T> forward);

/// Numerically stable row-wise softmax of [N x C] or [C]; no tape.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Per-row cross entropy values for [N x C] logits; no tape.
template <typename T>
std::vector<double> cross_entropy_per_row(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace advpnml
