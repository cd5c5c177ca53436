#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "moesplit/tensor.hpp"

namespace moesplit {

/// Trainable tensors and their gradient slots. Tensors are held by pointer;
/// the owner (model weights) must outlive the set.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T>* value = nullptr;
    Tensor<T> grad;
  };

  void add(std::string name, Tensor<T>& value);
  /// nullptr when `value` is not registered (i.e. frozen).
  Entry* find(const Tensor<T>* value);
  const Entry* find(const Tensor<T>* value) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t numel() const;

  void zero_grad();
  double grad_norm() const;
  void scale_grad(double factor);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const Tensor<T>*, std::size_t> index_;
};

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const noexcept { return id != kNone; }
};

/// Tape of recorded operations. Nodes are appended in evaluation order, so the
/// tape order is a topological order and backward is a single reverse sweep.
/// Activations are treated as 2-D [rows, cols] matrices.
template <typename T>
class Graph {
 public:
  /// `params` decides which weights receive gradients; with `record == false`
  /// no backward closures are kept (inference).
  explicit Graph(ParamSet<T>* params = nullptr, bool record = true);

  Var constant(Tensor<T> value);
  /// Borrowed constant; `value` must outlive the graph.
  Var constant_ref(const Tensor<T>& value);
  /// Leaf for a model weight. Trainable when registered in the ParamSet,
  /// otherwise a borrowed constant. Binding the same tensor twice returns
  /// the same node.
  Var weight(const Tensor<T>& value);
  /// Same value, no gradient path.
  Var detach(Var x);

  const Tensor<T>& value(Var v) const;
  /// Gradient buffer after backward; empty tensor when nothing flowed in.
  const Tensor<T>& grad(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t node_count() const noexcept { return nodes_.size(); }
  /// Node ids whose backward ran during the last backward(), in visit order.
  const std::vector<std::size_t>& last_backward_visits() const noexcept { return visits_; }

  /// Seeds d(loss)=1, sweeps the tape in reverse, then adds leaf gradients
  /// into the ParamSet slots. `loss` must hold exactly one value.
  void backward(Var loss);

  /// Discrete decisions (TopK selections, pseudo labels) are folded into a
  /// hash so finite-difference checks can detect perturbations that flip them.
  void note_decision(std::uint64_t token);
  std::uint64_t decision_hash() const noexcept { return decision_hash_; }

  // Operations.
  Var matmul(Var x, Var w);
  Var add_bias(Var x, Var b);
  Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var x, T factor);
  Var silu(Var x);
  Var rms_norm(Var x, Var scale, Var shift, T eps);
  /// Grouped row softmax; see softmax_grouped.
  Var softmax(Var logits, std::size_t groups = 1);
  /// log(max(x, floor)); zero gradient where clamped.
  Var log_clamped(Var x, T floor);
  /// Elementwise product with a constant tensor of the same shape.
  Var mul_const(Var x, Tensor<T> c);
  Var sum_all(Var x);
  /// mean((a - b)^2) over all elements.
  Var mean_sq_diff(Var a, Var b);
  /// Mean over rows of -log softmax(logits)[label].
  Var cross_entropy(Var logits, std::vector<int> labels);
  /// out[r] = table[ids[r]]
  Var gather_rows(Var table, std::vector<int> ids);
  /// Multi-head causal self-attention over `batch` sequences of length `seq`
  /// stacked along rows; q/k/v are [batch*seq, d].
  Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);
  /// out = sum_i mask_i ⊙ (acts_i @ w2_i), accumulated in expert order into a
  /// single buffer per row. Rows with mask 0 are skipped (not multiplied).
  Var expert_mix(const std::vector<Var>& acts, const std::vector<Var>& w2s,
                 std::vector<std::vector<std::uint8_t>> masks);

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* ext = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    long param = -1;
    std::function<void(Graph&)> back;
  };

  Var push(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> back);
  bool needs(Var v) const { return record_ && nodes_[v.id].requires_grad; }
  Tensor<T>& grad_buf(std::size_t id);

  ParamSet<T>* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> bound_;
  std::vector<std::size_t> visits_;
  std::uint64_t decision_hash_ = 1469598103934665603ULL;
};

}  // namespace moesplit
