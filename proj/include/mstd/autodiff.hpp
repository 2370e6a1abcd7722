#pragma once

// Tape-based reverse-mode autodiff.
//
// A Graph records every operation in execution order; backward() walks the
// tape once in exact reverse order. Parameters enter the tape by pointer and
// receive accumulated gradients at the end of backward() unless frozen.
// Graphs are single-use: build, backward once, discard.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mstd/tensor.hpp"

namespace mstd {

/// A named trainable tensor. Frozen parameters never receive gradient and
/// are skipped by optimizers.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<float> grad;
  bool frozen = false;
  /// Set when backward() accumulated into grad since the last optimizer step.
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad();
};

class Graph;

/// Handle to a node on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never carries gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is kept on the node (read back with grad()).
  Var input(Tensor value, bool requires_grad = true);
  /// Leaf bound to a parameter. The parameter must outlive the graph.
  Var param(Parameter& p);

  /// Populates gradients for every reachable leaf. `loss` must be scalar.
  void backward(Var loss);

  const Tensor& value(Var v) const { return node(v).value_ref(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  /// Gradient of an input leaf or intermediate after backward(); zeros if
  /// nothing flowed into it.
  std::vector<float> grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // Op authoring interface.
  /// Backward callback; receives the node it was recorded for.
  using BackwardFn = std::function<void(Graph&, Var self)>;
  Var record(Tensor value, bool requires_grad, BackwardFn fn);
  /// Gradient buffer of a node, zero-initialised on first touch.
  std::vector<float>& grad_buffer(Var v);
  bool has_grad(Var v) const { return !node(v).grad.empty(); }

  /// Ids visited by the most recent backward, in visit order. Test hook for
  /// the reverse-order contract.
  const std::vector<std::uint32_t>& last_backward_order() const { return visit_order_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<float> grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;

    const Tensor& value_ref() const { return external != nullptr ? *external : owned; }
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::deque<Node> nodes_;
  bool backward_done_ = false;
  std::vector<std::uint32_t> visit_order_;
};

namespace ops {

// Layer primitives.
Var linear(Var x, Var weight, Var bias);
Var matmul(Var a, Var b);
Var relu(Var x);
Var sigmoid(Var x);
/// Row softmax of x / temperature over the last axis.
Var softmax(Var x, float temperature);
/// x: [batch, tokens, dim]. Per-head scaled dot-product attention with
/// scale 1/sqrt(dim/heads), concatenated heads, then output projection.
Var multi_head_self_attention(Var x, int heads, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv,
                              Var wo, Var bo);

// Elementwise and structural.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var reshape(Var a, Shape shape);
/// Concatenate 2-D tensors along columns.
Var concat_cols(std::span<const Var> parts);
/// Constant copy; gradient stops here.
Var detach(Var a);

// Reductions.
Var sum(Var a);
Var mean(Var a);
/// Column means of a [rows, n] tensor, shaped [1, n].
Var mean_rows(Var a);
/// out[r] = a[r, index[r]]
Var gather_cols(Var a, std::span<const int> index);

// Losses.
/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);
/// Per-row sum p * (log(p + floor) - log(q + floor)); shape [rows].
Var kl_rows(Var p, Var q, float floor = 1e-9f);
/// (std / mean)^2 with population std, over all entries.
Var cv_squared(Var a);

}  // namespace ops

}  // namespace mstd
