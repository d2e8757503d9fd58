#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "biasedit/tensor.hpp"

namespace biasedit {

struct NodeRef {
  std::size_t id = 0;
};

class Op;
class Gradients;

/// Recorded computation over Tensors.
///
/// Building a node only records the operator and checks shapes; values are
/// produced by evaluate(). Leaves can be reassigned afterwards, which marks the
/// graph dirty so it can be replayed (the finite-difference checker relies on
/// this). Node ids are a topological order by construction.
class Graph {
 public:
  Graph() = default;

  // Named differentiable leaf. Names must be unique within the graph.
  NodeRef leaf(const std::string& name, Tensor value);
  // Non-differentiable input.
  NodeRef constant(Tensor value);

  NodeRef matmul(NodeRef a, NodeRef b);      // [m×k]·[k×n]
  NodeRef matmul_nt(NodeRef a, NodeRef b);   // a · bᵀ, b is [n×k]
  NodeRef matmul_tn(NodeRef a, NodeRef b);   // aᵀ · b, a is [k×m]
  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef mul(NodeRef a, NodeRef b);         // Hadamard
  NodeRef scale(NodeRef a, double factor);
  NodeRef scale_by(NodeRef a, NodeRef scalar);  // a · s, s has shape []
  NodeRef add_bias(NodeRef x, NodeRef bias);    // only broadcast: row-wise bias vector
  NodeRef mul_cols(NodeRef x, NodeRef v);       // x[i, j] * v[j]

  NodeRef gelu(NodeRef x);
  NodeRef relu(NodeRef x);
  NodeRef tanh(NodeRef x);
  NodeRef exp(NodeRef x);
  NodeRef log(NodeRef x);

  NodeRef layer_norm(NodeRef x, NodeRef gain, NodeRef bias, double eps = 1e-5);
  NodeRef embedding(NodeRef table, std::vector<std::size_t> ids);
  NodeRef softmax_rows(NodeRef x);
  NodeRef log_softmax_rows(NodeRef x);
  // Multi-head causal self-attention over packed sequences. `qkv` is
  // [N × 3d] (queries | keys | values); `offsets` has one entry per sequence
  // start plus the total N. Tokens only attend within their own sequence.
  NodeRef causal_attention(NodeRef qkv, std::size_t n_heads, std::vector<std::size_t> offsets);

  NodeRef pick(NodeRef x, std::vector<std::size_t> cols);  // out[i] = x[i, cols[i]]
  NodeRef gather(NodeRef v, std::vector<std::size_t> idx); // out[j] = v[idx[j]]
  NodeRef sum(NodeRef x);
  NodeRef mean(NodeRef x);
  NodeRef row_sum(NodeRef x);
  NodeRef segment_mean(NodeRef v, std::vector<std::size_t> offsets);
  NodeRef concat_cols(NodeRef a, NodeRef b);
  NodeRef slice_cols(NodeRef x, std::size_t begin, std::size_t count);

  NodeRef stop_gradient(NodeRef x);
  // Replace selected rows of x with fixed values; replaced rows pass no gradient.
  NodeRef patch_rows(NodeRef x, std::map<std::size_t, Tensor> rows);

  void evaluate();
  bool evaluated() const noexcept { return evaluated_upto_ == nodes_.size(); }

  const Tensor& value(NodeRef n) const;
  const Shape& shape(NodeRef n) const;
  bool requires_grad(NodeRef n) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  bool has_leaf(const std::string& name) const { return leaf_index_.contains(name); }
  NodeRef leaf_ref(const std::string& name) const;
  const Tensor& leaf_value(const std::string& name) const;
  void set_leaf(const std::string& name, Tensor value);
  std::vector<std::string> leaf_names() const;

  /// Reverse-mode gradient of a scalar node with respect to every leaf and
  /// every intermediate node that depends on a leaf. Leaves the graph untouched.
  Gradients gradients(NodeRef scalar_output) const;

 private:
  struct Node {
    std::shared_ptr<const Op> op;  // null for leaves and constants
    std::vector<std::size_t> inputs;
    Shape shape;
    Tensor value;
    bool requires_grad = false;
    std::string leaf_name;
  };

  NodeRef push(std::shared_ptr<const Op> op, std::vector<std::size_t> inputs);
  const Node& node(NodeRef n) const;

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> leaf_index_;
  std::size_t evaluated_upto_ = 0;
};

class Gradients {
 public:
  /// Gradient w.r.t. a named leaf; zeros if the output does not depend on it.
  const Tensor& param(const std::string& name) const;
  /// Gradient w.r.t. any node; nullptr if no gradient reached it.
  const Tensor* node(NodeRef n) const;
  std::map<std::string, Tensor> params() const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> node_grads_;
  std::map<std::string, Tensor> leaf_grads_;
};

/// Exact reverse-mode gradient of `scalar_output` w.r.t. every leaf.
std::map<std::string, Tensor> backward(const Graph& graph, NodeRef scalar_output);

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Central differences on every coordinate of leaf `param`, compared against
/// backward(). Relative error uses the denominator max(|a|, |b|, 1e-8).
/// The graph is restored (and re-evaluated) before returning.
FiniteDiffReport finite_diff_check(Graph& graph, NodeRef scalar_output, const std::string& param,
                                   double step, double tol);

/// Same as finite_diff_check but against a caller-supplied analytic gradient.
FiniteDiffReport finite_diff_compare(Graph& graph, NodeRef scalar_output, const std::string& param,
                                     const Tensor& analytic, double step, double tol);

/// Numerically stable log-softmax of a vector.
Tensor log_softmax(const Tensor& logits);

}  // namespace biasedit
