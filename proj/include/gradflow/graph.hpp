#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "gradflow/tensor.hpp"

namespace gradflow {

using NodeId = std::int64_t;
using ParamId = std::size_t;

enum class OpKind {
  Input,
  Constant,
  StopGradient,
  Conv2d,
  BiasAdd,
  SpaceToDepth2,
  DepthToSpace2,
  UpsampleNearest2,
  MaxPool2,
  AvgPool2,
  Relu,
  Add,
  ConcatChannels,
  MeanScalar,
  BceWithLogits,
};

std::string_view op_kind_name(OpKind k);

class Graph;
struct Node;

/// Per-node reverse rule: given dL/d(value), produce one gradient tensor per
/// input slot plus (for parameterized nodes) the gradient of this use of the
/// parameter. An empty tensor in input_grads marks a slot that never carries
/// gradient (e.g. the constant target of the loss).
struct LocalGrads {
  std::vector<Tensor> input_grads;
  std::optional<Tensor> param_grad;
};

using BackwardRule = LocalGrads (*)(const Graph& g, const Node& node,
                                    const Tensor& grad_out);

/// One recorded operation on the tape. Barrier nodes propagate exactly zero
/// into their inputs during backward.
struct Node {
  OpKind op;
  std::vector<NodeId> inputs;
  Tensor value;
  bool is_barrier = false;
  std::optional<ParamId> param;
  BackwardRule rule = nullptr;
};

/// A named trainable tensor. use_sites lists, in forward (ascending NodeId)
/// order, every node that consumed this parameter; after backward, grad is
/// the sum of the per-use gradients in that order.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<NodeId> use_sites;
  Tensor grad;
  std::vector<Tensor> per_use;
};

/// Gradient of the loss with respect to every node, indexed by NodeId.
/// Nodes with no chain-rule path to the loss hold zeros.
struct GradMap {
  std::vector<Tensor> grads;
  const Tensor& at(NodeId id) const {
    return grads[static_cast<std::size_t>(id)];
  }
};

/// A chain-rule edge, addressed from its consumer side. Slots
/// 0..inputs.size()-1 are the data-input edges; for a parameterized node,
/// slot inputs.size() addresses the parameter-use edge.
struct Edge {
  NodeId consumer;
  std::size_t slot;
  auto operator<=>(const Edge&) const = default;
};

/// One-shot reverse-mode tape: record a forward pass, run backward (or
/// backward_masked) once, then discard. Gradient accumulation into any node
/// or parameter is performed in ascending (consumer NodeId, slot) order, so
/// repeated executions are bitwise identical.
class Graph {
public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId add_input(Tensor value);

  /// Leaf that never carries gradient (targets, injected branch values).
  NodeId add_constant(Tensor value);

  ParamId add_parameter(std::string name, Tensor value);

  /// Appends a node. All input ids must already exist (GraphError otherwise);
  /// if param is set, the new node id is added to that parameter's use_sites.
  NodeId record(OpKind op, std::vector<NodeId> inputs, Tensor value,
                BackwardRule rule, std::optional<ParamId> param = {});

  /// Identity forward (bitwise value copy) whose backward contribution is
  /// exactly zero.
  NodeId stop_gradient(NodeId x);

  std::size_t num_nodes() const { return nodes_.size(); }
  const Node& node(NodeId id) const;
  const Tensor& value(NodeId id) const { return node(id).value; }

  std::size_t num_parameters() const { return params_.size(); }
  const Parameter& parameter(ParamId id) const;
  Parameter& parameter(ParamId id);
  /// nullptr when no parameter has that name.
  const Parameter* find_parameter(std::string_view name) const;

  /// Full reverse sweep from a scalar loss node (shape (1,1,1,1), ContractError
  /// otherwise). Fills Parameter::grad and Parameter::per_use. A second call
  /// without re-recording is a StateError.
  GradMap backward(NodeId loss);

  /// Identical to backward except gradient flow across each blocked edge is
  /// replaced by zero. With an empty set the result equals backward exactly.
  /// Nonexistent edges are a ContractError.
  GradMap backward_masked(NodeId loss, const std::set<Edge>& blocked_edges);

  /// Per-use gradients of a parameter, ordered by use-site NodeId; their
  /// ascending-order sum equals Parameter::grad bitwise. StateError before
  /// backward.
  std::vector<Tensor> per_use_grads(ParamId id) const;

  /// True iff a chain-rule path exists from the loss to the node that does
  /// not cross (pass through) a barrier node.
  bool reaches_backward(NodeId from_loss, NodeId to) const;

  bool backward_done() const { return backward_done_; }

  /// Line-oriented dump: one line per node,
  /// `node <id> <op_kind> inputs=<ids> barrier=<0|1> param=<name|->`.
  std::string dump() const;

private:
  void check_node_id(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Parameter> params_;
  bool backward_done_ = false;
};

} // namespace gradflow
