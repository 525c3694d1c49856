#include "gradflow/graph.hpp"

#include <algorithm>
#include <sstream>

namespace gradflow {

std::string_view op_kind_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::StopGradient: return "stop_gradient";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::SpaceToDepth2: return "space_to_depth2";
    case OpKind::DepthToSpace2: return "depth_to_space2";
    case OpKind::UpsampleNearest2: return "upsample_nearest2";
    case OpKind::MaxPool2: return "maxpool2";
    case OpKind::AvgPool2: return "avgpool2";
    case OpKind::Relu: return "relu";
    case OpKind::Add: return "add";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::MeanScalar: return "mean_scalar";
    case OpKind::BceWithLogits: return "bce_with_logits";
  }
  return "?";
}

void Graph::check_node_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw GraphError("node id " + std::to_string(id) + " out of range (" +
                     std::to_string(nodes_.size()) + " nodes)");
  }
}

NodeId Graph::add_input(Tensor value) {
  return record(OpKind::Input, {}, std::move(value), nullptr);
}

NodeId Graph::add_constant(Tensor value) {
  return record(OpKind::Constant, {}, std::move(value), nullptr);
}

ParamId Graph::add_parameter(std::string name, Tensor value) {
  Parameter p;
  p.name = std::move(name);
  p.grad = zeros(value.shape());
  p.value = std::move(value);
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

NodeId Graph::record(OpKind op, std::vector<NodeId> inputs, Tensor value,
                     BackwardRule rule, std::optional<ParamId> param) {
  for (NodeId in : inputs) {
    check_node_id(in);
  }
  if (param && *param >= params_.size()) {
    throw GraphError("parameter id out of range");
  }
  Node node;
  node.op = op;
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  node.param = param;
  node.rule = rule;
  nodes_.push_back(std::move(node));
  const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  if (param) {
    params_[*param].use_sites.push_back(id);
  }
  return id;
}

NodeId Graph::stop_gradient(NodeId x) {
  check_node_id(x);
  Tensor copy = nodes_[static_cast<std::size_t>(x)].value;
  const NodeId id = record(OpKind::StopGradient, {x}, std::move(copy), nullptr);
  nodes_[static_cast<std::size_t>(id)].is_barrier = true;
  return id;
}

const Node& Graph::node(NodeId id) const {
  check_node_id(id);
  return nodes_[static_cast<std::size_t>(id)];
}

const Parameter& Graph::parameter(ParamId id) const {
  if (id >= params_.size()) {
    throw GraphError("parameter id out of range");
  }
  return params_[id];
}

Parameter& Graph::parameter(ParamId id) {
  if (id >= params_.size()) {
    throw GraphError("parameter id out of range");
  }
  return params_[id];
}

const Parameter* Graph::find_parameter(std::string_view name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) {
      return &p;
    }
  }
  return nullptr;
}

GradMap Graph::backward(NodeId loss) {
  return backward_masked(loss, {});
}

GradMap Graph::backward_masked(NodeId loss,
                               const std::set<Edge>& blocked_edges) {
  check_node_id(loss);
  if (backward_done_) {
    throw StateError("backward already ran on this recording; re-record the "
                     "forward pass first");
  }
  const Node& loss_node = nodes_[static_cast<std::size_t>(loss)];
  if (loss_node.value.shape() != Shape{1, 1, 1, 1}) {
    throw ContractError("loss must be scalar-valued (shape (1,1,1,1)), got " +
                        loss_node.value.shape().str());
  }
  for (const Edge& e : blocked_edges) {
    check_node_id(e.consumer);
    const Node& c = nodes_[static_cast<std::size_t>(e.consumer)];
    const std::size_t max_slot = c.inputs.size() + (c.param ? 1 : 0);
    if (e.slot >= max_slot) {
      throw ContractError("blocked edge (" + std::to_string(e.consumer) + "," +
                          std::to_string(e.slot) + ") does not exist");
    }
  }
  backward_done_ = true;

  struct Contribution {
    NodeId consumer;
    std::size_t slot;
    Tensor grad;
  };
  std::vector<std::vector<Contribution>> pending(nodes_.size());

  // Per-use parameter gradients, keyed by (param, position in use_sites).
  for (Parameter& p : params_) {
    p.per_use.assign(p.use_sites.size(), Tensor{});
    p.grad = zeros(p.value.shape());
  }

  GradMap out;
  out.grads.resize(nodes_.size());

  auto finalize = [&](NodeId id) -> bool {
    auto& contribs = pending[static_cast<std::size_t>(id)];
    if (id == loss) {
      out.grads[static_cast<std::size_t>(id)] = full({1, 1, 1, 1}, 1.0);
      contribs.clear();
      return true;
    }
    if (contribs.empty()) {
      return false;
    }
    std::sort(contribs.begin(), contribs.end(),
              [](const Contribution& a, const Contribution& b) {
                return std::tie(a.consumer, a.slot) <
                       std::tie(b.consumer, b.slot);
              });
    Tensor acc = zeros(nodes_[static_cast<std::size_t>(id)].value.shape());
    for (const Contribution& c : contribs) {
      auto dst = acc.data();
      auto src = c.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
      }
    }
    out.grads[static_cast<std::size_t>(id)] = std::move(acc);
    contribs.clear();
    contribs.shrink_to_fit();
    return true;
  };

  for (NodeId id = loss; id >= 0; --id) {
    if (!finalize(id)) {
      continue;
    }
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.is_barrier || node.rule == nullptr) {
      continue; // barriers and leaves propagate nothing
    }
    const Tensor& grad_out = out.grads[static_cast<std::size_t>(id)];
    LocalGrads local = node.rule(*this, node, grad_out);
    for (std::size_t s = 0; s < node.inputs.size(); ++s) {
      if (local.input_grads[s].empty()) {
        continue;
      }
      if (blocked_edges.count({id, s}) != 0) {
        continue;
      }
      pending[static_cast<std::size_t>(node.inputs[s])].push_back(
          {id, s, std::move(local.input_grads[s])});
    }
    if (node.param) {
      Parameter& p = params_[*node.param];
      const std::size_t use_index = static_cast<std::size_t>(
          std::find(p.use_sites.begin(), p.use_sites.end(), id) -
          p.use_sites.begin());
      const bool blocked = blocked_edges.count({id, node.inputs.size()}) != 0;
      if (!blocked && local.param_grad) {
        p.per_use[use_index] = std::move(*local.param_grad);
      }
    }
  }

  // Unreached nodes get materialized zero gradients.
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (out.grads[i].empty()) {
      out.grads[i] = zeros(nodes_[i].value.shape());
    }
  }

  // Parameter gradients: ascending use-site order; unused or masked uses
  // contribute zeros.
  for (Parameter& p : params_) {
    for (Tensor& g : p.per_use) {
      if (g.empty()) {
        g = zeros(p.value.shape());
      }
    }
    Tensor acc = zeros(p.value.shape());
    for (const Tensor& g : p.per_use) {
      auto dst = acc.data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
      }
    }
    p.grad = std::move(acc);
  }

  return out;
}

std::vector<Tensor> Graph::per_use_grads(ParamId id) const {
  if (id >= params_.size()) {
    throw GraphError("parameter id out of range");
  }
  if (!backward_done_) {
    throw StateError("per_use_grads requires a completed backward pass");
  }
  return params_[id].per_use;
}

bool Graph::reaches_backward(NodeId from_loss, NodeId to) const {
  check_node_id(from_loss);
  check_node_id(to);
  std::vector<char> seen(nodes_.size(), 0);
  std::vector<NodeId> stack{from_loss};
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    if (seen[static_cast<std::size_t>(id)]) {
      continue;
    }
    seen[static_cast<std::size_t>(id)] = 1;
    if (id == to) {
      return true;
    }
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.is_barrier) {
      continue; // gradient never crosses a barrier
    }
    for (NodeId in : n.inputs) {
      stack.push_back(in);
    }
  }
  return false;
}

std::string Graph::dump() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    os << "node " << i << ' ' << op_kind_name(n.op) << " inputs=";
    if (n.inputs.empty()) {
      os << '-';
    } else {
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        if (k > 0) {
          os << ',';
        }
        os << n.inputs[k];
      }
    }
    os << " barrier=" << (n.is_barrier ? 1 : 0) << " param=";
    os << (n.param ? params_[*n.param].name : std::string("-"));
    os << '\n';
  }
  return os.str();
}

} // namespace gradflow
