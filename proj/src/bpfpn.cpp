#include "gradflow/bpfpn.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace gradflow {

std::string_view arch_name(ArchKind k) {
  switch (k) {
    case ArchKind::Vanilla: return "vanilla";
    case ArchKind::HighRes: return "highres";
    case ArchKind::Hourglass: return "hourglass";
    case ArchKind::Variant1: return "variant1";
    case ArchKind::Variant2: return "variant2";
    case ArchKind::NoIsolation: return "no-isolation";
    case ArchKind::NoSharing: return "no-sharing";
    case ArchKind::MaxPoolDown: return "maxpool-down";
    case ArchKind::AvgPoolDown: return "avgpool-down";
  }
  return "?";
}

std::optional<ArchKind> parse_arch(std::string_view name) {
  for (ArchKind k : all_arch_kinds()) {
    if (arch_name(k) == name) {
      return k;
    }
  }
  return std::nullopt;
}

std::vector<ArchKind> all_arch_kinds() {
  return {ArchKind::Vanilla,     ArchKind::HighRes,   ArchKind::Hourglass,
          ArchKind::Variant1,    ArchKind::Variant2,  ArchKind::NoIsolation,
          ArchKind::NoSharing,   ArchKind::MaxPoolDown,
          ArchKind::AvgPoolDown};
}

bool has_shared_fusion(ArchKind k) {
  switch (k) {
    case ArchKind::Variant1:
    case ArchKind::Variant2:
    case ArchKind::NoIsolation:
    case ArchKind::MaxPoolDown:
    case ArchKind::AvgPoolDown:
      return true;
    default:
      return false;
  }
}

std::vector<std::string> backbone_param_names() {
  return {"backbone.stage1.weight", "backbone.stage1.bias",
          "backbone.stage2.weight", "backbone.stage2.bias",
          "backbone.stage3.weight", "backbone.stage3.bias"};
}

void Weights::add(std::string name, Tensor value) {
  items_.emplace_back(std::move(name), std::move(value));
}

bool Weights::has(std::string_view name) const {
  return std::any_of(items_.begin(), items_.end(),
                     [&](const auto& kv) { return kv.first == name; });
}

Tensor& Weights::at(std::string_view name) {
  for (auto& kv : items_) {
    if (kv.first == name) {
      return kv.second;
    }
  }
  throw ValueError("no weight named '" + std::string(name) + "'");
}

const Tensor& Weights::at(std::string_view name) const {
  return const_cast<Weights*>(this)->at(name);
}

namespace {

constexpr std::int64_t kC2Channels = 8;
constexpr std::int64_t kC3Channels = 16;
constexpr std::int64_t kC4Channels = 32;
constexpr std::int64_t kFusedChannels = 16;

bool has_learnable_down(ArchKind k) {
  switch (k) {
    case ArchKind::Vanilla:
    case ArchKind::MaxPoolDown:
    case ArchKind::AvgPoolDown:
      return false;
    default:
      return true;
  }
}

void add_conv(Weights& w, Rng& rng, const std::string& stem, std::int64_t oc,
              std::int64_t ic, std::int64_t k) {
  const double std = std::sqrt(2.0 / static_cast<double>(ic * k * k));
  w.add(stem + ".weight", randn({oc, ic, k, k}, rng, std));
  w.add(stem + ".bias", zeros({1, oc, 1, 1}));
}

} // namespace

Weights init_weights(const ArchitectureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Weights w;
  add_conv(w, rng, "backbone.stage1", kC2Channels, 1, 3);
  add_conv(w, rng, "backbone.stage2", kC3Channels, kC2Channels, 3);
  add_conv(w, rng, "backbone.stage3", kC4Channels, kC3Channels, 3);
  add_conv(w, rng, "lateral.p3", kFusedChannels, kC3Channels, 1);
  add_conv(w, rng, "lateral.p4", kFusedChannels, kC4Channels, 1);
  if (has_learnable_down(spec.kind)) {
    add_conv(w, rng, "down", kFusedChannels, 4 * kC2Channels, 1);
  }
  switch (spec.kind) {
    case ArchKind::Hourglass:
      add_conv(w, rng, "fusion", kFusedChannels, 3 * kFusedChannels, 3);
      break;
    case ArchKind::NoSharing:
    case ArchKind::HighRes:
      add_conv(w, rng, "fusion1", kFusedChannels, 2 * kFusedChannels, 3);
      add_conv(w, rng, "fusion2", kFusedChannels, 2 * kFusedChannels, 3);
      break;
    default:
      add_conv(w, rng, "fusion", kFusedChannels, 2 * kFusedChannels, 3);
      break;
  }
  add_conv(w, rng, "head", 1, kFusedChannels, 1);
  return w;
}

namespace {

struct Builder {
  Graph& g;
  const Weights& weights;
  ForwardHandles& h;
  const Tensor* frozen_branch_input = nullptr;

  ParamId pid(const std::string& name) const { return h.params.at(name); }

  NodeId conv_block(NodeId x, const std::string& stem) const {
    return ops::bias_add(g, ops::conv2d(g, x, pid(stem + ".weight")),
                         pid(stem + ".bias"));
  }

  NodeId fuse(std::vector<NodeId> operands, const std::string& stem) {
    FusionCall call;
    call.operands = operands;
    call.weight_name = stem + ".weight";
    call.concat = ops::concat_channels(g, operands);
    call.conv = ops::conv2d(g, call.concat, pid(stem + ".weight"));
    call.bias = ops::bias_add(g, call.conv, pid(stem + ".bias"));
    call.out = ops::relu(g, call.bias);
    h.fusions.push_back(call);
    return call.out;
  }

  /// The C2 branch: optional barrier, then the configured downsampling.
  NodeId shortcut_branch(const ArchitectureSpec& spec, NodeId c2) {
    if (spec.shortcut_as_constant) {
      // Twin used by the isolation oracle: same values, no gradient path.
      const Tensor s2d = kernels::space_to_depth2(g.value(c2));
      const Tensor* bias = &weights.at("down.bias");
      Tensor v = kernels::conv2d(s2d, weights.at("down.weight"), bias);
      return g.add_constant(std::move(v));
    }
    NodeId x = c2;
    const bool isolated = spec.kind != ArchKind::NoIsolation &&
                          spec.kind != ArchKind::HighRes &&
                          spec.kind != ArchKind::Hourglass;
    if (isolated) {
      x = frozen_branch_input != nullptr ? g.add_constant(*frozen_branch_input)
                                         : g.stop_gradient(x);
    }
    switch (spec.kind) {
      case ArchKind::MaxPoolDown: {
        const NodeId p = ops::maxpool2(g, x);
        const std::array<NodeId, 2> both{p, p};
        return ops::concat_channels(g, both);
      }
      case ArchKind::AvgPoolDown: {
        const NodeId p = ops::avgpool2(g, x);
        const std::array<NodeId, 2> both{p, p};
        return ops::concat_channels(g, both);
      }
      default:
        x = ops::space_to_depth2(g, x);
        x = ops::conv2d(g, x, pid("down.weight"));
        return ops::bias_add(g, x, pid("down.bias"));
    }
  }
};

} // namespace

ForwardHandles build_and_forward(const ArchitectureSpec& spec,
                                 const Tensor& image, Graph& g,
                                 const Weights& weights,
                                 const Tensor* frozen_branch_input) {
  const Shape& s = image.shape();
  if (s.c != 1 || s.h % 16 != 0 || s.w % 16 != 0 || s.h < 16 || s.w < 16) {
    throw ShapeError("expected image (n,1,H,W) with H,W divisible by 16, got " +
                     s.str());
  }

  ForwardHandles h;
  for (const auto& [name, value] : weights.items()) {
    h.params[name] = g.add_parameter(name, value);
  }
  Builder b{g, weights, h, frozen_branch_input};

  h.image = g.add_input(image);

  // Backbone. Stage 1 pools twice up front so C2 sits at stride 4.
  NodeId x = ops::avgpool2(g, h.image);
  x = ops::avgpool2(g, x);
  h.c2 = ops::relu(g, b.conv_block(x, "backbone.stage1"));
  h.c3 = ops::avgpool2(g, ops::relu(g, b.conv_block(h.c2, "backbone.stage2")));
  h.c4 = ops::avgpool2(g, ops::relu(g, b.conv_block(h.c3, "backbone.stage3")));

  h.p3 = b.conv_block(h.c3, "lateral.p3");
  h.p4 = b.conv_block(h.c4, "lateral.p4");
  h.p4_up = ops::upsample_nearest2(g, h.p4);

  switch (spec.kind) {
    case ArchKind::Vanilla:
      h.p3_prime = b.fuse({h.p3, h.p4_up}, "fusion");
      break;
    case ArchKind::HighRes: {
      h.shortcut = b.shortcut_branch(spec, h.c2);
      h.t = b.fuse({h.p3, h.p4_up}, "fusion1");
      h.p3_prime = b.fuse({*h.t, *h.shortcut}, "fusion2");
      break;
    }
    case ArchKind::Hourglass: {
      h.shortcut = b.shortcut_branch(spec, h.c2);
      h.p3_prime = b.fuse({*h.shortcut, h.p3, h.p4_up}, "fusion");
      break;
    }
    case ArchKind::Variant1: {
      h.shortcut = b.shortcut_branch(spec, h.c2);
      h.t = b.fuse({*h.shortcut, h.p3}, "fusion");
      h.p3_prime = b.fuse({h.p4_up, *h.t}, "fusion");
      break;
    }
    case ArchKind::NoSharing: {
      h.shortcut = b.shortcut_branch(spec, h.c2);
      h.t = b.fuse({h.p3, h.p4_up}, "fusion1");
      h.p3_prime = b.fuse({*h.t, *h.shortcut}, "fusion2");
      break;
    }
    default: { // Variant2 wiring, with the branch flavor set by the kind
      h.shortcut = b.shortcut_branch(spec, h.c2);
      h.t = b.fuse({h.p3, h.p4_up}, "fusion");
      h.p3_prime = b.fuse({*h.t, *h.shortcut}, "fusion");
      break;
    }
  }

  h.logits = b.conv_block(h.p3_prime, "head");
  return h;
}

std::int64_t count_params(const ArchitectureSpec& spec) {
  const Weights w = init_weights(spec, 0);
  std::int64_t total = 0;
  for (const auto& [name, value] : w.items()) {
    total += value.size();
  }
  return total;
}

std::int64_t count_flops(const ArchitectureSpec& spec, const Shape& input) {
  Graph g;
  const Weights w = init_weights(spec, 0);
  build_and_forward(spec, zeros(input), g, w);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    const Node& n = g.node(static_cast<NodeId>(i));
    const std::int64_t out_elems = n.value.size();
    switch (n.op) {
      case OpKind::Conv2d: {
        const Shape& ks = g.parameter(*n.param).value.shape();
        total += 2 * out_elems * ks.c * ks.h * ks.w;
        break;
      }
      case OpKind::BiasAdd:
      case OpKind::Relu:
      case OpKind::Add:
        total += out_elems;
        break;
      case OpKind::AvgPool2:
        total += 4 * out_elems;
        break;
      case OpKind::MaxPool2:
        total += 3 * out_elems;
        break;
      case OpKind::MeanScalar:
        total += g.value(n.inputs[0]).size();
        break;
      default:
        break; // data movement
    }
  }
  return total;
}

} // namespace gradflow
