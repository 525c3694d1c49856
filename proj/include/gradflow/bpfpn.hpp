#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gradflow/graph.hpp"
#include "gradflow/ops.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

/// The feature-pyramid macro-topologies under study. All share the same
/// three-stage backbone and a 1x1 head; they differ in how the low-level
/// (C2) shortcut branch and the pairwise fusion calls are wired:
///
///   Vanilla      P3' = Fusion(P3, up(P4));            no C2 branch
///   HighRes      T = Fusion(P3, up(P4); th1);
///                P3' = Fusion(T, down(C2); th2)        no barrier, own params
///   Hourglass    P3' = Fusion3(down(C2), P3, up(P4))   single 48-ch fusion
///   Variant1     T = Fusion(shortcut(C2), P3; th);
///                P3' = Fusion(up(P4), T; th)           shared params
///   Variant2     T = Fusion(P3, up(P4); th);
///                P3' = Fusion(T, shortcut(C2); th)     shared params (canonical)
///   NoIsolation  Variant2 with the barrier removed
///   NoSharing    Variant2 with independent th1 != th2
///   MaxPoolDown  Variant2 with the learnable shortcut downsampling replaced
///                by 2x2 max pooling (channel-doubled by self-concat)
///   AvgPoolDown  same with 2x2 average pooling
///
/// shortcut(C2) = stop_gradient -> space_to_depth2 -> 1x1 conv (32->16);
/// down(C2) is the same without the barrier.
enum class ArchKind {
  Vanilla,
  HighRes,
  Hourglass,
  Variant1,
  Variant2,
  NoIsolation,
  NoSharing,
  MaxPoolDown,
  AvgPoolDown,
};

std::string_view arch_name(ArchKind k);
std::optional<ArchKind> parse_arch(std::string_view name);
std::vector<ArchKind> all_arch_kinds();

struct ArchitectureSpec {
  ArchKind kind = ArchKind::Variant2;

  /// Isolation-oracle twin: the shortcut branch output is computed outside
  /// the tape (from the same weights) and injected as a gradient-free
  /// constant, leaving the forward pass bitwise unchanged.
  bool shortcut_as_constant = false;
};

/// Named weight tensors in deterministic (initialization) order.
class Weights {
public:
  void add(std::string name, Tensor value);
  bool has(std::string_view name) const;
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// Kernel draws are normal(0, sqrt(2/fan_in)) in a fixed order (backbone
/// stages, laterals, shortcut 1x1, fusion(s), head); biases are zeros.
Weights init_weights(const ArchitectureSpec& spec, std::uint64_t seed);

/// Tape handles for one recorded fusion call.
struct FusionCall {
  std::vector<NodeId> operands; // fusion arguments, in call order
  NodeId concat;
  NodeId conv;   // the use site of the fusion kernel
  NodeId bias;   // the use site of the fusion bias
  NodeId out;
  std::string weight_name;
};

struct ForwardHandles {
  NodeId image = -1;
  NodeId c2 = -1;
  NodeId c3 = -1;
  NodeId c4 = -1;
  NodeId p3 = -1;
  NodeId p4 = -1;
  NodeId p4_up = -1;
  std::optional<NodeId> shortcut; // C2 branch output, when the arch has one
  std::optional<NodeId> t;        // first fusion output in two-fusion archs
  NodeId p3_prime = -1;
  NodeId logits = -1;
  std::vector<FusionCall> fusions;          // in call order
  std::map<std::string, ParamId> params;    // weight name -> ParamId
};

/// Records the full forward pass of the chosen architecture on the tape.
/// image must be (n, 1, H, W) with H and W divisible by 16 (ShapeError
/// otherwise); logits come out at (n, 1, H/8, W/8).
///
/// frozen_branch_input, when given for a barriered architecture, replaces
/// stop_gradient(C2) with a constant holding that tensor. The finite-
/// difference oracle uses this to probe the function the barrier defines
/// (the branch input pinned at the base point); passing the current C2
/// value leaves the forward pass bitwise unchanged.
ForwardHandles build_and_forward(const ArchitectureSpec& spec,
                                 const Tensor& image, Graph& g,
                                 const Weights& weights,
                                 const Tensor* frozen_branch_input = nullptr);

/// Exact trainable-parameter count, by registry enumeration.
std::int64_t count_params(const ArchitectureSpec& spec);

/// Inference FLOPs up to the logits, counted per primitive:
/// conv2d 2*out_elems*in_c*kh*kw, bias/relu/add 1 per element, avgpool2 4 and
/// maxpool2 3 per output element, mean 1 per element; pure data movement
/// (concat, upsample, space_to_depth and inverse, barriers) counts 0.
std::int64_t count_flops(const ArchitectureSpec& spec, const Shape& input);

/// True when the architecture applies one shared parameter set to both
/// fusion calls.
bool has_shared_fusion(ArchKind k);

/// Names of the backbone parameters (identical across architectures).
std::vector<std::string> backbone_param_names();

} // namespace gradflow
