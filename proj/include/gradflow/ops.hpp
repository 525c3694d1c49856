#pragma once

#include <span>
#include <vector>

#include "gradflow/graph.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

// Pure tensor->tensor forward kernels. These carry no tape state and are
// shared by the recording wrappers below, the constant-branch builder, and
// the test oracles' reference paths.
namespace kernels {

/// Cross-correlation, stride 1. kernel shape (out_c, in_c, kh, kw) with
/// kh == kw in {1, 3}; 3x3 uses zero padding 1, 1x1 uses padding 0, so the
/// spatial size is preserved. bias (1, out_c, 1, 1) is optional.
Tensor conv2d(const Tensor& x, const Tensor& kernel,
              const Tensor* bias = nullptr);

/// (n, c, h, w) -> (n, 4c, h/2, w/2); output channel 4*c_in + k where k
/// indexes the 2x2 block offsets in order (0,0),(0,1),(1,0),(1,1).
Tensor space_to_depth2(const Tensor& x);

/// Exact inverse permutation of space_to_depth2; c must be divisible by 4.
Tensor depth_to_space2(const Tensor& x);

/// Each pixel replicated into a 2x2 block.
Tensor upsample_nearest2(const Tensor& x);

/// 2x2 window, stride 2; ties broken toward the first element in row-major
/// window order.
Tensor maxpool2(const Tensor& x);
Tensor avgpool2(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor add(const Tensor& x, const Tensor& y);
Tensor concat_channels(std::span<const Tensor* const> xs);
double mean(const Tensor& x);

/// Mean over all elements of max(z,0) - t*z + log1p(exp(-|z|)).
double bce_with_logits(const Tensor& logits, const Tensor& target);

double sigmoid(double z);

} // namespace kernels

// Tape-recording operations. Each validates shapes (ShapeError), computes the
// forward value with the kernel above, and registers the matching exact
// backward rule on the graph.
namespace ops {

NodeId conv2d(Graph& g, NodeId x, ParamId kernel);

/// Adds a (1, c, 1, 1) bias parameter across the channel dimension.
NodeId bias_add(Graph& g, NodeId x, ParamId bias);

NodeId space_to_depth2(Graph& g, NodeId x);
NodeId depth_to_space2(Graph& g, NodeId x);
NodeId upsample_nearest2(Graph& g, NodeId x);
NodeId maxpool2(Graph& g, NodeId x);
NodeId avgpool2(Graph& g, NodeId x);
NodeId relu(Graph& g, NodeId x);
NodeId add(Graph& g, NodeId x, NodeId y);
NodeId concat_channels(Graph& g, std::span<const NodeId> xs);
NodeId mean_scalar(Graph& g, NodeId x);

/// Scalar training loss. The target enters the tape as a constant node;
/// its values must all be exactly 0 or 1 (ContractError otherwise).
NodeId bce_with_logits(Graph& g, NodeId logits, const Tensor& target);

} // namespace ops

} // namespace gradflow
