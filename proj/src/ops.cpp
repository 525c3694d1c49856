#include "gradflow/ops.hpp"

#include <algorithm>
#include <cmath>

namespace gradflow {

namespace kernels {

namespace {

void check_conv_shapes(const Shape& xs, const Shape& ks) {
  if (ks.h != ks.w || (ks.h != 1 && ks.h != 3)) {
    throw ShapeError("conv2d kernel must be 1x1 or 3x3, got " + ks.str());
  }
  if (xs.c != ks.c) {
    throw ShapeError("conv2d channel mismatch: input " + xs.str() +
                     " vs kernel " + ks.str());
  }
}

void check_even_hw(const Shape& s, const char* op) {
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError(std::string(op) + " needs even spatial dims, got " +
                     s.str());
  }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor* bias) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  check_conv_shapes(xs, ks);
  const std::int64_t pad = ks.h / 2;
  const std::int64_t N = xs.n, IC = xs.c, H = xs.h, W = xs.w, OC = ks.n;
  Tensor out({N, OC, H, W});
  const double* xp = x.data().data();
  const double* kp = kernel.data().data();
  double* op = out.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      double* o = op + (n * OC + oc) * H * W;
      for (std::int64_t ic = 0; ic < IC; ++ic) {
        const double* xi = xp + (n * IC + ic) * H * W;
        for (std::int64_t kh = 0; kh < ks.h; ++kh) {
          for (std::int64_t kw = 0; kw < ks.w; ++kw) {
            const double wv = kp[((oc * IC + ic) * ks.h + kh) * ks.w + kw];
            const std::int64_t oh_lo = std::max<std::int64_t>(0, pad - kh);
            const std::int64_t oh_hi = std::min(H - 1, H - 1 - kh + pad);
            const std::int64_t ow_lo = std::max<std::int64_t>(0, pad - kw);
            const std::int64_t ow_hi = std::min(W - 1, W - 1 - kw + pad);
            for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const double* xr = xi + (oh + kh - pad) * W + (kw - pad);
              double* orow = o + oh * W;
              for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                orow[ow] += wv * xr[ow];
              }
            }
          }
        }
      }
      if (bias != nullptr) {
        const double b = bias->data()[static_cast<std::size_t>(oc)];
        for (std::int64_t i = 0; i < H * W; ++i) {
          o[i] += b;
        }
      }
    }
  }
  return out;
}

Tensor space_to_depth2(const Tensor& x) {
  const Shape& s = x.shape();
  check_even_hw(s, "space_to_depth2");
  Tensor out({s.n, 4 * s.c, s.h / 2, s.w / 2});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t k = 0; k < 4; ++k) {
        const std::int64_t dy = k >> 1, dx = k & 1;
        for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
          for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
            out.at(n, 4 * c + k, oh, ow) = x.at(n, c, 2 * oh + dy, 2 * ow + dx);
          }
        }
      }
    }
  }
  return out;
}

Tensor depth_to_space2(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c % 4 != 0) {
    throw ShapeError("depth_to_space2 needs channels divisible by 4, got " +
                     s.str());
  }
  Tensor out({s.n, s.c / 4, 2 * s.h, 2 * s.w});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c / 4; ++c) {
      for (std::int64_t k = 0; k < 4; ++k) {
        const std::int64_t dy = k >> 1, dx = k & 1;
        for (std::int64_t ih = 0; ih < s.h; ++ih) {
          for (std::int64_t iw = 0; iw < s.w; ++iw) {
            out.at(n, c, 2 * ih + dy, 2 * iw + dx) = x.at(n, 4 * c + k, ih, iw);
          }
        }
      }
    }
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  const Shape& s = x.shape();
  Tensor out({s.n, s.c, 2 * s.h, 2 * s.w});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t h = 0; h < s.h; ++h) {
        for (std::int64_t w = 0; w < s.w; ++w) {
          const double v = x.at(n, c, h, w);
          out.at(n, c, 2 * h, 2 * w) = v;
          out.at(n, c, 2 * h, 2 * w + 1) = v;
          out.at(n, c, 2 * h + 1, 2 * w) = v;
          out.at(n, c, 2 * h + 1, 2 * w + 1) = v;
        }
      }
    }
  }
  return out;
}

Tensor maxpool2(const Tensor& x) {
  const Shape& s = x.shape();
  check_even_hw(s, "maxpool2");
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
        for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
          double best = x.at(n, c, 2 * oh, 2 * ow);
          for (std::int64_t k = 1; k < 4; ++k) {
            const double v = x.at(n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1));
            if (v > best) { // strict: ties keep the earliest element
              best = v;
            }
          }
          out.at(n, c, oh, ow) = best;
        }
      }
    }
  }
  return out;
}

Tensor avgpool2(const Tensor& x) {
  const Shape& s = x.shape();
  check_even_hw(s, "avgpool2");
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
        for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
          const double sum =
              x.at(n, c, 2 * oh, 2 * ow) + x.at(n, c, 2 * oh, 2 * ow + 1) +
              x.at(n, c, 2 * oh + 1, 2 * ow) +
              x.at(n, c, 2 * oh + 1, 2 * ow + 1);
          out.at(n, c, oh, ow) = sum * 0.25;
        }
      }
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = src[i] > 0.0 ? src[i] : 0.0;
  }
  return out;
}

Tensor add(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw ShapeError("add shape mismatch: " + x.shape().str() + " vs " +
                     y.shape().str());
  }
  Tensor out(x.shape());
  auto a = x.data();
  auto b = y.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    dst[i] = a[i] + b[i];
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor* const> xs) {
  if (xs.empty()) {
    throw ShapeError("concat_channels needs at least one input");
  }
  const Shape& first = xs[0]->shape();
  std::int64_t total_c = 0;
  for (const Tensor* t : xs) {
    const Shape& s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ShapeError("concat_channels operands must share (n,h,w): " +
                       first.str() + " vs " + s.str());
    }
    total_c += s.c;
  }
  Tensor out({first.n, total_c, first.h, first.w});
  const std::int64_t plane = first.h * first.w;
  for (std::int64_t n = 0; n < first.n; ++n) {
    std::int64_t c_base = 0;
    for (const Tensor* t : xs) {
      const std::int64_t tc = t->shape().c;
      const double* src = t->data().data() + n * tc * plane;
      double* dst = out.data().data() + (n * total_c + c_base) * plane;
      std::copy(src, src + tc * plane, dst);
      c_base += tc;
    }
  }
  return out;
}

double mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) {
    acc += v;
  }
  return acc / static_cast<double>(x.size());
}

double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_with_logits(const Tensor& logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw ShapeError("bce_with_logits shape mismatch: " +
                     logits.shape().str() + " vs " + target.shape().str());
  }
  auto z = logits.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    acc += std::max(z[i], 0.0) - t[i] * z[i] + std::log1p(std::exp(-std::fabs(z[i])));
  }
  return acc / static_cast<double>(logits.size());
}

} // namespace kernels

// --- backward rules ----------------------------------------------------------

namespace {

using kernels::sigmoid;

LocalGrads conv2d_backward(const Graph& g, const Node& node,
                           const Tensor& grad_out) {
  const Tensor& x = g.value(node.inputs[0]);
  const Tensor& kernel = g.parameter(*node.param).value;
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  const std::int64_t pad = ks.h / 2;
  const std::int64_t N = xs.n, IC = xs.c, H = xs.h, W = xs.w, OC = ks.n;
  Tensor dx(xs);
  Tensor dk(ks);
  const double* xp = x.data().data();
  const double* kp = kernel.data().data();
  const double* gp = grad_out.data().data();
  double* dxp = dx.data().data();
  double* dkp = dk.data().data();
  for (std::int64_t n = 0; n < N; ++n) {
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      const double* go = gp + (n * OC + oc) * H * W;
      for (std::int64_t ic = 0; ic < IC; ++ic) {
        const double* xi = xp + (n * IC + ic) * H * W;
        double* dxi = dxp + (n * IC + ic) * H * W;
        for (std::int64_t kh = 0; kh < ks.h; ++kh) {
          for (std::int64_t kw = 0; kw < ks.w; ++kw) {
            const std::size_t kidx =
                static_cast<std::size_t>(((oc * IC + ic) * ks.h + kh) * ks.w + kw);
            const double wv = kp[kidx];
            double wacc = 0.0;
            const std::int64_t oh_lo = std::max<std::int64_t>(0, pad - kh);
            const std::int64_t oh_hi = std::min(H - 1, H - 1 - kh + pad);
            const std::int64_t ow_lo = std::max<std::int64_t>(0, pad - kw);
            const std::int64_t ow_hi = std::min(W - 1, W - 1 - kw + pad);
            for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
              const std::int64_t shift = (oh + kh - pad) * W + (kw - pad);
              const double* grow = go + oh * W;
              const double* xrow = xi + shift;
              double* dxrow = dxi + shift;
              for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                dxrow[ow] += wv * grow[ow];
                wacc += xrow[ow] * grow[ow];
              }
            }
            dkp[kidx] += wacc;
          }
        }
      }
    }
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  out.param_grad = std::move(dk);
  return out;
}

LocalGrads bias_add_backward(const Graph& g, const Node& node,
                             const Tensor& grad_out) {
  const Shape& s = g.value(node.inputs[0]).shape();
  Tensor db({1, s.c, 1, 1});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::int64_t h = 0; h < s.h; ++h) {
        for (std::int64_t w = 0; w < s.w; ++w) {
          acc += grad_out.at(n, c, h, w);
        }
      }
      db[c] += acc;
    }
  }
  LocalGrads out;
  out.input_grads.push_back(grad_out);
  out.param_grad = std::move(db);
  return out;
}

LocalGrads space_to_depth2_backward(const Graph& g, const Node& node,
                                    const Tensor& grad_out) {
  const Shape& s = g.value(node.inputs[0]).shape();
  Tensor dx(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t k = 0; k < 4; ++k) {
        const std::int64_t dy = k >> 1, dxo = k & 1;
        for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
          for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
            dx.at(n, c, 2 * oh + dy, 2 * ow + dxo) =
                grad_out.at(n, 4 * c + k, oh, ow);
          }
        }
      }
    }
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  return out;
}

LocalGrads depth_to_space2_backward(const Graph& g, const Node& node,
                                    const Tensor& grad_out) {
  LocalGrads out;
  out.input_grads.push_back(kernels::space_to_depth2(grad_out));
  (void)g;
  (void)node;
  return out;
}

LocalGrads upsample_nearest2_backward(const Graph& g, const Node& node,
                                      const Tensor& grad_out) {
  const Shape& s = g.value(node.inputs[0]).shape();
  Tensor dx(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t h = 0; h < s.h; ++h) {
        for (std::int64_t w = 0; w < s.w; ++w) {
          dx.at(n, c, h, w) = grad_out.at(n, c, 2 * h, 2 * w) +
                              grad_out.at(n, c, 2 * h, 2 * w + 1) +
                              grad_out.at(n, c, 2 * h + 1, 2 * w) +
                              grad_out.at(n, c, 2 * h + 1, 2 * w + 1);
        }
      }
    }
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  return out;
}

LocalGrads maxpool2_backward(const Graph& g, const Node& node,
                             const Tensor& grad_out) {
  const Tensor& x = g.value(node.inputs[0]);
  const Shape& s = x.shape();
  Tensor dx(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
        for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
          std::int64_t arg = 0;
          double best = x.at(n, c, 2 * oh, 2 * ow);
          for (std::int64_t k = 1; k < 4; ++k) {
            const double v = x.at(n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1));
            if (v > best) {
              best = v;
              arg = k;
            }
          }
          dx.at(n, c, 2 * oh + (arg >> 1), 2 * ow + (arg & 1)) =
              grad_out.at(n, c, oh, ow);
        }
      }
    }
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  return out;
}

LocalGrads avgpool2_backward(const Graph& g, const Node& node,
                             const Tensor& grad_out) {
  const Shape& s = g.value(node.inputs[0]).shape();
  Tensor dx(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
        for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
          const double v = grad_out.at(n, c, oh, ow) * 0.25;
          dx.at(n, c, 2 * oh, 2 * ow) = v;
          dx.at(n, c, 2 * oh, 2 * ow + 1) = v;
          dx.at(n, c, 2 * oh + 1, 2 * ow) = v;
          dx.at(n, c, 2 * oh + 1, 2 * ow + 1) = v;
        }
      }
    }
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  return out;
}

LocalGrads relu_backward(const Graph& g, const Node& node,
                         const Tensor& grad_out) {
  const Tensor& x = g.value(node.inputs[0]);
  Tensor dx(x.shape());
  auto xs = x.data();
  auto gs = grad_out.data();
  auto ds = dx.data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ds[i] = xs[i] > 0.0 ? gs[i] : 0.0; // subgradient 0 at exactly 0
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dx));
  return out;
}

LocalGrads add_backward(const Graph& g, const Node& node,
                        const Tensor& grad_out) {
  (void)g;
  (void)node;
  LocalGrads out;
  out.input_grads.push_back(grad_out);
  out.input_grads.push_back(grad_out);
  return out;
}

LocalGrads concat_channels_backward(const Graph& g, const Node& node,
                                    const Tensor& grad_out) {
  LocalGrads out;
  const Shape& os = grad_out.shape();
  const std::int64_t plane = os.h * os.w;
  std::int64_t c_base = 0;
  for (NodeId in : node.inputs) {
    const Shape& s = g.value(in).shape();
    Tensor dx(s);
    for (std::int64_t n = 0; n < s.n; ++n) {
      const double* src = grad_out.data().data() + (n * os.c + c_base) * plane;
      double* dst = dx.data().data() + n * s.c * plane;
      std::copy(src, src + s.c * plane, dst);
    }
    c_base += s.c;
    out.input_grads.push_back(std::move(dx));
  }
  return out;
}

LocalGrads mean_scalar_backward(const Graph& g, const Node& node,
                                const Tensor& grad_out) {
  const Shape& s = g.value(node.inputs[0]).shape();
  const double v = grad_out[0] / static_cast<double>(s.checked_elems());
  LocalGrads out;
  out.input_grads.push_back(full(s, v));
  return out;
}

LocalGrads bce_backward(const Graph& g, const Node& node,
                        const Tensor& grad_out) {
  const Tensor& z = g.value(node.inputs[0]);
  const Tensor& t = g.value(node.inputs[1]);
  Tensor dz(z.shape());
  const double scale = grad_out[0] / static_cast<double>(z.size());
  auto zs = z.data();
  auto ts = t.data();
  auto ds = dz.data();
  for (std::size_t i = 0; i < zs.size(); ++i) {
    ds[i] = scale * (sigmoid(zs[i]) - ts[i]);
  }
  LocalGrads out;
  out.input_grads.push_back(std::move(dz));
  out.input_grads.emplace_back(); // the target never carries gradient
  return out;
}

} // namespace

// --- recording wrappers --------------------------------------------------------

namespace ops {

NodeId conv2d(Graph& g, NodeId x, ParamId kernel) {
  Tensor value = kernels::conv2d(g.value(x), g.parameter(kernel).value);
  return g.record(OpKind::Conv2d, {x}, std::move(value), conv2d_backward,
                  kernel);
}

NodeId bias_add(Graph& g, NodeId x, ParamId bias) {
  const Tensor& xv = g.value(x);
  const Tensor& bv = g.parameter(bias).value;
  const Shape& xs = xv.shape();
  if (bv.shape() != Shape{1, xs.c, 1, 1}) {
    throw ShapeError("bias_add expects bias shape (1," + std::to_string(xs.c) +
                     ",1,1), got " + bv.shape().str());
  }
  Tensor value(xs);
  const std::int64_t plane = xs.h * xs.w;
  for (std::int64_t n = 0; n < xs.n; ++n) {
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const double b = bv[c];
      const double* src = xv.data().data() + (n * xs.c + c) * plane;
      double* dst = value.data().data() + (n * xs.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        dst[i] = src[i] + b;
      }
    }
  }
  return g.record(OpKind::BiasAdd, {x}, std::move(value), bias_add_backward,
                  bias);
}

NodeId space_to_depth2(Graph& g, NodeId x) {
  return g.record(OpKind::SpaceToDepth2, {x},
                  kernels::space_to_depth2(g.value(x)),
                  space_to_depth2_backward);
}

NodeId depth_to_space2(Graph& g, NodeId x) {
  return g.record(OpKind::DepthToSpace2, {x},
                  kernels::depth_to_space2(g.value(x)),
                  depth_to_space2_backward);
}

NodeId upsample_nearest2(Graph& g, NodeId x) {
  return g.record(OpKind::UpsampleNearest2, {x},
                  kernels::upsample_nearest2(g.value(x)),
                  upsample_nearest2_backward);
}

NodeId maxpool2(Graph& g, NodeId x) {
  return g.record(OpKind::MaxPool2, {x}, kernels::maxpool2(g.value(x)),
                  maxpool2_backward);
}

NodeId avgpool2(Graph& g, NodeId x) {
  return g.record(OpKind::AvgPool2, {x}, kernels::avgpool2(g.value(x)),
                  avgpool2_backward);
}

NodeId relu(Graph& g, NodeId x) {
  return g.record(OpKind::Relu, {x}, kernels::relu(g.value(x)), relu_backward);
}

NodeId add(Graph& g, NodeId x, NodeId y) {
  return g.record(OpKind::Add, {x, y}, kernels::add(g.value(x), g.value(y)),
                  add_backward);
}

NodeId concat_channels(Graph& g, std::span<const NodeId> xs) {
  std::vector<const Tensor*> vals;
  vals.reserve(xs.size());
  for (NodeId id : xs) {
    vals.push_back(&g.value(id));
  }
  Tensor value = kernels::concat_channels(vals);
  return g.record(OpKind::ConcatChannels, {xs.begin(), xs.end()},
                  std::move(value), concat_channels_backward);
}

NodeId mean_scalar(Graph& g, NodeId x) {
  Tensor value({1, 1, 1, 1});
  value[0] = kernels::mean(g.value(x));
  return g.record(OpKind::MeanScalar, {x}, std::move(value),
                  mean_scalar_backward);
}

NodeId bce_with_logits(Graph& g, NodeId logits, const Tensor& target) {
  for (double t : target.data()) {
    if (t != 0.0 && t != 1.0) {
      throw ContractError("bce_with_logits target values must be exactly 0 or 1");
    }
  }
  Tensor value({1, 1, 1, 1});
  value[0] = kernels::bce_with_logits(g.value(logits), target);
  const NodeId target_node = g.add_constant(target);
  return g.record(OpKind::BceWithLogits, {logits, target_node},
                  std::move(value), bce_backward);
}

} // namespace ops

} // namespace gradflow
