#include "gradflow/verify.hpp"

#include <algorithm>
#include <cmath>

#include "gradflow/ops.hpp"
#include "gradflow/synth.hpp"

namespace gradflow {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace verify {

namespace {

constexpr std::uint64_t kWeightsTag = 0x57;
constexpr std::uint64_t kSceneTag = 0x5c;
constexpr std::uint64_t kCoordsTag = 0xc0;

Tensor uniform_pm1(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) {
    v = 2.0 * rng.uniform() - 1.0;
  }
  return t;
}

/// Uniform magnitude in [0.05, 1] with random sign; keeps relu inputs away
/// from the kink under the FD step.
Tensor uniform_pm1_no_kink(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) {
    const double mag = 0.05 + 0.95 * rng.uniform();
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Random tensor whose 2x2 pooling windows have a top-2 gap > 1e-3, so the
/// maxpool argmax is stable under FD perturbation.
Tensor uniform_pm1_pool_safe(const Shape& shape, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    Tensor t = uniform_pm1(shape, rng);
    bool ok = true;
    const Shape& s = t.shape();
    for (std::int64_t n = 0; n < s.n && ok; ++n) {
      for (std::int64_t c = 0; c < s.c && ok; ++c) {
        for (std::int64_t oh = 0; oh < s.h / 2 && ok; ++oh) {
          for (std::int64_t ow = 0; ow < s.w / 2 && ok; ++ow) {
            double best = -2.0, second = -2.0;
            for (std::int64_t k = 0; k < 4; ++k) {
              const double v =
                  t.at(n, c, 2 * oh + (k >> 1), 2 * ow + (k & 1));
              if (v > best) {
                second = best;
                best = v;
              } else if (v > second) {
                second = v;
              }
            }
            ok = (best - second) > 1e-3;
          }
        }
      }
    }
    if (ok) {
      return t;
    }
  }
  throw Error("could not find a pool-safe random tensor");
}

Tensor binary_random(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) {
    v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  return t;
}

Tensor tensor_sum(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  auto dst = out.data();
  auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += src[i];
  }
  return out;
}

} // namespace

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double step) {
  if (!(step > 0.0)) {
    throw ValueError("finite_difference_grad: step must be > 0");
  }
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double hi = f(probe);
    probe[i] = orig - step;
    const double lo = f(probe);
    probe[i] = orig;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

double finite_difference_coord(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, std::int64_t coord,
                               double step) {
  if (!(step > 0.0)) {
    throw ValueError("finite_difference_coord: step must be > 0");
  }
  Tensor probe = x;
  const double orig = probe[coord];
  probe[coord] = orig + step;
  const double hi = f(probe);
  probe[coord] = orig - step;
  const double lo = f(probe);
  return (hi - lo) / (2.0 * step);
}

double rel_err(double analytic, double fd) {
  const double denom =
      std::max({1.0, std::fabs(analytic), std::fabs(fd)});
  return std::fabs(analytic - fd) / denom;
}

OracleSelfCheck validate_oracle(double step) {
  OracleSelfCheck out;
  {
    Rng rng(7);
    const Tensor x = uniform_pm1({1, 1, 2, 2}, rng);
    auto f = [](const Tensor& t) { return kernels::mean(t); };
    const Tensor fd = finite_difference_grad(f, x, step);
    for (std::int64_t i = 0; i < fd.size(); ++i) {
      out.mean_max_abs_err =
          std::max(out.mean_max_abs_err, std::fabs(fd[i] - 0.25));
    }
  }
  {
    Tensor x({1, 1, 1, 2});
    x[0] = 1.0;
    x[1] = 2.0;
    auto f = [](const Tensor& t) {
      double acc = 0.0;
      for (double v : t.data()) {
        acc += v * v;
      }
      return acc;
    };
    const Tensor fd = finite_difference_grad(f, x, step);
    out.quadratic_max_abs_err = std::max(std::fabs(fd[0] - 2.0),
                                         std::fabs(fd[1] - 4.0));
  }
  out.pass = out.mean_max_abs_err < out.tolerance &&
             out.quadratic_max_abs_err < out.tolerance;
  return out;
}

namespace {

/// Compares an analytic gradient tensor against per-coordinate central
/// differences of f and folds the result into the report.
void fold_check(GradCheckReport& report, const std::string& arg_label,
                const std::function<double(const Tensor&)>& f, const Tensor& x,
                const Tensor& analytic, double step) {
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double fd = finite_difference_coord(f, x, i, step);
    const double err = rel_err(analytic[i], fd);
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_coord = arg_label + "[" + std::to_string(i) + "]";
    }
  }
}

struct ConvCase {
  Tensor x, kernel, bias;
};

ConvCase make_conv_case(Rng& rng, std::int64_t k) {
  ConvCase c;
  c.x = uniform_pm1({2, 3, 4, 4}, rng);
  c.kernel = uniform_pm1({4, 3, k, k}, rng);
  c.bias = uniform_pm1({1, 4, 1, 1}, rng);
  return c;
}

double conv_loss(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  Graph g;
  const ParamId kw = g.add_parameter("k", kernel);
  const ParamId kb = g.add_parameter("b", bias);
  const NodeId xin = g.add_input(x);
  const NodeId y = ops::bias_add(g, ops::conv2d(g, xin, kw), kb);
  const NodeId loss = ops::mean_scalar(g, y);
  return g.value(loss)[0];
}

GradCheckReport check_conv(std::int64_t k, double step, double tolerance,
                           int n_seeds) {
  GradCheckReport report;
  report.op = k == 3 ? "conv2d_3x3" : "conv2d_1x1";
  report.step = step;
  report.tolerance = tolerance;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    Rng rng(mix_seed(seed, 0xc011));
    const ConvCase c = make_conv_case(rng, k);

    Graph g;
    const ParamId kw = g.add_parameter("k", c.kernel);
    const ParamId kb = g.add_parameter("b", c.bias);
    const NodeId xin = g.add_input(c.x);
    const NodeId y = ops::bias_add(g, ops::conv2d(g, xin, kw), kb);
    const NodeId loss = ops::mean_scalar(g, y);
    const GradMap gm = g.backward(loss);

    fold_check(report, "x",
               [&](const Tensor& t) { return conv_loss(t, c.kernel, c.bias); },
               c.x, gm.at(xin), step);
    fold_check(report, "kernel",
               [&](const Tensor& t) { return conv_loss(c.x, t, c.bias); },
               c.kernel, g.parameter(kw).grad, step);
    fold_check(report, "bias",
               [&](const Tensor& t) { return conv_loss(c.x, c.kernel, t); },
               c.bias, g.parameter(kb).grad, step);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

/// Checks a single-input op whose loss is mean(op(x)).
GradCheckReport check_unary(const std::string& name, const Shape& shape,
                            NodeId (*build)(Graph&, NodeId),
                            Tensor (*sample)(const Shape&, Rng&), double step,
                            double tolerance, int n_seeds) {
  GradCheckReport report;
  report.op = name;
  report.step = step;
  report.tolerance = tolerance;
  auto loss_fn = [&](const Tensor& x) {
    Graph g;
    const NodeId xin = g.add_input(x);
    const NodeId loss = ops::mean_scalar(g, build(g, xin));
    return g.value(loss)[0];
  };
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
    const Tensor x = sample(shape, rng);

    Graph g;
    const NodeId xin = g.add_input(x);
    const NodeId loss = ops::mean_scalar(g, build(g, xin));
    const GradMap gm = g.backward(loss);
    fold_check(report, "x", loss_fn, x, gm.at(xin), step);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport check_add(double step, double tolerance, int n_seeds) {
  GradCheckReport report;
  report.op = "add";
  report.step = step;
  report.tolerance = tolerance;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    Rng rng(mix_seed(seed, 0xadd));
    const Tensor a = uniform_pm1({2, 3, 4, 4}, rng);
    const Tensor b = uniform_pm1({2, 3, 4, 4}, rng);
    auto loss_fn = [](const Tensor& x, const Tensor& y) {
      Graph g;
      const NodeId xi = g.add_input(x);
      const NodeId yi = g.add_input(y);
      const NodeId loss = ops::mean_scalar(g, ops::add(g, xi, yi));
      return g.value(loss)[0];
    };
    Graph g;
    const NodeId xi = g.add_input(a);
    const NodeId yi = g.add_input(b);
    const NodeId loss = ops::mean_scalar(g, ops::add(g, xi, yi));
    const GradMap gm = g.backward(loss);
    fold_check(report, "x",
               [&](const Tensor& t) { return loss_fn(t, b); }, a, gm.at(xi),
               step);
    fold_check(report, "y",
               [&](const Tensor& t) { return loss_fn(a, t); }, b, gm.at(yi),
               step);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport check_concat(double step, double tolerance, int n_seeds) {
  GradCheckReport report;
  report.op = "concat_channels";
  report.step = step;
  report.tolerance = tolerance;
  const std::vector<Shape> shapes = {
      {1, 2, 3, 3}, {1, 3, 3, 3}, {1, 1, 3, 3}};
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    Rng rng(mix_seed(seed, 0xcca7));
    std::vector<Tensor> xs;
    for (const Shape& sh : shapes) {
      xs.push_back(uniform_pm1(sh, rng));
    }
    auto loss_fn = [&](const std::vector<Tensor>& args) {
      Graph g;
      std::vector<NodeId> ids;
      for (const Tensor& t : args) {
        ids.push_back(g.add_input(t));
      }
      const NodeId loss = ops::mean_scalar(g, ops::concat_channels(g, ids));
      return g.value(loss)[0];
    };
    Graph g;
    std::vector<NodeId> ids;
    for (const Tensor& t : xs) {
      ids.push_back(g.add_input(t));
    }
    const NodeId loss = ops::mean_scalar(g, ops::concat_channels(g, ids));
    const GradMap gm = g.backward(loss);
    for (std::size_t a = 0; a < xs.size(); ++a) {
      fold_check(report, "x" + std::to_string(a),
                 [&](const Tensor& t) {
                   std::vector<Tensor> args = xs;
                   args[a] = t;
                   return loss_fn(args);
                 },
                 xs[a], gm.at(ids[a]), step);
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

GradCheckReport check_bce(double step, double tolerance, int n_seeds) {
  GradCheckReport report;
  report.op = "bce_with_logits";
  report.step = step;
  report.tolerance = tolerance;
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    Rng rng(mix_seed(seed, 0xbce));
    const Tensor z = uniform_pm1({1, 2, 4, 4}, rng);
    const Tensor t = binary_random({1, 2, 4, 4}, rng);
    auto loss_fn = [&](const Tensor& logits) {
      Graph g;
      const NodeId zi = g.add_input(logits);
      const NodeId loss = ops::bce_with_logits(g, zi, t);
      return g.value(loss)[0];
    };
    Graph g;
    const NodeId zi = g.add_input(z);
    const NodeId loss = ops::bce_with_logits(g, zi, t);
    const GradMap gm = g.backward(loss);
    fold_check(report, "logits", loss_fn, z, gm.at(zi), step);
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

NodeId build_s2d(Graph& g, NodeId x) { return ops::space_to_depth2(g, x); }
NodeId build_d2s(Graph& g, NodeId x) { return ops::depth_to_space2(g, x); }
NodeId build_up(Graph& g, NodeId x) { return ops::upsample_nearest2(g, x); }
NodeId build_maxpool(Graph& g, NodeId x) { return ops::maxpool2(g, x); }
NodeId build_avgpool(Graph& g, NodeId x) { return ops::avgpool2(g, x); }
NodeId build_relu(Graph& g, NodeId x) { return ops::relu(g, x); }
NodeId build_identity(Graph& g, NodeId x) {
  (void)g;
  return x;
}

} // namespace

std::vector<GradCheckReport> gradcheck_primitives(double step,
                                                  double tolerance,
                                                  int n_seeds) {
  std::vector<GradCheckReport> reports;
  reports.push_back(check_conv(3, step, tolerance, n_seeds));
  reports.push_back(check_conv(1, step, tolerance, n_seeds));
  reports.push_back(check_unary("space_to_depth2", {2, 3, 4, 4}, build_s2d,
                                uniform_pm1, step, tolerance, n_seeds));
  reports.push_back(check_unary("depth_to_space2", {2, 4, 2, 2}, build_d2s,
                                uniform_pm1, step, tolerance, n_seeds));
  reports.push_back(check_unary("upsample_nearest2", {2, 3, 3, 3}, build_up,
                                uniform_pm1, step, tolerance, n_seeds));
  reports.push_back(check_unary("maxpool2", {2, 3, 4, 4}, build_maxpool,
                                uniform_pm1_pool_safe, step, tolerance,
                                n_seeds));
  reports.push_back(check_unary("avgpool2", {2, 3, 4, 4}, build_avgpool,
                                uniform_pm1, step, tolerance, n_seeds));
  reports.push_back(check_unary("relu", {2, 3, 4, 4}, build_relu,
                                uniform_pm1_no_kink, step, tolerance,
                                n_seeds));
  reports.push_back(check_add(step, tolerance, n_seeds));
  reports.push_back(check_concat(step, tolerance, n_seeds));
  reports.push_back(check_unary("mean_scalar", {2, 3, 4, 4}, build_identity,
                                uniform_pm1, step, tolerance, n_seeds));
  reports.push_back(check_bce(step, tolerance, n_seeds));
  return reports;
}

SceneConfig verify_scene_config(std::int64_t size, std::uint64_t seed) {
  SceneConfig cfg;
  cfg.size = size;
  cfg.seed = seed;
  if (size <= 32) {
    cfg.n_targets = 1;
    cfg.target_sigma = 0.8;
  } else {
    cfg.n_targets = 2;
    cfg.target_sigma = 1.0;
  }
  cfg.target_amplitude = 0.8;
  cfg.clutter_scale = 0.3;
  return cfg;
}

namespace {

struct ForwardCase {
  Weights weights;
  Tensor image;
  Tensor target;
};

ForwardCase make_forward_case(const ArchitectureSpec& spec, std::uint64_t seed,
                              std::int64_t size) {
  ForwardCase c;
  c.weights = init_weights(spec, mix_seed(seed, kWeightsTag));
  const Scene scene = generate(verify_scene_config(size, mix_seed(seed, kSceneTag)));
  c.image = scene.image;
  c.target = downsample_mask(scene.mask, 8);
  return c;
}

double forward_loss(const ArchitectureSpec& spec, const Weights& w,
                    const Tensor& image, const Tensor& target,
                    const Tensor* frozen_branch_input = nullptr) {
  Graph g;
  const ForwardHandles h =
      build_and_forward(spec, image, g, w, frozen_branch_input);
  const NodeId loss = ops::bce_with_logits(g, h.logits, target);
  return g.value(loss)[0];
}

bool has_barrier(ArchKind k) {
  return k != ArchKind::NoIsolation && k != ArchKind::HighRes &&
         k != ArchKind::Hourglass && k != ArchKind::Vanilla;
}

/// Piecewise-linearity signature of one forward pass: the sign pattern of
/// every relu input and the argmax pattern of every maxpool window. Two
/// probes on the same linear piece share the signature; a mismatch marks a
/// kink crossing, where central differences are invalid by construction.
std::uint64_t kink_signature(const Graph& g) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t i = 0; i < g.num_nodes(); ++i) {
    const Node& n = g.node(static_cast<NodeId>(i));
    if (n.op == OpKind::Relu) {
      const Tensor& x = g.value(n.inputs[0]);
      std::uint64_t acc = 0;
      int bits = 0;
      for (double v : x.data()) {
        acc = (acc << 1) | (v > 0.0 ? 1u : 0u);
        if (++bits == 64) {
          eat(acc);
          acc = 0;
          bits = 0;
        }
      }
      eat(acc);
    } else if (n.op == OpKind::MaxPool2) {
      const Tensor& x = g.value(n.inputs[0]);
      const Shape& s = x.shape();
      for (std::int64_t nn = 0; nn < s.n; ++nn) {
        for (std::int64_t c = 0; c < s.c; ++c) {
          for (std::int64_t oh = 0; oh < s.h / 2; ++oh) {
            for (std::int64_t ow = 0; ow < s.w / 2; ++ow) {
              std::int64_t arg = 0;
              double best = x.at(nn, c, 2 * oh, 2 * ow);
              for (std::int64_t k = 1; k < 4; ++k) {
                const double v =
                    x.at(nn, c, 2 * oh + (k >> 1), 2 * ow + (k & 1));
                if (v > best) {
                  best = v;
                  arg = k;
                }
              }
              eat(static_cast<std::uint64_t>(arg));
            }
          }
        }
      }
    }
  }
  return h;
}

struct Probe {
  double loss;
  std::uint64_t signature;
};

Probe forward_probe(const ArchitectureSpec& spec, const Weights& w,
                    const Tensor& image, const Tensor& target,
                    const Tensor* frozen_branch_input) {
  Graph g;
  const ForwardHandles h =
      build_and_forward(spec, image, g, w, frozen_branch_input);
  const NodeId loss = ops::bce_with_logits(g, h.logits, target);
  return {g.value(loss)[0], kink_signature(g)};
}

} // namespace

GradCheckReport gradcheck_end_to_end(ArchKind kind, double step,
                                     double tolerance, int n_seeds,
                                     std::int64_t size) {
  GradCheckReport report;
  report.op = std::string("end_to_end_") + std::string(arch_name(kind));
  report.step = step;
  report.tolerance = tolerance;
  const ArchitectureSpec spec{kind};
  for (int s = 0; s < n_seeds; ++s) {
    const std::uint64_t seed = static_cast<std::uint64_t>(s);
    report.seeds.push_back(seed);
    const ForwardCase c = make_forward_case(spec, seed, size);

    Graph g;
    const ForwardHandles h = build_and_forward(spec, c.image, g, c.weights);
    const NodeId loss = ops::bce_with_logits(g, h.logits, c.target);
    const GradMap gm = g.backward(loss);

    // Central differences must probe the function the barrier defines: the
    // branch input stays pinned at its base-point value while weights move.
    const Tensor c2_base = g.value(h.c2);
    const Tensor* frozen = has_barrier(kind) ? &c2_base : nullptr;

    Rng coords(mix_seed(seed, kCoordsTag));
    // Sampled coordinates whose probe pair straddles a relu/maxpool kink are
    // skipped; central differences are only meaningful on one linear piece.
    int checked = 0;
    auto sample_coords = [&](const std::string& label, const Tensor& base,
                             const Tensor& analytic,
                             const std::function<Probe(const Tensor&)>& probe) {
      for (int k = 0; k < 10; ++k) {
        const std::int64_t coord = coords.uniform_int(0, base.size() - 1);
        Tensor moved = base;
        moved[coord] = base[coord] + step;
        const Probe hi = probe(moved);
        moved[coord] = base[coord] - step;
        const Probe lo = probe(moved);
        if (hi.signature != lo.signature) {
          continue;
        }
        ++checked;
        const double fd = (hi.loss - lo.loss) / (2.0 * step);
        const double err = rel_err(analytic[coord], fd);
        if (err > report.max_rel_err) {
          report.max_rel_err = err;
          report.worst_coord = label + "[" + std::to_string(coord) + "]";
        }
      }
    };

    for (const auto& [name, value] : c.weights.items()) {
      const Tensor& analytic = g.parameter(h.params.at(name)).grad;
      const std::string& pname = name;
      sample_coords(pname, value, analytic, [&](const Tensor& t) {
        Weights w2 = c.weights;
        w2.at(pname) = t;
        return forward_probe(spec, w2, c.image, c.target, frozen);
      });
    }
    sample_coords("image", c.image, gm.at(h.image), [&](const Tensor& t) {
      return forward_probe(spec, c.weights, t, c.target, frozen);
    });
    if (checked < 100) {
      throw Error("end-to-end gradcheck: too many kink-adjacent samples");
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

std::vector<StepSweepEntry> fd_step_sweep(const std::vector<double>& steps) {
  std::vector<StepSweepEntry> out;
  for (double step : steps) {
    const GradCheckReport r = check_conv(3, step, 1.0, 1);
    out.push_back({step, r.max_rel_err});
  }
  return out;
}

SuperpositionReport check_eq6_superposition(const ArchitectureSpec& spec,
                                            std::uint64_t seed,
                                            std::int64_t size) {
  if (!has_shared_fusion(spec.kind)) {
    throw ContractError(std::string("architecture '") +
                        std::string(arch_name(spec.kind)) +
                        "' has no shared fusion parameters");
  }
  SuperpositionReport report;
  report.arch = arch_name(spec.kind);
  report.seed = seed;
  report.size = size;

  const ForwardCase c = make_forward_case(spec, seed, size);
  Graph g;
  const ForwardHandles h = build_and_forward(spec, c.image, g, c.weights);
  const NodeId loss = ops::bce_with_logits(g, h.logits, c.target);
  g.backward(loss);

  report.bitwise = true;
  for (const char* name : {"fusion.weight", "fusion.bias"}) {
    const ParamId pid = h.params.at(name);
    const Parameter& p = g.parameter(pid);
    const std::vector<Tensor> uses = g.per_use_grads(pid);
    if (std::string(name) == "fusion.weight") {
      report.use_count = uses.size();
      report.full_norm = l2_norm(p.grad);
      for (const Tensor& u : uses) {
        report.per_use_norms.push_back(l2_norm(u));
      }
    }
    Tensor acc = zeros(p.value.shape());
    for (const Tensor& u : uses) {
      acc = tensor_sum(acc, u);
    }
    report.residual = std::max(report.residual, max_abs_diff(acc, p.grad));
    report.bitwise = report.bitwise && bitwise_equal(acc, p.grad);
  }
  report.pass = report.bitwise && report.residual == 0.0 &&
                report.use_count == 2;
  return report;
}

PathDecompositionReport check_path_decomposition(const ArchitectureSpec& spec,
                                                 std::uint64_t seed,
                                                 std::int64_t size) {
  if (spec.kind == ArchKind::Vanilla || spec.kind == ArchKind::Hourglass) {
    throw ContractError("path decomposition needs a two-fusion architecture");
  }
  PathDecompositionReport report;
  report.arch = arch_name(spec.kind);
  report.seed = seed;
  report.size = size;
  report.shared = has_shared_fusion(spec.kind);

  const ForwardCase c = make_forward_case(spec, seed, size);

  // Three identical recordings; forward purity makes their values bitwise
  // equal, so node ids line up across the three graphs.
  auto run = [&](const std::set<Edge>& blocked, ForwardHandles* handles_out,
                 Graph* graph_out) {
    Graph g;
    const ForwardHandles h = build_and_forward(spec, c.image, g, c.weights);
    const NodeId loss = ops::bce_with_logits(g, h.logits, c.target);
    GradMap gm = g.backward_masked(loss, blocked);
    if (handles_out != nullptr) {
      *handles_out = h;
    }
    if (graph_out != nullptr) {
      *graph_out = std::move(g);
    }
    return gm;
  };

  ForwardHandles h;
  Graph g_full;
  const GradMap full = run({}, &h, &g_full);

  const FusionCall& second = h.fusions.at(1);
  std::size_t t_slot = second.operands.size();
  for (std::size_t i = 0; i < second.operands.size(); ++i) {
    if (second.operands[i] == *h.t) {
      t_slot = i;
    }
  }
  if (t_slot == second.operands.size()) {
    throw Error("internal: T is not an operand of the second fusion");
  }

  std::set<Edge> direct_blocked;  // keep only the T data edge
  for (std::size_t i = 0; i < second.operands.size(); ++i) {
    if (i != t_slot) {
      direct_blocked.insert({second.concat, i});
    }
  }
  direct_blocked.insert({second.conv, 1}); // the kernel use at the second call
  direct_blocked.insert({second.bias, 1}); // the bias use at the second call
  const std::set<Edge> indirect_blocked = {{second.concat, t_slot}};

  Graph g_direct;
  Graph g_indirect;
  const GradMap direct = run(direct_blocked, nullptr, &g_direct);
  const GradMap indirect = run(indirect_blocked, nullptr, &g_indirect);

  auto add_target = [&](const std::string& label, const Tensor& f,
                        const Tensor& d, const Tensor& i) {
    PathTargetReport t;
    t.target = label;
    t.full_norm = l2_norm(f);
    t.direct_norm = l2_norm(d);
    t.indirect_norm = l2_norm(i);
    t.residual = max_abs_diff(tensor_sum(d, i), f);
    report.max_residual = std::max(report.max_residual, t.residual);
    report.targets.push_back(std::move(t));
  };

  // Every parameter below the second fusion call reconstructs; the head sits
  // above it, outside the partition.
  for (const auto& [name, pid] : h.params) {
    if (name.rfind("head.", 0) == 0) {
      continue;
    }
    add_target(name, g_full.parameter(pid).grad, g_direct.parameter(pid).grad,
               g_indirect.parameter(pid).grad);
  }
  const FusionCall& first = h.fusions.at(0);
  add_target("node:X1", full.at(first.operands[0]),
             direct.at(first.operands[0]), indirect.at(first.operands[0]));
  add_target("node:X2", full.at(first.operands[1]),
             direct.at(first.operands[1]), indirect.at(first.operands[1]));
  add_target("node:T", full.at(*h.t), direct.at(*h.t), indirect.at(*h.t));

  // The indirect term, measured at the first fusion call's parameters.
  const std::string stem =
      first.weight_name.substr(0, first.weight_name.size() - 7);
  const Tensor& iw = g_indirect.parameter(h.params.at(stem + ".weight")).grad;
  const Tensor& ib = g_indirect.parameter(h.params.at(stem + ".bias")).grad;
  report.indirect_norm_first_fusion =
      std::sqrt(l2_norm(iw) * l2_norm(iw) + l2_norm(ib) * l2_norm(ib));
  report.indirect_exactly_zero = max_abs(iw) == 0.0 && max_abs(ib) == 0.0;

  report.pass = report.max_residual < report.tolerance &&
                (report.shared ? report.indirect_norm_first_fusion > 0.0
                               : report.indirect_exactly_zero);
  return report;
}

std::map<std::string, Tensor> param_grads(const ArchitectureSpec& spec,
                                          const Weights& weights,
                                          const Tensor& image,
                                          const Tensor& target) {
  Graph g;
  const ForwardHandles h = build_and_forward(spec, image, g, weights);
  const NodeId loss = ops::bce_with_logits(g, h.logits, target);
  g.backward(loss);
  std::map<std::string, Tensor> out;
  for (const auto& [name, pid] : h.params) {
    out[name] = g.parameter(pid).grad;
  }
  return out;
}

std::map<std::string, double> backbone_grad_diff(const ArchitectureSpec& a,
                                                 const Weights& wa,
                                                 const ArchitectureSpec& b,
                                                 const Weights& wb,
                                                 const Tensor& image,
                                                 const Tensor& target) {
  for (const std::string& name : backbone_param_names()) {
    if (!wa.has(name) || !wb.has(name) ||
        !bitwise_equal(wa.at(name), wb.at(name))) {
      throw ContractError("backbone weights differ between the two "
                          "architectures (" + name + ")");
    }
  }
  const auto ga = param_grads(a, wa, image, target);
  const auto gb = param_grads(b, wb, image, target);
  std::map<std::string, double> out;
  for (const std::string& name : backbone_param_names()) {
    out[name] = max_abs_diff(ga.at(name), gb.at(name));
  }
  return out;
}

IsolationReport check_isolation(std::uint64_t seed, std::int64_t size) {
  IsolationReport report;
  report.seed = seed;
  report.size = size;

  const ArchitectureSpec isolated{ArchKind::Variant2};
  const ArchitectureSpec deleted{ArchKind::Variant2, /*shortcut_as_constant=*/true};
  const ArchitectureSpec unisolated{ArchKind::NoIsolation};

  const Weights w = init_weights(isolated, mix_seed(seed, kWeightsTag));
  const Scene scene =
      generate(verify_scene_config(size, mix_seed(seed, kSceneTag)));
  const Tensor target = downsample_mask(scene.mask, 8);

  const auto g_iso = param_grads(isolated, w, scene.image, target);
  const auto g_del = param_grads(deleted, w, scene.image, target);
  const auto g_uniso = param_grads(unisolated, w, scene.image, target);

  for (const std::string& name : backbone_param_names()) {
    const double d_iso = max_abs_diff(g_iso.at(name), g_del.at(name));
    const double d_uniso = max_abs_diff(g_uniso.at(name), g_del.at(name));
    report.isolated_vs_deleted[name] = d_iso;
    report.unisolated_vs_deleted[name] = d_uniso;
    report.max_isolated_diff = std::max(report.max_isolated_diff, d_iso);
    if (name.rfind("backbone.stage1", 0) == 0) {
      report.stage1_unisolated_diff =
          std::max(report.stage1_unisolated_diff, d_uniso);
    }
  }
  report.shortcut_grad_norm = l2_norm(g_iso.at("down.weight"));
  report.pass = report.max_isolated_diff == 0.0 &&
                report.stage1_unisolated_diff > 0.0 &&
                report.shortcut_grad_norm > 0.0;
  return report;
}

} // namespace verify

} // namespace gradflow
