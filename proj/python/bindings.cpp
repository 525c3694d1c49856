#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "gradflow/harness.hpp"
#include "gradflow/ops.hpp"
#include "gradflow/synth.hpp"
#include "gradflow/verify.hpp"

namespace py = pybind11;
using namespace gradflow;

namespace {

Tensor tensor_from_numpy(py::array_t<double, py::array::c_style | py::array::forcecast> arr) {
  if (arr.ndim() != 4) {
    throw ShapeError("expected a rank-4 array (n, c, h, w)");
  }
  const Shape shape{arr.shape(0), arr.shape(1), arr.shape(2), arr.shape(3)};
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> tensor_to_numpy(const Tensor& t) {
  const Shape& s = t.shape();
  py::array_t<double> arr({s.n, s.c, s.h, s.w});
  std::copy(t.data().begin(), t.data().end(), arr.mutable_data());
  return arr;
}

ArchitectureSpec spec_from_name(const std::string& name) {
  const auto kind = parse_arch(name);
  if (!kind) {
    throw ValueError("unknown architecture '" + name + "'");
  }
  return ArchitectureSpec{*kind};
}

py::dict metrics_dict(const harness::Metrics& m) {
  py::dict d;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["f1"] = m.f1;
  return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "gradflow: reverse-mode autodiff laboratory for feature-pyramid "
            "gradient-flow experiments";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ShapeError>(m, "GfShapeError");
  py::register_exception<ValueError>(m, "GfValueError");
  py::register_exception<FormatError>(m, "GfFormatError");
  py::register_exception<GraphError>(m, "GfGraphError");
  py::register_exception<StateError>(m, "GfStateError");
  py::register_exception<ContractError>(m, "GfContractError");

  py::class_<Tensor>(m, "Tensor")
      .def(py::init(&tensor_from_numpy), py::arg("array"))
      .def_static("from_numpy", &tensor_from_numpy, py::arg("array"))
      .def("numpy", &tensor_to_numpy)
      .def_property_readonly("shape",
                             [](const Tensor& t) {
                               const Shape& s = t.shape();
                               return py::make_tuple(s.n, s.c, s.h, s.w);
                             })
      .def("__len__", &Tensor::size);

  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("uniform", &Rng::uniform)
      .def("normal", &Rng::normal, py::arg("stddev"));

  m.def("zeros", [](std::int64_t n, std::int64_t c, std::int64_t h,
                    std::int64_t w) { return zeros({n, c, h, w}); });
  m.def("randn",
        [](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w,
           Rng& rng, double std) {
          return randn({n, c, h, w}, rng, std);
        },
        py::arg("n"), py::arg("c"), py::arg("h"), py::arg("w"), py::arg("rng"),
        py::arg("std"));
  m.def("save_container", &save_container, py::arg("tensor"), py::arg("path"));
  m.def("load_container", &load_container, py::arg("path"));

  py::class_<GradMap>(m, "GradMap")
      .def("at", [](const GradMap& gm, NodeId id) {
        return tensor_to_numpy(gm.at(id));
      });

  py::class_<Graph>(m, "Graph")
      .def(py::init<>())
      .def("add_input",
           [](Graph& g, py::array_t<double> arr) {
             return g.add_input(tensor_from_numpy(arr));
           })
      .def("add_constant",
           [](Graph& g, py::array_t<double> arr) {
             return g.add_constant(tensor_from_numpy(arr));
           })
      .def("add_parameter",
           [](Graph& g, const std::string& name, py::array_t<double> arr) {
             return g.add_parameter(name, tensor_from_numpy(arr));
           })
      .def("stop_gradient", &Graph::stop_gradient)
      .def("value",
           [](const Graph& g, NodeId id) { return tensor_to_numpy(g.value(id)); })
      .def("num_nodes", &Graph::num_nodes)
      .def("backward", &Graph::backward, py::arg("loss"))
      .def("backward_masked",
           [](Graph& g, NodeId loss,
              const std::vector<std::pair<NodeId, std::size_t>>& edges) {
             std::set<Edge> blocked;
             for (const auto& [consumer, slot] : edges) {
               blocked.insert({consumer, slot});
             }
             return g.backward_masked(loss, blocked);
           },
           py::arg("loss"), py::arg("blocked_edges"))
      .def("param_grad",
           [](const Graph& g, const std::string& name) {
             const Parameter* p = g.find_parameter(name);
             if (p == nullptr) {
               throw ValueError("no parameter named '" + name + "'");
             }
             return tensor_to_numpy(p->grad);
           })
      .def("param_use_sites",
           [](const Graph& g, const std::string& name) {
             const Parameter* p = g.find_parameter(name);
             if (p == nullptr) {
               throw ValueError("no parameter named '" + name + "'");
             }
             return p->use_sites;
           })
      .def("per_use_grads",
           [](const Graph& g, ParamId id) {
             std::vector<py::array_t<double>> out;
             for (const Tensor& t : g.per_use_grads(id)) {
               out.push_back(tensor_to_numpy(t));
             }
             return out;
           })
      .def("reaches_backward", &Graph::reaches_backward)
      .def("dump", &Graph::dump);

  auto ops_mod = m.def_submodule("ops", "tape-recording primitives");
  ops_mod.def("conv2d", &ops::conv2d);
  ops_mod.def("bias_add", &ops::bias_add);
  ops_mod.def("space_to_depth2", &ops::space_to_depth2);
  ops_mod.def("depth_to_space2", &ops::depth_to_space2);
  ops_mod.def("upsample_nearest2", &ops::upsample_nearest2);
  ops_mod.def("maxpool2", &ops::maxpool2);
  ops_mod.def("avgpool2", &ops::avgpool2);
  ops_mod.def("relu", &ops::relu);
  ops_mod.def("add", &ops::add);
  ops_mod.def("concat_channels",
              [](Graph& g, const std::vector<NodeId>& xs) {
                return ops::concat_channels(g, xs);
              });
  ops_mod.def("mean_scalar", &ops::mean_scalar);
  ops_mod.def("bce_with_logits",
              [](Graph& g, NodeId logits, py::array_t<double> target) {
                return ops::bce_with_logits(g, logits,
                                            tensor_from_numpy(target));
              });

  py::class_<Weights>(m, "Weights")
      .def("names",
           [](const Weights& w) {
             std::vector<std::string> names;
             for (const auto& [name, value] : w.items()) {
               names.push_back(name);
             }
             return names;
           })
      .def("__getitem__",
           [](const Weights& w, const std::string& name) {
             return tensor_to_numpy(w.at(name));
           })
      .def("__setitem__",
           [](Weights& w, const std::string& name, py::array_t<double> arr) {
             w.at(name) = tensor_from_numpy(arr);
           });

  py::class_<FusionCall>(m, "FusionCall")
      .def_readonly("operands", &FusionCall::operands)
      .def_readonly("concat", &FusionCall::concat)
      .def_readonly("conv", &FusionCall::conv)
      .def_readonly("bias", &FusionCall::bias)
      .def_readonly("out", &FusionCall::out)
      .def_readonly("weight_name", &FusionCall::weight_name);

  py::class_<ForwardHandles>(m, "ForwardHandles")
      .def_readonly("image", &ForwardHandles::image)
      .def_readonly("c2", &ForwardHandles::c2)
      .def_readonly("c3", &ForwardHandles::c3)
      .def_readonly("c4", &ForwardHandles::c4)
      .def_readonly("p3", &ForwardHandles::p3)
      .def_readonly("p4", &ForwardHandles::p4)
      .def_readonly("p4_up", &ForwardHandles::p4_up)
      .def_readonly("shortcut", &ForwardHandles::shortcut)
      .def_readonly("t", &ForwardHandles::t)
      .def_readonly("p3_prime", &ForwardHandles::p3_prime)
      .def_readonly("logits", &ForwardHandles::logits)
      .def_readonly("fusions", &ForwardHandles::fusions)
      .def_readonly("params", &ForwardHandles::params);

  m.def("arch_names", []() {
    std::vector<std::string> names;
    for (ArchKind k : all_arch_kinds()) {
      names.emplace_back(arch_name(k));
    }
    return names;
  });
  m.def("init_weights",
        [](const std::string& arch, std::uint64_t seed) {
          return init_weights(spec_from_name(arch), seed);
        },
        py::arg("arch"), py::arg("seed"));
  m.def("build_and_forward",
        [](const std::string& arch, py::array_t<double> image, Graph& g,
           const Weights& w) {
          return build_and_forward(spec_from_name(arch),
                                   tensor_from_numpy(image), g, w);
        },
        py::arg("arch"), py::arg("image"), py::arg("graph"),
        py::arg("weights"));
  m.def("count_params", [](const std::string& arch) {
    return count_params(spec_from_name(arch));
  });
  m.def("count_flops", [](const std::string& arch, std::int64_t size) {
    return count_flops(spec_from_name(arch), {1, 1, size, size});
  });

  auto synth_mod = m.def_submodule("synth", "scene generator");
  py::class_<SceneConfig>(synth_mod, "SceneConfig")
      .def(py::init([](std::int64_t size, int n_targets, double sigma,
                       double amplitude, double clutter, std::uint64_t seed) {
             SceneConfig c;
             c.size = size;
             c.n_targets = n_targets;
             c.target_sigma = sigma;
             c.target_amplitude = amplitude;
             c.clutter_scale = clutter;
             c.seed = seed;
             return c;
           }),
           py::arg("size") = 64, py::arg("n_targets") = 2,
           py::arg("target_sigma") = 1.0, py::arg("target_amplitude") = 0.8,
           py::arg("clutter_scale") = 0.3, py::arg("seed") = 0);
  synth_mod.def("generate", [](const SceneConfig& cfg) {
    const Scene s = generate(cfg);
    py::dict d;
    d["image"] = tensor_to_numpy(s.image);
    d["mask"] = tensor_to_numpy(s.mask);
    py::list centers;
    for (const TargetInfo& t : s.centers) {
      centers.append(py::make_tuple(t.y, t.x, t.sigma, t.amplitude));
    }
    d["centers"] = centers;
    return d;
  });
  synth_mod.def("downsample_mask",
                [](py::array_t<double> mask, std::int64_t stride) {
                  return tensor_to_numpy(
                      downsample_mask(tensor_from_numpy(mask), stride));
                },
                py::arg("mask"), py::arg("stride") = 8);

  auto verify_mod = m.def_submodule("verify", "oracles and experiment checks");
  verify_mod.def("validate_oracle", []() {
    const auto r = verify::validate_oracle();
    py::dict d;
    d["mean_max_abs_err"] = r.mean_max_abs_err;
    d["quadratic_max_abs_err"] = r.quadratic_max_abs_err;
    d["pass"] = r.pass;
    return d;
  });
  verify_mod.def("gradcheck_primitives", []() {
    py::list out;
    for (const auto& r : verify::gradcheck_primitives()) {
      py::dict d;
      d["op"] = r.op;
      d["max_rel_err"] = r.max_rel_err;
      d["pass"] = r.pass;
      out.append(d);
    }
    return out;
  });
  verify_mod.def("check_superposition",
                 [](const std::string& arch, std::uint64_t seed,
                    std::int64_t size) {
                   const auto r = verify::check_eq6_superposition(
                       spec_from_name(arch), seed, size);
                   py::dict d;
                   d["arch"] = r.arch;
                   d["use_count"] = r.use_count;
                   d["residual"] = r.residual;
                   d["bitwise"] = r.bitwise;
                   d["pass"] = r.pass;
                   return d;
                 },
                 py::arg("arch") = "variant2", py::arg("seed") = 0,
                 py::arg("size") = 64);
  verify_mod.def("check_path_decomposition",
                 [](const std::string& arch, std::uint64_t seed,
                    std::int64_t size) {
                   const auto r = verify::check_path_decomposition(
                       spec_from_name(arch), seed, size);
                   py::dict d;
                   d["arch"] = r.arch;
                   d["max_residual"] = r.max_residual;
                   d["indirect_norm_first_fusion"] =
                       r.indirect_norm_first_fusion;
                   d["indirect_exactly_zero"] = r.indirect_exactly_zero;
                   d["shared"] = r.shared;
                   d["pass"] = r.pass;
                   return d;
                 },
                 py::arg("arch") = "variant2", py::arg("seed") = 0,
                 py::arg("size") = 64);
  verify_mod.def("check_isolation",
                 [](std::uint64_t seed, std::int64_t size) {
                   const auto r = verify::check_isolation(seed, size);
                   py::dict d;
                   d["max_isolated_diff"] = r.max_isolated_diff;
                   d["stage1_unisolated_diff"] = r.stage1_unisolated_diff;
                   d["shortcut_grad_norm"] = r.shortcut_grad_norm;
                   d["pass"] = r.pass;
                   return d;
                 },
                 py::arg("seed") = 0, py::arg("size") = 64);

  auto harness_mod = m.def_submodule("harness", "training and comparison");
  harness_mod.def("train",
                  [](const std::string& arch, std::uint64_t seed, int steps,
                     std::int64_t size, int eval_interval) {
                    harness::RunConfig cfg;
                    cfg.arch = spec_from_name(arch);
                    cfg.scene.size = size;
                    cfg.steps = steps;
                    cfg.eval_interval = eval_interval;
                    const harness::RunHistory h = harness::train(cfg, seed);
                    py::dict d;
                    d["losses"] = h.losses;
                    py::list evals;
                    for (const auto& e : h.evals) {
                      py::dict ed = metrics_dict(e.metrics);
                      ed["step"] = e.step;
                      evals.append(ed);
                    }
                    d["evals"] = evals;
                    d["final_param_hash"] = h.final_param_hash;
                    d["diverged"] = h.diverged;
                    return d;
                  },
                  py::arg("arch") = "variant2", py::arg("seed") = 0,
                  py::arg("steps") = 100, py::arg("size") = 64,
                  py::arg("eval_interval") = 50);
}
