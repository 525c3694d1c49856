#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradflow/harness.hpp"
#include "gradflow/verify.hpp"

namespace gradflow {

namespace {

using nlohmann::json;
using namespace harness;

/// JSON-lines sink: stdout when the path is empty or "-".
class ReportSink {
public:
  explicit ReportSink(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path, std::ios::trunc);
      if (!file_) {
        throw IoError("cannot open report output: " + path);
      }
      os_ = &file_;
    } else {
      os_ = &std::cout;
    }
  }

  void write(const json& j) { (*os_) << j.dump() << '\n'; }

private:
  std::ostream* os_ = nullptr;
  std::ofstream file_;
};

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open config file: " + path);
  }
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValueError("config line " + std::to_string(lineno) +
                       " is not key=value: " + line);
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  std::istringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      seeds.push_back(std::stoull(item));
    }
  }
  return seeds;
}

ArchitectureSpec arch_from_name(const std::string& name) {
  const auto kind = parse_arch(name);
  if (!kind) {
    throw ValueError("unknown architecture '" + name + "'");
  }
  return ArchitectureSpec{*kind};
}

void apply_config(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "arch") {
      cfg.arch = arch_from_name(value);
    } else if (key == "steps") {
      cfg.steps = std::stoi(value);
    } else if (key == "eval_interval") {
      cfg.eval_interval = std::stoi(value);
    } else if (key == "batch") {
      cfg.batch = std::stoi(value);
    } else if (key == "train_scenes") {
      cfg.train_scenes = std::stoi(value);
    } else if (key == "eval_scenes") {
      cfg.eval_scenes = std::stoi(value);
    } else if (key == "seeds") {
      cfg.seeds = parse_seed_list(value);
    } else if (key == "out") {
      cfg.out = value;
    } else if (key == "lr") {
      cfg.opt.lr = std::stod(value);
    } else if (key == "momentum") {
      cfg.opt.momentum = std::stod(value);
    } else if (key == "weight_decay") {
      cfg.opt.weight_decay = std::stod(value);
    } else if (key == "lr_decay_factor") {
      cfg.opt.lr_decay_factor = std::stod(value);
    } else if (key == "lr_decay_at") {
      cfg.opt.lr_decay_at = std::stod(value);
    } else if (key == "size") {
      cfg.scene.size = std::stoll(value);
    } else if (key == "n_targets") {
      cfg.scene.n_targets = std::stoi(value);
    } else if (key == "target_sigma") {
      cfg.scene.target_sigma = std::stod(value);
    } else if (key == "target_amplitude") {
      cfg.scene.target_amplitude = std::stod(value);
    } else if (key == "clutter_scale") {
      cfg.scene.clutter_scale = std::stod(value);
    } else {
      throw ValueError("unknown config key '" + key + "'");
    }
  }
}

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "0x%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

json metrics_json(const Metrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  (void)seed; // the battery pins its own per-op seed streams
  ReportSink sink(out);
  bool all_pass = true;

  const auto oracle = verify::validate_oracle();
  all_pass &= oracle.pass;
  sink.write({{"check", "fd_oracle_self"},
              {"mean_max_abs_err", oracle.mean_max_abs_err},
              {"quadratic_max_abs_err", oracle.quadratic_max_abs_err},
              {"tolerance", oracle.tolerance},
              {"pass", oracle.pass}});

  auto reports = verify::gradcheck_primitives();
  reports.push_back(verify::gradcheck_end_to_end(ArchKind::Variant2));
  for (const auto& r : reports) {
    all_pass &= r.pass;
    sink.write({{"check", "gradcheck"},
                {"op", r.op},
                {"max_rel_err", r.max_rel_err},
                {"worst_coord", r.worst_coord},
                {"seeds", r.seeds},
                {"step", r.step},
                {"tolerance", r.tolerance},
                {"pass", r.pass}});
  }

  json sweep = json::array();
  for (const auto& e : verify::fd_step_sweep()) {
    sweep.push_back({{"step", e.step}, {"max_rel_err", e.max_rel_err}});
  }
  sink.write({{"check", "fd_step_sweep"}, {"op", "conv2d_3x3"},
              {"entries", sweep}});

  return all_pass ? 0 : 1;
}

int cmd_isolate_test(std::uint64_t seed, std::int64_t size,
                     const std::string& out) {
  ReportSink sink(out);
  const auto r = verify::check_isolation(seed, size);
  sink.write({{"check", "isolation"},
              {"seed", r.seed},
              {"size", r.size},
              {"isolated_vs_deleted", r.isolated_vs_deleted},
              {"unisolated_vs_deleted", r.unisolated_vs_deleted},
              {"max_isolated_diff", r.max_isolated_diff},
              {"stage1_unisolated_diff", r.stage1_unisolated_diff},
              {"shortcut_grad_norm", r.shortcut_grad_norm},
              {"pass", r.pass}});
  return r.pass ? 0 : 1;
}

int cmd_decompose(const std::string& arch, std::uint64_t seed,
                  std::int64_t size, const std::string& out) {
  ReportSink sink(out);
  const ArchitectureSpec spec = arch_from_name(arch);
  bool all_pass = true;

  if (has_shared_fusion(spec.kind)) {
    const auto s = verify::check_eq6_superposition(spec, seed, size);
    all_pass &= s.pass;
    sink.write({{"check", "superposition"},
                {"arch", s.arch},
                {"seed", s.seed},
                {"size", s.size},
                {"use_count", s.use_count},
                {"residual", s.residual},
                {"bitwise", s.bitwise},
                {"full_norm", s.full_norm},
                {"per_use_norms", s.per_use_norms},
                {"pass", s.pass}});
  }

  const auto p = verify::check_path_decomposition(spec, seed, size);
  all_pass &= p.pass;
  json targets = json::array();
  for (const auto& t : p.targets) {
    targets.push_back({{"target", t.target},
                       {"full_norm", t.full_norm},
                       {"direct_norm", t.direct_norm},
                       {"indirect_norm", t.indirect_norm},
                       {"residual", t.residual}});
  }
  sink.write({{"check", "path_decomposition"},
              {"arch", p.arch},
              {"seed", p.seed},
              {"size", p.size},
              {"shared", p.shared},
              {"max_residual", p.max_residual},
              {"indirect_norm_first_fusion", p.indirect_norm_first_fusion},
              {"indirect_exactly_zero", p.indirect_exactly_zero},
              {"tolerance", p.tolerance},
              {"targets", targets},
              {"pass", p.pass}});
  return all_pass ? 0 : 1;
}

int cmd_variant_compare(const RunConfig& cfg) {
  ReportSink sink(cfg.out);
  const auto report = variant_compare(cfg, cfg.seeds);
  for (const auto& r : report.records) {
    sink.write({{"record", "variant_seed"},
                {"variant", r.variant},
                {"seed", r.seed},
                {"final_loss", r.final_loss},
                {"final_metrics", metrics_json(r.final_metrics)},
                {"crossing_step", r.crossing_step},
                {"diverged", r.diverged}});
  }
  sink.write({{"record", "summary"},
              {"median_final_f1", report.median_final_f1},
              {"median_crossing_step", report.median_crossing_step},
              {"ordering_ok", report.ordering_ok},
              {"notes", report.notes}});
  return report.ordering_ok ? 0 : 1;
}

int cmd_train(const RunConfig& cfg, std::uint64_t seed) {
  ReportSink sink(cfg.out);
  const RunHistory h = train(cfg, seed);
  json evals = json::array();
  for (const auto& e : h.evals) {
    evals.push_back({{"step", e.step},
                     {"precision", e.metrics.precision},
                     {"recall", e.metrics.recall},
                     {"f1", e.metrics.f1}});
  }
  sink.write({{"record", "train"},
              {"arch", arch_name(cfg.arch.kind)},
              {"seed", seed},
              {"steps", cfg.steps},
              {"losses", h.losses},
              {"evals", evals},
              {"final_param_hash", hex64(h.final_param_hash)},
              {"diverged", h.diverged},
              {"diverged_step", h.diverged_step}});
  return h.diverged ? 1 : 0;
}

int cmd_flops(const std::string& arch, std::int64_t size,
              const std::string& out) {
  ReportSink sink(out);
  const ArchitectureSpec spec = arch_from_name(arch);
  const Shape input{1, 1, size, size};
  sink.write({{"record", "flops"},
              {"arch", arch_name(spec.kind)},
              {"input", {input.n, input.c, input.h, input.w}},
              {"params", count_params(spec)},
              {"flops", count_flops(spec, input)}});
  return 0;
}

int cmd_gen_data(const RunConfig& cfg, std::uint64_t seed, int count,
                 const std::string& dir) {
  if (count < 1) {
    throw ValueError("gen-data: count must be >= 1");
  }
  if (dir.empty()) {
    throw ValueError("gen-data: --out directory is required");
  }
  std::vector<SceneConfig> configs;
  configs.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneConfig sc = cfg.scene;
    sc.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    configs.push_back(sc);
  }
  const std::string manifest = make_dataset(configs, dir);
  ReportSink sink("");
  sink.write({{"record", "gen_data"},
              {"dir", dir},
              {"count", count},
              {"manifest", manifest}});
  return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"gradient-flow laboratory for feature-pyramid architectures"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::string arch = "variant2";
  std::uint64_t seed = 0;
  std::int64_t size = 64;
  std::string seeds_csv;
  int steps = -1;
  int count = 100;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value config file");
    sub->add_option("--out", out, "report destination (default stdout)");
    sub->add_option("--seed", seed, "base seed");
  };

  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "finite-difference checks of every primitive");
  add_common(gradcheck);

  CLI::App* isolate = app.add_subcommand(
      "isolate-test", "barrier soundness of the low-level shortcut");
  add_common(isolate);
  isolate->add_option("--size", size, "input H=W");

  CLI::App* decompose = app.add_subcommand(
      "decompose", "superposition and masked-path decomposition reports");
  add_common(decompose);
  decompose->add_option("--arch", arch, "architecture name");
  decompose->add_option("--size", size, "input H=W");

  CLI::App* compare = app.add_subcommand(
      "variant-compare", "train all architecture variants and compare");
  add_common(compare);
  compare->add_option("--seeds", seeds_csv, "comma-separated seed list");

  CLI::App* train_cmd = app.add_subcommand("train", "one training run");
  add_common(train_cmd);
  train_cmd->add_option("--arch", arch, "architecture name");
  train_cmd->add_option("--steps", steps, "training steps");

  CLI::App* flops = app.add_subcommand(
      "flops", "parameter and FLOP counts for an architecture");
  add_common(flops);
  flops->add_option("--arch", arch, "architecture name");
  flops->add_option("--size", size, "input H=W");

  CLI::App* gen = app.add_subcommand("gen-data", "write a scene dataset");
  add_common(gen);
  gen->add_option("--count", count, "number of scenes");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) {
      apply_config(cfg, parse_config_file(config_path));
    }
    if (!out.empty()) {
      cfg.out = out;
    }
    if (!seeds_csv.empty()) {
      cfg.seeds = parse_seed_list(seeds_csv);
    }
    if (steps > 0) {
      cfg.steps = steps;
    }

    if (gradcheck->parsed()) {
      return cmd_gradcheck(seed, cfg.out);
    }
    if (isolate->parsed()) {
      return cmd_isolate_test(seed, size, cfg.out);
    }
    if (decompose->parsed()) {
      return cmd_decompose(arch, seed, size, cfg.out);
    }
    if (compare->parsed()) {
      return cmd_variant_compare(cfg);
    }
    if (train_cmd->parsed()) {
      if (train_cmd->count("--arch") > 0) {
        cfg.arch = arch_from_name(arch);
      }
      return cmd_train(cfg, train_cmd->count("--seed") > 0 ? seed
                                                           : cfg.seeds.front());
    }
    if (flops->parsed()) {
      return cmd_flops(arch, size, cfg.out);
    }
    if (gen->parsed()) {
      return cmd_gen_data(cfg, seed, count, cfg.out);
    }
    return 2;
  } catch (const ValueError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

} // namespace gradflow
