#include "gradflow/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <thread>

#include "gradflow/ops.hpp"
#include "gradflow/verify.hpp"

namespace gradflow {
namespace harness {

namespace {

constexpr std::uint64_t kWeightsTag = 0x57;
constexpr std::uint64_t kTrainPoolTag = 0x7121;
constexpr std::uint64_t kEvalPoolTag = 0xe7a1;

Tensor stack_batch(const std::vector<const Tensor*>& items) {
  const Shape& s = items.front()->shape();
  Tensor out({static_cast<std::int64_t>(items.size()) * s.n, s.c, s.h, s.w});
  const std::int64_t stride = s.n * s.c * s.h * s.w;
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i]->data().begin(), items[i]->data().end(),
              out.data().begin() + static_cast<std::int64_t>(i) * stride);
  }
  return out;
}

} // namespace

void sgd_step(Weights& params, const std::map<std::string, Tensor>& grads,
              SgdState& state, const OptimizerConfig& cfg) {
  for (auto& [name, w] : params.items()) {
    const auto it = grads.find(name);
    if (it == grads.end()) {
      throw ContractError("sgd_step: missing gradient for '" + name + "'");
    }
    const Tensor& g = it->second;
    if (g.shape() != w.shape()) {
      throw ContractError("sgd_step: gradient shape " + g.shape().str() +
                          " does not match weight '" + name + "' " +
                          w.shape().str());
    }
    auto [vit, inserted] = state.velocity.try_emplace(name, zeros(w.shape()));
    Tensor& v = vit->second;
    auto vd = v.data();
    auto wd = w.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < wd.size(); ++i) {
      vd[i] = cfg.momentum * vd[i] + (gd[i] + cfg.weight_decay * wd[i]);
      wd[i] -= cfg.lr * vd[i];
    }
  }
}

Metrics evaluate(const ArchitectureSpec& spec, const Weights& weights,
                 const std::vector<Scene>& scenes) {
  if (scenes.empty()) {
    throw ValueError("evaluate: scenes must be non-empty");
  }
  std::vector<const Tensor*> images;
  std::vector<const Tensor*> masks;
  std::vector<Tensor> coarse;
  coarse.reserve(scenes.size());
  for (const Scene& s : scenes) {
    images.push_back(&s.image);
    coarse.push_back(downsample_mask(s.mask, 8));
  }
  for (const Tensor& c : coarse) {
    masks.push_back(&c);
  }
  const Tensor image_batch = stack_batch(images);
  const Tensor target_batch = stack_batch(masks);

  Graph g;
  const ForwardHandles h = build_and_forward(spec, image_batch, g, weights);
  const Tensor& logits = g.value(h.logits);

  std::int64_t tp = 0, fp = 0, fn = 0;
  auto z = logits.data();
  auto t = target_batch.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    const bool pred = z[i] > 0.0; // sigmoid(z) > 0.5
    const bool pos = t[i] != 0.0;
    tp += pred && pos;
    fp += pred && !pos;
    fn += !pred && pos;
  }
  Metrics m;
  m.precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
  m.recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

void RunConfig::validate() const {
  if (steps < 1) {
    throw ValueError("steps must be >= 1");
  }
  if (seeds.empty()) {
    throw ValueError("seeds list must be non-empty");
  }
  if (batch < 1 || train_scenes < 1 || eval_scenes < 1 || eval_interval < 1) {
    throw ValueError("batch, pools and eval_interval must be >= 1");
  }
  scene.validate();
}

std::vector<Scene> train_pool(const RunConfig& cfg, std::uint64_t seed) {
  std::vector<Scene> pool;
  pool.reserve(static_cast<std::size_t>(cfg.train_scenes));
  const std::uint64_t base = mix_seed(seed, kTrainPoolTag);
  for (int i = 0; i < cfg.train_scenes; ++i) {
    SceneConfig sc = cfg.scene;
    sc.seed = mix_seed(base, static_cast<std::uint64_t>(i));
    pool.push_back(generate(sc));
  }
  return pool;
}

std::vector<Scene> eval_pool(const RunConfig& cfg, std::uint64_t seed) {
  std::vector<Scene> pool;
  pool.reserve(static_cast<std::size_t>(cfg.eval_scenes));
  const std::uint64_t base = mix_seed(seed, kEvalPoolTag);
  for (int i = 0; i < cfg.eval_scenes; ++i) {
    SceneConfig sc = cfg.scene;
    sc.seed = mix_seed(base, static_cast<std::uint64_t>(i));
    pool.push_back(generate(sc));
  }
  return pool;
}

std::uint64_t weights_hash(const Weights& w) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const unsigned char* p, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, value] : w.items()) {
    eat(reinterpret_cast<const unsigned char*>(name.data()), name.size());
    for (double x : value.data()) {
      const std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
      unsigned char buf[8];
      for (int i = 0; i < 8; ++i) {
        buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
      }
      eat(buf, 8);
    }
  }
  return h;
}

RunHistory train(const RunConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  RunHistory history;

  Weights weights = init_weights(cfg.arch, mix_seed(seed, kWeightsTag));
  const std::vector<Scene> pool = train_pool(cfg, seed);
  const std::vector<Scene> evals = eval_pool(cfg, seed);

  std::vector<Tensor> coarse;
  coarse.reserve(pool.size());
  for (const Scene& s : pool) {
    coarse.push_back(downsample_mask(s.mask, 8));
  }

  SgdState state;
  const int decay_step =
      static_cast<int>(cfg.opt.lr_decay_at * static_cast<double>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> images;
    std::vector<const Tensor*> targets;
    for (int j = 0; j < cfg.batch; ++j) {
      const std::size_t idx = static_cast<std::size_t>(
          (static_cast<std::int64_t>(step) * cfg.batch + j) %
          static_cast<std::int64_t>(pool.size()));
      images.push_back(&pool[idx].image);
      targets.push_back(&coarse[idx]);
    }
    const Tensor image_batch = stack_batch(images);
    const Tensor target_batch = stack_batch(targets);

    Graph g;
    const ForwardHandles h = build_and_forward(cfg.arch, image_batch, g, weights);
    const NodeId loss = ops::bce_with_logits(g, h.logits, target_batch);
    const double loss_value = g.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      history.diverged = true;
      history.diverged_step = step;
      break;
    }
    history.losses.push_back(loss_value);
    g.backward(loss);

    std::map<std::string, Tensor> grads;
    for (const auto& [name, pid] : h.params) {
      grads[name] = g.parameter(pid).grad;
    }
    OptimizerConfig opt = cfg.opt;
    if (step >= decay_step) {
      opt.lr = cfg.opt.lr * cfg.opt.lr_decay_factor;
    }
    sgd_step(weights, grads, state, opt);

    if ((step + 1) % cfg.eval_interval == 0 || step == cfg.steps - 1) {
      history.evals.push_back({step + 1, evaluate(cfg.arch, weights, evals)});
    }
  }
  history.final_param_hash = weights_hash(weights);
  return history;
}

namespace {

double median(std::vector<double> xs) {
  if (xs.empty()) {
    return std::nan("");
  }
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

int median_int(std::vector<int> xs) {
  if (xs.empty()) {
    return -1;
  }
  std::sort(xs.begin(), xs.end());
  return xs[xs.size() / 2];
}

} // namespace

ComparisonReport variant_compare(const RunConfig& base,
                                 const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 5) {
    throw ContractError("variant_compare needs at least 5 seeds");
  }
  base.validate();
  const std::vector<ArchKind> kinds = all_arch_kinds();

  struct Job {
    ArchKind kind;
    std::uint64_t seed;
    RunHistory history;
  };
  std::vector<Job> jobs;
  for (ArchKind k : kinds) {
    for (std::uint64_t s : seeds) {
      jobs.push_back({k, s, {}});
    }
  }

  std::atomic<std::size_t> next{0};
  const unsigned n_threads =
      std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(),
                                      static_cast<unsigned>(jobs.size())));
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) {
        return;
      }
      RunConfig cfg = base;
      cfg.arch = ArchitectureSpec{jobs[i].kind};
      jobs[i].history = train(cfg, jobs[i].seed);
    }
  };
  std::vector<std::thread> threads;
  for (unsigned t = 0; t < n_threads; ++t) {
    threads.emplace_back(worker);
  }
  for (std::thread& t : threads) {
    t.join();
  }

  ComparisonReport report;

  // Vanilla's median final F1 is the crossing reference for every run.
  std::vector<double> vanilla_f1;
  for (const Job& job : jobs) {
    if (job.kind == ArchKind::Vanilla && !job.history.diverged &&
        !job.history.evals.empty()) {
      vanilla_f1.push_back(job.history.evals.back().metrics.f1);
    }
  }
  const double vanilla_median = median(vanilla_f1);

  std::map<std::string, std::vector<double>> f1_by_variant;
  std::map<std::string, std::vector<int>> crossing_by_variant;
  for (const Job& job : jobs) {
    CompareRecord rec;
    rec.variant = arch_name(job.kind);
    rec.seed = job.seed;
    rec.diverged = job.history.diverged;
    if (job.history.diverged) {
      report.notes.push_back("run (" + rec.variant + ", seed " +
                             std::to_string(job.seed) + ") diverged at step " +
                             std::to_string(job.history.diverged_step) +
                             " and is excluded from medians");
    } else {
      rec.final_loss = job.history.losses.empty() ? 0.0
                                                  : job.history.losses.back();
      if (!job.history.evals.empty()) {
        rec.final_metrics = job.history.evals.back().metrics;
      }
      for (const EvalRecord& e : job.history.evals) {
        if (e.metrics.f1 >= vanilla_median) {
          rec.crossing_step = e.step;
          break;
        }
      }
      f1_by_variant[rec.variant].push_back(rec.final_metrics.f1);
      if (rec.crossing_step >= 0) {
        crossing_by_variant[rec.variant].push_back(rec.crossing_step);
      }
    }
    report.records.push_back(std::move(rec));
  }

  for (ArchKind k : kinds) {
    const std::string name(arch_name(k));
    report.median_final_f1[name] = median(f1_by_variant[name]);
    report.median_crossing_step[name] = median_int(crossing_by_variant[name]);
  }

  const double v2 = report.median_final_f1["variant2"];
  const double v1 = report.median_final_f1["variant1"];
  const double van = report.median_final_f1["vanilla"];
  const double maxd = report.median_final_f1["maxpool-down"];
  const double avgd = report.median_final_f1["avgpool-down"];
  report.ordering_ok = std::isfinite(v2) && std::isfinite(v1) &&
                       std::isfinite(van) && std::isfinite(maxd) &&
                       std::isfinite(avgd) && v2 >= v1 && v1 >= van &&
                       v2 >= maxd && v2 >= avgd;
  return report;
}

} // namespace harness
} // namespace gradflow
