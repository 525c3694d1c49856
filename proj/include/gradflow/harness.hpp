#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gradflow/bpfpn.hpp"
#include "gradflow/synth.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {
namespace harness {

/// Heavy-ball SGD with coupled weight decay:
///   v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
/// Defaults follow the reference training recipe (lr 0.01, momentum 0.937,
/// weight decay 5e-4, one 0.1 decay applied at 80% of the step budget).
struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.937;
  double weight_decay = 5e-4;
  double lr_decay_factor = 0.1;
  double lr_decay_at = 0.8; // fraction of total steps
};

struct SgdState {
  std::map<std::string, Tensor> velocity; // zero-initialized on first use
};

/// One in-place update of every weight tensor. Gradient shapes must match
/// (ContractError otherwise).
void sgd_step(Weights& params, const std::map<std::string, Tensor>& grads,
              SgdState& state, const OptimizerConfig& cfg);

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Pixel metrics over all stride-8 cells of all scenes: a cell is predicted
/// positive iff sigmoid(logit) > 0.5; F1 is 0 when precision + recall is 0.
Metrics evaluate(const ArchitectureSpec& spec, const Weights& weights,
                 const std::vector<Scene>& scenes);

struct RunConfig {
  ArchitectureSpec arch;
  // Scene template; per-scene seeds derive from the run seed. The defaults
  // are tuned so the task is learnable within the 500-step budget without
  // saturating.
  SceneConfig scene{64, 3, 1.25, 1.0, 0.1, 0};
  int steps = 500;
  int eval_interval = 50;
  int batch = 4;
  int train_scenes = 200;
  int eval_scenes = 50;
  OptimizerConfig opt;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::string out; // report destination; empty means stdout

  void validate() const;
};

struct EvalRecord {
  int step;
  Metrics metrics;
};

struct RunHistory {
  std::vector<double> losses;
  std::vector<EvalRecord> evals;
  std::uint64_t final_param_hash = 0;
  bool diverged = false;
  int diverged_step = -1;
};

/// Deterministic training run: per step, stack the next `batch` pool scenes,
/// forward the chosen architecture, take the loss, backward, and apply one
/// SGD step. A non-finite loss aborts with the step index recorded.
RunHistory train(const RunConfig& cfg, std::uint64_t seed);

/// FNV-1a 64 over the weight names and raw little-endian value bytes, in
/// registry order.
std::uint64_t weights_hash(const Weights& w);

struct CompareRecord {
  std::string variant;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  Metrics final_metrics;
  int crossing_step = -1; // first eval step reaching vanilla's median final F1
  bool diverged = false;
};

struct ComparisonReport {
  std::vector<CompareRecord> records; // ordered by (variant, seed)
  std::map<std::string, double> median_final_f1;
  std::map<std::string, int> median_crossing_step;
  bool ordering_ok = false; // variant2 >= variant1 >= vanilla and
                            // variant2 >= {maxpool-down, avgpool-down}
  std::vector<std::string> notes;
};

/// Trains every architecture kind under identical data streams (one job per
/// (variant, seed), run in parallel) and reports median final F1 plus the
/// step at which each run first reaches vanilla's median final F1.
/// Needs at least 5 seeds (ContractError otherwise). Divergent runs are
/// excluded from medians and flagged in notes.
ComparisonReport variant_compare(const RunConfig& base,
                                 const std::vector<std::uint64_t>& seeds);

/// Training/eval scene pools for one run seed; shared across variants so the
/// comparison sees identical data.
std::vector<Scene> train_pool(const RunConfig& cfg, std::uint64_t seed);
std::vector<Scene> eval_pool(const RunConfig& cfg, std::uint64_t seed);

} // namespace harness

/// CLI entry point (subcommands: gradcheck, isolate-test, decompose,
/// variant-compare, train, flops, gen-data). Returns the process exit code:
/// 0 all checks passed, 1 a check failed or a run diverged, 2 usage error.
int run_cli(const std::vector<std::string>& args);

} // namespace gradflow
