#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gradflow/bpfpn.hpp"
#include "gradflow/synth.hpp"
#include "gradflow/tensor.hpp"

namespace gradflow {

/// Derives an independent stream seed from (base, tag).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t tag);

namespace verify {

/// Central differences per coordinate: (f(x+eps*e) - f(x-eps*e)) / (2*eps).
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                              const Tensor& x, double step);

/// Single-coordinate central difference.
double finite_difference_coord(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, std::int64_t coord,
                               double step);

/// |analytic - fd| / max(1, |analytic|, |fd|).
double rel_err(double analytic, double fd);

struct GradCheckReport {
  std::string op;
  double max_rel_err = 0.0;
  std::string worst_coord;
  bool pass = false;
  std::vector<std::uint64_t> seeds;
  double step = 1e-5;
  double tolerance = 1e-6;
};

/// The FD oracle is validated on closed-form functions (mean, quadratic)
/// before being trusted anywhere else.
struct OracleSelfCheck {
  double mean_max_abs_err = 0.0;
  double quadratic_max_abs_err = 0.0;
  double tolerance = 1e-9;
  bool pass = false;
};

OracleSelfCheck validate_oracle(double step = 1e-5);

/// Analytic-vs-FD check of every differentiable primitive on random inputs
/// in [-1, 1] (relu and maxpool sampled away from their kinks), all
/// coordinates of every argument, n_seeds seeds each.
std::vector<GradCheckReport> gradcheck_primitives(double step = 1e-5,
                                                  double tolerance = 1e-6,
                                                  int n_seeds = 5);

/// End-to-end check of the full architecture loss: 10 sampled coordinates per
/// parameter tensor (plus the input image), against central differences.
GradCheckReport gradcheck_end_to_end(ArchKind kind, double step = 1e-5,
                                     double tolerance = 1e-6, int n_seeds = 5,
                                     std::int64_t size = 32);

/// FD step sensitivity on a representative case (3x3 conv kernel).
struct StepSweepEntry {
  double step;
  double max_rel_err;
};
std::vector<StepSweepEntry> fd_step_sweep(
    const std::vector<double>& steps = {1e-4, 1e-5, 1e-6});

struct SuperpositionReport {
  std::string arch;
  std::uint64_t seed = 0;
  std::int64_t size = 0;
  std::size_t use_count = 0;   // fusion-kernel use sites seen in one forward
  double residual = 0.0;       // max abs diff of per-use sum vs grad
  bool bitwise = false;        // sum equals grad bit for bit
  double full_norm = 0.0;
  std::vector<double> per_use_norms;
  bool pass = false;
};

/// Shared-parameter gradient superposition: the fusion parameters' gradient
/// equals the ascending-order sum of their per-use gradients, bitwise.
/// ContractError for architectures without a shared fusion.
SuperpositionReport check_eq6_superposition(const ArchitectureSpec& spec,
                                            std::uint64_t seed,
                                            std::int64_t size = 64);

struct PathTargetReport {
  std::string target;
  double full_norm = 0.0;
  double direct_norm = 0.0;
  double indirect_norm = 0.0;
  double residual = 0.0; // max abs diff of (direct + indirect) vs full
};

/// Masked-backward decomposition pivoted on the second fusion call's input
/// edges. The direct run keeps only the edge through which T feeds the second
/// fusion; the indirect run keeps the complementary edges (the other operand
/// and the fusion-parameter uses at the second call). Every parameter below
/// the second fusion, and the nodes in the X1/X2/T roles, must reconstruct:
/// direct + indirect == full. The indirect term, measured at the first fusion
/// call's parameters, is exactly zero without sharing and nonzero with it.
struct PathDecompositionReport {
  std::string arch;
  std::uint64_t seed = 0;
  std::int64_t size = 0;
  std::vector<PathTargetReport> targets;
  double max_residual = 0.0;
  double indirect_norm_first_fusion = 0.0;
  bool indirect_exactly_zero = false;
  bool shared = false;
  double tolerance = 1e-12;
  bool pass = false;
};

PathDecompositionReport check_path_decomposition(const ArchitectureSpec& spec,
                                                 std::uint64_t seed,
                                                 std::int64_t size = 64);

/// Gradients of every parameter after one forward+backward of the given
/// architecture on (image, coarse target).
std::map<std::string, Tensor> param_grads(const ArchitectureSpec& spec,
                                          const Weights& weights,
                                          const Tensor& image,
                                          const Tensor& target);

/// Per-backbone-parameter max abs gradient difference between two
/// architectures evaluated on the same scene. The two weight sets must agree
/// bitwise on every backbone parameter (ContractError otherwise).
std::map<std::string, double> backbone_grad_diff(const ArchitectureSpec& a,
                                                 const Weights& wa,
                                                 const ArchitectureSpec& b,
                                                 const Weights& wb,
                                                 const Tensor& image,
                                                 const Tensor& target);

struct IsolationReport {
  std::uint64_t seed = 0;
  std::int64_t size = 0;
  std::map<std::string, double> isolated_vs_deleted;   // expected all zero
  std::map<std::string, double> unisolated_vs_deleted; // stage1 expected > 0
  double max_isolated_diff = 0.0;
  double stage1_unisolated_diff = 0.0;
  double shortcut_grad_norm = 0.0; // down.weight gradient in the isolated run
  bool pass = false;
};

/// Compares backbone gradients of the canonical isolated architecture
/// against its branch-deleted twin (bitwise equal expected) and of the
/// unisolated variant against the same twin (stage-1 difference expected).
IsolationReport check_isolation(std::uint64_t seed, std::int64_t size = 64);

/// Deterministic scene used by the verification battery (sized so the
/// sparsity bound holds at every supported resolution).
SceneConfig verify_scene_config(std::int64_t size, std::uint64_t seed);

} // namespace verify

} // namespace gradflow
