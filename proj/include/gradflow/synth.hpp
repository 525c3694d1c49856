#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradflow/tensor.hpp"

namespace gradflow {

/// One synthetic infrared-like frame: extremely sparse small Gaussian targets
/// over smooth clutter.
struct SceneConfig {
  std::int64_t size = 64;        // H = W, one of {32, 64, 128}
  int n_targets = 2;             // 0..4
  double target_sigma = 1.0;     // pixels, [0.5, 1.5]
  double target_amplitude = 0.8; // [0.3, 1.0]
  double clutter_scale = 0.3;    // [0, 0.5]
  std::uint64_t seed = 0;

  /// ValueError when out of range or when the worst-case mask area
  /// n_targets * pi * (2*sigma)^2 exceeds 2% of the frame.
  void validate() const;
};

struct TargetInfo {
  std::int64_t y;
  std::int64_t x;
  double sigma;
  double amplitude;
};

struct Scene {
  Tensor image; // (1,1,H,W), values in [0,1]
  Tensor mask;  // (1,1,H,W), 1 iff within 2*sigma (Euclidean) of a center
  std::vector<TargetInfo> centers;
};

/// Deterministic per seed. Clutter is uniform noise box-blurred (radius 2,
/// edges renormalized over the valid window, 3 passes) and scaled by
/// clutter_scale; targets are isotropic Gaussian bumps at integer centers,
/// >= 4 px from borders and pairwise >= 6*sigma apart (GenerationError after
/// 1000 rejected placements); the image is clipped to [0,1].
Scene generate(const SceneConfig& config);

/// Block-max pooling: a stride-cell is 1 iff any covered pixel is 1.
/// H and W must be divisible by stride.
Tensor downsample_mask(const Tensor& mask, std::int64_t stride = 8);

struct DatasetItem {
  std::string file_image;
  std::string file_mask;
  std::uint64_t seed;
  int n_targets;
  Tensor image;
  Tensor mask;
};

/// Writes one container file per image/mask pair plus a UTF-8 manifest
/// (`manifest.txt`) of lines `file_image,file_mask,seed,n_targets`.
/// Returns the manifest path.
std::string make_dataset(const std::vector<SceneConfig>& configs,
                         const std::string& dir);

std::vector<DatasetItem> load_dataset(const std::string& dir);

} // namespace gradflow
