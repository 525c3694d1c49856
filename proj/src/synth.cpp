#include "gradflow/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace gradflow {

void SceneConfig::validate() const {
  if (size != 32 && size != 64 && size != 128) {
    throw ValueError("scene size must be one of {32, 64, 128}");
  }
  if (n_targets < 0 || n_targets > 4) {
    throw ValueError("n_targets must be in 0..4");
  }
  if (target_sigma < 0.5 || target_sigma > 1.5) {
    throw ValueError("target_sigma must be in [0.5, 1.5]");
  }
  if (target_amplitude < 0.3 || target_amplitude > 1.0) {
    throw ValueError("target_amplitude must be in [0.3, 1.0]");
  }
  if (clutter_scale < 0.0 || clutter_scale > 0.5) {
    throw ValueError("clutter_scale must be in [0, 0.5]");
  }
  const double disk_area = std::numbers::pi * 4.0 * target_sigma * target_sigma;
  const double density = n_targets * disk_area /
                         static_cast<double>(size * size);
  if (density > 0.02) {
    throw ValueError("config violates the 2% mask-density bound (would be " +
                     std::to_string(density * 100.0) + "%)");
  }
}

namespace {

/// Separable box blur, radius r, averaging over the in-bounds window only.
void box_blur_pass(std::vector<double>& img, std::int64_t hw, std::int64_t r) {
  std::vector<double> tmp(img.size());
  // horizontal
  for (std::int64_t y = 0; y < hw; ++y) {
    for (std::int64_t x = 0; x < hw; ++x) {
      const std::int64_t lo = std::max<std::int64_t>(0, x - r);
      const std::int64_t hi = std::min(hw - 1, x + r);
      double acc = 0.0;
      for (std::int64_t k = lo; k <= hi; ++k) {
        acc += img[y * hw + k];
      }
      tmp[y * hw + x] = acc / static_cast<double>(hi - lo + 1);
    }
  }
  // vertical
  for (std::int64_t y = 0; y < hw; ++y) {
    for (std::int64_t x = 0; x < hw; ++x) {
      const std::int64_t lo = std::max<std::int64_t>(0, y - r);
      const std::int64_t hi = std::min(hw - 1, y + r);
      double acc = 0.0;
      for (std::int64_t k = lo; k <= hi; ++k) {
        acc += tmp[k * hw + x];
      }
      img[y * hw + x] = acc / static_cast<double>(hi - lo + 1);
    }
  }
}

} // namespace

Scene generate(const SceneConfig& config) {
  config.validate();
  const std::int64_t hw = config.size;
  Rng rng(config.seed);

  std::vector<double> clutter(static_cast<std::size_t>(hw * hw));
  for (double& v : clutter) {
    v = rng.uniform();
  }
  for (int pass = 0; pass < 3; ++pass) {
    box_blur_pass(clutter, hw, 2);
  }

  Scene scene;
  scene.image = Tensor({1, 1, hw, hw});
  scene.mask = Tensor({1, 1, hw, hw});
  auto img = scene.image.data();
  for (std::int64_t i = 0; i < hw * hw; ++i) {
    img[i] = config.clutter_scale * clutter[static_cast<std::size_t>(i)];
  }

  const std::int64_t margin = 4;
  const double min_dist = 6.0 * config.target_sigma;
  for (int t = 0; t < config.n_targets; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      const std::int64_t y = rng.uniform_int(margin, hw - 1 - margin);
      const std::int64_t x = rng.uniform_int(margin, hw - 1 - margin);
      bool ok = true;
      for (const TargetInfo& other : scene.centers) {
        const double dy = static_cast<double>(y - other.y);
        const double dx = static_cast<double>(x - other.x);
        if (std::hypot(dy, dx) < min_dist) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.centers.push_back(
            {y, x, config.target_sigma, config.target_amplitude});
        placed = true;
      }
    }
    if (!placed) {
      throw GenerationError("could not place target " + std::to_string(t) +
                            " after 1000 rejection samples");
    }
  }

  const double two_sigma_sq = 2.0 * config.target_sigma * config.target_sigma;
  const double mask_r_sq = 4.0 * config.target_sigma * config.target_sigma;
  for (const TargetInfo& c : scene.centers) {
    for (std::int64_t y = 0; y < hw; ++y) {
      for (std::int64_t x = 0; x < hw; ++x) {
        const double d2 = static_cast<double>((y - c.y) * (y - c.y) +
                                              (x - c.x) * (x - c.x));
        scene.image.at(0, 0, y, x) +=
            c.amplitude * std::exp(-d2 / two_sigma_sq);
        if (d2 <= mask_r_sq) {
          scene.mask.at(0, 0, y, x) = 1.0;
        }
      }
    }
  }
  for (double& v : scene.image.data()) {
    v = std::clamp(v, 0.0, 1.0);
  }
  return scene;
}

Tensor downsample_mask(const Tensor& mask, std::int64_t stride) {
  const Shape& s = mask.shape();
  if (stride < 1 || s.h % stride != 0 || s.w % stride != 0) {
    throw ShapeError("downsample_mask: dims " + s.str() +
                     " not divisible by stride " + std::to_string(stride));
  }
  Tensor out({s.n, s.c, s.h / stride, s.w / stride});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      for (std::int64_t oh = 0; oh < s.h / stride; ++oh) {
        for (std::int64_t ow = 0; ow < s.w / stride; ++ow) {
          double m = 0.0;
          for (std::int64_t dy = 0; dy < stride && m == 0.0; ++dy) {
            for (std::int64_t dx = 0; dx < stride; ++dx) {
              if (mask.at(n, c, oh * stride + dy, ow * stride + dx) != 0.0) {
                m = 1.0;
                break;
              }
            }
          }
          out.at(n, c, oh, ow) = m;
        }
      }
    }
  }
  return out;
}

std::string make_dataset(const std::vector<SceneConfig>& configs,
                         const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create dataset directory " + dir + ": " +
                  ec.message());
  }
  const std::string manifest_path = dir + "/manifest.txt";
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest) {
    throw IoError("cannot write manifest: " + manifest_path);
  }
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const Scene scene = generate(configs[i]);
    char img_name[64];
    char mask_name[64];
    std::snprintf(img_name, sizeof(img_name), "scene_%05zu_image.gft", i);
    std::snprintf(mask_name, sizeof(mask_name), "scene_%05zu_mask.gft", i);
    save_container(scene.image, dir + "/" + img_name);
    save_container(scene.mask, dir + "/" + mask_name);
    manifest << img_name << ',' << mask_name << ',' << configs[i].seed << ','
             << configs[i].n_targets << '\n';
  }
  manifest.flush();
  if (!manifest) {
    throw IoError("short write on manifest: " + manifest_path);
  }
  return manifest_path;
}

std::vector<DatasetItem> load_dataset(const std::string& dir) {
  const std::string manifest_path = dir + "/manifest.txt";
  std::ifstream manifest(manifest_path);
  if (!manifest) {
    throw IoError("cannot open manifest: " + manifest_path);
  }
  std::vector<DatasetItem> items;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    std::istringstream ss(line);
    DatasetItem item;
    std::string seed_str, ntargets_str;
    if (!std::getline(ss, item.file_image, ',') ||
        !std::getline(ss, item.file_mask, ',') ||
        !std::getline(ss, seed_str, ',') || !std::getline(ss, ntargets_str)) {
      throw FormatError("bad manifest line " + std::to_string(lineno) + ": " +
                        line);
    }
    try {
      item.seed = std::stoull(seed_str);
      item.n_targets = std::stoi(ntargets_str);
    } catch (const std::exception&) {
      throw FormatError("bad manifest numbers at line " +
                        std::to_string(lineno));
    }
    item.image = load_container(dir + "/" + item.file_image);
    item.mask = load_container(dir + "/" + item.file_mask);
    items.push_back(std::move(item));
  }
  return items;
}

} // namespace gradflow
