#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradflow/errors.hpp"

namespace gradflow {

/// Dimensions of a rank-4 tensor: (batch, channel, height, width).
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  bool operator==(const Shape&) const = default;

  /// Product n*c*h*w. Throws ShapeError if any dim < 1 or the product
  /// overflows the index type.
  std::int64_t checked_elems() const;

  std::string str() const;
};

/// Dense rank-4 array of 64-bit floats, contiguous row-major with layout
/// (n, c, h, w), w fastest. Element (n,c,h,w) lives at offset
/// ((n*C + c)*H + h)*W + w. No strides, no views.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(const Shape& shape, double fill = 0.0);

  static Tensor from_data(const Shape& shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::int64_t offset(std::int64_t n, std::int64_t c, std::int64_t h,
                      std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  double& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  double at(std::int64_t n, std::int64_t c, std::int64_t h,
            std::int64_t w) const {
    return data_[static_cast<std::size_t>(offset(n, c, h, w))];
  }

  double& operator[](std::int64_t flat) {
    return data_[static_cast<std::size_t>(flat)];
  }
  double operator[](std::int64_t flat) const {
    return data_[static_cast<std::size_t>(flat)];
  }

private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// Deterministic 64-bit PRNG: xoshiro256++ (Blackman & Vigna, 2019) seeded
/// via splitmix64 from a single 64-bit seed. Gaussian variates come from the
/// Marsaglia polar method (pairs; the second value of each pair is cached),
/// so a given seed yields the same value stream on every run.
class Rng {
public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();

  /// Uniform integer in [lo, hi], inclusive, via rejection sampling.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Normal(0, stddev^2).
  double normal(double stddev);

private:
  std::array<std::uint64_t, 4> state_{};
  bool has_cached_ = false;
  double cached_ = 0.0;
};

Tensor zeros(const Shape& shape);
Tensor full(const Shape& shape, double value);

/// i.i.d. normal(0, std^2) values drawn from rng in row-major order.
/// std must be > 0 (ValueError otherwise).
Tensor randn(const Shape& shape, Rng& rng, double std);

/// Binary tensor container: magic "GFT1", then 4 little-endian u64 dims
/// (n,c,h,w), then n*c*h*w little-endian IEEE-754 doubles. One tensor per
/// file; round-trip is bit-exact.
void save_container(const Tensor& t, const std::string& path);
Tensor load_container(const std::string& path);

// Small non-recorded helpers used by the optimizer and the test oracles.
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);
bool bitwise_equal(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

} // namespace gradflow
