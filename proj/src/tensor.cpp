#include "gradflow/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace gradflow {

std::int64_t Shape::checked_elems() const {
  if (n < 1 || c < 1 || h < 1 || w < 1) {
    throw ShapeError("invalid shape " + str() + ": all dimensions must be >= 1");
  }
  std::int64_t acc = n;
  for (std::int64_t d : {c, h, w}) {
    if (__builtin_mul_overflow(acc, d, &acc)) {
      throw ShapeError("shape " + str() + " overflows the element index type");
    }
  }
  // The payload must also be addressable in bytes.
  std::int64_t bytes;
  if (__builtin_mul_overflow(acc, static_cast<std::int64_t>(8), &bytes)) {
    throw ShapeError("shape " + str() + " overflows the element index type");
  }
  return acc;
}

std::string Shape::str() const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "(%lld,%lld,%lld,%lld)",
                static_cast<long long>(n), static_cast<long long>(c),
                static_cast<long long>(h), static_cast<long long>(w));
  return buf;
}

Tensor::Tensor(const Shape& shape, double fill)
    : shape_(shape),
      data_(static_cast<std::size_t>(shape.checked_elems()), fill) {}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  const std::int64_t elems = shape.checked_elems();
  if (elems != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape.str());
  }
  Tensor t;
  t.shape_ = shape;
  t.data_ = std::move(data);
  return t;
}

// --- Rng ------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t v, int k) {
  return (v << k) | (v >> (64 - k));
}

} // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t s = seed;
  for (auto& word : state_) {
    word = splitmix64(s);
  }
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) {
    throw ValueError("uniform_int: empty range");
  }
  const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
  const std::uint64_t limit =
      std::numeric_limits<std::uint64_t>::max() -
      std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return lo + static_cast<std::int64_t>(x % range);
}

double Rng::normal(double stddev) {
  if (!(stddev > 0.0)) {
    throw ValueError("normal: stddev must be > 0");
  }
  if (has_cached_) {
    has_cached_ = false;
    return cached_ * stddev;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  cached_ = v * m;
  has_cached_ = true;
  return u * m * stddev;
}

// --- factories --------------------------------------------------------------

Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }

Tensor full(const Shape& shape, double value) { return Tensor(shape, value); }

Tensor randn(const Shape& shape, Rng& rng, double std) {
  if (!(std > 0.0)) {
    throw ValueError("randn: std must be > 0");
  }
  Tensor t(shape);
  for (double& x : t.data()) {
    x = rng.normal(std);
  }
  return t;
}

// --- container ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'F', 'T', '1'};

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  }
  return v;
}

} // namespace

void save_container(const Tensor& t, const std::string& path) {
  std::string blob;
  blob.reserve(4 + 32 + static_cast<std::size_t>(t.size()) * 8);
  blob.append(kMagic, 4);
  const Shape& s = t.shape();
  for (std::int64_t d : {s.n, s.c, s.h, s.w}) {
    put_u64_le(blob, static_cast<std::uint64_t>(d));
  }
  for (double x : t.data()) {
    put_u64_le(blob, std::bit_cast<std::uint64_t>(x));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open for writing: " + path);
  }
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) {
    throw IoError("short write: " + path);
  }
}

Tensor load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open for reading: " + path);
  }
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (blob.size() < 36) {
    throw FormatError("container too short: " + path);
  }
  if (std::memcmp(blob.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic bytes: " + path);
  }
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + 4;
  Shape shape;
  shape.n = static_cast<std::int64_t>(get_u64_le(p + 0));
  shape.c = static_cast<std::int64_t>(get_u64_le(p + 8));
  shape.h = static_cast<std::int64_t>(get_u64_le(p + 16));
  shape.w = static_cast<std::int64_t>(get_u64_le(p + 24));
  std::int64_t elems;
  try {
    elems = shape.checked_elems();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("bad dimensions in container: ") + e.what());
  }
  const std::size_t want = 36 + static_cast<std::size_t>(elems) * 8;
  if (blob.size() != want) {
    throw FormatError("payload size mismatch in " + path + ": header wants " +
                      std::to_string(elems) + " elements");
  }
  std::vector<double> data(static_cast<std::size_t>(elems));
  const unsigned char* q = reinterpret_cast<const unsigned char*>(blob.data()) + 36;
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<double>(get_u64_le(q + 8 * i));
    if (!std::isfinite(data[i])) {
      throw FormatError("non-finite value in container: " + path);
    }
  }
  return Tensor::from_data(shape, std::move(data));
}

// --- helpers -----------------------------------------------------------------

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double x : t.data()) {
    m = std::max(m, std::fabs(x));
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
  double m = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) {
    m = std::max(m, std::fabs(da[i] - db[i]));
  }
  return m;
}

double l2_norm(const Tensor& t) {
  double acc = 0.0;
  for (double x : t.data()) {
    acc += x * x;
  }
  return std::sqrt(acc);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    return false;
  }
  return std::memcmp(a.data().data(), b.data().data(),
                     a.data().size() * sizeof(double)) == 0;
}

bool all_finite(const Tensor& t) {
  for (double x : t.data()) {
    if (!std::isfinite(x)) {
      return false;
    }
  }
  return true;
}

} // namespace gradflow
