#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace prom {

/// Dense tensor shape. 4-D tensors are laid out N x C x H x W (row-major),
/// 2-D tensors out x in. Every dim must be >= 1.
struct Shape {
  std::vector<int> dims;

  Shape() = default;
  Shape(std::initializer_list<int> d) : dims(d) {}
  explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

  int rank() const { return static_cast<int>(dims.size()); }
  int operator[](int i) const { return dims[static_cast<size_t>(i)]; }

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : dims) n *= d;
    return dims.empty() ? 0 : n;
  }

  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return dims != o.dims; }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << ')';
    return os.str();
  }
};

inline void check_shape_valid(const Shape& s) {
  if (s.dims.empty()) throw std::invalid_argument("shape: rank 0");
  for (int d : s.dims)
    if (d < 1) throw std::invalid_argument("shape: dim < 1 in " + s.str());
}

/// Row-major dense tensor over an arithmetic element type.
/// Tensors are treated as immutable values once an operation has produced
/// them; operations return fresh tensors and never alias their inputs.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_shape_valid(shape);
    data.assign(static_cast<size_t>(shape.numel()), T(0));
  }
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_shape_valid(shape);
    if (static_cast<std::int64_t>(data.size()) != shape.numel())
      throw std::invalid_argument("tensor: data length does not match shape " + shape.str());
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  T& operator[](std::int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 4-D accessors (N,C,H,W)
  T& at(int n, int c, int h, int w) { return data[static_cast<size_t>(index4(n, c, h, w))]; }
  const T& at(int n, int c, int h, int w) const {
    return data[static_cast<size_t>(index4(n, c, h, w))];
  }
  std::int64_t index4(int n, int c, int h, int w) const {
    return ((static_cast<std::int64_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
  }

  // 2-D accessors (rows x cols)
  T& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  const T& at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
};

using FloatTensor = Tensor<float>;
using Int32Tensor = Tensor<std::int32_t>;

template <typename T>
bool all_finite(const Tensor<T>& t) {
  if constexpr (std::is_floating_point_v<T>) {
    for (T v : t.data)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Random initialization.
//
// Sampling is pinned to std::mt19937 (stable sequence by the standard) with an
// explicit Box-Muller transform over 53-bit uniforms, so a (shape, fan, seed)
// triple yields the same tensor on every platform and every run.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(static_cast<std::mt19937::result_type>(seed)) {}

  /// Uniform in [0,1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = gen_();
    const std::uint64_t lo = gen_();
    const std::uint64_t bits = ((hi << 32) | lo) >> 11;
    return static_cast<double>(bits) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  std::uint32_t next_u32() { return gen_(); }

 private:
  std::mt19937 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// He normal initialization: i.i.d. draws from N(0, 2/fan).
inline FloatTensor he_normal_init(const Shape& shape, int fan, std::uint64_t seed) {
  check_shape_valid(shape);
  if (fan < 1) throw std::invalid_argument("he_normal_init: fan must be >= 1");
  Rng rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan));
  FloatTensor out(shape);
  for (auto& v : out.data) v = static_cast<float>(stddev * rng.normal());
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise float operations. Binary ops require identical shapes; the
// per-channel variants broadcast a length-C vector over (N,C,H,W).
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}
inline void check_channels(const FloatTensor& x, std::int64_t n, const char* op) {
  if (x.shape.rank() < 2 || x.shape[1] != static_cast<int>(n))
    throw std::invalid_argument(std::string(op) + ": channel vector length " + std::to_string(n) +
                                " does not match " + x.shape.str());
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape, b.shape, "add");
  Tensor<T> out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape, b.shape, "sub");
  Tensor<T> out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a.shape, b.shape, "mul");
  Tensor<T> out(a.shape);
  for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline FloatTensor relu6(const FloatTensor& x) {
  FloatTensor out(x.shape);
  for (std::int64_t i = 0; i < x.size(); ++i)
    out[i] = std::min(std::max(x[i], 0.0f), 6.0f);
  return out;
}

/// PReLU with one slope per channel; x at exactly 0 takes the positive branch.
inline FloatTensor prelu(const FloatTensor& x, const std::vector<float>& slope) {
  detail::check_channels(x, static_cast<std::int64_t>(slope.size()), "prelu");
  FloatTensor out(x.shape);
  const std::int64_t per_ch = x.size() / (x.shape[0] * x.shape[1]);
  std::int64_t i = 0;
  for (int n = 0; n < x.shape[0]; ++n)
    for (int c = 0; c < x.shape[1]; ++c) {
      const float s = slope[static_cast<size_t>(c)];
      for (std::int64_t k = 0; k < per_ch; ++k, ++i) out[i] = x[i] >= 0.0f ? x[i] : s * x[i];
    }
  return out;
}

/// Affine batch normalization with given statistics:
/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
inline FloatTensor batchnorm(const FloatTensor& x, const std::vector<float>& mean,
                             const std::vector<float>& var, const std::vector<float>& gamma,
                             const std::vector<float>& beta, float eps) {
  const auto c_n = static_cast<std::int64_t>(mean.size());
  detail::check_channels(x, c_n, "batchnorm");
  if (var.size() != mean.size() || gamma.size() != mean.size() || beta.size() != mean.size())
    throw std::invalid_argument("batchnorm: statistic vector lengths differ");
  FloatTensor out(x.shape);
  const std::int64_t per_ch = x.size() / (x.shape[0] * x.shape[1]);
  std::int64_t i = 0;
  for (int n = 0; n < x.shape[0]; ++n)
    for (int c = 0; c < x.shape[1]; ++c) {
      const auto ci = static_cast<size_t>(c);
      const float inv = 1.0f / std::sqrt(var[ci] + eps);
      const float g = gamma[ci] * inv;
      const float b = beta[ci] - gamma[ci] * mean[ci] * inv;
      for (std::int64_t k = 0; k < per_ch; ++k, ++i) out[i] = g * x[i] + b;
    }
  return out;
}

}  // namespace prom
