#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "prom/tensor.hpp"

namespace prom {

/// Guard added to every quantization divisor so all-zero slices stay finite.
constexpr float kQuantEps = 1e-5f;

/// Round to nearest (ties to even), then clamp into [lo, hi].
/// Relies on the default FP environment (FE_TONEAREST), which std::nearbyint
/// maps to round-half-to-even; the tie behaviour is pinned by unit tests.
inline int roundclip(float x, int lo, int hi) {
  const float r = std::nearbyintf(x);
  const float c = std::min(std::max(r, static_cast<float>(lo)), static_cast<float>(hi));
  return static_cast<int>(c);
}

enum class ScaleKind { PerChannel, PerBatchElement };

/// Ternary weight plane for pointwise convolutions: trits in {-1,0,1} plus a
/// positive scale per output channel (the channel's mean absolute value).
struct TernaryTensor {
  Shape shape;                 // C_out x C_in x 1 x 1 (or C_out x C_in)
  std::vector<std::int8_t> trits;
  std::vector<float> alpha;    // length C_out, un-inverted physical scale

  int out_channels() const { return shape[0]; }
  std::int64_t row_len() const { return shape.numel() / shape[0]; }
};

/// Signed 8-bit tensor plus un-inverted scale vector. Weights carry one scale
/// per output channel (absmax beta); activations one per batch element
/// (absmax gamma). Dequantization divides by 127 and multiplies by the scale.
struct Int8Tensor {
  Shape shape;
  std::vector<std::int8_t> values;
  std::vector<float> scale;
  ScaleKind scale_kind = ScaleKind::PerChannel;

  std::int64_t slice_len() const { return shape.numel() / shape[0]; }
};

namespace detail {
// Absmax / absmean over each leading-dim slice of a row-major tensor.
inline std::vector<float> slice_absmax(const FloatTensor& t) {
  const int n = t.shape[0];
  const std::int64_t len = t.shape.numel() / n;
  std::vector<float> out(static_cast<size_t>(n), 0.0f);
  for (int i = 0; i < n; ++i) {
    float m = 0.0f;
    const float* p = t.data.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k) m = std::max(m, std::fabs(p[k]));
    out[static_cast<size_t>(i)] = m;
  }
  return out;
}
inline std::vector<float> slice_absmean(const FloatTensor& t) {
  const int n = t.shape[0];
  const std::int64_t len = t.shape.numel() / n;
  std::vector<float> out(static_cast<size_t>(n), 0.0f);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    const float* p = t.data.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k) s += std::fabs(p[k]);
    out[static_cast<size_t>(i)] = static_cast<float>(s / static_cast<double>(len));
  }
  return out;
}
}  // namespace detail

/// Channel-wise absmean ternary quantization of a 1x1 (pointwise) weight:
///   alpha_i = mean_j |W_ij|
///   trit_ij = roundclip(W_ij / (alpha_i + eps), -1, 1)
/// With per_channel=false a single absmean over the whole tensor is used for
/// every output channel (the per-tensor ablation).
inline TernaryTensor quantize_pointwise_ternary(const FloatTensor& w, float eps = kQuantEps,
                                                bool per_channel = true) {
  if (w.shape.rank() == 4 && (w.shape[2] != 1 || w.shape[3] != 1))
    throw std::invalid_argument("quantize_pointwise_ternary: kernel is not 1x1: " + w.shape.str());
  if (w.shape.rank() != 2 && w.shape.rank() != 4)
    throw std::invalid_argument("quantize_pointwise_ternary: expected rank 2 or 4 weight");

  TernaryTensor out;
  out.shape = w.shape;
  out.alpha = detail::slice_absmean(w);
  if (!per_channel) {
    double s = 0.0;
    for (float v : w.data) s += std::fabs(v);
    const float a = static_cast<float>(s / static_cast<double>(w.size()));
    std::fill(out.alpha.begin(), out.alpha.end(), a);
  }
  out.trits.resize(w.data.size());
  const int n = w.shape[0];
  const std::int64_t len = w.shape.numel() / n;
  for (int i = 0; i < n; ++i) {
    const float inv = 1.0f / (out.alpha[static_cast<size_t>(i)] + eps);
    const float* src = w.data.data() + static_cast<std::int64_t>(i) * len;
    std::int8_t* dst = out.trits.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k)
      dst[k] = static_cast<std::int8_t>(roundclip(src[k] * inv, -1, 1));
  }
  return out;
}

/// Channel-wise absmax int8 quantization for depthwise/dense conv and linear
/// weights: beta_i = max |W_i|, values = roundclip(W * 127/(beta_i+eps), -128, 127).
inline Int8Tensor quantize_weight_int8(const FloatTensor& w, float eps = kQuantEps) {
  Int8Tensor out;
  out.shape = w.shape;
  out.scale = detail::slice_absmax(w);
  out.scale_kind = ScaleKind::PerChannel;
  out.values.resize(w.data.size());
  const int n = w.shape[0];
  const std::int64_t len = w.shape.numel() / n;
  for (int i = 0; i < n; ++i) {
    const float f = 127.0f / (out.scale[static_cast<size_t>(i)] + eps);
    const float* src = w.data.data() + static_cast<std::int64_t>(i) * len;
    std::int8_t* dst = out.values.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k)
      dst[k] = static_cast<std::int8_t>(roundclip(src[k] * f, -128, 127));
  }
  return out;
}

/// Tensor-wise absmax int8 quantization of activations, one scale per batch
/// element: gamma_b = max |X_b|, values = roundclip(X * 127/(gamma_b+eps), -128, 127).
inline Int8Tensor quantize_activation_int8(const FloatTensor& x, float eps = kQuantEps) {
  Int8Tensor out;
  out.shape = x.shape;
  out.scale = detail::slice_absmax(x);
  out.scale_kind = ScaleKind::PerBatchElement;
  out.values.resize(x.data.size());
  const int n = x.shape[0];
  const std::int64_t len = x.shape.numel() / n;
  for (int i = 0; i < n; ++i) {
    const float f = 127.0f / (out.scale[static_cast<size_t>(i)] + eps);
    const float* src = x.data.data() + static_cast<std::int64_t>(i) * len;
    std::int8_t* dst = out.values.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k)
      dst[k] = static_cast<std::int8_t>(roundclip(src[k] * f, -128, 127));
  }
  return out;
}

inline FloatTensor dequantize(const TernaryTensor& t) {
  FloatTensor out(t.shape);
  const int n = t.shape[0];
  const std::int64_t len = t.row_len();
  for (int i = 0; i < n; ++i) {
    const float a = t.alpha[static_cast<size_t>(i)];
    const std::int8_t* src = t.trits.data() + static_cast<std::int64_t>(i) * len;
    float* dst = out.data.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k) dst[k] = static_cast<float>(src[k]) * a;
  }
  return out;
}

inline FloatTensor dequantize(const Int8Tensor& q) {
  FloatTensor out(q.shape);
  const int n = q.shape[0];
  const std::int64_t len = q.slice_len();
  for (int i = 0; i < n; ++i) {
    const float f = q.scale[static_cast<size_t>(i)] / 127.0f;
    const std::int8_t* src = q.values.data() + static_cast<std::int64_t>(i) * len;
    float* dst = out.data.data() + static_cast<std::int64_t>(i) * len;
    for (std::int64_t k = 0; k < len; ++k) dst[k] = static_cast<float>(src[k]) * f;
  }
  return out;
}

enum class FakeQuantKind { TernaryPw, Int8Weight, Int8Act };

/// Quantize-dequantize projection used in the QAT forward pass.
inline FloatTensor fake_quant(const FloatTensor& x, FakeQuantKind kind, float eps = kQuantEps,
                              bool per_channel = true) {
  switch (kind) {
    case FakeQuantKind::TernaryPw:
      return dequantize(quantize_pointwise_ternary(x, eps, per_channel));
    case FakeQuantKind::Int8Weight:
      return dequantize(quantize_weight_int8(x, eps));
    case FakeQuantKind::Int8Act:
      return dequantize(quantize_activation_int8(x, eps));
  }
  throw std::logic_error("fake_quant: bad kind");
}

struct TernaryStats {
  double frac_neg = 0.0;
  double frac_zero = 0.0;
  double frac_pos = 0.0;
};

inline TernaryStats ternary_stats(const TernaryTensor& t) {
  if (t.trits.empty()) throw std::invalid_argument("ternary_stats: empty tensor");
  std::int64_t neg = 0, zero = 0, pos = 0;
  for (std::int8_t v : t.trits) {
    if (v < 0)
      ++neg;
    else if (v > 0)
      ++pos;
    else
      ++zero;
  }
  const double n = static_cast<double>(t.trits.size());
  return {static_cast<double>(neg) / n, static_cast<double>(zero) / n,
          static_cast<double>(pos) / n};
}

}  // namespace prom
