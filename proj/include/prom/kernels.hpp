#pragma once

#include <cstdint>

#include "prom/quantize.hpp"
#include "prom/tensor.hpp"

namespace prom {

struct ConvParams {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

inline int conv_out_dim(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

// Largest (C_in/groups)*K*K for which 127*127*fan_in fits a signed 32-bit
// accumulator.
constexpr std::int64_t kMaxInt8FanIn = 133152;

namespace detail {
inline void check_conv_shapes(const Shape& x, const Shape& w, const ConvParams& p,
                              const char* name) {
  if (x.rank() != 4 || w.rank() != 4)
    throw std::invalid_argument(std::string(name) + ": expected 4-D input and weight");
  if (p.stride < 1 || p.padding < 0 || p.groups < 1)
    throw std::invalid_argument(std::string(name) + ": bad conv params");
  const int c_in = x[1], c_out = w[0];
  if (c_in % p.groups != 0 || c_out % p.groups != 0)
    throw std::invalid_argument(std::string(name) + ": groups must divide channel counts");
  if (w[1] != c_in / p.groups)
    throw std::invalid_argument(std::string(name) + ": weight shape " + w.str() +
                                " incompatible with input " + x.str());
  if (w[2] != w[3]) throw std::invalid_argument(std::string(name) + ": non-square kernel");
  if (conv_out_dim(x[2], w[2], p.stride, p.padding) < 1 ||
      conv_out_dim(x[3], w[3], p.stride, p.padding) < 1)
    throw std::invalid_argument(std::string(name) + ": output would be empty");
}
}  // namespace detail

/// Reference 2-D cross-correlation with zero padding and no bias.
/// x: (B, C_in, H, W), w: (C_out, C_in/groups, K, K). Templated on the scalar
/// so the same contract is available in double precision for oracles.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvParams& p = {}) {
  detail::check_conv_shapes(x.shape, w.shape, p, "conv2d");
  const int batch = x.shape[0], c_in = x.shape[1], h_in = x.shape[2], w_in = x.shape[3];
  const int c_out = w.shape[0], k = w.shape[2];
  const int cg_in = c_in / p.groups, cg_out = c_out / p.groups;
  const int h_out = conv_out_dim(h_in, k, p.stride, p.padding);
  const int w_out = conv_out_dim(w_in, k, p.stride, p.padding);
  Tensor<T> y(Shape{batch, c_out, h_out, w_out});

  if (k == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1) {
    // Pointwise fast path: y[b,oc,:] += w[oc,ic] * x[b,ic,:]
    const std::int64_t hw = static_cast<std::int64_t>(h_in) * w_in;
    for (int b = 0; b < batch; ++b)
      for (int oc = 0; oc < c_out; ++oc) {
        T* dst = y.data.data() + (static_cast<std::int64_t>(b) * c_out + oc) * hw;
        for (int ic = 0; ic < c_in; ++ic) {
          const T wv = w.data[static_cast<std::int64_t>(oc) * c_in + ic];
          const T* src = x.data.data() + (static_cast<std::int64_t>(b) * c_in + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i) dst[i] += wv * src[i];
        }
      }
    return y;
  }

  for (int b = 0; b < batch; ++b)
    for (int g = 0; g < p.groups; ++g)
      for (int ocg = 0; ocg < cg_out; ++ocg) {
        const int oc = g * cg_out + ocg;
        for (int oh = 0; oh < h_out; ++oh)
          for (int ow = 0; ow < w_out; ++ow) {
            T acc(0);
            for (int icg = 0; icg < cg_in; ++icg) {
              const int ic = g * cg_in + icg;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = oh * p.stride + kh - p.padding;
                if (ih < 0 || ih >= h_in) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = ow * p.stride + kw - p.padding;
                  if (iw < 0 || iw >= w_in) continue;
                  acc += w.at(oc, icg, kh, kw) * x.at(b, ic, ih, iw);
                }
              }
            }
            y.at(b, oc, oh, ow) = acc;
          }
      }
  return y;
}

// ---------------------------------------------------------------------------
// Integer kernels. Each is a template over the accumulator type so tests can
// instantiate the identical code path with an operation-counting scalar; the
// production aliases fix Acc = int32_t.
// ---------------------------------------------------------------------------

/// Ternary 1x1 convolution: per output channel, the signed sum of the input
/// channels selected by the trits. Adds, subtracts, and selects only - no
/// multiplication touches the value path. Scaling is applied separately by
/// dequant_output.
template <typename Acc>
Tensor<Acc> pointwise_ternary_conv_acc(const Int8Tensor& x, const TernaryTensor& w) {
  if (x.shape.rank() != 4) throw std::invalid_argument("pointwise_ternary_conv: 4-D input required");
  const int batch = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3];
  if (w.shape.rank() == 4 && (w.shape[2] != 1 || w.shape[3] != 1))
    throw std::invalid_argument("pointwise_ternary_conv: kernel is not 1x1");
  const int c_out = w.shape[0];
  if (static_cast<std::int64_t>(w.row_len()) != c_in)
    throw std::invalid_argument("pointwise_ternary_conv: channel mismatch " + x.shape.str() +
                                " vs " + w.shape.str());
  if (static_cast<std::int64_t>(c_in) * 127 > 0x7fffffffLL)
    throw std::invalid_argument("pointwise_ternary_conv: fan-in overflows accumulator");

  const std::int64_t hw = static_cast<std::int64_t>(h) * wd;
  Tensor<Acc> y(Shape{batch, c_out, h, wd});
  for (int b = 0; b < batch; ++b)
    for (int oc = 0; oc < c_out; ++oc) {
      Acc* dst = y.data.data() + (static_cast<std::int64_t>(b) * c_out + oc) * hw;
      const std::int8_t* trow = w.trits.data() + static_cast<std::int64_t>(oc) * c_in;
      for (int ic = 0; ic < c_in; ++ic) {
        const std::int8_t t = trow[ic];
        if (t == 0) continue;
        const std::int8_t* src =
            x.values.data() + (static_cast<std::int64_t>(b) * c_in + ic) * hw;
        if (t > 0)
          for (std::int64_t i = 0; i < hw; ++i) dst[i] += Acc(static_cast<std::int32_t>(src[i]));
        else
          for (std::int64_t i = 0; i < hw; ++i) dst[i] -= Acc(static_cast<std::int32_t>(src[i]));
      }
    }
  return y;
}

inline Int32Tensor pointwise_ternary_conv(const Int8Tensor& x, const TernaryTensor& w) {
  return pointwise_ternary_conv_acc<std::int32_t>(x, w);
}

/// Integer cross-correlation over int8 operands with exact 32-bit
/// accumulation; covers depthwise (groups == C) and the dense stem (groups == 1).
template <typename Acc>
Tensor<Acc> conv2d_int8_acc(const Int8Tensor& x, const Int8Tensor& w, const ConvParams& p) {
  Shape xs = x.shape, ws = w.shape;
  detail::check_conv_shapes(xs, ws, p, "conv2d_int8");
  const int batch = xs[0], c_in = xs[1], h_in = xs[2], w_in = xs[3];
  const int c_out = ws[0], k = ws[2];
  const int cg_in = c_in / p.groups, cg_out = c_out / p.groups;
  const std::int64_t fan_in = static_cast<std::int64_t>(cg_in) * k * k;
  if (fan_in > kMaxInt8FanIn)
    throw std::invalid_argument("conv2d_int8: fan-in " + std::to_string(fan_in) +
                                " may overflow the 32-bit accumulator");
  const int h_out = conv_out_dim(h_in, k, p.stride, p.padding);
  const int w_out = conv_out_dim(w_in, k, p.stride, p.padding);

  Tensor<Acc> y(Shape{batch, c_out, h_out, w_out});
  for (int b = 0; b < batch; ++b)
    for (int g = 0; g < p.groups; ++g)
      for (int ocg = 0; ocg < cg_out; ++ocg) {
        const int oc = g * cg_out + ocg;
        const std::int8_t* wbase =
            w.values.data() + static_cast<std::int64_t>(oc) * cg_in * k * k;
        for (int oh = 0; oh < h_out; ++oh)
          for (int ow = 0; ow < w_out; ++ow) {
            Acc acc(0);
            for (int icg = 0; icg < cg_in; ++icg) {
              const int ic = g * cg_in + icg;
              const std::int8_t* xbase =
                  x.values.data() + (static_cast<std::int64_t>(b) * c_in + ic) *
                                        static_cast<std::int64_t>(h_in) * w_in;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = oh * p.stride + kh - p.padding;
                if (ih < 0 || ih >= h_in) continue;  // zero padding contributes nothing
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = ow * p.stride + kw - p.padding;
                  if (iw < 0 || iw >= w_in) continue;
                  const std::int32_t xv = xbase[static_cast<std::int64_t>(ih) * w_in + iw];
                  const std::int32_t wv = wbase[(static_cast<std::int64_t>(icg) * k + kh) * k + kw];
                  acc += Acc(xv) * Acc(wv);
                }
              }
            }
            y.at(b, oc, oh, ow) = acc;
          }
      }
  return y;
}

inline Int32Tensor conv2d_int8(const Int8Tensor& x, const Int8Tensor& w, const ConvParams& p = {}) {
  return conv2d_int8_acc<std::int32_t>(x, w, p);
}

/// Fully connected layer on flattened features: x (B, C), w (O, C).
template <typename Acc>
Tensor<Acc> linear_int8_acc(const Int8Tensor& x, const Int8Tensor& w) {
  if (x.shape.rank() != 2 || w.shape.rank() != 2)
    throw std::invalid_argument("linear_int8: expected 2-D operands");
  const int batch = x.shape[0], c = x.shape[1], o = w.shape[0];
  if (w.shape[1] != c)
    throw std::invalid_argument("linear_int8: feature mismatch " + x.shape.str() + " vs " +
                                w.shape.str());
  if (c > kMaxInt8FanIn)
    throw std::invalid_argument("linear_int8: fan-in may overflow the 32-bit accumulator");
  Tensor<Acc> y(Shape{batch, o});
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < o; ++i) {
      Acc acc(0);
      const std::int8_t* xr = x.values.data() + static_cast<std::int64_t>(b) * c;
      const std::int8_t* wr = w.values.data() + static_cast<std::int64_t>(i) * c;
      for (int j = 0; j < c; ++j)
        acc += Acc(static_cast<std::int32_t>(xr[j])) * Acc(static_cast<std::int32_t>(wr[j]));
      y.at2(b, i) = acc;
    }
  return y;
}

inline Int32Tensor linear_int8(const Int8Tensor& x, const Int8Tensor& w) {
  return linear_int8_acc<std::int32_t>(x, w);
}

enum class DequantKind { Ternary, Int8 };

/// Rescale an integer accumulator back to real values:
///   ternary: y = acc * alpha_o * (gamma_b / 127)
///   int8:    y = acc * (beta_o / 127) * (gamma_b / 127)
/// weight_scale has one entry per output channel, act_scale one per batch
/// element; both broadcast over spatial dims. Works for 4-D and 2-D acc.
/// The template admits float accumulators so a float-kernel route over the
/// quantized integer values rescales bit-identically to the integer route.
template <typename AccT>
FloatTensor dequant_output_t(const Tensor<AccT>& acc, const std::vector<float>& weight_scale,
                             const std::vector<float>& act_scale, DequantKind kind) {
  const int batch = acc.shape[0];
  const int c_out = acc.shape.rank() >= 2 ? acc.shape[1] : 1;
  if (static_cast<int>(weight_scale.size()) != c_out)
    throw std::invalid_argument("dequant_output: weight scale length != C_out");
  if (static_cast<int>(act_scale.size()) != batch)
    throw std::invalid_argument("dequant_output: activation scale length != batch");
  FloatTensor y(acc.shape);
  const std::int64_t sp = acc.shape.numel() / (static_cast<std::int64_t>(batch) * c_out);
  std::int64_t i = 0;
  for (int b = 0; b < batch; ++b) {
    const float ab = act_scale[static_cast<size_t>(b)] / 127.0f;
    for (int oc = 0; oc < c_out; ++oc) {
      const float ws = weight_scale[static_cast<size_t>(oc)];
      const float f = (kind == DequantKind::Ternary ? ws : ws / 127.0f) * ab;
      for (std::int64_t k = 0; k < sp; ++k, ++i) y[i] = static_cast<float>(acc[i]) * f;
    }
  }
  return y;
}

inline FloatTensor dequant_output(const Int32Tensor& acc, const std::vector<float>& weight_scale,
                                  const std::vector<float>& act_scale, DequantKind kind) {
  return dequant_output_t(acc, weight_scale, act_scale, kind);
}

/// Quantized values as a float tensor (every int8 is exact in fp32, and sums
/// below 2^24 stay exact, so float kernels over these reproduce the integer
/// kernels bit for bit).
inline FloatTensor values_as_float(const Shape& s, const std::vector<std::int8_t>& v) {
  FloatTensor t(s);
  for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v[i]);
  return t;
}

}  // namespace prom
