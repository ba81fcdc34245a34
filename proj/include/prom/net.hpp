#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "prom/arch.hpp"
#include "prom/float16.hpp"
#include "prom/kernels.hpp"
#include "prom/quantize.hpp"
#include "prom/tensor.hpp"

namespace prom {

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.1f;
constexpr float kPreluInit = 0.25f;

/// Per-layer learnable state. Fields are sized only for the layer kinds that
/// use them; everything else stays empty.
struct LayerParams {
  FloatTensor weight;             // conv / linear
  std::vector<float> bias;        // linear
  std::vector<float> gamma, beta; // batchnorm affine
  std::vector<float> run_mean, run_var;
  std::vector<float> slopes;      // prelu
};

struct ParamState {
  std::vector<LayerParams> layers;
};

inline Shape weight_shape(const LayerSpec& l) {
  if (l.kind == LayerKind::Linear) return Shape{l.out_ch, l.in_ch};
  return Shape{l.out_ch, l.in_ch / l.groups(), l.kernel, l.kernel};
}

/// He-normal conv weights (fan = C_out * K^2, the initialization the
/// reference models use), small-normal classifier, identity BatchNorm,
/// 0.25 PReLU slopes. Deterministic in (arch, seed).
inline ParamState init_params(const ArchSpec& a, std::uint64_t seed) {
  ParamState p;
  p.layers.resize(a.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    LayerParams& lp = p.layers[i];
    const std::uint64_t layer_seed = seed + 0x9e3779b97f4a7c15ULL * (i + 1);
    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise:
        lp.weight = he_normal_init(weight_shape(l), l.out_ch * l.kernel * l.kernel, layer_seed);
        break;
      case LayerKind::Linear: {
        Rng rng(layer_seed);
        lp.weight = FloatTensor(weight_shape(l));
        for (auto& v : lp.weight.data) v = static_cast<float>(0.01 * rng.normal());
        lp.bias.assign(static_cast<size_t>(l.out_ch), 0.0f);
        break;
      }
      case LayerKind::BatchNorm:
        lp.gamma.assign(static_cast<size_t>(l.out_ch), 1.0f);
        lp.beta.assign(static_cast<size_t>(l.out_ch), 0.0f);
        lp.run_mean.assign(static_cast<size_t>(l.out_ch), 0.0f);
        lp.run_var.assign(static_cast<size_t>(l.out_ch), 1.0f);
        break;
      case LayerKind::Activation:
        if (l.act == ActKind::Prelu) lp.slopes.assign(static_cast<size_t>(l.out_ch), kPreluInit);
        break;
      default:
        break;
    }
  }
  return p;
}

enum class RunMode { Float, Qat, QuantizedInference };

struct ForwardOptions {
  RunMode mode = RunMode::Float;
  bool training = false;  // batch-stat BatchNorm + running-stat update
  float eps = kQuantEps;
  bool per_channel_pw = true;
  bool check_finite = false;  // divergence guard for the training loop
};

/// Error raised when a training forward produces non-finite values; carries
/// the offending layer index.
struct NonFiniteError : std::runtime_error {
  int layer;
  explicit NonFiniteError(int layer_idx)
      : std::runtime_error("non-finite values after layer " + std::to_string(layer_idx)),
        layer(layer_idx) {}
};

/// Everything the backward pass needs from a forward pass.
struct ForwardTrace {
  std::vector<FloatTensor> outputs;     // per layer
  std::vector<FloatTensor> conv_x;      // input actually convolved (fake-quantized in QAT)
  std::vector<FloatTensor> conv_w;      // weight actually convolved
  std::vector<std::vector<float>> bn_mean, bn_var;  // batch statistics used
};

namespace detail {

inline FloatTensor avgpool_global(const FloatTensor& x) {
  FloatTensor y(Shape{x.shape[0], x.shape[1]});
  const std::int64_t sp = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
  std::int64_t i = 0;
  for (int b = 0; b < x.shape[0]; ++b)
    for (int c = 0; c < x.shape[1]; ++c) {
      double s = 0.0;
      for (std::int64_t k = 0; k < sp; ++k, ++i) s += x[i];
      y.at2(b, c) = static_cast<float>(s / static_cast<double>(sp));
    }
  return y;
}

inline std::pair<std::vector<float>, std::vector<float>> batch_stats(const FloatTensor& x) {
  const int ch = x.shape[1];
  const std::int64_t per_ch = x.size() / ch;
  std::vector<double> sum(static_cast<size_t>(ch), 0.0), sq(static_cast<size_t>(ch), 0.0);
  const std::int64_t sp = x.shape.rank() == 4 ? static_cast<std::int64_t>(x.shape[2]) * x.shape[3] : 1;
  std::int64_t i = 0;
  for (int b = 0; b < x.shape[0]; ++b)
    for (int c = 0; c < ch; ++c)
      for (std::int64_t k = 0; k < sp; ++k, ++i) {
        sum[static_cast<size_t>(c)] += x[i];
        sq[static_cast<size_t>(c)] += static_cast<double>(x[i]) * x[i];
      }
  std::vector<float> mean(static_cast<size_t>(ch)), var(static_cast<size_t>(ch));
  for (int c = 0; c < ch; ++c) {
    const double m = sum[static_cast<size_t>(c)] / static_cast<double>(per_ch);
    mean[static_cast<size_t>(c)] = static_cast<float>(m);
    var[static_cast<size_t>(c)] =
        static_cast<float>(std::max(0.0, sq[static_cast<size_t>(c)] / static_cast<double>(per_ch) - m * m));
  }
  return {std::move(mean), std::move(var)};
}

inline FloatTensor add_bias(FloatTensor y, const std::vector<float>& bias) {
  if (bias.empty()) return y;
  for (int b = 0; b < y.shape[0]; ++b)
    for (int o = 0; o < y.shape[1]; ++o) y.at2(b, o) += bias[static_cast<size_t>(o)];
  return y;
}

inline FloatTensor linear_float(const FloatTensor& x, const FloatTensor& w) {
  const int batch = x.shape[0], c = x.shape[1], o = w.shape[0];
  FloatTensor y(Shape{batch, o});
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < o; ++i) {
      double acc = 0.0;
      const float* xr = x.data.data() + static_cast<std::int64_t>(b) * c;
      const float* wr = w.data.data() + static_cast<std::int64_t>(i) * c;
      for (int j = 0; j < c; ++j) acc += static_cast<double>(xr[j]) * wr[j];
      y.at2(b, i) = static_cast<float>(acc);
    }
  return y;
}

}  // namespace detail

/// Run one forward pass. `float` mode uses raw master weights; `qat` applies
/// quantize-dequantize to weights and input activations of every quantized
/// layer before convolving in float; `quantized_inference` quantizes once and
/// runs the integer kernels, dequantizing per layer. BatchNorm, activations,
/// pooling and residual joins always execute in float.
inline FloatTensor forward(const ArchSpec& a, ParamState& p, const FloatTensor& x,
                           const ForwardOptions& opt, ForwardTrace* trace = nullptr) {
  if (p.layers.size() != a.layers.size())
    throw std::invalid_argument("forward: parameter state does not match arch");
  (void)infer_shapes(a, x.shape[0]);  // full structural check against the input

  FloatTensor cur = x;
  std::vector<FloatTensor> outputs;
  outputs.reserve(a.layers.size());
  if (trace) {
    trace->conv_x.resize(a.layers.size());
    trace->conv_w.resize(a.layers.size());
    trace->bn_mean.resize(a.layers.size());
    trace->bn_var.resize(a.layers.size());
  }

  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    LayerParams& lp = p.layers[i];
    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise:
      case LayerKind::Linear: {
        const ConvParams cp{l.stride, l.padding, l.groups()};
        const bool quantized = l.policy != QuantPolicy::Float;
        if (opt.mode == RunMode::QuantizedInference && quantized) {
          const Int8Tensor xq = quantize_activation_int8(cur, opt.eps);
          if (l.policy == QuantPolicy::Ternary) {
            const TernaryTensor wt =
                quantize_pointwise_ternary(lp.weight, opt.eps, opt.per_channel_pw);
            cur = dequant_output(pointwise_ternary_conv(xq, wt), wt.alpha, xq.scale,
                                 DequantKind::Ternary);
          } else {
            const Int8Tensor wq = quantize_weight_int8(lp.weight, opt.eps);
            Int32Tensor acc = l.kind == LayerKind::Linear ? linear_int8(xq, wq)
                                                          : conv2d_int8(xq, wq, cp);
            cur = dequant_output(acc, wq.scale, xq.scale, DequantKind::Int8);
          }
          if (l.kind == LayerKind::Linear) cur = detail::add_bias(std::move(cur), lp.bias);
          break;
        }
        if (opt.mode == RunMode::Qat && quantized) {
          // Fake-quantized forward, computed as float kernels over the
          // quantized integer values with the scales applied afterwards. The
          // scales commute out of the convolution, so this is the same
          // function as convolving the dequantized operands, but the integer
          // accumulations are exact in fp32 and match the inference route
          // bit for bit instead of drifting at requantization boundaries.
          const Int8Tensor xq = quantize_activation_int8(cur, opt.eps);
          const FloatTensor xi = values_as_float(xq.shape, xq.values);
          FloatTensor acc;
          if (l.policy == QuantPolicy::Ternary) {
            const TernaryTensor wt =
                quantize_pointwise_ternary(lp.weight, opt.eps, opt.per_channel_pw);
            acc = conv2d(xi, values_as_float(wt.shape, wt.trits), cp);
            cur = dequant_output_t(acc, wt.alpha, xq.scale, DequantKind::Ternary);
            if (trace) trace->conv_w[i] = dequantize(wt);
          } else {
            const Int8Tensor wq = quantize_weight_int8(lp.weight, opt.eps);
            const FloatTensor wi = values_as_float(wq.shape, wq.values);
            acc = l.kind == LayerKind::Linear ? detail::linear_float(xi, wi) : conv2d(xi, wi, cp);
            cur = dequant_output_t(acc, wq.scale, xq.scale, DequantKind::Int8);
            if (trace) trace->conv_w[i] = dequantize(wq);
          }
          if (l.kind == LayerKind::Linear) cur = detail::add_bias(std::move(cur), lp.bias);
          if (trace) trace->conv_x[i] = dequantize(xq);
          break;
        }
        cur = l.kind == LayerKind::Linear
                  ? detail::add_bias(detail::linear_float(cur, lp.weight), lp.bias)
                  : conv2d(cur, lp.weight, cp);
        if (trace) {
          trace->conv_x[i] = i == 0 ? x : outputs[i - 1];
          trace->conv_w[i] = lp.weight;
        }
        break;
      }
      case LayerKind::BatchNorm: {
        if (opt.training) {
          auto [mean, var] = detail::batch_stats(cur);
          cur = batchnorm(cur, mean, var, lp.gamma, lp.beta, kBnEps);
          for (size_t c = 0; c < mean.size(); ++c) {
            lp.run_mean[c] = (1.0f - kBnMomentum) * lp.run_mean[c] + kBnMomentum * mean[c];
            lp.run_var[c] = (1.0f - kBnMomentum) * lp.run_var[c] + kBnMomentum * var[c];
          }
          if (trace) {
            trace->bn_mean[i] = std::move(mean);
            trace->bn_var[i] = std::move(var);
          }
        } else {
          cur = batchnorm(cur, lp.run_mean, lp.run_var, lp.gamma, lp.beta, kBnEps);
        }
        break;
      }
      case LayerKind::Activation:
        cur = l.act == ActKind::Prelu ? prelu(cur, lp.slopes) : relu6(cur);
        break;
      case LayerKind::AvgPoolGlobal:
        cur = detail::avgpool_global(cur);
        break;
      case LayerKind::ResidualAdd:
        cur = add(cur, outputs[static_cast<size_t>(l.residual_from)]);
        break;
    }
    if (opt.check_finite && !all_finite(cur)) throw NonFiniteError(static_cast<int>(i));
    outputs.push_back(cur);
  }
  if (trace) trace->outputs = std::move(outputs);
  return cur;
}

// ---------------------------------------------------------------------------
// Frozen quantized model: weights quantized once, float-side constants folded
// and (by default) rounded through fp16 so the in-memory model is exactly
// what the model file stores.
// ---------------------------------------------------------------------------

struct FrozenLayer {
  TernaryTensor tern;                   // pointwise conv
  Int8Tensor w8;                        // dense/depthwise conv, linear
  std::vector<float> bias;              // linear
  std::vector<float> bn_scale, bn_shift;// folded batchnorm
  std::vector<float> slopes;            // prelu
};

struct QuantizedModel {
  ArchSpec arch;
  std::vector<FrozenLayer> layers;
};

inline QuantizedModel freeze(const ArchSpec& a, const ParamState& p, float eps = kQuantEps,
                             bool per_channel_pw = true, bool round_scales_fp16 = true) {
  if (p.layers.size() != a.layers.size())
    throw std::invalid_argument("freeze: parameter state does not match arch");
  const auto r16 = [&](float v) { return round_scales_fp16 ? fp16_round(v) : v; };
  QuantizedModel m;
  m.arch = a;
  m.layers.resize(a.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    const LayerParams& lp = p.layers[i];
    FrozenLayer& f = m.layers[i];
    switch (l.kind) {
      case LayerKind::ConvPointwise:
        f.tern = quantize_pointwise_ternary(lp.weight, eps, per_channel_pw);
        for (auto& v : f.tern.alpha) v = r16(v);
        break;
      case LayerKind::ConvDense:
      case LayerKind::ConvDepthwise:
      case LayerKind::Linear:
        f.w8 = quantize_weight_int8(lp.weight, eps);
        for (auto& v : f.w8.scale) v = r16(v);
        for (float b : lp.bias) f.bias.push_back(r16(b));
        break;
      case LayerKind::BatchNorm:
        for (size_t c = 0; c < lp.gamma.size(); ++c) {
          const float inv = 1.0f / std::sqrt(lp.run_var[c] + kBnEps);
          f.bn_scale.push_back(r16(lp.gamma[c] * inv));
          f.bn_shift.push_back(r16(lp.beta[c] - lp.gamma[c] * lp.run_mean[c] * inv));
        }
        break;
      case LayerKind::Activation:
        for (float s : lp.slopes) f.slopes.push_back(r16(s));
        break;
      default:
        break;
    }
  }
  return m;
}

/// Integer-kernel forward over a frozen model. Optionally records the float
/// input seen by every layer (used by the instrumentation tests).
inline FloatTensor quantized_forward(const QuantizedModel& m, const FloatTensor& x,
                                     float eps = kQuantEps,
                                     std::vector<FloatTensor>* layer_inputs = nullptr) {
  (void)infer_shapes(m.arch, x.shape[0]);
  FloatTensor cur = x;
  std::vector<FloatTensor> outputs;
  outputs.reserve(m.arch.layers.size());
  for (size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerSpec& l = m.arch.layers[i];
    const FrozenLayer& f = m.layers[i];
    if (layer_inputs) layer_inputs->push_back(cur);
    switch (l.kind) {
      case LayerKind::ConvPointwise: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        cur = dequant_output(pointwise_ternary_conv(xq, f.tern), f.tern.alpha, xq.scale,
                             DequantKind::Ternary);
        break;
      }
      case LayerKind::ConvDense:
      case LayerKind::ConvDepthwise: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        const ConvParams cp{l.stride, l.padding, l.groups()};
        cur = dequant_output(conv2d_int8(xq, f.w8, cp), f.w8.scale, xq.scale, DequantKind::Int8);
        break;
      }
      case LayerKind::Linear: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        cur = detail::add_bias(
            dequant_output(linear_int8(xq, f.w8), f.w8.scale, xq.scale, DequantKind::Int8),
            f.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        FloatTensor y(cur.shape);
        const std::int64_t sp = cur.shape.rank() == 4
                                    ? static_cast<std::int64_t>(cur.shape[2]) * cur.shape[3]
                                    : 1;
        std::int64_t k = 0;
        for (int b = 0; b < cur.shape[0]; ++b)
          for (int c = 0; c < cur.shape[1]; ++c) {
            const float s = f.bn_scale[static_cast<size_t>(c)];
            const float t = f.bn_shift[static_cast<size_t>(c)];
            for (std::int64_t j = 0; j < sp; ++j, ++k) y[k] = s * cur[k] + t;
          }
        cur = std::move(y);
        break;
      }
      case LayerKind::Activation:
        cur = l.act == ActKind::Prelu ? prelu(cur, f.slopes) : relu6(cur);
        break;
      case LayerKind::AvgPoolGlobal:
        cur = detail::avgpool_global(cur);
        break;
      case LayerKind::ResidualAdd:
        cur = add(cur, outputs[static_cast<size_t>(l.residual_from)]);
        break;
    }
    outputs.push_back(cur);
  }
  return cur;
}

/// Float-kernel route over a frozen model: the quantized integer values are
/// convolved with float kernels and rescaled afterwards. Realizes the same
/// quantized function as quantized_forward (bit-identically while the exact
/// integer accumulations stay below 2^24).
inline FloatTensor frozen_float_forward(const QuantizedModel& m, const FloatTensor& x,
                                        float eps = kQuantEps) {
  (void)infer_shapes(m.arch, x.shape[0]);
  FloatTensor cur = x;
  std::vector<FloatTensor> outputs;
  outputs.reserve(m.arch.layers.size());
  for (size_t i = 0; i < m.arch.layers.size(); ++i) {
    const LayerSpec& l = m.arch.layers[i];
    const FrozenLayer& f = m.layers[i];
    switch (l.kind) {
      case LayerKind::ConvPointwise: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        const FloatTensor acc = conv2d(values_as_float(xq.shape, xq.values),
                                       values_as_float(f.tern.shape, f.tern.trits), ConvParams{});
        cur = dequant_output_t(acc, f.tern.alpha, xq.scale, DequantKind::Ternary);
        break;
      }
      case LayerKind::ConvDense:
      case LayerKind::ConvDepthwise: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        const FloatTensor acc =
            conv2d(values_as_float(xq.shape, xq.values), values_as_float(f.w8.shape, f.w8.values),
                   ConvParams{l.stride, l.padding, l.groups()});
        cur = dequant_output_t(acc, f.w8.scale, xq.scale, DequantKind::Int8);
        break;
      }
      case LayerKind::Linear: {
        const Int8Tensor xq = quantize_activation_int8(cur, eps);
        const FloatTensor acc = detail::linear_float(values_as_float(xq.shape, xq.values),
                                                     values_as_float(f.w8.shape, f.w8.values));
        cur = detail::add_bias(dequant_output_t(acc, f.w8.scale, xq.scale, DequantKind::Int8),
                               f.bias);
        break;
      }
      case LayerKind::BatchNorm: {
        FloatTensor y(cur.shape);
        const std::int64_t sp = cur.shape.rank() == 4
                                    ? static_cast<std::int64_t>(cur.shape[2]) * cur.shape[3]
                                    : 1;
        std::int64_t k = 0;
        for (int b = 0; b < cur.shape[0]; ++b)
          for (int c = 0; c < cur.shape[1]; ++c) {
            const float s = f.bn_scale[static_cast<size_t>(c)];
            const float t = f.bn_shift[static_cast<size_t>(c)];
            for (std::int64_t j = 0; j < sp; ++j, ++k) y[k] = s * cur[k] + t;
          }
        cur = std::move(y);
        break;
      }
      case LayerKind::Activation:
        cur = l.act == ActKind::Prelu ? prelu(cur, f.slopes) : relu6(cur);
        break;
      case LayerKind::AvgPoolGlobal:
        cur = detail::avgpool_global(cur);
        break;
      case LayerKind::ResidualAdd:
        cur = add(cur, outputs[static_cast<size_t>(l.residual_from)]);
        break;
    }
    outputs.push_back(cur);
  }
  return cur;
}

}  // namespace prom
