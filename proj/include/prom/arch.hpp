#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "prom/tensor.hpp"

namespace prom {

enum class LayerKind {
  ConvDense,      // full convolution (network stem)
  ConvPointwise,  // 1x1, channel mixing
  ConvDepthwise,  // 3x3, groups == channels
  Linear,
  BatchNorm,
  Activation,
  AvgPoolGlobal,
  ResidualAdd,
};

enum class ActKind { Relu6, Prelu };
enum class QuantPolicy { Ternary, Int8, Float };

inline bool is_conv(LayerKind k) {
  return k == LayerKind::ConvDense || k == LayerKind::ConvPointwise ||
         k == LayerKind::ConvDepthwise;
}
inline bool is_counted(LayerKind k) { return is_conv(k) || k == LayerKind::Linear; }

const char* to_string(LayerKind k);
const char* to_string(QuantPolicy p);
const char* to_string(ActKind a);

struct LayerSpec {
  LayerKind kind = LayerKind::ConvDense;
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  QuantPolicy policy = QuantPolicy::Float;
  ActKind act = ActKind::Relu6;    // meaningful for Activation layers only
  int residual_from = -1;          // ResidualAdd: index of the layer whose output is added

  int groups() const { return kind == LayerKind::ConvDepthwise ? in_ch : 1; }
};

/// Ordered layer graph plus input geometry. Residual wiring is expressed by
/// ResidualAdd layers referencing an earlier layer's output; blocks never
/// nest, so the reference is always to the input of the current block.
struct ArchSpec {
  std::string name;
  double width_mult = 1.0;
  int num_classes = 0;
  Shape input_shape;  // C x H x W, batch added at run time
  std::vector<LayerSpec> layers;
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::ConvDense: return "conv_dense";
    case LayerKind::ConvPointwise: return "conv_pointwise";
    case LayerKind::ConvDepthwise: return "conv_depthwise";
    case LayerKind::Linear: return "linear";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Activation: return "activation";
    case LayerKind::AvgPoolGlobal: return "avgpool_global";
    case LayerKind::ResidualAdd: return "residual_add";
  }
  return "?";
}
inline const char* to_string(QuantPolicy p) {
  switch (p) {
    case QuantPolicy::Ternary: return "ternary";
    case QuantPolicy::Int8: return "int8";
    case QuantPolicy::Float: return "float";
  }
  return "?";
}
inline const char* to_string(ActKind a) { return a == ActKind::Relu6 ? "relu6" : "prelu"; }

/// Per-layer input/output shapes for a given batch size, checking structural
/// soundness along the way. Throws on any inconsistency.
struct LayerShapes {
  Shape in;
  Shape out;
};

inline std::vector<LayerShapes> infer_shapes(const ArchSpec& a, int batch = 1) {
  if (a.input_shape.rank() != 3)
    throw std::invalid_argument("arch: input_shape must be C x H x W");
  std::vector<LayerShapes> out;
  out.reserve(a.layers.size());
  Shape cur{batch, a.input_shape[0], a.input_shape[1], a.input_shape[2]};
  std::vector<Shape> produced;
  for (size_t li = 0; li < a.layers.size(); ++li) {
    const LayerSpec& l = a.layers[li];
    const std::string where = "arch layer " + std::to_string(li) + " (" + to_string(l.kind) + ")";
    Shape next = cur;
    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise: {
        if (cur.rank() != 4 || cur[1] != l.in_ch)
          throw std::invalid_argument(where + ": expects " + std::to_string(l.in_ch) +
                                      " channels, got " + cur.str());
        if (l.kind == LayerKind::ConvPointwise &&
            (l.kernel != 1 || l.stride != 1 || l.padding != 0))
          throw std::invalid_argument(where + ": pointwise must be k=1, s=1, p=0");
        if (l.kind == LayerKind::ConvDepthwise && l.in_ch != l.out_ch)
          throw std::invalid_argument(where + ": depthwise needs in_ch == out_ch");
        const int h = (cur[2] + 2 * l.padding - l.kernel) / l.stride + 1;
        const int w = (cur[3] + 2 * l.padding - l.kernel) / l.stride + 1;
        if (h < 1 || w < 1) throw std::invalid_argument(where + ": empty spatial output");
        next = Shape{batch, l.out_ch, h, w};
        break;
      }
      case LayerKind::Linear:
        if (cur.rank() != 2 || cur[1] != l.in_ch)
          throw std::invalid_argument(where + ": expects flat features " +
                                      std::to_string(l.in_ch) + ", got " + cur.str());
        next = Shape{batch, l.out_ch};
        break;
      case LayerKind::BatchNorm:
      case LayerKind::Activation:
        if (cur.rank() < 2 || cur[1] != l.in_ch)
          throw std::invalid_argument(where + ": channel mismatch with " + cur.str());
        break;
      case LayerKind::AvgPoolGlobal:
        if (cur.rank() != 4)
          throw std::invalid_argument(where + ": needs a 4-D input");
        next = Shape{batch, cur[1]};
        break;
      case LayerKind::ResidualAdd: {
        if (l.residual_from < 0 || l.residual_from >= static_cast<int>(li))
          throw std::invalid_argument(where + ": bad residual reference");
        const Shape& src = produced[static_cast<size_t>(l.residual_from)];
        if (src != cur)
          throw std::invalid_argument(where + ": join shapes differ, " + src.str() + " vs " +
                                      cur.str());
        break;
      }
    }
    out.push_back({cur, next});
    produced.push_back(next);
    cur = next;
  }
  return out;
}

inline void validate(const ArchSpec& a) { (void)infer_shapes(a, 1); }

/// Check that every layer carries the canonical quantization policy:
/// pointwise -> ternary, dense/depthwise/linear -> int8, elementwise -> float.
inline void check_prom_policy(const ArchSpec& a) {
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    QuantPolicy want = QuantPolicy::Float;
    if (l.kind == LayerKind::ConvPointwise) want = QuantPolicy::Ternary;
    else if (is_counted(l.kind)) want = QuantPolicy::Int8;
    if (l.policy != want)
      throw std::invalid_argument("layer " + std::to_string(i) + " (" + to_string(l.kind) +
                                  ") has policy " + to_string(l.policy) + ", expected " +
                                  to_string(want));
  }
}

/// Round a scaled channel count to the nearest multiple of `divisor`, never
/// below it and never more than 10% under the unrounded value.
inline int make_divisible(double v, int divisor = 8) {
  int nv = std::max(divisor, (static_cast<int>(v + divisor / 2.0) / divisor) * divisor);
  if (nv < 0.9 * v) nv += divisor;
  return nv;
}

namespace detail {
inline void push_conv(std::vector<LayerSpec>& ls, LayerKind kind, int in, int out, int k, int s,
                      int p) {
  QuantPolicy pol = kind == LayerKind::ConvPointwise ? QuantPolicy::Ternary : QuantPolicy::Int8;
  ls.push_back({kind, in, out, k, s, p, pol});
}
inline void push_bn_act(std::vector<LayerSpec>& ls, int ch, bool with_act) {
  ls.push_back({LayerKind::BatchNorm, ch, ch, 1, 1, 0, QuantPolicy::Float});
  if (with_act) ls.push_back({LayerKind::Activation, ch, ch, 1, 1, 0, QuantPolicy::Float});
}

// expand -> BN -> act -> depthwise -> BN -> act -> project -> BN (+ residual)
inline void push_inverted_residual(std::vector<LayerSpec>& ls, int in, int out, int stride,
                                   int expand) {
  const int block_input = static_cast<int>(ls.size()) - 1;
  const int hidden = in * expand;
  if (expand != 1) {
    push_conv(ls, LayerKind::ConvPointwise, in, hidden, 1, 1, 0);
    push_bn_act(ls, hidden, true);
  }
  push_conv(ls, LayerKind::ConvDepthwise, hidden, hidden, 3, stride, 1);
  push_bn_act(ls, hidden, true);
  push_conv(ls, LayerKind::ConvPointwise, hidden, out, 1, 1, 0);
  push_bn_act(ls, out, false);
  if (stride == 1 && in == out)
    ls.push_back({LayerKind::ResidualAdd, out, out, 1, 1, 0, QuantPolicy::Float, ActKind::Relu6,
                  block_input});
}
}  // namespace detail

/// Standard MobileNetV2 topology with a width multiplier. Channel counts are
/// scaled and rounded to multiples of 8; the classifier head never shrinks
/// below 1280 channels.
inline ArchSpec mobilenet_v2(double width_mult, int num_classes = 1000, int input_res = 224) {
  if (width_mult <= 0.0) throw std::invalid_argument("mobilenet_v2: width_mult must be > 0");
  struct Stage {
    int t, c, n, s;
  };
  static constexpr Stage kStages[] = {{1, 16, 1, 1},  {6, 24, 2, 2},  {6, 32, 3, 2},
                                      {6, 64, 4, 2},  {6, 96, 3, 1},  {6, 160, 3, 2},
                                      {6, 320, 1, 1}};
  ArchSpec a;
  a.name = "mobilenet_v2";
  a.width_mult = width_mult;
  a.num_classes = num_classes;
  a.input_shape = Shape{3, input_res, input_res};

  const int stem = make_divisible(32.0 * width_mult);
  detail::push_conv(a.layers, LayerKind::ConvDense, 3, stem, 3, 2, 1);
  detail::push_bn_act(a.layers, stem, true);

  int in = stem;
  for (const Stage& st : kStages) {
    const int out = make_divisible(st.c * width_mult);
    for (int i = 0; i < st.n; ++i) {
      detail::push_inverted_residual(a.layers, in, out, i == 0 ? st.s : 1, st.t);
      in = out;
    }
  }
  const int head = make_divisible(1280.0 * std::max(1.0, width_mult));
  detail::push_conv(a.layers, LayerKind::ConvPointwise, in, head, 1, 1, 0);
  detail::push_bn_act(a.layers, head, true);
  a.layers.push_back({LayerKind::AvgPoolGlobal, head, head, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Linear, head, num_classes, 1, 1, 0, QuantPolicy::Int8});
  validate(a);
  return a;
}

/// Desk-scale depthwise-separable network for 32x32 inputs: a 16-channel
/// stem, three inverted-residual blocks (t=4, c=24/48/96, s=1/2/2), a
/// 192-channel head, global pooling and a linear classifier.
inline ArchSpec tiny_dsnet(int num_classes = 10) {
  ArchSpec a;
  a.name = "tiny_dsnet";
  a.width_mult = 1.0;
  a.num_classes = num_classes;
  a.input_shape = Shape{3, 32, 32};

  detail::push_conv(a.layers, LayerKind::ConvDense, 3, 16, 3, 1, 1);
  detail::push_bn_act(a.layers, 16, true);
  int in = 16;
  const int chans[] = {24, 48, 96};
  const int strides[] = {1, 2, 2};
  for (int i = 0; i < 3; ++i) {
    detail::push_inverted_residual(a.layers, in, chans[i], strides[i], 4);
    in = chans[i];
  }
  detail::push_conv(a.layers, LayerKind::ConvPointwise, in, 192, 1, 1, 0);
  detail::push_bn_act(a.layers, 192, true);
  a.layers.push_back({LayerKind::AvgPoolGlobal, 192, 192, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Linear, 192, num_classes, 1, 1, 0, QuantPolicy::Int8});
  validate(a);
  return a;
}

/// Replace every activation with PReLU (one learnable slope per channel).
/// Idempotent.
inline ArchSpec apply_prelu_swap(ArchSpec a) {
  for (LayerSpec& l : a.layers)
    if (l.kind == LayerKind::Activation) l.act = ActKind::Prelu;
  return a;
}

/// Trainable parameter count: conv/linear weights, linear bias, BatchNorm
/// affine pairs and PReLU slopes.
inline std::int64_t param_count(const ArchSpec& a) {
  std::int64_t n = 0;
  for (const LayerSpec& l : a.layers) {
    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise:
        n += static_cast<std::int64_t>(l.out_ch) * (l.in_ch / l.groups()) * l.kernel * l.kernel;
        break;
      case LayerKind::Linear:
        n += static_cast<std::int64_t>(l.out_ch) * l.in_ch + l.out_ch;
        break;
      case LayerKind::BatchNorm:
        n += 2LL * l.out_ch;
        break;
      case LayerKind::Activation:
        if (l.act == ActKind::Prelu) n += l.out_ch;
        break;
      default:
        break;
    }
  }
  return n;
}

}  // namespace prom
