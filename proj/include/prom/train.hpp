#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "prom/dataset.hpp"
#include "prom/net.hpp"

namespace prom {

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps))
inline float cosine_lr(int step, int total_steps, float lr0) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step out of [0, total_steps]");
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

struct TrainConfig {
  float lr0 = 0.05f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  int epochs = 20;
  int batch_size = 25;
  float wd_reset_fraction = 0.5f;  // weight decay drops to zero at this point
  std::uint64_t seed = 1;
  bool use_prelu = true;
  bool per_channel_pw = true;  // per-tensor pointwise quantization when false
  float label_smoothing = 0.0f;
  RunMode mode = RunMode::Qat;  // Float trains the unquantized baseline
};

inline float weight_decay_schedule(int step, int total_steps, const TrainConfig& cfg) {
  return static_cast<double>(step) <
                 static_cast<double>(cfg.wd_reset_fraction) * static_cast<double>(total_steps)
             ? cfg.weight_decay
             : 0.0f;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  FloatTensor dlogits;
};

inline LossResult softmax_cross_entropy(const FloatTensor& logits, const std::vector<int>& labels,
                                        float smoothing = 0.0f) {
  const int batch = logits.shape[0], classes = logits.shape[1];
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("cross_entropy: label count != batch");
  LossResult r;
  r.dlogits = FloatTensor(logits.shape);
  double total = 0.0;
  for (int b = 0; b < batch; ++b) {
    const int y = labels[static_cast<size_t>(b)];
    if (y < 0 || y >= classes) throw std::invalid_argument("cross_entropy: label out of range");
    double mx = -1e30;
    for (int k = 0; k < classes; ++k) mx = std::max(mx, static_cast<double>(logits.at2(b, k)));
    double z = 0.0;
    for (int k = 0; k < classes; ++k) z += std::exp(static_cast<double>(logits.at2(b, k)) - mx);
    const double logz = std::log(z) + mx;
    const double off = smoothing / classes;
    for (int k = 0; k < classes; ++k) {
      const double logp = static_cast<double>(logits.at2(b, k)) - logz;
      const double target = (k == y ? 1.0 - smoothing : 0.0) + off;
      total -= target * logp;
      r.dlogits.at2(b, k) =
          static_cast<float>((std::exp(logp) - target) / static_cast<double>(batch));
    }
  }
  r.loss = total / batch;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient kernels
// ---------------------------------------------------------------------------

namespace detail {

inline FloatTensor conv2d_input_grad(const FloatTensor& dy, const FloatTensor& w,
                                     const ConvParams& p, const Shape& x_shape) {
  FloatTensor dx(x_shape);
  const int batch = x_shape[0], c_in = x_shape[1], h_in = x_shape[2], w_in = x_shape[3];
  const int c_out = w.shape[0], k = w.shape[2];
  const int cg_in = c_in / p.groups, cg_out = c_out / p.groups;
  const int h_out = dy.shape[2], w_out = dy.shape[3];

  if (k == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1) {
    const std::int64_t hw = static_cast<std::int64_t>(h_in) * w_in;
    for (int b = 0; b < batch; ++b)
      for (int oc = 0; oc < c_out; ++oc) {
        const float* g = dy.data.data() + (static_cast<std::int64_t>(b) * c_out + oc) * hw;
        for (int ic = 0; ic < c_in; ++ic) {
          const float wv = w.data[static_cast<std::int64_t>(oc) * c_in + ic];
          float* dst = dx.data.data() + (static_cast<std::int64_t>(b) * c_in + ic) * hw;
          for (std::int64_t i = 0; i < hw; ++i) dst[i] += wv * g[i];
        }
      }
    return dx;
  }

  for (int b = 0; b < batch; ++b)
    for (int g = 0; g < p.groups; ++g)
      for (int ocg = 0; ocg < cg_out; ++ocg) {
        const int oc = g * cg_out + ocg;
        for (int oh = 0; oh < h_out; ++oh)
          for (int ow = 0; ow < w_out; ++ow) {
            const float gv = dy.at(b, oc, oh, ow);
            if (gv == 0.0f) continue;
            for (int icg = 0; icg < cg_in; ++icg) {
              const int ic = g * cg_in + icg;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = oh * p.stride + kh - p.padding;
                if (ih < 0 || ih >= h_in) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = ow * p.stride + kw - p.padding;
                  if (iw < 0 || iw >= w_in) continue;
                  dx.at(b, ic, ih, iw) += w.at(oc, icg, kh, kw) * gv;
                }
              }
            }
          }
      }
  return dx;
}

inline FloatTensor conv2d_weight_grad(const FloatTensor& x, const FloatTensor& dy,
                                      const ConvParams& p, const Shape& w_shape) {
  FloatTensor dw(w_shape);
  const int batch = x.shape[0], c_in = x.shape[1], h_in = x.shape[2], w_in = x.shape[3];
  const int c_out = w_shape[0], k = w_shape[2];
  const int cg_in = c_in / p.groups, cg_out = c_out / p.groups;
  const int h_out = dy.shape[2], w_out = dy.shape[3];

  if (k == 1 && p.stride == 1 && p.padding == 0 && p.groups == 1) {
    const std::int64_t hw = static_cast<std::int64_t>(h_in) * w_in;
    for (int b = 0; b < batch; ++b)
      for (int oc = 0; oc < c_out; ++oc) {
        const float* g = dy.data.data() + (static_cast<std::int64_t>(b) * c_out + oc) * hw;
        for (int ic = 0; ic < c_in; ++ic) {
          const float* xs = x.data.data() + (static_cast<std::int64_t>(b) * c_in + ic) * hw;
          double acc = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(g[i]) * xs[i];
          dw.data[static_cast<std::int64_t>(oc) * c_in + ic] += static_cast<float>(acc);
        }
      }
    return dw;
  }

  for (int b = 0; b < batch; ++b)
    for (int g = 0; g < p.groups; ++g)
      for (int ocg = 0; ocg < cg_out; ++ocg) {
        const int oc = g * cg_out + ocg;
        for (int oh = 0; oh < h_out; ++oh)
          for (int ow = 0; ow < w_out; ++ow) {
            const float gv = dy.at(b, oc, oh, ow);
            if (gv == 0.0f) continue;
            for (int icg = 0; icg < cg_in; ++icg) {
              const int ic = g * cg_in + icg;
              for (int kh = 0; kh < k; ++kh) {
                const int ih = oh * p.stride + kh - p.padding;
                if (ih < 0 || ih >= h_in) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int iw = ow * p.stride + kw - p.padding;
                  if (iw < 0 || iw >= w_in) continue;
                  dw.at(oc, icg, kh, kw) += x.at(b, ic, ih, iw) * gv;
                }
              }
            }
          }
      }
  return dw;
}

inline void accumulate(FloatTensor& into, const FloatTensor& g) {
  if (into.data.empty()) {
    into = g;
    return;
  }
  for (std::int64_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace detail

/// Parameter-shaped container of zeros (for gradients and momentum buffers).
inline ParamState zeros_like_params(const ArchSpec& a) {
  ParamState p;
  p.layers.resize(a.layers.size());
  for (size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    LayerParams& lp = p.layers[i];
    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise:
        lp.weight = FloatTensor(weight_shape(l));
        break;
      case LayerKind::Linear:
        lp.weight = FloatTensor(weight_shape(l));
        lp.bias.assign(static_cast<size_t>(l.out_ch), 0.0f);
        break;
      case LayerKind::BatchNorm:
        lp.gamma.assign(static_cast<size_t>(l.out_ch), 0.0f);
        lp.beta.assign(static_cast<size_t>(l.out_ch), 0.0f);
        break;
      case LayerKind::Activation:
        if (l.act == ActKind::Prelu) lp.slopes.assign(static_cast<size_t>(l.out_ch), 0.0f);
        break;
      default:
        break;
    }
  }
  return p;
}

struct BackwardResult {
  double loss = 0.0;
  FloatTensor logits;
  ParamState grads;
};

/// Reverse-mode gradients of softmax cross-entropy w.r.t. every master weight,
/// bias, BatchNorm affine pair and PReLU slope. Quantize-dequantize nodes use
/// the straight-through estimator: the gradient w.r.t. a fake-quantized value
/// is passed to its master unchanged, and scale factors are stop-gradient
/// constants recomputed each forward.
inline BackwardResult backward(const ArchSpec& a, ParamState& p, const FloatTensor& x,
                               const std::vector<int>& labels, const ForwardOptions& opt_in,
                               float label_smoothing = 0.0f) {
  if (opt_in.mode == RunMode::QuantizedInference)
    throw std::invalid_argument("backward: integer inference mode has no gradients");
  ForwardOptions opt = opt_in;
  opt.training = true;
  opt.check_finite = true;

  ForwardTrace tr;
  BackwardResult out;
  out.logits = forward(a, p, x, opt, &tr);
  auto lr = softmax_cross_entropy(out.logits, labels, label_smoothing);
  if (!std::isfinite(lr.loss)) throw NonFiniteError(static_cast<int>(a.layers.size()) - 1);
  out.loss = lr.loss;
  out.grads = zeros_like_params(a);

  const int n = static_cast<int>(a.layers.size());
  std::vector<FloatTensor> gout(static_cast<size_t>(n));
  gout[static_cast<size_t>(n - 1)] = std::move(lr.dlogits);

  for (int i = n - 1; i >= 0; --i) {
    const LayerSpec& l = a.layers[static_cast<size_t>(i)];
    FloatTensor& g = gout[static_cast<size_t>(i)];
    if (g.data.empty()) g = FloatTensor(tr.outputs[static_cast<size_t>(i)].shape);
    const FloatTensor& input =
        i == 0 ? x : tr.outputs[static_cast<size_t>(i - 1)];
    LayerParams& gp = out.grads.layers[static_cast<size_t>(i)];
    FloatTensor dx;

    switch (l.kind) {
      case LayerKind::ConvDense:
      case LayerKind::ConvPointwise:
      case LayerKind::ConvDepthwise: {
        const ConvParams cp{l.stride, l.padding, l.groups()};
        const FloatTensor& x_used = tr.conv_x[static_cast<size_t>(i)];
        const FloatTensor& w_used = tr.conv_w[static_cast<size_t>(i)];
        gp.weight = detail::conv2d_weight_grad(x_used, g, cp, w_used.shape);
        dx = detail::conv2d_input_grad(g, w_used, cp, x_used.shape);
        break;
      }
      case LayerKind::Linear: {
        const FloatTensor& x_used = tr.conv_x[static_cast<size_t>(i)];
        const FloatTensor& w_used = tr.conv_w[static_cast<size_t>(i)];
        const int batch = x_used.shape[0], c = x_used.shape[1], o = l.out_ch;
        for (int b = 0; b < batch; ++b)
          for (int k = 0; k < o; ++k) {
            const float gv = g.at2(b, k);
            gp.bias[static_cast<size_t>(k)] += gv;
            for (int j = 0; j < c; ++j)
              gp.weight.at2(k, j) += gv * x_used.at2(b, j);
          }
        dx = FloatTensor(x_used.shape);
        for (int b = 0; b < batch; ++b)
          for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int k = 0; k < o; ++k)
              acc += static_cast<double>(g.at2(b, k)) * w_used.at2(k, j);
            dx.at2(b, j) = static_cast<float>(acc);
          }
        break;
      }
      case LayerKind::BatchNorm: {
        const LayerParams& lp = p.layers[static_cast<size_t>(i)];
        const auto& mean = opt.training ? tr.bn_mean[static_cast<size_t>(i)] : lp.run_mean;
        const auto& var = opt.training ? tr.bn_var[static_cast<size_t>(i)] : lp.run_var;
        const int ch = l.out_ch;
        const std::int64_t m = input.size() / ch;
        const std::int64_t sp =
            input.shape.rank() == 4 ? static_cast<std::int64_t>(input.shape[2]) * input.shape[3]
                                    : 1;
        std::vector<double> dg(static_cast<size_t>(ch), 0.0), db(static_cast<size_t>(ch), 0.0);
        // first pass: dgamma, dbeta
        std::int64_t idx = 0;
        for (int b = 0; b < input.shape[0]; ++b)
          for (int c = 0; c < ch; ++c) {
            const auto cs = static_cast<size_t>(c);
            const double inv = 1.0 / std::sqrt(static_cast<double>(var[cs]) + kBnEps);
            for (std::int64_t k = 0; k < sp; ++k, ++idx) {
              const double xh = (input[idx] - mean[cs]) * inv;
              dg[cs] += g[idx] * xh;
              db[cs] += g[idx];
            }
          }
        for (int c = 0; c < ch; ++c) {
          gp.gamma[static_cast<size_t>(c)] = static_cast<float>(dg[static_cast<size_t>(c)]);
          gp.beta[static_cast<size_t>(c)] = static_cast<float>(db[static_cast<size_t>(c)]);
        }
        // second pass: dx (training form couples dmean/dvar)
        dx = FloatTensor(input.shape);
        idx = 0;
        for (int b = 0; b < input.shape[0]; ++b)
          for (int c = 0; c < ch; ++c) {
            const auto cs = static_cast<size_t>(c);
            const double inv = 1.0 / std::sqrt(static_cast<double>(var[cs]) + kBnEps);
            const double k1 = lp.gamma[cs] * inv;
            const double gm = db[cs] / static_cast<double>(m);
            const double gv = dg[cs] / static_cast<double>(m);
            for (std::int64_t k = 0; k < sp; ++k, ++idx) {
              const double xh = (input[idx] - mean[cs]) * inv;
              dx[idx] = static_cast<float>(k1 * (g[idx] - gm - xh * gv));
            }
          }
        break;
      }
      case LayerKind::Activation: {
        dx = FloatTensor(input.shape);
        if (l.act == ActKind::Prelu) {
          const LayerParams& lp = p.layers[static_cast<size_t>(i)];
          const std::int64_t sp =
              input.shape.rank() == 4 ? static_cast<std::int64_t>(input.shape[2]) * input.shape[3]
                                      : 1;
          std::int64_t idx = 0;
          std::vector<double> ds(static_cast<size_t>(l.out_ch), 0.0);
          for (int b = 0; b < input.shape[0]; ++b)
            for (int c = 0; c < l.out_ch; ++c) {
              const float slope = lp.slopes[static_cast<size_t>(c)];
              for (std::int64_t k = 0; k < sp; ++k, ++idx) {
                if (input[idx] >= 0.0f) {
                  dx[idx] = g[idx];
                } else {
                  dx[idx] = slope * g[idx];
                  ds[static_cast<size_t>(c)] += static_cast<double>(g[idx]) * input[idx];
                }
              }
            }
          for (int c = 0; c < l.out_ch; ++c)
            gp.slopes[static_cast<size_t>(c)] = static_cast<float>(ds[static_cast<size_t>(c)]);
        } else {
          for (std::int64_t k = 0; k < input.size(); ++k)
            dx[k] = (input[k] > 0.0f && input[k] < 6.0f) ? g[k] : 0.0f;
        }
        break;
      }
      case LayerKind::AvgPoolGlobal: {
        dx = FloatTensor(input.shape);
        const std::int64_t sp = static_cast<std::int64_t>(input.shape[2]) * input.shape[3];
        const float inv = 1.0f / static_cast<float>(sp);
        std::int64_t idx = 0;
        for (int b = 0; b < input.shape[0]; ++b)
          for (int c = 0; c < input.shape[1]; ++c) {
            const float gv = g.at2(b, c) * inv;
            for (std::int64_t k = 0; k < sp; ++k, ++idx) dx[idx] = gv;
          }
        break;
      }
      case LayerKind::ResidualAdd: {
        dx = g;
        detail::accumulate(gout[static_cast<size_t>(l.residual_from)], g);
        break;
      }
    }
    if (i > 0) detail::accumulate(gout[static_cast<size_t>(i - 1)], dx);
  }
  return out;
}

/// One SGD step with coupled L2 weight decay and classical momentum.
/// BatchNorm affine parameters and PReLU slopes are exempt from decay.
inline void sgd_step(const ArchSpec& a, ParamState& p, const ParamState& grads,
                     ParamState& velocity, float lr, float wd, const TrainConfig& cfg) {
  const auto step_vec = [&](std::vector<float>& w, const std::vector<float>& g,
                            std::vector<float>& v, bool decay) {
    for (size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] + (decay ? wd * w[i] : 0.0f);
      v[i] = cfg.momentum * v[i] + gi;
      w[i] -= lr * v[i];
    }
  };
  for (size_t i = 0; i < a.layers.size(); ++i) {
    LayerParams& lp = p.layers[i];
    const LayerParams& gp = grads.layers[i];
    LayerParams& vp = velocity.layers[i];
    if (!lp.weight.data.empty())
      step_vec(lp.weight.data, gp.weight.data, vp.weight.data, true);
    if (!lp.bias.empty()) step_vec(lp.bias, gp.bias, vp.bias, true);
    if (!lp.gamma.empty()) {
      step_vec(lp.gamma, gp.gamma, vp.gamma, false);
      step_vec(lp.beta, gp.beta, vp.beta, false);
    }
    if (!lp.slopes.empty()) step_vec(lp.slopes, gp.slopes, vp.slopes, false);
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double wd = 0.0;
  std::vector<double> pw_zero_frac;  // one entry per pointwise conv layer
};

struct TrainResult {
  ArchSpec arch;  // the spec actually trained (after any PReLU swap)
  ParamState params;
  std::vector<EpochMetrics> log;
};

inline double evaluate(const ArchSpec& a, ParamState& p, const Dataset& ds, RunMode mode,
                       int batch_size, bool per_channel_pw = true) {
  ForwardOptions opt;
  opt.mode = mode;
  opt.training = false;
  opt.per_channel_pw = per_channel_pw;
  int correct = 0;
  std::vector<int> order(static_cast<size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
  for (int i0 = 0; i0 < ds.size(); i0 += batch_size) {
    const int count = std::min(batch_size, ds.size() - i0);
    FloatTensor x;
    std::vector<int> y;
    slice_batch(ds, order, i0, count, x, y);
    const FloatTensor logits = forward(a, p, x, opt);
    for (int b = 0; b < count; ++b) {
      int best = 0;
      for (int k = 1; k < logits.shape[1]; ++k)
        if (logits.at2(b, k) > logits.at2(b, best)) best = k;
      if (best == y[static_cast<size_t>(b)]) ++correct;
    }
  }
  return static_cast<double>(correct) / std::max(1, ds.size());
}

inline std::vector<double> pointwise_zero_fractions(const ArchSpec& a, const ParamState& p,
                                                    bool per_channel_pw) {
  std::vector<double> out;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].kind == LayerKind::ConvPointwise)
      out.push_back(
          ternary_stats(quantize_pointwise_ternary(p.layers[i].weight, kQuantEps, per_channel_pw))
              .frac_zero);
  return out;
}

/// Deterministic single-threaded training: fixed seed and data order give a
/// bit-stable loss trajectory and metrics log.
inline TrainResult train(const ArchSpec& base, const Dataset& train_ds, const Dataset& val_ds,
                         const TrainConfig& cfg) {
  if (train_ds.size() == 0) throw std::invalid_argument("train: empty dataset");
  TrainResult r;
  r.arch = cfg.use_prelu ? apply_prelu_swap(base) : base;
  r.params = init_params(r.arch, cfg.seed);
  ParamState velocity = zeros_like_params(r.arch);

  ForwardOptions opt;
  opt.mode = cfg.mode;
  opt.per_channel_pw = cfg.per_channel_pw;

  const int n = train_ds.size();
  const int batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.epochs * batches;
  Rng shuffle_rng(cfg.seed ^ 0xa5a5a5a5ULL);

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.next_u32() % static_cast<std::uint32_t>(i + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    double loss_sum = 0.0;
    int correct = 0;
    float lr = cfg.lr0, wd = cfg.weight_decay;
    for (int i0 = 0; i0 < n; i0 += cfg.batch_size, ++step) {
      const int count = std::min(cfg.batch_size, n - i0);
      FloatTensor x;
      std::vector<int> y;
      slice_batch(train_ds, order, i0, count, x, y);
      lr = cosine_lr(step, total_steps, cfg.lr0);
      wd = weight_decay_schedule(step, total_steps, cfg);
      auto bw = backward(r.arch, r.params, x, y, opt, cfg.label_smoothing);
      sgd_step(r.arch, r.params, bw.grads, velocity, lr, wd, cfg);
      loss_sum += bw.loss * count;
      for (int b = 0; b < count; ++b) {
        int best = 0;
        for (int k = 1; k < bw.logits.shape[1]; ++k)
          if (bw.logits.at2(b, k) > bw.logits.at2(b, best)) best = k;
        if (best == y[static_cast<size_t>(b)]) ++correct;
      }
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / n;
    em.train_acc = static_cast<double>(correct) / n;
    em.val_acc = val_ds.size() > 0
                     ? evaluate(r.arch, r.params, val_ds, cfg.mode, cfg.batch_size,
                                cfg.per_channel_pw)
                     : 0.0;
    em.lr = lr;
    em.wd = wd;
    em.pw_zero_frac = pointwise_zero_fractions(r.arch, r.params, cfg.per_channel_pw);
    r.log.push_back(std::move(em));
  }
  return r;
}

inline std::string metrics_to_csv(const std::vector<EpochMetrics>& log) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,loss,train_acc,val_acc,lr,wd";
  if (!log.empty())
    for (size_t i = 0; i < log[0].pw_zero_frac.size(); ++i) os << ",zero_frac_pw" << i;
  os << "\n";
  for (const auto& em : log) {
    os << em.epoch << ',' << em.train_loss << ',' << em.train_acc << ',' << em.val_acc << ','
       << em.lr << ',' << em.wd;
    for (double z : em.pw_zero_frac) os << ',' << z;
    os << "\n";
  }
  return os.str();
}

}  // namespace prom
