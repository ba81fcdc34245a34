#include <catch2/catch_amalgamated.hpp>

#include "prom/train.hpp"

using namespace prom;

// ---------------------------------------------------------------------------
// Double-precision reference network for the finite-difference oracle. This
// re-implements the quantizer-free op set (conv, batch-stat BN, PReLU, global
// pool, linear, softmax cross-entropy) independently of the library code.
// ---------------------------------------------------------------------------

namespace {

struct RefParams {
  std::vector<double> conv_w;  // (co, ci, k, k)
  std::vector<double> gamma, beta;
  std::vector<double> slopes;
  std::vector<double> lin_w;  // (o, c)
  std::vector<double> lin_b;
};

struct RefDims {
  int batch, ci, hi, wi, co, k, stride, pad, classes;
  int ho() const { return (hi + 2 * pad - k) / stride + 1; }
  int wo() const { return (wi + 2 * pad - k) / stride + 1; }
};

double ref_loss(const RefDims& d, const RefParams& prm, const std::vector<double>& x,
                const std::vector<int>& labels) {
  const int ho = d.ho(), wo = d.wo();
  // conv
  std::vector<double> y(static_cast<size_t>(d.batch) * d.co * ho * wo, 0.0);
  auto xat = [&](int b, int c, int h, int w) {
    return x[static_cast<size_t>(((b * d.ci + c) * d.hi + h) * d.wi + w)];
  };
  for (int b = 0; b < d.batch; ++b)
    for (int oc = 0; oc < d.co; ++oc)
      for (int oh = 0; oh < ho; ++oh)
        for (int ow = 0; ow < wo; ++ow) {
          double acc = 0.0;
          for (int ic = 0; ic < d.ci; ++ic)
            for (int kh = 0; kh < d.k; ++kh)
              for (int kw = 0; kw < d.k; ++kw) {
                const int ih = oh * d.stride + kh - d.pad;
                const int iw = ow * d.stride + kw - d.pad;
                if (ih < 0 || ih >= d.hi || iw < 0 || iw >= d.wi) continue;
                acc += prm.conv_w[static_cast<size_t>(((oc * d.ci + ic) * d.k + kh) * d.k + kw)] *
                       xat(b, ic, ih, iw);
              }
          y[static_cast<size_t>(((b * d.co + oc) * ho + oh) * wo + ow)] = acc;
        }
  // batch-stat BN
  const int m = d.batch * ho * wo;
  for (int c = 0; c < d.co; ++c) {
    double s = 0.0, q = 0.0;
    for (int b = 0; b < d.batch; ++b)
      for (int i = 0; i < ho * wo; ++i) {
        const double v = y[static_cast<size_t>((b * d.co + c) * ho * wo + i)];
        s += v;
        q += v * v;
      }
    const double mean = s / m;
    const double var = q / m - mean * mean;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int b = 0; b < d.batch; ++b)
      for (int i = 0; i < ho * wo; ++i) {
        auto& v = y[static_cast<size_t>((b * d.co + c) * ho * wo + i)];
        v = prm.gamma[static_cast<size_t>(c)] * (v - mean) * inv + prm.beta[static_cast<size_t>(c)];
      }
  }
  // prelu
  for (int b = 0; b < d.batch; ++b)
    for (int c = 0; c < d.co; ++c)
      for (int i = 0; i < ho * wo; ++i) {
        auto& v = y[static_cast<size_t>((b * d.co + c) * ho * wo + i)];
        if (v < 0) v *= prm.slopes[static_cast<size_t>(c)];
      }
  // global pool
  std::vector<double> pooled(static_cast<size_t>(d.batch) * d.co, 0.0);
  for (int b = 0; b < d.batch; ++b)
    for (int c = 0; c < d.co; ++c) {
      double s = 0.0;
      for (int i = 0; i < ho * wo; ++i)
        s += y[static_cast<size_t>((b * d.co + c) * ho * wo + i)];
      pooled[static_cast<size_t>(b * d.co + c)] = s / (ho * wo);
    }
  // linear
  std::vector<double> logits(static_cast<size_t>(d.batch) * d.classes, 0.0);
  for (int b = 0; b < d.batch; ++b)
    for (int o = 0; o < d.classes; ++o) {
      double acc = prm.lin_b[static_cast<size_t>(o)];
      for (int c = 0; c < d.co; ++c)
        acc += prm.lin_w[static_cast<size_t>(o * d.co + c)] *
               pooled[static_cast<size_t>(b * d.co + c)];
      logits[static_cast<size_t>(b * d.classes + o)] = acc;
    }
  // softmax cross-entropy (mean)
  double total = 0.0;
  for (int b = 0; b < d.batch; ++b) {
    double mx = -1e300;
    for (int o = 0; o < d.classes; ++o)
      mx = std::max(mx, logits[static_cast<size_t>(b * d.classes + o)]);
    double z = 0.0;
    for (int o = 0; o < d.classes; ++o)
      z += std::exp(logits[static_cast<size_t>(b * d.classes + o)] - mx);
    total -= logits[static_cast<size_t>(b * d.classes + labels[static_cast<size_t>(b)])] - mx -
             std::log(z);
  }
  return total / d.batch;
}

double tensor_rel_err(const std::vector<float>& got, const std::vector<double>& want) {
  REQUIRE(got.size() == want.size());
  double dmax = 0.0, wmax = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    dmax = std::max(dmax, std::fabs(static_cast<double>(got[i]) - want[i]));
    wmax = std::max(wmax, std::fabs(want[i]));
  }
  return dmax / std::max(wmax, 1e-12);
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.5f) == Catch::Approx(0.5f));
  CHECK(cosine_lr(100, 100, 0.5f) == Catch::Approx(0.0f).margin(1e-8));
  CHECK(cosine_lr(50, 100, 0.5f) == Catch::Approx(0.25f));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.5f), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(-1, 10, 0.5f), std::invalid_argument);
  float prev = 1e9f;
  for (int s = 0; s <= 200; ++s) {
    const float lr = cosine_lr(s, 200, 0.1f);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("weight decay resets at the configured fraction") {
  TrainConfig cfg;
  cfg.weight_decay = 4e-5f;
  cfg.wd_reset_fraction = 0.5f;
  CHECK(weight_decay_schedule(49, 100, cfg) == 4e-5f);
  CHECK(weight_decay_schedule(50, 100, cfg) == 0.0f);
  CHECK(weight_decay_schedule(99, 100, cfg) == 0.0f);
  cfg.wd_reset_fraction = 1.0f;
  CHECK(weight_decay_schedule(99, 100, cfg) == 4e-5f);
}

TEST_CASE("sgd_step recurrences") {
  ArchSpec a;
  a.name = "lin";
  a.input_shape = Shape{2, 1, 1};
  a.layers.push_back({LayerKind::AvgPoolGlobal, 2, 2, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Linear, 2, 1, 1, 1, 0, QuantPolicy::Float});
  auto p = zeros_like_params(a);
  auto g = zeros_like_params(a);
  auto v = zeros_like_params(a);
  p.layers[1].weight.data = {1.0f, 2.0f};
  TrainConfig cfg;

  SECTION("vanilla sgd") {
    cfg.momentum = 0.0f;
    g.layers[1].weight.data = {0.5f, -0.5f};
    sgd_step(a, p, g, v, 0.1f, 0.0f, cfg);
    CHECK(p.layers[1].weight.data[0] == Catch::Approx(0.95f));
    CHECK(p.layers[1].weight.data[1] == Catch::Approx(2.05f));
  }
  SECTION("momentum moves weights even with zero gradient") {
    cfg.momentum = 0.9f;
    v.layers[1].weight.data = {1.0f, 0.0f};
    sgd_step(a, p, g, v, 0.1f, 0.0f, cfg);
    CHECK(p.layers[1].weight.data[0] == Catch::Approx(1.0f - 0.1f * 0.9f));
  }
  SECTION("two steps with fixed gradient displace by -lr*(g + 1.9g)") {
    cfg.momentum = 0.9f;
    g.layers[1].weight.data = {1.0f, 0.0f};
    sgd_step(a, p, g, v, 0.1f, 0.0f, cfg);
    sgd_step(a, p, g, v, 0.1f, 0.0f, cfg);
    CHECK(p.layers[1].weight.data[0] == Catch::Approx(1.0f - 0.1f * (1.0f + 1.9f)));
  }
  SECTION("coupled decay adds wd*w to the gradient") {
    cfg.momentum = 0.0f;
    sgd_step(a, p, g, v, 0.1f, 0.01f, cfg);
    CHECK(p.layers[1].weight.data[0] == Catch::Approx(1.0f - 0.1f * 0.01f * 1.0f));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  // Quantizer-free 3-layer net: conv(3->5,k3,s2,p1) -> BN -> PReLU -> pool ->
  // linear. The oracle evaluates an independent double-precision
  // implementation at parameter +-1e-3.
  const RefDims d{3, 3, 6, 6, 5, 3, 2, 1, 4};
  ArchSpec a;
  a.name = "fd_net";
  a.input_shape = Shape{d.ci, d.hi, d.wi};
  a.num_classes = d.classes;
  a.layers.push_back({LayerKind::ConvDense, d.ci, d.co, d.k, d.stride, d.pad, QuantPolicy::Float});
  a.layers.push_back({LayerKind::BatchNorm, d.co, d.co, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Activation, d.co, d.co, 1, 1, 0, QuantPolicy::Float,
                      ActKind::Prelu});
  a.layers.push_back({LayerKind::AvgPoolGlobal, d.co, d.co, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Linear, d.co, d.classes, 1, 1, 0, QuantPolicy::Float});
  auto p = init_params(a, 99);

  Rng rng(7);
  FloatTensor x(Shape{d.batch, d.ci, d.hi, d.wi});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  const std::vector<int> labels{0, 2, 3};

  ForwardOptions opt{.mode = RunMode::Float, .training = true};
  auto bw = backward(a, p, x, labels, opt);

  // mirror everything into the double-precision reference
  RefParams prm;
  prm.conv_w.assign(p.layers[0].weight.data.begin(), p.layers[0].weight.data.end());
  prm.gamma.assign(p.layers[1].gamma.begin(), p.layers[1].gamma.end());
  prm.beta.assign(p.layers[1].beta.begin(), p.layers[1].beta.end());
  prm.slopes.assign(p.layers[2].slopes.begin(), p.layers[2].slopes.end());
  prm.lin_w.assign(p.layers[4].weight.data.begin(), p.layers[4].weight.data.end());
  prm.lin_b.assign(p.layers[4].bias.begin(), p.layers[4].bias.end());
  std::vector<double> xd(x.data.begin(), x.data.end());

  const double h = 1e-3;
  auto fd_grad = [&](std::vector<double>& vec) {
    std::vector<double> grad(vec.size());
    for (size_t i = 0; i < vec.size(); ++i) {
      const double keep = vec[i];
      vec[i] = keep + h;
      const double up = ref_loss(d, prm, xd, labels);
      vec[i] = keep - h;
      const double dn = ref_loss(d, prm, xd, labels);
      vec[i] = keep;
      grad[i] = (up - dn) / (2.0 * h);
    }
    return grad;
  };

  CHECK(tensor_rel_err(bw.grads.layers[0].weight.data, fd_grad(prm.conv_w)) < 1e-3);
  CHECK(tensor_rel_err(bw.grads.layers[1].gamma, fd_grad(prm.gamma)) < 1e-3);
  CHECK(tensor_rel_err(bw.grads.layers[1].beta, fd_grad(prm.beta)) < 1e-3);
  CHECK(tensor_rel_err(bw.grads.layers[2].slopes, fd_grad(prm.slopes)) < 1e-3);
  CHECK(tensor_rel_err(bw.grads.layers[4].weight.data, fd_grad(prm.lin_w)) < 1e-3);
  CHECK(tensor_rel_err(bw.grads.layers[4].bias, fd_grad(prm.lin_b)) < 1e-3);

  // the library's own loss agrees with the reference at the base point
  CHECK(bw.loss == Catch::Approx(ref_loss(d, prm, xd, labels)).epsilon(1e-4));
}

TEST_CASE("STE: gradients depend on masters only through their quantized values") {
  // Two networks whose fake-quantized weights and activations coincide must
  // produce bit-identical gradients; the quantized one routes them to its
  // master weights unchanged.
  ArchSpec q;
  q.name = "q";
  q.input_shape = Shape{3, 4, 4};
  q.layers.push_back({LayerKind::ConvPointwise, 3, 6, 1, 1, 0, QuantPolicy::Ternary});
  q.layers.push_back({LayerKind::AvgPoolGlobal, 6, 6, 1, 1, 0, QuantPolicy::Float});
  q.layers.push_back({LayerKind::Linear, 6, 3, 1, 1, 0, QuantPolicy::Float});
  ArchSpec f = q;
  f.name = "f";
  f.layers[0].policy = QuantPolicy::Float;

  auto pq = init_params(q, 21);
  auto pf = pq;
  pf.layers[0].weight = fake_quant(pq.layers[0].weight, FakeQuantKind::TernaryPw);

  Rng rng(22);
  FloatTensor x(Shape{2, 3, 4, 4});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  const FloatTensor x_fq = fake_quant(x, FakeQuantKind::Int8Act);
  const std::vector<int> labels{0, 1};

  ForwardOptions opt{.mode = RunMode::Qat, .training = true};
  auto bq = backward(q, pq, x, labels, opt);
  ForwardOptions optf{.mode = RunMode::Float, .training = true};
  auto bf = backward(f, pf, x_fq, labels, optf);

  // same function, different association: agreement to float rounding
  CHECK(bq.loss == Catch::Approx(bf.loss).epsilon(1e-6));
  for (std::int64_t i = 0; i < bq.logits.size(); ++i)
    CHECK(bq.logits[i] == Catch::Approx(bf.logits[i]).margin(1e-5));
  for (size_t i = 0; i < bq.grads.layers[0].weight.data.size(); ++i)
    CHECK(bq.grads.layers[0].weight.data[i] ==
          Catch::Approx(bf.grads.layers[0].weight.data[i]).margin(1e-5));
  for (size_t i = 0; i < bq.grads.layers[2].weight.data.size(); ++i)
    CHECK(bq.grads.layers[2].weight.data[i] ==
          Catch::Approx(bf.grads.layers[2].weight.data[i]).margin(1e-5));
}

TEST_CASE("int8 fake-quant fixed point gives identical gradients for distinct masters") {
  ArchSpec a;
  a.name = "w8";
  a.input_shape = Shape{2, 3, 3};
  a.layers.push_back({LayerKind::ConvDense, 2, 4, 3, 1, 1, QuantPolicy::Int8});
  a.layers.push_back({LayerKind::AvgPoolGlobal, 4, 4, 1, 1, 0, QuantPolicy::Float});
  a.layers.push_back({LayerKind::Linear, 4, 2, 1, 1, 0, QuantPolicy::Float});
  auto p1 = init_params(a, 31);
  auto p2 = p1;
  p2.layers[0].weight = fake_quant(p1.layers[0].weight, FakeQuantKind::Int8Weight);
  REQUIRE(p1.layers[0].weight.data != p2.layers[0].weight.data);

  Rng rng(32);
  FloatTensor x(Shape{2, 2, 3, 3});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  ForwardOptions opt{.mode = RunMode::Qat, .training = true};
  auto b1 = backward(a, p1, x, {0, 1}, opt);
  auto b2 = backward(a, p2, x, {0, 1}, opt);
  CHECK(b1.grads.layers[0].weight.data == b2.grads.layers[0].weight.data);
}

TEST_CASE("zero input and zero weights give zero conv gradients") {
  auto a = tiny_dsnet(10);
  auto p = init_params(a, 41);
  for (auto& lp : p.layers) {
    for (auto& v : lp.weight.data) v = 0.0f;
    for (auto& v : lp.bias) v = 0.0f;
  }
  FloatTensor x(Shape{2, 3, 32, 32});  // zeros
  ForwardOptions opt{.mode = RunMode::Float, .training = true};
  auto bw = backward(a, p, x, {1, 2}, opt);
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (is_conv(a.layers[i].kind))
      for (float g : bw.grads.layers[i].weight.data) CHECK(g == 0.0f);
}

TEST_CASE("divergence is reported with the offending layer") {
  auto a = tiny_dsnet(10);
  auto p = init_params(a, 51);
  p.layers[0].weight[0] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(52);
  FloatTensor x(Shape{1, 3, 32, 32});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  ForwardOptions opt{.mode = RunMode::Float, .training = true};
  try {
    backward(a, p, x, {0}, opt);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.layer == 0);
  }
}

TEST_CASE("one epoch reduces the training loss (majority of seeds)") {
  auto ds = make_synthetic_dataset(80, 900);
  int wins = 0;
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    cfg.seed = seed;
    cfg.lr0 = 0.05f;
    auto arch = tiny_dsnet(10);
    // loss at init
    auto swapped = apply_prelu_swap(arch);
    auto p0 = init_params(swapped, seed);
    ForwardOptions opt{.mode = RunMode::Qat, .training = true};
    std::vector<int> order(static_cast<size_t>(ds.size()));
    for (int i = 0; i < ds.size(); ++i) order[static_cast<size_t>(i)] = i;
    FloatTensor x;
    std::vector<int> y;
    slice_batch(ds, order, 0, ds.size(), x, y);
    auto init_fw = forward(swapped, p0, x, opt);
    const double init_loss = softmax_cross_entropy(init_fw, y).loss;

    auto res = train(arch, ds, Dataset{}, cfg);
    if (res.log.back().train_loss < init_loss) ++wins;
  }
  CHECK(wins >= 2);
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  auto ds = make_synthetic_dataset(48, 901);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 12;
  cfg.seed = 7;
  auto r1 = train(tiny_dsnet(10), ds, ds, cfg);
  auto r2 = train(tiny_dsnet(10), ds, ds, cfg);
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t e = 0; e < r1.log.size(); ++e) {
    CHECK(r1.log[e].train_loss == r2.log[e].train_loss);
    CHECK(r1.log[e].val_acc == r2.log[e].val_acc);
    CHECK(r1.log[e].pw_zero_frac == r2.log[e].pw_zero_frac);
  }
  CHECK(metrics_to_csv(r1.log) == metrics_to_csv(r2.log));

  // metrics CSV carries the documented columns
  const std::string csv = metrics_to_csv(r1.log);
  CHECK(csv.rfind("epoch,loss,train_acc,val_acc,lr,wd,zero_frac_pw0", 0) == 0);
}

TEST_CASE("label validation") {
  FloatTensor logits(Shape{1, 3}, {0.1f, 0.2f, 0.3f});
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {5}), std::invalid_argument);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), std::invalid_argument);
}
