#include <catch2/catch_amalgamated.hpp>

#include "prom/quantize.hpp"

using namespace prom;

namespace {
FloatTensor row_tensor(std::vector<float> v) {
  const int n = static_cast<int>(v.size());
  return FloatTensor(Shape{1, n, 1, 1}, std::move(v));
}
}  // namespace

TEST_CASE("roundclip rounds half to even and clamps") {
  CHECK(roundclip(1.8f, -1, 1) == 1);
  CHECK(roundclip(-0.4f, -1, 1) == 0);
  CHECK(roundclip(31.75f, -128, 127) == 32);
  // ties
  CHECK(roundclip(0.5f, -128, 127) == 0);
  CHECK(roundclip(1.5f, -128, 127) == 2);
  CHECK(roundclip(2.5f, -128, 127) == 2);
  CHECK(roundclip(-0.5f, -128, 127) == 0);
  CHECK(roundclip(-2.5f, -128, 127) == -2);
  // clamping
  CHECK(roundclip(400.0f, -128, 127) == 127);
  CHECK(roundclip(-400.0f, -128, 127) == -128);
}

TEST_CASE("ternary quantization of a pointwise row") {
  auto t = quantize_pointwise_ternary(row_tensor({0.4f, -0.6f, 0.1f, 0.9f}));
  REQUIRE(t.alpha.size() == 1);
  CHECK(t.alpha[0] == Catch::Approx(0.5f));
  CHECK(t.trits == std::vector<std::int8_t>{1, -1, 0, 1});
}

TEST_CASE("ternary quantization of degenerate rows") {
  auto z = quantize_pointwise_ternary(row_tensor({0.0f, 0.0f, 0.0f}));
  CHECK(z.alpha[0] == 0.0f);
  CHECK(z.trits == std::vector<std::int8_t>{0, 0, 0});

  auto c = quantize_pointwise_ternary(row_tensor({0.7f, 0.7f, 0.7f}));
  CHECK(c.trits == std::vector<std::int8_t>{1, 1, 1});
}

TEST_CASE("ternary quantization rejects non-1x1 kernels") {
  FloatTensor w(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(quantize_pointwise_ternary(w), std::invalid_argument);
}

TEST_CASE("int8 weight quantization per channel") {
  auto q = quantize_weight_int8(row_tensor({0.5f, -2.0f}));
  CHECK(q.scale[0] == Catch::Approx(2.0f));
  CHECK(q.values == std::vector<std::int8_t>{32, -127});
  CHECK(q.scale_kind == ScaleKind::PerChannel);

  auto z = quantize_weight_int8(row_tensor({0.0f, 0.0f}));
  CHECK(z.values == std::vector<std::int8_t>{0, 0});

  // the positive absmax entry maps to exactly 127
  auto m = quantize_weight_int8(row_tensor({0.3f, 1.7f, -0.2f}));
  CHECK(m.values[1] == 127);
}

TEST_CASE("int8 activation quantization per batch element") {
  FloatTensor x(Shape{2, 2, 1, 1}, {1.0f, -4.0f, 0.5f, 0.25f});
  auto q = quantize_activation_int8(x);
  CHECK(q.scale_kind == ScaleKind::PerBatchElement);
  REQUIRE(q.scale.size() == 2);
  CHECK(q.scale[0] == Catch::Approx(4.0f));
  CHECK(q.values[0] == 32);    // 1.0 * 127/4 = 31.75 -> 32
  CHECK(q.values[1] == -127);  // entry equal to -gamma, never -128
  CHECK(q.scale[1] == Catch::Approx(0.5f));

  FloatTensor z(Shape{1, 3, 1, 1});
  auto qz = quantize_activation_int8(z);
  CHECK(qz.values == std::vector<std::int8_t>{0, 0, 0});
}

TEST_CASE("dequantize ternary and int8") {
  TernaryTensor t;
  t.shape = Shape{1, 3, 1, 1};
  t.trits = {1, -1, 0};
  t.alpha = {0.5f};
  auto w = dequantize(t);
  CHECK(w.data == std::vector<float>{0.5f, -0.5f, 0.0f});

  Int8Tensor q;
  q.shape = Shape{1, 1};
  q.values = {127};
  q.scale = {2.0f};
  auto f = dequantize(q);
  CHECK(f[0] == Catch::Approx(2.0f));

  auto rt = dequantize(quantize_weight_int8(row_tensor({0.5f, -2.0f})));
  CHECK(rt[0] == Catch::Approx(32.0f * 2.0f / 127.0f));  // 0.50394
  CHECK(rt[0] == Catch::Approx(0.50394f).margin(1e-4));
  CHECK(rt[1] == Catch::Approx(-2.0f));
}

TEST_CASE("fake_quant fixed points") {
  // all-nonzero grid values: alpha = mean|x| = 0.5 is self-consistent
  auto x = row_tensor({0.5f, -0.5f, 0.5f, -0.5f});
  auto y = fake_quant(x, FakeQuantKind::TernaryPw);
  for (int i = 0; i < 4; ++i) CHECK(y[i] == Catch::Approx(x[i]).margin(2e-5));

  FloatTensor z(Shape{1, 4, 1, 1});
  auto fz = fake_quant(z, FakeQuantKind::TernaryPw);
  CHECK(fz.data == std::vector<float>(4, 0.0f));
}

TEST_CASE("int8 fake_quant obeys the half-step bound") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    FloatTensor w(Shape{3, 17});
    for (auto& v : w.data) v = static_cast<float>(rng.normal() * 2.0);
    auto q = quantize_weight_int8(w);
    auto fq = dequantize(q);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 17; ++j) {
        const float beta = q.scale[static_cast<size_t>(i)];
        const float bound = beta / 254.0f + 1.01f * kQuantEps + 1e-6f;
        CHECK(std::fabs(fq.at2(i, j) - w.at2(i, j)) <= bound);
      }
  }
}

TEST_CASE("ternary half-step bound for non-clipped entries") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    FloatTensor w(Shape{2, 33, 1, 1});
    for (auto& v : w.data) v = static_cast<float>(rng.normal());
    auto t = quantize_pointwise_ternary(w);
    auto wq = dequantize(t);
    for (std::int64_t i = 0; i < w.size(); ++i) {
      const float a = t.alpha[static_cast<size_t>(i / 33)];
      if (std::fabs(w[i]) <= 1.5f * a) {
        CHECK(std::fabs(w[i] - wq[i]) <= 0.5f * a + 2.0f * a * kQuantEps + 1e-6f);
      }
    }
  }
}

TEST_CASE("quantization is sign-equivariant") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    FloatTensor w(Shape{4, 9, 1, 1});
    for (auto& v : w.data) v = static_cast<float>(rng.normal());
    FloatTensor neg(w.shape);
    for (std::int64_t i = 0; i < w.size(); ++i) neg[i] = -w[i];

    auto t1 = quantize_pointwise_ternary(w);
    auto t2 = quantize_pointwise_ternary(neg);
    CHECK(t1.alpha == t2.alpha);
    for (size_t i = 0; i < t1.trits.size(); ++i) CHECK(t1.trits[i] == -t2.trits[i]);

    auto q1 = quantize_weight_int8(w);
    auto q2 = quantize_weight_int8(neg);
    CHECK(q1.scale == q2.scale);
    for (size_t i = 0; i < q1.values.size(); ++i) CHECK(static_cast<int>(q1.values[i]) == -static_cast<int>(q2.values[i]));
  }
}

TEST_CASE("int8 fake_quant is idempotent") {
  Rng rng(19);
  FloatTensor w(Shape{5, 13});
  for (auto& v : w.data) v = static_cast<float>(rng.normal() * 3.0);
  auto once = fake_quant(w, FakeQuantKind::Int8Weight);
  auto twice = fake_quant(once, FakeQuantKind::Int8Weight);
  for (std::int64_t i = 0; i < w.size(); ++i)
    CHECK(twice[i] == Catch::Approx(once[i]).margin(1e-5));

  FloatTensor x(Shape{2, 3, 4, 4});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  auto ao = fake_quant(x, FakeQuantKind::Int8Act);
  auto at = fake_quant(ao, FakeQuantKind::Int8Act);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(at[i] == Catch::Approx(ao[i]).margin(1e-5));
}

TEST_CASE("scales are non-negative and divisions finite") {
  Rng rng(23);
  FloatTensor w(Shape{6, 11, 1, 1});
  for (auto& v : w.data) v = static_cast<float>(rng.normal());
  auto t = quantize_pointwise_ternary(w);
  for (float a : t.alpha) CHECK(a >= 0.0f);
  auto q = quantize_weight_int8(w);
  for (float b : q.scale) CHECK(b >= 0.0f);
  CHECK(all_finite(dequantize(t)));
  CHECK(all_finite(dequantize(q)));
}

TEST_CASE("ternary distribution at He initialization") {
  // He-normal pointwise weights rescaled by their channel absmean have
  // variance pi/2; the zero bucket then collects ~31% of entries and the
  // remaining mass splits evenly between -1 and +1 (~34.5% each).
  auto w = he_normal_init(Shape{1024, 1024, 1, 1}, 1024, 1234);
  auto stats = ternary_stats(quantize_pointwise_ternary(w));
  CHECK(stats.frac_zero == Catch::Approx(0.31).margin(0.02));
  CHECK(stats.frac_neg == Catch::Approx(0.345).margin(0.02));
  CHECK(stats.frac_pos == Catch::Approx(0.345).margin(0.02));
  CHECK(stats.frac_neg + stats.frac_zero + stats.frac_pos == Catch::Approx(1.0));
}

TEST_CASE("ternary_stats edge cases") {
  auto z = quantize_pointwise_ternary(row_tensor({0.0f, 0.0f, 0.0f, 0.0f}));
  CHECK(ternary_stats(z).frac_zero == 1.0);

  TernaryTensor empty;
  CHECK_THROWS_AS(ternary_stats(empty), std::invalid_argument);
}

TEST_CASE("per-tensor ablation uses one alpha for all channels") {
  FloatTensor w(Shape{2, 2, 1, 1}, {1.0f, -1.0f, 3.0f, -3.0f});
  auto t = quantize_pointwise_ternary(w, kQuantEps, /*per_channel=*/false);
  CHECK(t.alpha[0] == Catch::Approx(2.0f));
  CHECK(t.alpha[1] == Catch::Approx(2.0f));
  // row 0 entries land just below 0.5 after the eps guard -> 0; row 1 -> +-1
  CHECK(t.trits == std::vector<std::int8_t>{0, 0, 1, -1});
}
