#include <doctest.h>

#include <cmath>
#include <random>

#include "../support.hpp"
#include "rpnt/attention.hpp"
#include "rpnt/errors.hpp"

using namespace rpnt;
using namespace rpnt::attention;
using rpnt::test::random_tensor;
using rpnt::test::delta_kernel;
using rpnt::test::random_angles;
using rpnt::test::reference_attention;

namespace {

ContextAttnConfig small_config(AttentionKind kind, HistoryMode history = HistoryMode::full_window()) {
  ContextAttnConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.kernel_rows = 3;
  c.kernel_cols = 3;
  c.kind = kind;
  c.history = history;
  return c;
}

}  // namespace

TEST_CASE("standard kind equals loop-based causal rotary attention") {
  nn::Rng rng(1);
  ContextAttnLayer l(small_config(AttentionKind::kStandard), rng);
  std::mt19937_64 g(2);
  Tensor x = random_tensor({2, 5, 8}, g);
  auto angles = random_angles(2, 5, 8, g);
  auto out = l.forward(x, angles, {});
  auto ref = reference_attention(l, x, angles);
  CHECK(test::max_abs_diff(out.output.data(), std::span<const double>(ref)) <= 1e-12);
}

TEST_CASE("forced centre-delta kernel reduces context attention to the standard form") {
  nn::Rng rng(3);
  for (std::size_t k : {3u, 5u}) {
    auto cfg = small_config(AttentionKind::kContext);
    cfg.kernel_rows = k;
    cfg.kernel_cols = k;
    ContextAttnLayer l(cfg, rng);
    l.forced_kernel = delta_kernel(2, k, k);
    std::mt19937_64 g(4 + k);
    Tensor x = random_tensor({3, 6, 8}, g);
    auto angles = random_angles(3, 6, 8, g);
    auto ref = reference_attention(l, x, angles);
    CHECK(test::max_abs_diff(l.forward(x, angles, {}).output.data(), std::span<const double>(ref)) <= 1e-12);
  }
}

TEST_CASE("generated kernels are softmax distributions and start uniform") {
  nn::Rng rng(5);
  ContextAttnLayer l(small_config(AttentionKind::kContext), rng);
  std::mt19937_64 g(6);
  Tensor c = random_tensor({2, l.config().context_dim()}, g);
  Tensor k = l.generate_kernels(c);
  REQUIRE(k.shape() == ad::Shape{2, 2, 3, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      s += k.data()[i * 9 + j];
      CHECK(k.data()[i * 9 + j] == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("context vector is an attention-weighted average of the projected history") {
  nn::Rng rng(7);
  ContextAttnLayer l(small_config(AttentionKind::kContext), rng);
  std::mt19937_64 g(8);
  Tensor hist = random_tensor({1, 4, 8}, g);
  Tensor c = l.context_vector(hist);
  Tensor hp = l.context_mlp(hist);
  std::size_t dc = l.config().context_dim();
  std::vector<double> score(4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t e = 0; e < dc; ++e) score[t] += hp.data()[t * dc + e] * l.pool_query.data()[e];
  auto w = test::naive_softmax(score);
  for (std::size_t e = 0; e < dc; ++e) {
    double ref = 0.0;
    for (std::size_t t = 0; t < 4; ++t) ref += w[t] * hp.data()[t * dc + e];
    CHECK(c.data()[e] == doctest::Approx(ref).epsilon(1e-12));
  }
  CHECK_THROWS_AS(l.context_vector(Tensor::zeros({1, 0, 8})), UsageError);
}

TEST_CASE("receding context at the first row only sees bin zero") {
  nn::Rng rng(9);
  ContextAttnLayer l(small_config(AttentionKind::kContext), rng);
  std::mt19937_64 g(10);
  Tensor hist = random_tensor({1, 5, 8}, g);
  Tensor rc = l.receding_context(hist, 2);
  Tensor first = l.context_mlp(hist);
  std::size_t dc = l.config().context_dim();
  for (std::size_t e = 0; e < dc; ++e) CHECK(rc.data()[e] == doctest::Approx(first.data()[e]).epsilon(1e-12));
  // Row 3 with window 2 matches context_vector over bins 2..3.
  Tensor sub({1, 2, 8}, std::vector<double>(hist.data().begin() + 16, hist.data().begin() + 32));
  Tensor c = l.context_vector(sub);
  for (std::size_t e = 0; e < dc; ++e) CHECK(rc.data()[3 * dc + e] == doctest::Approx(c.data()[e]).epsilon(1e-12));
}

TEST_CASE("property: past-only context attention is causal") {
  nn::Rng rng(11);
  auto cfg = small_config(AttentionKind::kContext, HistoryMode::past_only(3));
  ContextAttnLayer l(cfg, rng);
  // Non-uniform kernels so every tap matters.
  std::mt19937_64 g(12);
  for (auto& [name, p] : [&] { nn::NamedParams n; l.collect("a", n); return n; }()) {
    Tensor t = p;
    for (double& v : t.mutable_data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(g);
  }
  const std::size_t T = 7;
  Tensor x = random_tensor({1, T, 8}, g);
  auto angles = random_angles(1, T, 8, g);
  Tensor base = l.forward(x, angles, {}).output;
  for (std::size_t tp = 1; tp < T; ++tp) {
    Tensor y = x.detach();
    Tensor yc(y.shape(), std::vector<double>(y.data().begin(), y.data().end()));
    for (std::size_t e = 0; e < 8; ++e) yc.mutable_data()[tp * 8 + e] += 5.0;
    Tensor out = l.forward(yc, angles, {}).output;
    for (std::size_t t = 0; t < tp; ++t)
      for (std::size_t e = 0; e < 8; ++e) CHECK(std::abs(out.at({0, t, e}) - base.at({0, t, e})) <= 1e-12);
    double moved = 0.0;
    for (std::size_t e = 0; e < 8; ++e) moved += std::abs(out.at({0, tp, e}) - base.at({0, tp, e}));
    CHECK(moved > 1e-6);
  }
}

TEST_CASE("attention weights are retained on request and are row-stochastic and causal") {
  nn::Rng rng(13);
  ContextAttnLayer l(small_config(AttentionKind::kContext), rng);
  std::mt19937_64 g(14);
  Tensor x = random_tensor({2, 4, 8}, g);
  CHECK_FALSE(l.forward(x, {}, {}).weights.defined());
  nn::ForwardContext ctx{false, nullptr, true};
  Tensor w = l.forward(x, {}, ctx).weights;
  REQUIRE(w.shape() == ad::Shape{2, 2, 4, 4});
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      if (c > r % 4) CHECK(w.data()[r * 4 + c] == 0.0);
      s += w.data()[r * 4 + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("context attention gradients check against central differences") {
  nn::Rng rng(15);
  auto cfg = small_config(AttentionKind::kContext, HistoryMode::past_only(2));
  cfg.d_model = 4;
  ContextAttnLayer l(cfg, rng);
  std::mt19937_64 g(16);
  Tensor w = random_tensor({1, 3, 4}, g);
  auto angles = random_angles(1, 3, 4, g);
  auto f = [&](const Tensor& x) { return ad::sum(ad::mul(l.forward(x, angles, {}).output, w)); };
  CHECK(ad::grad_check(f, random_tensor({1, 3, 4}, g)) <= 1e-6);
}

TEST_CASE("bidirectional multi-head attention matches a loop reference") {
  nn::Rng rng(17);
  MultiHeadAttention mha(4, 2, rng);
  CHECK_FALSE(mha.wk.bias.defined());
  std::mt19937_64 g(18);
  Tensor x = random_tensor({1, 3, 4}, g);
  Tensor out = mha.forward(x, {}).output;
  auto proj = [&](const nn::Linear& p) {
    std::vector<double> y(12);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t o = 0; o < 4; ++o) {
        double acc = p.bias.defined() ? p.bias.data()[o] : 0.0;
        for (std::size_t i = 0; i < 4; ++i) acc += x.data()[r * 4 + i] * p.weight.data()[i * 4 + o];
        y[r * 4 + o] = acc;
      }
    return y;
  };
  auto q = proj(mha.wq), k = proj(mha.wk), v = proj(mha.wv);
  std::vector<double> merged(12, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> s(3);
      for (std::size_t j = 0; j < 3; ++j)
        s[j] = (q[i * 4 + 2 * h] * k[j * 4 + 2 * h] + q[i * 4 + 2 * h + 1] * k[j * 4 + 2 * h + 1]) / std::sqrt(2.0);
      auto p = test::naive_softmax(s);
      for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t e = 0; e < 2; ++e) merged[i * 4 + 2 * h + e] += p[j] * v[j * 4 + 2 * h + e];
    }
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t o = 0; o < 4; ++o) {
      double acc = mha.wo.bias.data()[o];
      for (std::size_t i = 0; i < 4; ++i) acc += merged[r * 4 + i] * mha.wo.weight.data()[i * 4 + o];
      CHECK(out.at({0, r, o}) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("configuration validation and history parsing") {
  nn::Rng rng(19);
  auto bad = small_config(AttentionKind::kContext);
  bad.kernel_rows = 4;
  CHECK_THROWS_AS(ContextAttnLayer(bad, rng), ConfigError);
  bad = small_config(AttentionKind::kContext);
  bad.n_heads = 3;
  CHECK_THROWS_AS(ContextAttnLayer(bad, rng), ConfigError);
  CHECK(HistoryMode::parse("full") == HistoryMode::full_window());
  CHECK(HistoryMode::parse("past:4") == HistoryMode::past_only(4));
  CHECK(HistoryMode::past_only(4).str() == "past:4");
  CHECK_THROWS_AS(HistoryMode::parse("past:"), ConfigError);
  CHECK_THROWS_AS(HistoryMode::parse("past:0"), ConfigError);
  CHECK_THROWS_AS(HistoryMode::parse("recent"), ConfigError);
  CHECK(parse_attention_kind("standard") == AttentionKind::kStandard);
  CHECK_THROWS_AS(parse_attention_kind("linear"), ConfigError);
  ContextAttnLayer l(small_config(AttentionKind::kContext), rng);
  std::mt19937_64 g(20);
  CHECK_THROWS_AS(l.forward(random_tensor({1, 3, 6}, g), {}, {}), DimensionError);
  l.forced_kernel = Tensor::zeros({1, 3, 3});
  CHECK_THROWS_AS(l.forward(random_tensor({1, 3, 8}, g), {}, {}), DimensionError);
}

TEST_CASE("non-finite inputs raise a numeric fault naming the layer") {
  nn::Rng rng(21);
  ContextAttnLayer l(small_config(AttentionKind::kStandard), rng);
  l.layer_index = 3;
  Tensor x = Tensor::zeros({1, 2, 8});
  x.mutable_data()[0] = NAN;
  try {
    l.forward(x, {}, {});
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
}
