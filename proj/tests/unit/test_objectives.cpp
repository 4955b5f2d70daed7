#include <doctest.h>

#include <cmath>
#include <random>

#include "../support.hpp"
#include "rpnt/errors.hpp"
#include "rpnt/objectives.hpp"

using namespace rpnt;
using namespace rpnt::objectives;
using rpnt::test::random_tensor;

namespace {

Tensor single(double v) { return Tensor({1, 1}, {v}); }
Tensor hidden_one() { return Tensor({1, 1}, {0.0}); }

// Per-position loss rate - x log(rate + eps), minimized by golden-section
// search on a log-rate parametrization.
double minimize_rate(double x, double start) {
  auto f = [&](double u) { return poisson_loss(single(std::exp(u)), single(x), hidden_one()).item(); };
  double lo = std::log(start) - 25.0, hi = std::log(start) + 25.0;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
  double fa = f(a), fb = f(b);
  for (int i = 0; i < 200; ++i) {
    if (fa < fb) {
      hi = b, b = a, fb = fa, a = hi - g * (hi - lo), fa = f(a);
    } else {
      lo = a, a = b, fa = fb, b = lo + g * (hi - lo), fb = f(b);
    }
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace

TEST_CASE("Poisson loss oracle values") {
  CHECK(poisson_loss(single(1.0), single(0.0), hidden_one()).item() == 1.0);
  double v = poisson_loss(single(2.0), single(3.0), hidden_one()).item();
  CHECK(std::abs(v - (2.0 - 3.0 * std::log(2.0 + 1e-8))) <= 1e-12);
  CHECK(std::abs(v - (-0.079442)) <= 1e-6);
}

TEST_CASE("Poisson loss ignores visible entries and averages over the batch") {
  Tensor rates({2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor x({2, 1, 2}, {0.0, 1.0, 2.0, 3.0});
  Tensor mask({2, 1, 2}, {1.0, 0.0, 0.0, 1.0});
  double ref = ((2.0 - std::log(2.0 + 1e-8)) + (3.0 - 2.0 * std::log(3.0 + 1e-8))) / 2.0;
  CHECK(poisson_loss(rates, x, mask).item() == doctest::Approx(ref).epsilon(1e-14));
  CHECK(poisson_loss(rates, x, Tensor::full({2, 1, 2}, 1.0)).item() == 0.0);
}

TEST_CASE("Poisson loss gradient is 1 - x / (rate + eps)") {
  std::mt19937_64 rng(1);
  Tensor x({3, 4}, [&] {
    std::vector<double> v(12);
    std::poisson_distribution<int> p(2.0);
    for (double& e : v) e = p(rng);
    return v;
  }());
  Tensor mask = Tensor::zeros({3, 4});
  Tensor rates = random_tensor({3, 4}, rng, 0.2, 4.0, true);
  ad::backward(poisson_loss(rates, x, mask));
  for (std::size_t i = 0; i < 12; ++i) {
    double ref = (1.0 - x.data()[i] / (rates.data()[i] + kPoissonEps)) / 3.0;
    CHECK(std::abs(rates.grad()[i] - ref) <= 1e-14);
  }
  auto f = [&](const Tensor& r) { return poisson_loss(r, x, mask); };
  CHECK(ad::grad_check(f, rates.detach()) <= 1e-8);
}

TEST_CASE("property: the per-position minimizer of the Poisson loss is the count") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> start(0.05, 20.0);
  for (double x : {0.5, 1.0, 2.0, 3.0, 7.0, 15.0}) {
    for (int k = 0; k < 3; ++k) CHECK(std::abs(minimize_rate(x, start(rng)) - x) <= 1e-4);
  }
}

TEST_CASE("Poisson loss domain checks") {
  CHECK_THROWS_AS(poisson_loss(single(0.0), single(1.0), hidden_one()), NumericFault);
  CHECK_THROWS_AS(poisson_loss(single(NAN), single(1.0), hidden_one()), NumericFault);
  CHECK_THROWS_AS(poisson_loss(single(1.0), single(-1.0), hidden_one()), DomainError);
  CHECK_THROWS_AS(poisson_loss(Tensor({1, 2}, {1, 1}), single(1.0), hidden_one()), DimensionError);
}

TEST_CASE("property: uniform random masking hides three quarters on average") {
  // E[1 - (1 - p_t)(1 - p_n)] with p_t, p_n ~ U(0, 1) is 3/4.
  const std::size_t draws = 10000;
  double total = 0.0;
  for (std::size_t i = 0; i < draws; i += 100) {
    auto spec = sample_mask(100, 50, 50, MaskStrategy::uniform_random(), 1000 + i);
    total += spec.masked_fraction() * 100.0;
  }
  CHECK(std::abs(total / static_cast<double>(draws) - 0.75) <= 0.02);
}

TEST_CASE("masks hide the union of masked rows and columns") {
  auto spec = sample_mask(20, 8, 6, MaskStrategy::uniform_random(), 3);
  for (std::size_t b = 0; b < 20; ++b) {
    std::vector<bool> row(8), col(6);
    for (std::size_t t = 0; t < 8; ++t) {
      bool all = true;
      for (std::size_t n = 0; n < 6; ++n) all = all && spec.mask.at({b, t, n}) == 0.0;
      row[t] = all;
    }
    for (std::size_t n = 0; n < 6; ++n) {
      bool all = true;
      for (std::size_t t = 0; t < 8; ++t) all = all && spec.mask.at({b, t, n}) == 0.0;
      col[n] = all;
    }
    // Every hidden entry lies in a fully hidden row or column.
    for (std::size_t t = 0; t < 8; ++t)
      for (std::size_t n = 0; n < 6; ++n)
        if (spec.mask.at({b, t, n}) == 0.0) CHECK((row[t] || col[n]));
    CHECK(spec.p_time[b] >= 0.0);
    CHECK(spec.p_time[b] <= 1.0);
  }
}

TEST_CASE("fixed ratios and entrywise masking match their expected fractions") {
  auto fixed = sample_mask(400, 20, 20, MaskStrategy::fixed(0.25, 0.5), 4);
  CHECK(std::abs(fixed.masked_fraction() - (1.0 - 0.75 * 0.5)) <= 0.02);
  for (double p : fixed.p_neuron) CHECK(p == 0.25);
  auto entry = sample_mask(400, 20, 20, MaskStrategy::entrywise(), 5);
  CHECK(std::abs(entry.masked_fraction() - 0.5) <= 0.02);
  for (double p : entry.p_neuron) CHECK(p == 0.0);
}

TEST_CASE("masks are reproducible per seed and never fully visible or hidden") {
  auto a = sample_mask(50, 4, 3, MaskStrategy::uniform_random(), 6);
  auto b = sample_mask(50, 4, 3, MaskStrategy::uniform_random(), 6);
  CHECK(test::to_vec(a.mask) == test::to_vec(b.mask));
  for (std::size_t e = 0; e < 50; ++e) {
    double visible = 0.0;
    for (std::size_t i = 0; i < 12; ++i) visible += a.mask.data()[e * 12 + i];
    CHECK(visible > 0.0);
    CHECK(visible < 12.0);
  }
  CHECK_THROWS_AS(sample_mask(1, 2, 2, MaskStrategy::fixed(0.0, 0.0), 7), ConfigError);
  CHECK_THROWS_AS(sample_mask(0, 2, 2, MaskStrategy::uniform_random(), 7), ConfigError);
}

TEST_CASE("masking strategy names round-trip and the ablation grid is complete") {
  for (const auto& s : MaskStrategy::ablation_grid()) CHECK(MaskStrategy::parse(s.str()).str() == s.str());
  CHECK(MaskStrategy::ablation_grid().size() == 6);
  CHECK(MaskStrategy::parse("entrywise").kind == MaskStrategy::Kind::kEntrywise);
  CHECK_THROWS_AS(MaskStrategy::parse("fixed:2,0.5"), ConfigError);
  CHECK_THROWS_AS(MaskStrategy::parse("sometimes"), ConfigError);
}

TEST_CASE("contrastive loss closed forms") {
  std::mt19937_64 rng(8);
  Tensor v = random_tensor({1, 1, 3, 4}, rng);
  std::vector<double> same;
  for (int s = 0; s < 2; ++s) same.insert(same.end(), v.data().begin(), v.data().end());
  CHECK(std::abs(contrastive_loss(Tensor({1, 2, 3, 4}, same), 0.1).item() - std::log(2.0)) <= 1e-9);

  Tensor ortho({1, 2, 1, 2}, {3.0, 0.0, 0.0, 0.5});
  double ref = -std::log(std::exp(10.0) / (std::exp(10.0) + 1.0));
  CHECK(std::abs(contrastive_loss(ortho, 0.1).item() - ref) <= 1e-9);
}

TEST_CASE("contrastive loss pools over time and batch before comparing sites") {
  std::mt19937_64 rng(9);
  Tensor z = random_tensor({2, 3, 4, 5}, rng);
  // Reference: mean over (b, t) per site, cosine similarities, cross-entropy.
  std::vector<std::vector<double>> zbar(3, std::vector<double>(5, 0.0));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t d = 0; d < 5; ++d) zbar[s][d] += z.at({b, s, t, d}) / 8.0;
  double ref = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> logits(3);
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0, ni = 0, nj = 0;
      for (std::size_t d = 0; d < 5; ++d) dot += zbar[i][d] * zbar[j][d], ni += zbar[i][d] * zbar[i][d], nj += zbar[j][d] * zbar[j][d];
      logits[j] = dot / std::sqrt(ni * nj) / 0.2;
    }
    ref -= std::log(test::naive_softmax(logits)[i]) / 3.0;
  }
  CHECK(contrastive_loss(z, 0.2).item() == doctest::Approx(ref).epsilon(1e-12));
  CHECK(ad::grad_check([](const Tensor& t) { return contrastive_loss(t, 0.2); }, z) <= 1e-6);
  CHECK_THROWS_AS(contrastive_loss(random_tensor({1, 1, 2, 2}, rng)), ConfigError);
}

TEST_CASE("ssl loss combines reconstruction and contrast with weight mu") {
  std::mt19937_64 rng(10);
  Tensor rates = random_tensor({2, 2, 3, 4}, rng, 0.5, 2.0);
  Tensor x = random_tensor({2, 2, 3, 4}, rng, 0.0, 3.0);
  Tensor mask = ad::reshape(sample_mask(4, 3, 4, MaskStrategy::fixed(0.5, 0.5), 11).mask, {2, 2, 3, 4});
  Tensor z = random_tensor({2, 2, 3, 6}, rng);
  auto l = ssl_loss(rates, x, mask, z, 0.3, 0.1);
  double recon = poisson_loss(rates, x, mask).item();
  double con = contrastive_loss(z, 0.1).item();
  CHECK(l.total.item() == doctest::Approx(recon + 0.3 * con).epsilon(1e-14));
  CHECK(l.breakdown.recon == recon);
  CHECK(l.breakdown.contrast == con);
  auto none = ssl_loss(rates, x, mask, z, 0.0);
  CHECK(none.total.item() == recon);
  CHECK(none.breakdown.contrast == 0.0);
}

TEST_CASE("r2 and mse against hand computations") {
  Tensor y({4, 2}, {1, 0, 2, 1, 3, 0, 4, 1});
  Tensor p({4, 2}, {1.5, 0, 2, 1, 2.5, 0, 4, 0.5});
  auto r = r2_score(p, y);
  // dim 0: ss_res 0.5, ss_tot 5; dim 1: ss_res 0.25, ss_tot 1.
  CHECK(r.per_dim[0] == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(r.per_dim[1] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(r.mean == doctest::Approx(0.825).epsilon(1e-14));
  CHECK(r2_score(y, y).mean == 1.0);
  CHECK(mse_loss(p, y).item() == doctest::Approx(0.75 / 8.0).epsilon(1e-14));
  Tensor flat({3, 2}, {1, 0, 1, 1, 1, 2});
  auto f = r2_score(flat, flat);
  CHECK(std::isnan(f.per_dim[0]));
  CHECK(std::isnan(f.mean));
  CHECK(f.warnings.size() == 1);
}
