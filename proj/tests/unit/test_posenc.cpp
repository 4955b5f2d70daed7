#include <doctest.h>

#include <cmath>
#include <random>

#include "../support.hpp"
#include "rpnt/errors.hpp"
#include "rpnt/posenc.hpp"

using namespace rpnt;
using namespace rpnt::posenc;
using rpnt::test::random_tensor;

namespace {

PositionVector random_position(std::size_t groups, std::mt19937_64& rng, double range = 50.0) {
  std::uniform_real_distribution<double> d(-range, range);
  PositionVector p;
  for (std::size_t g = 0; g < groups; ++g) p.coords.push_back(d(rng));
  return p;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

}  // namespace

TEST_CASE("group frequencies follow base^(-2i/dim) inside each group") {
  auto spec = RopeGroupSpec::preset_3d(12);
  REQUIRE(spec.num_groups() == 3);
  CHECK(spec.total_dim() == 12);
  const auto& f = spec.frequencies();
  REQUIRE(f.size() == 6);
  double bases[3] = {5000.0, 5000.0, 10000.0};
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(spec.pair_groups()[g * 2 + i] == g);
      CHECK(f[g * 2 + i] == doctest::Approx(std::pow(bases[g], -2.0 * static_cast<double>(i) / 4.0)).epsilon(1e-15));
    }
  }
  auto s4 = RopeGroupSpec::preset_4d(16);
  CHECK(s4.groups()[0].base == 10.0);
  CHECK(s4.groups()[1].base == 100.0);
  CHECK(s4.groups()[2].base == 1000.0);
  CHECK(s4.groups()[3].base == 10000.0);
}

TEST_CASE("rotary dimension must split into even groups") {
  CHECK_THROWS_AS(RopeGroupSpec::preset_3d(10), ConfigError);
  CHECK_THROWS_AS(RopeGroupSpec::preset_4d(12), ConfigError);
  CHECK_THROWS_AS(RopeGroupSpec({{"x", 3, 10.0}}), ConfigError);
  CHECK_THROWS_AS(RopeGroupSpec({{"x", 4, 0.0}}), ConfigError);
  auto spec = RopeGroupSpec::preset_3d(12);
  CHECK_THROWS_AS(rope_angles(spec, {{1.0, 2.0}}), ConfigError);
}

TEST_CASE("apply_mrope equals the explicit block-diagonal rotation") {
  std::mt19937_64 rng(5);
  auto spec = RopeGroupSpec::preset_3d(12);
  Tensor v = random_tensor({2, 12}, rng);
  std::vector<PositionVector> pos{random_position(3, rng), random_position(3, rng)};
  Tensor r = apply_mrope(v, spec, pos);
  for (std::size_t row = 0; row < 2; ++row) {
    for (std::size_t g = 0; g < 3; ++g) {
      for (std::size_t i = 0; i < 2; ++i) {
        std::size_t p = g * 2 + i;
        double base = g < 2 ? 5000.0 : 10000.0;
        double theta = pos[row].coords[g] * std::pow(base, -2.0 * static_cast<double>(i) / 4.0);
        double a = v.at({row, 2 * p}), b = v.at({row, 2 * p + 1});
        CHECK(r.at({row, 2 * p}) == doctest::Approx(a * std::cos(theta) - b * std::sin(theta)).epsilon(1e-12));
        CHECK(r.at({row, 2 * p + 1}) == doctest::Approx(a * std::sin(theta) + b * std::cos(theta)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("property: scores depend only on position differences") {
  std::mt19937_64 rng(7);
  for (auto spec : {RopeGroupSpec::preset_3d(24), RopeGroupSpec::preset_4d(32), RopeGroupSpec::standard(8)}) {
    for (int draw = 0; draw < 100; ++draw) {
      Tensor q = random_tensor({spec.total_dim()}, rng);
      Tensor k = random_tensor({spec.total_dim()}, rng);
      auto pi = random_position(spec.num_groups(), rng);
      auto pj = random_position(spec.num_groups(), rng);
      auto delta = random_position(spec.num_groups(), rng);
      PositionVector pi2 = pi, pj2 = pj;
      for (std::size_t g = 0; g < pi.coords.size(); ++g) {
        pi2.coords[g] += delta.coords[g];
        pj2.coords[g] += delta.coords[g];
      }
      CHECK(std::abs(relative_score(q, k, spec, pi, pj) - relative_score(q, k, spec, pi2, pj2)) <= 1e-9);
    }
  }
}

TEST_CASE("property: rotation preserves the norm") {
  std::mt19937_64 rng(8);
  auto spec = RopeGroupSpec::preset_3d(24);
  for (int draw = 0; draw < 200; ++draw) {
    Tensor v = random_tensor({24}, rng, -3, 3);
    std::vector<PositionVector> pos{random_position(3, rng, 1000.0)};
    Tensor r = apply_mrope(v, spec, pos);
    CHECK(std::abs(std::sqrt(dot(r, r)) - std::sqrt(dot(v, v))) <= 1e-12);
  }
}

TEST_CASE("zero position is the identity and relative_score reduces to a dot product") {
  std::mt19937_64 rng(9);
  auto spec = RopeGroupSpec::preset_4d(16);
  Tensor v = random_tensor({3, 16}, rng);
  std::vector<PositionVector> zero{{{0.0, 0.0, 0.0, 0.0}}};
  CHECK(test::max_abs_diff(apply_mrope(v, spec, zero), v) == 0.0);
  Tensor q = random_tensor({16}, rng), k = random_tensor({16}, rng);
  PositionVector p{{1.0, 2.0, 0.5, 7.0}};
  CHECK(relative_score(q, k, spec, p, p) == doctest::Approx(dot(q, k)).epsilon(1e-12));
}

TEST_CASE("apply_mrope rejects mismatched widths and position counts") {
  std::mt19937_64 rng(10);
  auto spec = RopeGroupSpec::preset_3d(12);
  std::vector<PositionVector> one{{{0.0, 0.0, 1.0}}};
  CHECK_THROWS(apply_mrope(random_tensor({2, 10}, rng), spec, one));
  std::vector<PositionVector> three(3, one[0]);
  CHECK_THROWS(apply_mrope(random_tensor({2, 12}, rng), spec, three));
}

TEST_CASE("sinusoidal encoding values") {
  Tensor pe = sinusoidal_pe(3.0, 6);
  for (std::size_t i = 0; i < 3; ++i) {
    double f = std::pow(10000.0, -2.0 * static_cast<double>(i) / 6.0);
    CHECK(pe.data()[2 * i] == doctest::Approx(std::sin(3.0 * f)).epsilon(1e-15));
    CHECK(pe.data()[2 * i + 1] == doctest::Approx(std::cos(3.0 * f)).epsilon(1e-15));
  }
  Tensor z = sinusoidal_pe(0.0, 4);
  CHECK(z.data()[0] == 0.0);
  CHECK(z.data()[1] == 1.0);
}

TEST_CASE("learnable PE starts at zero and has one row per position") {
  nn::Rng rng(11);
  LearnablePe pe(3, 12, rng);
  std::vector<PositionVector> pos{{{1, 2, 3}}, {{0, 0, 0}}};
  Tensor y = pe(pos);
  CHECK(y.shape() == ad::Shape{2, 12});
  for (double v : y.data()) CHECK(v == 0.0);
  nn::NamedParams params;
  pe.collect("pe", params);
  CHECK(params.size() == 4);
}

TEST_CASE("PE kind names round-trip") {
  for (auto k : {PeKind::kMrope, PeKind::kRope, PeKind::kSinusoidal, PeKind::kLearnable}) {
    CHECK(parse_pe_kind(to_string(k)) == k);
  }
  CHECK(is_rotary(PeKind::kRope));
  CHECK_FALSE(is_rotary(PeKind::kLearnable));
  CHECK_THROWS_AS(parse_pe_kind("alibi"), ConfigError);
}

TEST_CASE("metadata codec encodes and decodes task, subject and date") {
  auto codec = MetadataCodec::benchmark_default("2010-01-01", "2010-12-31");
  CHECK(codec.decode_task(codec.encode_task("RT")) == "RT");
  CHECK(codec.decode_subject(codec.encode_subject("m")) == "m");
  CHECK(codec.encode_recording_time("2010-01-01") == 0.0);
  CHECK(codec.encode_recording_time("2010-12-31") == 1.0);
  CHECK(codec.decode_recording_time(codec.encode_recording_time("2010-07-04")) == "2010-07-04");
  auto p = codec.encode("CO", "j", "2010-01-01", 4.0);
  CHECK(p.coords.size() == 4);
  CHECK(p.coords[3] == 4.0);
  CHECK_THROWS_AS(codec.encode_task("XX"), ConfigError);
  CHECK_THROWS_AS(codec.encode_recording_time("2011-01-01"), ConfigError);
}

TEST_CASE("ISO day parsing") {
  CHECK(parse_iso_day("1970-01-01") == 0);
  CHECK(parse_iso_day("2000-03-01") == 11017);
  CHECK(format_iso_day(11017) == "2000-03-01");
  CHECK_THROWS_AS(parse_iso_day("2000-13-01"), ConfigError);
  CHECK_THROWS_AS(parse_iso_day("not a date"), ConfigError);
}
