#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "../support.hpp"
#include "rpnt/errors.hpp"
#include "rpnt/model.hpp"

using namespace rpnt;
using namespace rpnt::model;
using rpnt::test::random_tensor;

namespace {

Tensor poisson_spikes(const ad::Shape& shape, std::uint64_t seed, double rate = 1.0) {
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> p(rate);
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = p(rng);
  return Tensor(shape, v);
}

std::vector<SiteCoords> two_sites() { return {{0.0, 1.0}, {2.0, -1.0}}; }

void jitter(const Rpnt& m, std::uint64_t seed, double amp = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-amp, amp);
  for (auto& [name, p] : m.parameters()) {
    Tensor t = p;
    for (double& v : t.mutable_data()) v += d(rng);
  }
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "rpnt_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("presets validate with the documented sizes") {
  auto b = RpntConfig::benchmark();
  CHECK(b.d_model == 512);
  CHECK(b.n_heads == 16);
  CHECK(b.rope_preset == RopePreset::k4D);
  auto n = RpntConfig::neuropixel();
  CHECK(n.d_model == 384);
  CHECK(n.n_spatial_layers == 2);
  CHECK(n.rope_spec().num_groups() == 3);
  auto t = RpntConfig::tiny();
  CHECK(t.d_model == 12);
  CHECK(t.dropout == 0.0);
  for (const auto& c : {b, n, t, RpntConfig::desk()}) CHECK_NOTHROW(c.validate());
}

TEST_CASE("invalid configurations are rejected up front") {
  auto c = RpntConfig::tiny();
  c.d_model = 16;  // not divisible by 2*3 groups
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RpntConfig::tiny();
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RpntConfig::tiny();
  c.kernel_rows = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RpntConfig::tiny();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = RpntConfig::tiny();
  c.rope_preset = RopePreset::k4D;  // 12 % 8 != 0
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"preset", "huge"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"d_model", "twelve"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json::array()), ConfigError);
}

TEST_CASE("config JSON round-trips") {
  auto c = RpntConfig::tiny();
  c.history = attention::HistoryMode::past_only(3);
  c.pe = posenc::PeKind::kLearnable;
  c.attention = attention::AttentionKind::kStandard;
  c.ffn = false;
  c.kernel_rows = 5;
  auto back = config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  auto custom = RpntConfig::tiny();
  custom.rope_preset = RopePreset::kCustom;
  custom.custom_groups = {{"depth", 0, 100.0}, {"t", 0, 10000.0}};
  auto cb = config_from_json(to_json(custom));
  CHECK(cb.rope_spec() == custom.rope_spec());
  CHECK(cb.site_coord_count() == 1);
}

TEST_CASE("forward shapes and strictly positive rates") {
  auto cfg = RpntConfig::tiny();
  Rpnt m(cfg, 1);
  Tensor x = poisson_spikes({3, 2, 5, 4}, 2);
  auto out = m.forward_pretrain(x, two_sites(), {});
  CHECK(out.rates.shape() == ad::Shape{3, 2, 5, 4});
  CHECK(out.representation.shape() == ad::Shape{3, 2, 5, 12});
  for (double r : out.rates.data()) CHECK(r > 0.0);
  m.attach_task_head(3);
  std::vector<SiteCoords> one{{0.0, 1.0}};
  CHECK(m.forward_decode(poisson_spikes({3, 5, 4}, 4), one, {}).shape() == ad::Shape{3, 5, 2});
}

TEST_CASE("inputs with the wrong width or coordinates are rejected") {
  Rpnt m(RpntConfig::tiny(), 1);
  CHECK_THROWS_AS(m.forward_pretrain(poisson_spikes({1, 2, 5, 3}, 1), two_sites(), {}), DimensionError);
  std::vector<SiteCoords> three{{0, 0}, {1, 1}, {2, 2}};
  CHECK_THROWS_AS(m.forward_pretrain(poisson_spikes({1, 2, 5, 4}, 1), three, {}), DimensionError);
  std::vector<SiteCoords> wrong{{0.0}, {1.0}};
  CHECK_THROWS_AS(m.forward_pretrain(poisson_spikes({1, 2, 5, 4}, 1), wrong, {}), ConfigError);
  CHECK_THROWS_AS(m.forward_decode(poisson_spikes({1, 5, 4}, 1), two_sites(), {}), UsageError);
}

TEST_CASE("property: past-only model is causal in time") {
  auto cfg = RpntConfig::tiny();
  cfg.n_temporal_layers = 4;
  cfg.history = attention::HistoryMode::past_only(3);
  Rpnt m(cfg, 5);
  jitter(m, 6);
  const std::size_t T = 6;
  Tensor x = poisson_spikes({1, 2, T, 4}, 7);
  Tensor base = m.forward_pretrain(x, two_sites(), {}).rates;
  for (std::size_t tp = 1; tp < T; ++tp) {
    Tensor y(x.shape(), test::to_vec(x));
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t n = 0; n < 4; ++n) y.mutable_data()[(s * T + tp) * 4 + n] += 3.0;
    Tensor r = m.forward_pretrain(y, two_sites(), {}).rates;
    double before = 0.0, at = 0.0;
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t t = 0; t <= tp; ++t)
        for (std::size_t n = 0; n < 4; ++n) {
          double d = std::abs(r.at({0, s, t, n}) - base.at({0, s, t, n}));
          (t < tp ? before : at) = std::max(t < tp ? before : at, d);
        }
    CHECK(before <= 1e-12);
    CHECK(at > 1e-8);
  }
}

TEST_CASE("full-window context reads the whole sequence") {
  auto cfg = RpntConfig::tiny();
  Rpnt m(cfg, 8);
  jitter(m, 9);
  Tensor x = poisson_spikes({1, 2, 5, 4}, 10);
  Tensor base = m.forward_pretrain(x, two_sites(), {}).rates;
  Tensor y(x.shape(), test::to_vec(x));
  for (std::size_t n = 0; n < 4; ++n) y.mutable_data()[4 * 4 + n] += 5.0;  // site 0, last bin
  Tensor r = m.forward_pretrain(y, two_sites(), {}).rates;
  // Row 0 has a single admissible key, so look at the later past bins.
  double moved = 0.0;
  for (std::size_t t = 1; t < 4; ++t)
    for (std::size_t n = 0; n < 4; ++n) moved = std::max(moved, std::abs(r.at({0, 0, t, n}) - base.at({0, 0, t, n})));
  CHECK(moved > 1e-8);
}

TEST_CASE("property: per-sequence site coordinates cancel inside temporal attention") {
  // Every token of a sequence shares (x, y), so the spatial groups see a
  // zero relative offset and only the temporal group changes the scores.
  auto cfg = RpntConfig::tiny();
  cfg.n_spatial_layers = 0;
  Rpnt mr(cfg, 12);
  jitter(mr, 13);
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> d(-20.0, 20.0);
  Tensor x = poisson_spikes({1, 5, 4}, 11);
  std::vector<SiteCoords> origin{{0.0, 0.0}};
  Tensor ref = mr.forward_temporal(x, origin, {}).hidden;
  for (int k = 0; k < 20; ++k) {
    std::vector<SiteCoords> c{{d(rng), d(rng)}};
    CHECK(test::max_abs_diff(mr.forward_temporal(x, c, {}).hidden, ref) <= 1e-12);
  }
  cfg.pe = posenc::PeKind::kRope;
  Rpnt r(cfg, 12);
  jitter(r, 13);
  CHECK_FALSE(r.needs_site_coords());
  // Same weights, different rotation layout: plain RoPE rotates every pair by t.
  CHECK(test::max_abs_diff(r.forward_temporal(x, origin, {}).hidden, ref) > 1e-9);
}

TEST_CASE("every PE and attention kind runs and differs from the others") {
  Tensor x = poisson_spikes({2, 2, 5, 4}, 14);
  std::vector<std::vector<double>> outs;
  for (auto pe : {posenc::PeKind::kMrope, posenc::PeKind::kRope, posenc::PeKind::kSinusoidal, posenc::PeKind::kLearnable}) {
    for (auto at : {attention::AttentionKind::kContext, attention::AttentionKind::kStandard}) {
      auto cfg = RpntConfig::tiny();
      cfg.pe = pe;
      cfg.attention = at;
      Rpnt m(cfg, 15);
      jitter(m, 16);
      auto out = m.forward_pretrain(x, two_sites(), {});
      for (double v : out.rates.data()) REQUIRE(std::isfinite(v));
      outs.push_back(test::to_vec(out.rates));
    }
  }
  for (std::size_t i = 0; i < outs.size(); ++i)
    for (std::size_t j = i + 1; j < outs.size(); ++j) CHECK(outs[i] != outs[j]);
}

TEST_CASE("ffn switch removes the feed-forward parameters") {
  auto cfg = RpntConfig::tiny();
  std::size_t with = Rpnt(cfg, 1).parameters().size();
  cfg.ffn = false;
  std::size_t without = Rpnt(cfg, 1).parameters().size();
  CHECK(without < with);
  for (const auto& [name, p] : Rpnt(cfg, 1).parameters()) CHECK(name.find(".ffn.") == std::string::npos);
}

TEST_CASE("dropout is inactive at evaluation and seeded in training") {
  auto cfg = RpntConfig::tiny();
  cfg.dropout = 0.3;
  Rpnt m(cfg, 17);
  Tensor x = poisson_spikes({2, 2, 5, 4}, 18);
  auto a = m.forward_pretrain(x, two_sites(), {}).rates;
  auto b = m.forward_pretrain(x, two_sites(), {}).rates;
  CHECK(test::to_vec(a) == test::to_vec(b));
  nn::Rng r1(19), r2(19);
  auto t1 = m.forward_pretrain(x, two_sites(), {true, &r1}).rates;
  auto t2 = m.forward_pretrain(x, two_sites(), {true, &r2}).rates;
  CHECK(test::to_vec(t1) == test::to_vec(t2));
  CHECK(test::to_vec(t1) != test::to_vec(a));
}

TEST_CASE("functional connectivity rows are distributions") {
  Rpnt m(RpntConfig::tiny(), 20);
  jitter(m, 21);
  Tensor x = poisson_spikes({3, 2, 5, 4}, 22);
  nn::ForwardContext ctx{false, nullptr, true};
  auto out = m.forward_pretrain(x, two_sites(), ctx);
  REQUIRE(out.spatial_weights.size() == 1);
  Tensor fc = extract_fc(out.spatial_weights, 3, 5);
  REQUIRE(fc.shape() == ad::Shape{5, 2, 2});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = 0; i < 2; ++i) CHECK(fc.at({t, i, 0}) + fc.at({t, i, 1}) == doctest::Approx(1.0).epsilon(1e-12));
  // Average over batch and heads by hand for one entry.
  const Tensor& w = out.spatial_weights[0];
  double ref = 0.0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t h = 0; h < 2; ++h) ref += w.at({b * 5 + 2, h, 0, 1}) / 6.0;
  CHECK(fc.at({2, 0, 1}) == doctest::Approx(ref).epsilon(1e-12));
  CHECK_THROWS_AS(extract_fc({}, 3, 5), UsageError);
}

TEST_CASE("checkpoint round-trip reproduces forward outputs bit for bit") {
  Rpnt m(RpntConfig::tiny(), 23);
  jitter(m, 24);
  m.attach_task_head(25);
  auto path = temp_path("model.rpnt");
  save_checkpoint(m, path);
  Rpnt back = load_checkpoint(path);
  CHECK(to_json(back.config()) == to_json(m.config()));
  CHECK(back.has_task_head());
  Tensor x = poisson_spikes({2, 2, 5, 4}, 26);
  CHECK(test::to_vec(m.forward_pretrain(x, two_sites(), {}).rates) ==
        test::to_vec(back.forward_pretrain(x, two_sites(), {}).rates));
  std::vector<SiteCoords> one{{0.0, 1.0}};
  Tensor xs = poisson_spikes({2, 5, 4}, 27);
  CHECK(test::to_vec(m.forward_decode(xs, one, {})) == test::to_vec(back.forward_decode(xs, one, {})));
}

TEST_CASE("corrupt or truncated checkpoints raise IO errors") {
  auto bad = temp_path("bad.rpnt");
  std::ofstream(bad) << "NOPE";
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);
  Rpnt m(RpntConfig::tiny(), 28);
  auto path = temp_path("trunc.rpnt");
  save_checkpoint(m, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint(temp_path("missing.rpnt")), IoError);
}

TEST_CASE("clone owns its parameters while copies share them") {
  Rpnt m(RpntConfig::tiny(), 29);
  Rpnt shared = m;
  Rpnt cloned = m.clone();
  Tensor w = m.parameters()[0].second;
  double before = cloned.parameters()[0].second.data()[0];
  w.mutable_data()[0] += 1.0;
  CHECK(shared.parameters()[0].second.data()[0] == w.data()[0]);
  CHECK(cloned.parameters()[0].second.data()[0] == before);
}

TEST_CASE("same seed builds identical parameters") {
  auto a = Rpnt(RpntConfig::tiny(), 30).parameters();
  auto b = Rpnt(RpntConfig::tiny(), 30).parameters();
  auto c = Rpnt(RpntConfig::tiny(), 31).parameters();
  REQUIRE(a.size() == b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(test::to_vec(a[i].second) == test::to_vec(b[i].second));
    differs = differs || test::to_vec(a[i].second) != test::to_vec(c[i].second);
  }
  CHECK(differs);
}
