#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "rpnt/errors.hpp"
#include "rpnt/harness.hpp"

namespace rpnt::harness {

namespace {

std::vector<model::SiteCoords> probe_coords(const model::RpntConfig& cfg, std::size_t sites) {
  std::size_t k = cfg.site_coord_count();
  const auto& grid = data::grid_coordinates();
  std::vector<model::SiteCoords> out;
  for (std::size_t s = 0; s < sites; ++s) {
    model::SiteCoords c;
    for (std::size_t j = 0; j < k; ++j) {
      const auto& g = grid[s % grid.size()];
      c.push_back(j < 2 ? g[j] : static_cast<double>(s + j));
    }
    out.push_back(c);
  }
  return out;
}

}  // namespace

GradcheckReport gradcheck_model(const model::RpntConfig& base, std::size_t layers, std::size_t steps,
                                std::uint64_t seed, double h) {
  model::RpntConfig cfg = base;
  if (layers > 0) cfg.n_temporal_layers = layers;
  cfg.dropout = 0.0;
  cfg.validate();
  if (steps == 0) throw ConfigError("gradcheck needs at least one time step");
  model::Rpnt m(cfg, seed);
  auto params = m.parameters();

  // Zero-initialized layers would make the check vacuous for everything
  // upstream of them, so every parameter is moved off its initial value.
  nn::Rng rng(nn::mix_seed(seed, 0x9c));
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  for (auto& [name, p] : params) {
    Tensor t = p;
    for (double& v : t.mutable_data()) v += jitter(rng);
  }
  // The behavior head is not zero-initialized and keeps its init.
  m.attach_task_head(seed);

  const std::size_t B = 2;
  const std::size_t S = std::max<std::size_t>(cfg.n_spatial_layers > 0 ? 2 : 1, 1);
  const std::size_t N = cfg.n_neurons;
  std::poisson_distribution<int> counts(1.0);
  std::vector<double> x(B * S * steps * N);
  for (double& v : x) v = counts(rng);
  Tensor spikes({B, S, steps, N}, x);
  std::normal_distribution<double> normal;
  std::vector<double> y(B * steps * 2);
  for (double& v : y) v = normal(rng);
  Tensor velocity({B, steps, 2}, y);
  auto coords = probe_coords(cfg, S);
  std::vector<model::SiteCoords> first(B, coords[0]);

  auto spec = objectives::sample_mask(B * S, steps, N, objectives::MaskStrategy::fixed(0.5, 0.5), seed);
  Tensor mask = ad::reshape(spec.mask, {B, S, steps, N});
  Tensor first_site({B, steps, N}, [&] {
    std::vector<double> v;
    for (std::size_t b = 0; b < B; ++b) {
      auto begin = x.begin() + static_cast<std::ptrdiff_t>(b * S * steps * N);
      v.insert(v.end(), begin, begin + static_cast<std::ptrdiff_t>(steps * N));
    }
    return v;
  }());

  // Encoder and rate decoder against the pretraining objective, then the
  // behavior head against the supervised one. Central differences lose about
  // an ulp of the loss value, so the objective is shifted by its value at the
  // unperturbed point, term by term, before summation. The shift is constant
  // and leaves every gradient unchanged.
  double mu = S >= 2 ? 0.1 : 0.0;
  Tensor hidden = ad::add_scalar(ad::neg(mask), 1.0);
  auto nll_terms = [&](const Tensor& rates) {
    return ad::mul(hidden, ad::sub(rates, ad::mul(spikes, ad::log(ad::add_scalar(rates, objectives::kPoissonEps)))));
  };
  Tensor nll0;
  double contrast0 = 0.0;
  {
    ad::NoGradGuard no_grad;
    auto out = m.forward_pretrain(objectives::apply_mask(spikes, mask), coords, {});
    auto t = nll_terms(out.rates);
    nll0 = Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
    if (mu > 0.0) contrast0 = objectives::contrastive_loss(out.representation, 0.1).item();
  }
  auto ssl_fn = [&]() {
    auto out = m.forward_pretrain(objectives::apply_mask(spikes, mask), coords, {});
    objectives::poisson_loss(out.rates, spikes, mask);  // same domain checks as training
    Tensor recon = ad::scale(ad::sum(ad::sub(nll_terms(out.rates), nll0)), 1.0 / static_cast<double>(B));
    if (mu == 0.0) return recon;
    Tensor contrast = ad::add_scalar(objectives::contrastive_loss(out.representation, 0.1), -contrast0);
    return ad::add(recon, ad::scale(contrast, mu));
  };
  auto sq_terms = [&]() { return ad::square(ad::sub(m.forward_decode(first_site, first, {}), velocity)); };
  Tensor sq0;
  {
    ad::NoGradGuard no_grad;
    auto t = sq_terms();
    sq0 = Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
  }
  auto sup_fn = [&]() { return ad::mean(ad::sub(sq_terms(), sq0)); };
  nn::NamedParams head;
  m.task_head().collect("task_head", head);

  GradcheckReport report;
  report.params = ad::grad_check_params(ssl_fn, m.encoder_parameters(), h);
  auto head_reports = ad::grad_check_params(sup_fn, head, h);
  report.params.insert(report.params.end(), head_reports.begin(), head_reports.end());
  for (const auto& r : report.params) {
    if (r.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = r.max_rel_error;
      report.worst = r.name;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

FcExport export_fc(const model::Rpnt& m, const data::Dataset& ds, const std::string& split,
                   const std::vector<double>& times_ms, const std::filesystem::path& out_dir) {
  if (m.config().n_spatial_layers == 0) {
    throw UsageError("functional connectivity needs a model with a spatial encoder");
  }
  const auto& sd = ds.split(split);
  std::size_t C = sd.spikes.size(0), S = sd.spikes.size(1), T = sd.spikes.size(2), N = sd.spikes.size(3);
  if (C == 0) throw UsageError("split '" + split + "' has no trials");
  if (S < 2) throw UsageError("functional connectivity needs at least two sites");
  std::vector<std::size_t> bins;
  for (double ms : times_ms) {
    std::size_t b = ms_to_bin(ms, ds.bin_ms);
    if (ms < 0.0 || b >= T) {
      throw ConfigError("time " + std::to_string(ms) + " ms lies outside the " + std::to_string(T) + "-bin window");
    }
    bins.push_back(b);
  }
  auto coords = site_coords(ds);
  ad::NoGradGuard no_grad;
  std::vector<double> acc(T * S * S, 0.0);
  const std::size_t chunk = 32;
  for (std::size_t start = 0; start < C; start += chunk) {
    std::size_t n = std::min(chunk, C - start);
    auto src = sd.spikes.data();
    std::vector<double> xs(src.begin() + static_cast<std::ptrdiff_t>(start * S * T * N),
                           src.begin() + static_cast<std::ptrdiff_t>((start + n) * S * T * N));
    nn::ForwardContext ctx{false, nullptr, true};
    auto out = m.forward_pretrain(Tensor({n, S, T, N}, std::move(xs)), coords, ctx);
    Tensor fc = model::extract_fc(out.spatial_weights, n, T);
    auto v = fc.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i] * static_cast<double>(n) / static_cast<double>(C);
  }
  FcExport result{Tensor({T, S, S}, acc), bins};

  std::filesystem::create_directories(out_dir);
  data::write_f64(out_dir / "fc.f64", acc);
  json sites = json::array();
  for (const auto& s : ds.sites) sites.push_back(s.name);
  json manifest{{"format", "rpnt-fc"}, {"shape", {T, S, S}}, {"sites", sites}, {"bin_ms", ds.bin_ms},
                {"split", split}, {"trials", C}, {"times_ms", times_ms}, {"bins", bins}};
  std::ofstream(out_dir / "fc.json") << manifest.dump(2) << '\n';
  for (std::size_t i = 0; i < bins.size(); ++i) {
    std::span<const double> slice(acc.data() + bins[i] * S * S, S * S);
    std::string name = "fc_" + std::to_string(static_cast<long long>(times_ms[i])) + "ms.svg";
    std::ofstream f(out_dir / name);
    if (!f) throw IoError("cannot write " + (out_dir / name).string());
    f << svg_heatmap("spatial attention at " + std::to_string(static_cast<long long>(times_ms[i])) + " ms (bin " +
                         std::to_string(bins[i]) + ")",
                     slice, S, S);
  }
  return result;
}

}  // namespace rpnt::harness
