#include "rpnt/objectives.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "rpnt/errors.hpp"
#include "rpnt/layers.hpp"

namespace rpnt::objectives {

MaskStrategy MaskStrategy::fixed(double p_neuron, double p_time) {
  if (!(p_neuron >= 0.0 && p_neuron <= 1.0 && p_time >= 0.0 && p_time <= 1.0)) {
    throw ConfigError("fixed masking ratios must lie in [0, 1]");
  }
  return {Kind::kFixed, p_neuron, p_time};
}

MaskStrategy MaskStrategy::parse(std::string_view text) {
  if (text == "uniform" || text == "uniform_random") return uniform_random();
  if (text == "entrywise") return entrywise();
  if (text.substr(0, 6) == "fixed:") {
    std::string body(text.substr(6));
    double pn = 0, pt = 0;
    char tail = 0;
    if (std::sscanf(body.c_str(), "%lf,%lf%c", &pn, &pt, &tail) == 2) return fixed(pn, pt);
  }
  throw ConfigError("masking must be 'uniform', 'entrywise' or 'fixed:<p_neuron>,<p_time>', got '" +
                    std::string(text) + "'");
}

std::string MaskStrategy::str() const {
  switch (kind) {
    case Kind::kUniformRandom: return "uniform";
    case Kind::kEntrywise: return "entrywise";
    case Kind::kFixed: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "fixed:%.2f,%.2f", p_neuron, p_time);
      return buf;
    }
  }
  return "?";
}

std::vector<MaskStrategy> MaskStrategy::ablation_grid() {
  return {fixed(0.25, 0.25), fixed(0.50, 0.50), fixed(0.75, 0.75),
          fixed(0.25, 0.75), fixed(0.75, 0.25), uniform_random()};
}

std::size_t MaskSpec::masked_count() const {
  std::size_t n = 0;
  for (double v : mask.data()) n += v == 0.0;
  return n;
}

double MaskSpec::masked_fraction() const {
  return mask.numel() ? static_cast<double>(masked_count()) / static_cast<double>(mask.numel()) : 0.0;
}

MaskSpec sample_mask(std::size_t B, std::size_t T, std::size_t N, const MaskStrategy& strategy,
                     std::uint64_t seed) {
  if (B == 0 || T == 0 || N == 0) throw ConfigError("sample_mask needs positive extents");
  constexpr int kMaxTries = 100;
  MaskSpec spec;
  spec.strategy = strategy;
  spec.seed = seed;
  spec.p_neuron.resize(B);
  spec.p_time.resize(B);
  std::vector<double> m(B * T * N);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t b = 0; b < B; ++b) {
    nn::Rng rng(nn::mix_seed(seed, b));
    double* e = m.data() + b * T * N;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxTries && !ok; ++attempt) {
      double pn = strategy.p_neuron, pt = strategy.p_time;
      if (strategy.kind != MaskStrategy::Kind::kFixed) {
        pn = unit(rng);
        pt = unit(rng);
      }
      std::size_t hidden = 0;
      if (strategy.kind == MaskStrategy::Kind::kEntrywise) {
        pn = 0.0;
        for (std::size_t i = 0; i < T * N; ++i) {
          e[i] = unit(rng) < pt ? 0.0 : 1.0;
          hidden += e[i] == 0.0;
        }
      } else {
        std::vector<bool> row(T), col(N);
        for (std::size_t t = 0; t < T; ++t) row[t] = unit(rng) < pt;
        for (std::size_t n = 0; n < N; ++n) col[n] = unit(rng) < pn;
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t n = 0; n < N; ++n) {
            bool h = row[t] || col[n];
            e[t * N + n] = h ? 0.0 : 1.0;
            hidden += h;
          }
        }
      }
      spec.p_neuron[b] = pn;
      spec.p_time[b] = pt;
      ok = hidden > 0 && hidden < T * N;
    }
    if (!ok) {
      throw ConfigError("masking strategy " + strategy.str() + " left batch element " + std::to_string(b) +
                        " fully visible or fully masked after " + std::to_string(kMaxTries) + " draws");
    }
  }
  spec.mask = Tensor({B, T, N}, std::move(m));
  return spec;
}

Tensor apply_mask(const Tensor& x, const Tensor& mask) { return ad::mul(x, mask); }

Tensor poisson_loss(const Tensor& rates, const Tensor& target, const Tensor& mask) {
  if (rates.shape() != target.shape()) {
    throw DimensionError("poisson_loss: rates " + ad::shape_str(rates.shape()) + " vs target " +
                         ad::shape_str(target.shape()));
  }
  if (rates.dim() == 0) throw DimensionError("poisson_loss needs a batch axis");
  for (double v : rates.data()) {
    if (!(v > 0.0)) throw NumericFault("poisson_loss: decoder produced a nonpositive or non-finite rate");
  }
  for (double v : target.data()) {
    if (!(v >= 0.0)) throw DomainError("poisson_loss: spike counts must be nonnegative");
  }
  Tensor hidden = ad::add_scalar(ad::neg(mask), 1.0);
  Tensor nll = ad::sub(rates, ad::mul(target, ad::log(ad::add_scalar(rates, kPoissonEps))));
  return ad::scale(ad::sum(ad::mul(hidden, nll)), 1.0 / static_cast<double>(rates.size(0)));
}

Tensor contrastive_loss(const Tensor& z, double tau) {
  if (z.dim() != 4) throw DimensionError("contrastive_loss expects [B, S, T, D], got " + ad::shape_str(z.shape()));
  std::size_t S = z.size(1);
  if (S < 2) throw ConfigError("contrastive loss needs at least two sites; set its weight to 0");
  if (!(tau > 0.0)) throw ConfigError("contrastive temperature must be positive");
  Tensor zbar = ad::mean(ad::mean(z, 2), 0);  // [S, D]
  Tensor norm = ad::sqrt(ad::add_scalar(ad::sum(ad::square(zbar), -1, true), 1e-24));
  Tensor unit = ad::div(zbar, norm);
  Tensor logits = ad::scale(ad::matmul(unit, ad::transpose(unit, 0, 1)), 1.0 / tau);
  std::vector<double> eye(S * S, 0.0);
  for (std::size_t i = 0; i < S; ++i) eye[i * S + i] = 1.0;
  Tensor diag = ad::sum(ad::mul(ad::log(ad::softmax(logits, -1)), Tensor({S, S}, std::move(eye))), -1);
  return ad::neg(ad::mean(diag));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("mse_loss: " + ad::shape_str(pred.shape()) + " vs " + ad::shape_str(target.shape()));
  }
  return ad::mean(ad::square(ad::sub(pred, target)));
}

R2Report r2_score(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.dim() == 0) {
    throw DimensionError("r2_score: " + ad::shape_str(pred.shape()) + " vs " + ad::shape_str(target.shape()));
  }
  std::size_t K = pred.shape().back();
  std::size_t rows = pred.numel() / K;
  auto p = pred.data();
  auto y = target.data();
  R2Report rep;
  rep.per_dim.assign(K, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    double mu = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mu += y[r * K + k];
    mu /= static_cast<double>(rows);
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      double d = y[r * K + k] - p[r * K + k];
      double c = y[r * K + k] - mu;
      ss_res += d * d;
      ss_tot += c * c;
    }
    if (ss_tot == 0.0) {
      rep.per_dim[k] = std::numeric_limits<double>::quiet_NaN();
      rep.warnings.push_back("r2 undefined for dimension " + std::to_string(k) + ": target has zero variance");
    } else {
      rep.per_dim[k] = 1.0 - ss_res / ss_tot;
    }
    total += rep.per_dim[k];
  }
  rep.mean = total / static_cast<double>(K);
  return rep;
}

SslLoss ssl_loss(const Tensor& rates, const Tensor& target, const Tensor& mask, const Tensor& z, double mu,
                 double tau) {
  SslLoss out;
  Tensor recon = poisson_loss(rates, target, mask);
  out.breakdown.mu = mu;
  out.breakdown.recon = recon.item();
  std::size_t hidden = 0;
  for (double v : mask.data()) hidden += v == 0.0;
  out.breakdown.masked_count = hidden * (rates.numel() / mask.numel());
  out.total = recon;
  if (mu != 0.0 && z.defined()) {
    Tensor c = contrastive_loss(z, tau);
    out.breakdown.contrast = c.item();
    out.total = ad::add(recon, ad::scale(c, mu));
  }
  out.breakdown.total = out.total.item();
  return out;
}

}  // namespace rpnt::objectives
