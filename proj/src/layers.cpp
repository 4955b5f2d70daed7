#include "rpnt/layers.hpp"

#include <cmath>

#include "rpnt/errors.hpp"

namespace rpnt::nn {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init, bool with_bias) {
  if (in == 0 || out == 0) throw ConfigError("Linear layer needs positive extents");
  std::vector<double> w(in * out, 0.0);
  std::vector<double> b(out, 0.0);
  if (!zero_init) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : w) v = dist(rng);
    if (with_bias) {
      for (double& v : b) v = dist(rng);
    }
  }
  weight = Tensor({in, out}, std::move(w), true);
  if (with_bias) bias = Tensor({out}, std::move(b), true);
}

Tensor Linear::operator()(const Tensor& x) const {
  if (x.dim() == 0 || x.shape().back() != in_features()) {
    throw DimensionError("Linear: input " + ad::shape_str(x.shape()) + " does not end in " +
                         std::to_string(in_features()));
  }
  Tensor y = ad::matmul(x, weight);
  return bias.defined() ? ad::add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim, double eps_value)
    : gamma(Tensor::full({dim}, 1.0, true)), beta(Tensor::zeros({dim}, true)), eps(eps_value) {}

Tensor LayerNorm::operator()(const Tensor& x) const { return ad::layernorm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, NamedParams& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_init_output)
    : fc1(in, hidden, rng), fc2(hidden, out, rng, zero_init_output) {}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(ad::gelu(fc1(x))); }

void Mlp::collect(const std::string& prefix, NamedParams& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

Tensor dropout(const Tensor& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training || ctx.rng == nullptr || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  std::vector<double> m(x.numel());
  double s = 1.0 / (1.0 - rate);
  for (double& v : m) v = keep(*ctx.rng) ? s : 0.0;
  return ad::mul(x, Tensor(x.shape(), std::move(m)));
}

Tensor upper_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = 1.0;
  return Tensor({n, n}, std::move(m));
}

}  // namespace rpnt::nn
