#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rpnt/tensor.hpp"

namespace rpnt::nn {

using ad::Tensor;
using Rng = std::mt19937_64;
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Per-call forward settings. Dropout is active only when training is set
// and an rng is supplied.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  bool retain_attention = false;
};

// Well-mixed 64-bit seed derivation (splitmix64 finalizer) so that
// independent streams can be keyed by (seed, index...) tuples.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

// y = x W + b with W stored [in, out]. Weights and bias are drawn from
// U(-1/sqrt(in), 1/sqrt(in)) unless zero_init is requested.
class Linear {
 public:
  Linear() = default;
  // Without a bias the layer is a plain matrix product and bias stays undefined.
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init = false, bool with_bias = true);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;

  std::size_t in_features() const { return weight.size(0); }
  std::size_t out_features() const { return weight.size(1); }

  Tensor weight;
  Tensor bias;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, double eps = 1e-5);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;

  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

// Two-layer perceptron with a GELU between the layers.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, bool zero_init_output = false);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedParams& out) const;

  Linear fc1;
  Linear fc2;
};

// Inverted dropout: kept entries are scaled by 1/(1-rate).
Tensor dropout(const Tensor& x, double rate, const ForwardContext& ctx);

// Upper-triangular (column > row) indicator of shape [n, n].
Tensor upper_mask(std::size_t n);

}  // namespace rpnt::nn
