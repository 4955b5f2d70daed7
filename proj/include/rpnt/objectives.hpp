#pragma once

// Masking strategies, the masked Poisson reconstruction loss, the cross-site
// contrastive loss and the finetuning losses/metrics.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rpnt/tensor.hpp"

namespace rpnt::objectives {

using ad::Tensor;

struct MaskStrategy {
  enum class Kind { kUniformRandom, kFixed, kEntrywise };
  Kind kind = Kind::kUniformRandom;
  double p_neuron = 0.0;  // kFixed only
  double p_time = 0.0;

  static MaskStrategy uniform_random() { return {}; }
  static MaskStrategy fixed(double p_neuron, double p_time);
  static MaskStrategy entrywise() { return {Kind::kEntrywise, 0.0, 0.0}; }
  // "uniform", "entrywise" or "fixed:<p_neuron>,<p_time>".
  static MaskStrategy parse(std::string_view text);
  std::string str() const;

  // The five fixed (neuron, time) ratio pairs followed by uniform_random.
  static std::vector<MaskStrategy> ablation_grid();
};

struct MaskSpec {
  MaskStrategy strategy;
  // Ratios realized for each batch element (entrywise keeps its p in p_time).
  std::vector<double> p_neuron;
  std::vector<double> p_time;
  Tensor mask;  // [B, T, N], 1 = visible, 0 = masked
  std::uint64_t seed = 0;

  std::size_t masked_count() const;
  double masked_fraction() const;
};

// Time rows are masked with probability p_time and neuron columns with
// probability p_neuron; the mask hides their union. uniform_random draws
// both ratios from U(0,1) per batch element. entrywise draws one p per
// element and hides each entry independently with probability p. Each
// element must keep at least one visible and one masked entry; it is
// redrawn up to 100 times, then ConfigError. Element b uses an rng
// seeded from (seed, b).
MaskSpec sample_mask(std::size_t B, std::size_t T, std::size_t N, const MaskStrategy& strategy,
                     std::uint64_t seed);

// Zeroes masked entries; mask broadcasts against x.
Tensor apply_mask(const Tensor& x, const Tensor& mask);

constexpr double kPoissonEps = 1e-8;

// Sum over masked positions (mask == 0) of rate - x * log(rate + eps),
// divided by the leading (batch) extent.
Tensor poisson_loss(const Tensor& rates, const Tensor& target, const Tensor& mask);

// z: [B, S, T, D]. Site representations are averaged over time and batch,
// compared by cosine similarity at temperature tau, and the loss is the
// mean over sites of -log softmax_j(sim_ij / tau) at j = i.
Tensor contrastive_loss(const Tensor& z, double tau = 0.1);

Tensor mse_loss(const Tensor& pred, const Tensor& target);

struct R2Report {
  std::vector<double> per_dim;
  double mean = 0.0;  // NaN when any dimension is undefined
  std::vector<std::string> warnings;
};

// Coefficient of determination per last-axis dimension, using the target
// mean of the evaluated set. A zero-variance dimension yields NaN and a
// warning.
R2Report r2_score(const Tensor& pred, const Tensor& target);

struct LossBreakdown {
  double recon = 0.0;
  double contrast = 0.0;
  double total = 0.0;
  std::size_t masked_count = 0;
  double mu = 0.1;
};

struct SslLoss {
  Tensor total;
  LossBreakdown breakdown;
};

// recon + mu * contrast. The contrastive term is skipped (reported as 0)
// when mu is 0 or z is undefined.
SslLoss ssl_loss(const Tensor& rates, const Tensor& target, const Tensor& mask, const Tensor& z,
                 double mu = 0.1, double tau = 0.1);

}  // namespace rpnt::objectives
