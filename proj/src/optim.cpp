#include <cmath>
#include <numbers>

#include "rpnt/errors.hpp"
#include "rpnt/harness.hpp"

namespace rpnt::harness {

AdamW::AdamW(nn::NamedParams params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++step_;
  double t = static_cast<double>(step_);
  double bc1 = 1.0 - std::pow(config_.beta1, t);
  double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] *= decay;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

double LrSchedule::at(std::size_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step >= total_steps || total_steps <= warmup_steps) return step >= total_steps ? min_lr : peak;
  double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(const nn::NamedParams& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const nn::NamedParams& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("gradient clip norm must be positive");
  double norm = global_grad_norm(params);
  if (norm > max_norm) {
    double s = max_norm / norm;
    for (const auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace rpnt::harness
