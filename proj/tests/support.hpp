#pragma once

// Shared helpers for the unit and acceptance tests: seeded random tensors
// and a few reference computations written without the library's ops.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rpnt/attention.hpp"
#include "rpnt/tensor.hpp"

namespace rpnt::test {

using ad::Shape;
using ad::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(ad::shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// Plain row-major matrix product of [m, k] and [k, n].
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<double> naive_softmax(std::vector<double> row) {
  double mx = -INFINITY;
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : row) z += (v = std::isinf(v) && v < 0 ? 0.0 : std::exp(v - mx));
  for (double& v : row) v /= z;
  return row;
}

inline attention::RotaryAngles random_angles(std::size_t B, std::size_t T, std::size_t D, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-3.0, 3.0);
  attention::RotaryAngles a(B * T * D / 2);
  for (double& v : a) v = d(rng);
  return a;
}

// Causal rotary multi-head attention written with loops only.
inline std::vector<double> reference_attention(const attention::ContextAttnLayer& l, const Tensor& x,
                                               const attention::RotaryAngles& angles) {
  std::size_t B = x.size(0), T = x.size(1), D = x.size(2), H = l.config().n_heads, dh = D / H;
  auto project = [&](const nn::Linear& p, bool rotate) {
    std::vector<double> y(B * T * D);
    for (std::size_t r = 0; r < B * T; ++r) {
      for (std::size_t o = 0; o < D; ++o) {
        double acc = p.bias.defined() ? p.bias.data()[o] : 0.0;
        for (std::size_t i = 0; i < D; ++i) acc += x.data()[r * D + i] * p.weight.data()[i * D + o];
        y[r * D + o] = acc;
      }
      if (rotate && !angles.empty()) {
        for (std::size_t pr = 0; pr < D / 2; ++pr) {
          double th = angles[r * D / 2 + pr];
          double a = y[r * D + 2 * pr], b = y[r * D + 2 * pr + 1];
          y[r * D + 2 * pr] = a * std::cos(th) - b * std::sin(th);
          y[r * D + 2 * pr + 1] = a * std::sin(th) + b * std::cos(th);
        }
      }
    }
    return y;
  };
  auto q = project(l.wq, true), k = project(l.wk, true), v = project(l.wv, false);
  std::vector<double> merged(B * T * D, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> s(i + 1);
        for (std::size_t j = 0; j <= i; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e) acc += q[(b * T + i) * D + h * dh + e] * k[(b * T + j) * D + h * dh + e];
          s[j] = acc / std::sqrt(static_cast<double>(dh));
        }
        auto p = naive_softmax(s);
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t e = 0; e < dh; ++e) merged[(b * T + i) * D + h * dh + e] += p[j] * v[(b * T + j) * D + h * dh + e];
      }
    }
  }
  std::vector<double> out(B * T * D);
  for (std::size_t r = 0; r < B * T; ++r) {
    for (std::size_t o = 0; o < D; ++o) {
      double acc = l.wo.bias.data()[o];
      for (std::size_t i = 0; i < D; ++i) acc += merged[r * D + i] * l.wo.weight.data()[i * D + o];
      out[r * D + o] = acc;
    }
  }
  return out;
}

// Identity tap at the newest row, centre column, for every head.
inline Tensor delta_kernel(std::size_t H, std::size_t k1, std::size_t k2) {
  std::vector<double> v(H * k1 * k2, 0.0);
  for (std::size_t h = 0; h < H; ++h) v[h * k1 * k2 + (k1 - 1) * k2 + (k2 - 1) / 2] = 1.0;
  return Tensor({H, k1, k2}, v);
}

}  // namespace rpnt::test
