#include "rpnt/attention.hpp"

#include <cmath>
#include <limits>

#include "rpnt/errors.hpp"

namespace rpnt::attention {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

AttentionKind parse_attention_kind(std::string_view name) {
  if (name == "context") return AttentionKind::kContext;
  if (name == "standard") return AttentionKind::kStandard;
  throw ConfigError("unknown attention kind '" + std::string(name) + "' (expected context or standard)");
}

std::string to_string(AttentionKind kind) {
  return kind == AttentionKind::kContext ? "context" : "standard";
}

HistoryMode HistoryMode::past_only(std::size_t bins) {
  if (bins == 0) throw ConfigError("past_only history needs at least one bin");
  return {Kind::kPastOnly, bins};
}

HistoryMode HistoryMode::parse(std::string_view text) {
  if (text == "full") return full_window();
  if (text.substr(0, 5) == "past:") {
    std::string n(text.substr(5));
    std::size_t used = 0;
    unsigned long bins = 0;
    try {
      bins = std::stoul(n, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == n.size() && used > 0) return past_only(bins);
  }
  throw ConfigError("history mode must be 'full' or 'past:K', got '" + std::string(text) + "'");
}

std::string HistoryMode::str() const {
  return kind == Kind::kFullWindow ? "full" : "past:" + std::to_string(bins);
}

void ContextAttnConfig::validate() const {
  if (d_model == 0 || n_heads == 0) throw ConfigError("attention needs positive d_model and heads");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (kernel_rows % 2 == 0 || kernel_cols % 2 == 0) {
    throw ConfigError("context kernel extents must be odd, got " + std::to_string(kernel_rows) + "x" +
                      std::to_string(kernel_cols));
  }
  if (context_dim() == 0) throw ConfigError("context dimension must be positive");
}

void check_finite(const Tensor& t, std::size_t layer, std::size_t heads, const char* where) {
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (std::isfinite(d[i])) continue;
    std::string msg = std::string("non-finite value in ") + where + " of layer " + std::to_string(layer);
    if (t.dim() == 4 && heads > 0) {
      std::size_t plane = t.size(2) * t.size(3);
      msg += ", head " + std::to_string((i / plane) % heads);
    }
    throw NumericFault(msg);
  }
}

// ---------------------------------------------------------------------------
// ContextAttnLayer

ContextAttnLayer::ContextAttnLayer(const ContextAttnConfig& config, nn::Rng& rng) : config_(config) {
  config_.validate();
  std::size_t d = config_.d_model;
  std::size_t dc = config_.context_dim();
  wq = nn::Linear(d, d, rng);
  wk = nn::Linear(d, d, rng);
  wv = nn::Linear(d, d, rng);
  wo = nn::Linear(d, d, rng);
  if (config_.kind == AttentionKind::kContext) {
    context_mlp = nn::Mlp(d, d, dc, rng);
    std::vector<double> q(dc);
    double bound = 1.0 / std::sqrt(static_cast<double>(dc));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : q) v = dist(rng);
    pool_query = Tensor({dc}, std::move(q), true);
    // Zero output layer: every kernel starts uniform.
    kernel_mlp = nn::Mlp(dc, dc, config_.n_heads * config_.kernel_rows * config_.kernel_cols, rng, true);
  }
}

Tensor ContextAttnLayer::project_heads(const Tensor& x, const nn::Linear& proj,
                                       const RotaryAngles& angles) const {
  std::size_t B = x.size(0), T = x.size(1);
  std::size_t H = config_.n_heads, dh = config_.head_dim();
  Tensor y = proj(x);
  if (!angles.empty()) {
    if (angles.size() != B * T * config_.d_model / 2) {
      throw DimensionError("rotary table has " + std::to_string(angles.size()) + " angles, expected " +
                           std::to_string(B * T * config_.d_model / 2));
    }
    y = ad::rotate_pairs(y, angles);
  }
  return ad::permute(ad::reshape(y, {B, T, H, dh}), {0, 2, 1, 3});
}

Tensor ContextAttnLayer::context_vector(const Tensor& history) const {
  if (history.dim() != 3 || history.size(1) == 0) {
    throw UsageError("context_vector needs a non-empty history [B, T_hist, D], got " +
                     ad::shape_str(history.shape()));
  }
  std::size_t dc = config_.context_dim();
  Tensor hp = context_mlp(history);                                      // [B, Th, dc]
  Tensor scores = ad::matmul(hp, ad::reshape(pool_query, {dc, 1}));     // [B, Th, 1]
  Tensor w = ad::softmax(scores, 1);
  return ad::sum(ad::mul(w, hp), 1);                                     // [B, dc]
}

Tensor ContextAttnLayer::receding_context(const Tensor& history, std::size_t window) const {
  if (history.dim() != 3 || history.size(1) == 0) {
    throw UsageError("receding_context needs a non-empty history [B, T, D]");
  }
  if (window == 0) throw ConfigError("receding window must be positive");
  std::size_t B = history.size(0), T = history.size(1);
  std::size_t dc = config_.context_dim();
  Tensor hp = context_mlp(history);
  Tensor scores = ad::reshape(ad::matmul(hp, ad::reshape(pool_query, {dc, 1})), {B, 1, T});
  Tensor rows = ad::add(scores, Tensor::zeros({T, T}));  // [B, T, T]
  std::vector<double> band(T * T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < T; ++s) {
      bool inside = s <= t && s + window > t;
      band[t * T + s] = inside ? 0.0 : 1.0;
    }
  }
  Tensor w = ad::softmax(ad::masked_fill(rows, Tensor({T, T}, std::move(band)), kNegInf), -1);
  return ad::matmul(w, hp);  // [B, T, dc]
}

Tensor ContextAttnLayer::generate_kernels(const Tensor& c) const {
  std::size_t H = config_.n_heads, k1 = config_.kernel_rows, k2 = config_.kernel_cols;
  Tensor logits = kernel_mlp(c);
  ad::Shape lead(c.shape().begin(), c.shape().end() - 1);
  ad::Shape flat = lead;
  flat.push_back(H);
  flat.push_back(k1 * k2);
  Tensor probs = ad::softmax(ad::reshape(logits, flat), -1);
  ad::Shape out = lead;
  out.push_back(H);
  out.push_back(k1);
  out.push_back(k2);
  return ad::reshape(probs, out);
}

Tensor ContextAttnLayer::kernels_for(const Tensor& x) const {
  std::size_t B = x.size(0);
  std::size_t H = config_.n_heads, k1 = config_.kernel_rows, k2 = config_.kernel_cols;
  if (forced_kernel) {
    if (forced_kernel->shape() != ad::Shape{H, k1, k2}) {
      throw DimensionError("forced kernel must be " + ad::shape_str({H, k1, k2}));
    }
    return ad::add(Tensor::zeros({B, 1, 1, 1, 1}), ad::reshape(*forced_kernel, {1, H, 1, k1, k2}));
  }
  if (config_.history.kind == HistoryMode::Kind::kFullWindow) {
    return ad::reshape(generate_kernels(context_vector(x)), {B, H, 1, k1, k2});
  }
  Tensor k = generate_kernels(receding_context(x, config_.history.bins));  // [B, T, H, k1, k2]
  return ad::permute(k, {0, 2, 1, 3, 4});
}

AttnOutput ContextAttnLayer::forward(const Tensor& x, const RotaryAngles& angles,
                                     const nn::ForwardContext& ctx) const {
  if (x.dim() != 3 || x.size(2) != config_.d_model) {
    throw DimensionError("attention input must be [B, T, " + std::to_string(config_.d_model) + "], got " +
                         ad::shape_str(x.shape()));
  }
  std::size_t B = x.size(0), T = x.size(1), D = config_.d_model;
  std::size_t H = config_.n_heads;
  Tensor q = project_heads(x, wq, angles);
  Tensor k = project_heads(x, wk, angles);
  Tensor v = project_heads(x, wv, {});
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(config_.head_dim()));
  Tensor s = ad::scale(ad::matmul(q, ad::transpose(k, 2, 3)), inv_sqrt);  // [B, H, T, T]
  Tensor future = nn::upper_mask(T);
  if (config_.kind == AttentionKind::kContext) {
    // The lower-triangle convolution ignores scores above the diagonal,
    // which is the pre-convolution causal zeroing. Row-causal anchoring
    // keeps later queries out of earlier rows.
    ad::ConvOptions opts{ad::RowAnchor::kCausal, true};
    s = ad::conv2d_same(s, kernels_for(x), opts);
  }
  s = ad::masked_fill(s, future, kNegInf);
  Tensor a = ad::softmax(s, -1);
  check_finite(a, layer_index, H, "attention weights");
  Tensor o = ad::reshape(ad::permute(ad::matmul(a, v), {0, 2, 1, 3}), {B, T, D});
  AttnOutput out;
  out.output = wo(o);
  check_finite(out.output, layer_index, 0, "attention output");
  if (ctx.retain_attention) out.weights = a.detach();
  return out;
}

void ContextAttnLayer::collect(const std::string& prefix, nn::NamedParams& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
  if (config_.kind == AttentionKind::kContext) {
    context_mlp.collect(prefix + ".context_mlp", out);
    out.emplace_back(prefix + ".pool_query", pool_query);
    kernel_mlp.collect(prefix + ".kernel_mlp", out);
  }
}

// ---------------------------------------------------------------------------
// MultiHeadAttention

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t n_heads, nn::Rng& rng)
    : n_heads_(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  wq = nn::Linear(d_model, d_model, rng);
  wk = nn::Linear(d_model, d_model, rng, false, false);  // a key bias shifts every score in a row equally
  wv = nn::Linear(d_model, d_model, rng);
  wo = nn::Linear(d_model, d_model, rng);
}

AttnOutput MultiHeadAttention::forward(const Tensor& x, const nn::ForwardContext& ctx) const {
  if (x.dim() != 3 || x.size(2) != wq.in_features()) {
    throw DimensionError("multi-head attention input must be [B, S, D], got " + ad::shape_str(x.shape()));
  }
  std::size_t B = x.size(0), S = x.size(1), D = x.size(2);
  std::size_t H = n_heads_, dh = D / H;
  auto heads = [&](const nn::Linear& proj) {
    return ad::permute(ad::reshape(proj(x), {B, S, H, dh}), {0, 2, 1, 3});
  };
  Tensor q = heads(wq), k = heads(wk), v = heads(wv);
  Tensor s = ad::scale(ad::matmul(q, ad::transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor a = ad::softmax(s, -1);
  Tensor o = ad::reshape(ad::permute(ad::matmul(a, v), {0, 2, 1, 3}), {B, S, D});
  AttnOutput out;
  out.output = wo(o);
  if (ctx.retain_attention) out.weights = a.detach();
  return out;
}

void MultiHeadAttention::collect(const std::string& prefix, nn::NamedParams& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wo.collect(prefix + ".wo", out);
}

}  // namespace rpnt::attention
