#pragma once

// Context-based attention: a history-conditioned set of 2D kernels is
// convolved over the causal score matrix of every head before the softmax.
// Standard (bidirectional) multi-head attention is provided for the
// cross-site encoder.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpnt/layers.hpp"
#include "rpnt/posenc.hpp"

namespace rpnt::attention {

using ad::Tensor;

enum class AttentionKind { kContext, kStandard };

AttentionKind parse_attention_kind(std::string_view name);
std::string to_string(AttentionKind kind);

// Which timesteps feed the context vector.
struct HistoryMode {
  enum class Kind { kFullWindow, kPastOnly };
  Kind kind = Kind::kFullWindow;
  std::size_t bins = 0;  // receding window length for kPastOnly

  static HistoryMode full_window() { return {}; }
  static HistoryMode past_only(std::size_t bins);
  // "full" or "past:K".
  static HistoryMode parse(std::string_view text);
  std::string str() const;
  bool operator==(const HistoryMode&) const = default;
};

struct ContextAttnConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  std::size_t d_context = 0;  // 0 -> d_model / 2
  std::size_t kernel_rows = 9;
  std::size_t kernel_cols = 9;
  AttentionKind kind = AttentionKind::kContext;
  HistoryMode history;
  double dropout = 0.0;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t context_dim() const { return d_context ? d_context : d_model / 2; }
  void validate() const;
};

struct AttnOutput {
  Tensor output;   // [B, T, d_model]
  Tensor weights;  // [B, H, T, T] post-softmax; undefined unless retained
};

// Rotation angles for every (sequence, timestep, pair) of the projected
// d_model-wide queries and keys, laid out [B, T, d_model / 2]; heads are
// split after rotation. Empty means no rotation.
using RotaryAngles = std::vector<double>;

class ContextAttnLayer {
 public:
  ContextAttnLayer() = default;
  ContextAttnLayer(const ContextAttnConfig& config, nn::Rng& rng);

  const ContextAttnConfig& config() const { return config_; }

  // x: [B, T, d_model]. angles as above or empty.
  AttnOutput forward(const Tensor& x, const RotaryAngles& angles, const nn::ForwardContext& ctx) const;

  // Attention-pooled context of a history [B, T_hist, d_model] -> [B, d_context].
  Tensor context_vector(const Tensor& history) const;
  // Receding-window contexts: row t pools bins max(0, t-K+1)..t -> [B, T, d_context].
  Tensor receding_context(const Tensor& history, std::size_t window) const;
  // c: [..., d_context] -> [..., H, K1, K2]; every kernel is a softmax.
  Tensor generate_kernels(const Tensor& c) const;

  void collect(const std::string& prefix, nn::NamedParams& out) const;

  // Replaces generated kernels with a fixed [H, K1, K2] tensor when set.
  std::optional<Tensor> forced_kernel;
  // Reported in numeric-fault messages.
  std::size_t layer_index = 0;

  nn::Linear wq, wk, wv, wo;
  nn::Mlp context_mlp;
  Tensor pool_query;  // [d_context]
  nn::Mlp kernel_mlp;

 private:
  Tensor project_heads(const Tensor& x, const nn::Linear& proj, const RotaryAngles& angles) const;
  Tensor kernels_for(const Tensor& x) const;  // [B, H, R, K1, K2], R = 1 or T

  ContextAttnConfig config_;
};

// Bidirectional multi-head attention without positions or masks.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t n_heads, nn::Rng& rng);

  // x: [B, S, d_model].
  AttnOutput forward(const Tensor& x, const nn::ForwardContext& ctx) const;
  void collect(const std::string& prefix, nn::NamedParams& out) const;

  nn::Linear wq, wk, wv, wo;

 private:
  std::size_t n_heads_ = 1;
};

// Throws NumericFault naming the layer and first offending head.
void check_finite(const Tensor& t, std::size_t layer, std::size_t heads, const char* where);

}  // namespace rpnt::attention
