#pragma once

// Full RPNT stack: spike embedding, temporal context-attention encoder,
// optional cross-site encoder, Poisson rate decoder and behavior head.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpnt/attention.hpp"
#include "rpnt/layers.hpp"
#include "rpnt/posenc.hpp"

namespace rpnt::model {

using ad::Tensor;
using nlohmann::json;

enum class RopePreset { k3D, k4D, kCustom };

RopePreset parse_rope_preset(std::string_view name);
std::string to_string(RopePreset preset);

struct RpntConfig {
  std::size_t d_model = 384;
  std::size_t n_temporal_layers = 4;
  std::size_t n_spatial_layers = 2;
  std::size_t n_heads = 12;
  std::size_t kernel_rows = 9;
  std::size_t kernel_cols = 9;
  std::size_t d_context = 0;  // 0 -> d_model / 2
  RopePreset rope_preset = RopePreset::k3D;
  // Group names and bases for kCustom; dims are split evenly over d_model.
  std::vector<posenc::RopeGroup> custom_groups;
  posenc::PeKind pe = posenc::PeKind::kMrope;
  attention::AttentionKind attention = attention::AttentionKind::kContext;
  attention::HistoryMode history;
  double dropout = 0.1;
  bool ffn = true;
  std::size_t n_neurons = 50;
  std::size_t n_sites = 16;

  // d=512, 4 temporal layers, 16 heads, single site, 4D metadata rotation.
  static RpntConfig benchmark();
  // d=384, 4 temporal + 2 spatial layers, 12 heads, 3D rotation.
  static RpntConfig neuropixel();
  // d=12, 2 heads, 2 temporal + 1 spatial layer, N=4, S=2, 3x3 kernels,
  // no dropout. Used for gradient checks.
  static RpntConfig tiny();
  // d=36, 2 heads, 2 temporal + 1 spatial layer, 5x5 kernels, N=20, S=4.
  // Sized for synthetic runs on a laptop CPU.
  static RpntConfig desk();

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  // Coordinates a site contributes before the temporal bin index.
  std::size_t site_coord_count() const;
  // Rotation groups spanning d_model for the configured PE kind. Empty for
  // additive kinds.
  posenc::RopeGroupSpec rope_spec() const;
  attention::ContextAttnConfig attention_config() const;
};

json to_json(const RpntConfig& config);
RpntConfig config_from_json(const json& j);

// Per-site coordinates, e.g. (x, y) for the 3D preset or (task, subject,
// recording time) for the 4D preset.
using SiteCoords = std::vector<double>;

struct TemporalOutput {
  Tensor hidden;                 // [B, T, D]
  std::vector<Tensor> weights;   // per layer [B, H, T, T] when retained
};

struct SpatialOutput {
  Tensor hidden;                 // [B, S, T, D]
  std::vector<Tensor> weights;   // per layer [B*T, H, S, S] when retained
};

struct PretrainOutput {
  Tensor rates;                  // [B, S, T, N], strictly positive
  Tensor representation;         // [B, S, T, D]
  std::vector<Tensor> temporal_weights;
  std::vector<Tensor> spatial_weights;
};

struct TemporalBlock {
  nn::LayerNorm ln_attn;
  attention::ContextAttnLayer attn;
  nn::LayerNorm ln_ffn;
  nn::Mlp ffn;
};

struct SpatialBlock {
  nn::LayerNorm ln_attn;
  attention::MultiHeadAttention attn;
  nn::LayerNorm ln_ffn;
  nn::Mlp ffn;
};

struct PoissonDecoder {
  nn::LayerNorm ln;
  nn::Linear ffn1;  // D -> D/2
  nn::Linear ffn2;  // D/2 -> D/4
  nn::Linear out;   // D/4 -> N
};

class Rpnt {
 public:
  Rpnt(const RpntConfig& config, std::uint64_t seed);

  const RpntConfig& config() const { return config_; }

  // Copies share parameter storage; clone duplicates it.
  Rpnt clone() const;

  // [B, T, N] -> [B, T, D].
  Tensor embed(const Tensor& x) const;

  // x: [B, T, N]; coords holds one entry per sequence or a single shared one.
  TemporalOutput forward_temporal(const Tensor& x, std::span<const SiteCoords> coords,
                                  const nn::ForwardContext& ctx) const;
  // z: [B, S, T, D].
  SpatialOutput forward_spatial(const Tensor& z, const nn::ForwardContext& ctx) const;
  // x: [B, S, T, N] (masked); coords: one per site.
  PretrainOutput forward_pretrain(const Tensor& x, std::span<const SiteCoords> coords,
                                  const nn::ForwardContext& ctx) const;
  // [..., D] -> [..., N].
  Tensor decode_rates(const Tensor& h, const nn::ForwardContext& ctx) const;
  // x: [B, T, N] -> velocities [B, T, 2].
  Tensor forward_decode(const Tensor& x, std::span<const SiteCoords> coords,
                        const nn::ForwardContext& ctx) const;

  void attach_task_head(std::uint64_t seed);
  void drop_task_head() { task_head_.reset(); }
  bool has_task_head() const { return task_head_.has_value(); }
  nn::Mlp& task_head();

  // Every trainable tensor, in a fixed order with dotted names.
  nn::NamedParams parameters() const;
  // Encoder parameters only (no task head).
  nn::NamedParams encoder_parameters() const;

  std::vector<TemporalBlock>& temporal_blocks() { return temporal_; }
  const std::vector<TemporalBlock>& temporal_blocks() const { return temporal_; }
  std::vector<SpatialBlock>& spatial_blocks() { return spatial_; }
  PoissonDecoder& decoder() { return decoder_; }
  nn::Linear& embedding() { return embed_; }

  // True when forward passes read per-site coordinates.
  bool needs_site_coords() const;

 private:
  attention::RotaryAngles rotary_table(std::size_t B, std::size_t T,
                                       std::span<const SiteCoords> coords) const;
  Tensor additive_pe(std::size_t B, std::size_t T, std::span<const SiteCoords> coords) const;

  RpntConfig config_;
  posenc::RopeGroupSpec rope_;
  nn::Linear embed_;
  posenc::LearnablePe learnable_pe_;
  std::vector<TemporalBlock> temporal_;
  std::vector<SpatialBlock> spatial_;
  PoissonDecoder decoder_;
  std::optional<nn::Mlp> task_head_;
};

// Averages retained spatial weights over heads, batch and layers. Each
// entry is [B*T, H, S, S]; the result is [T, S, S].
Tensor extract_fc(const std::vector<Tensor>& spatial_weights, std::size_t batch, std::size_t steps);

// Binary checkpoint: "RPNT", u32 version, u64 config length, config JSON,
// u32 task-head flag, u32 parameter count, then per parameter a u32 name
// length, name bytes, u32 rank, u64 extents and little-endian f64 data.
void save_checkpoint(const Rpnt& model, const std::filesystem::path& path);
Rpnt load_checkpoint(const std::filesystem::path& path);

}  // namespace rpnt::model
