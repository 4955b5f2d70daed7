#include "rpnt/model.hpp"

#include <algorithm>
#include <cmath>

#include "rpnt/errors.hpp"

namespace rpnt::model {

namespace {

nn::NamedParams collect_block(const TemporalBlock& b, const std::string& p, bool ffn) {
  nn::NamedParams out;
  b.ln_attn.collect(p + ".ln_attn", out);
  b.attn.collect(p + ".attn", out);
  if (ffn) {
    b.ln_ffn.collect(p + ".ln_ffn", out);
    b.ffn.collect(p + ".ffn", out);
  }
  return out;
}

void append(nn::NamedParams& dst, nn::NamedParams src) {
  for (auto& e : src) dst.push_back(std::move(e));
}

}  // namespace

RopePreset parse_rope_preset(std::string_view name) {
  if (name == "3d") return RopePreset::k3D;
  if (name == "4d") return RopePreset::k4D;
  if (name == "custom") return RopePreset::kCustom;
  throw ConfigError("unknown rope preset '" + std::string(name) + "' (expected 3d, 4d or custom)");
}

std::string to_string(RopePreset preset) {
  switch (preset) {
    case RopePreset::k3D: return "3d";
    case RopePreset::k4D: return "4d";
    case RopePreset::kCustom: return "custom";
  }
  return "?";
}

RpntConfig RpntConfig::benchmark() {
  RpntConfig c;
  c.d_model = 512;
  c.n_temporal_layers = 4;
  c.n_spatial_layers = 0;
  c.n_heads = 16;
  c.rope_preset = RopePreset::k4D;
  c.n_neurons = 100;
  c.n_sites = 1;
  return c;
}

RpntConfig RpntConfig::neuropixel() { return RpntConfig{}; }

RpntConfig RpntConfig::tiny() {
  RpntConfig c;
  c.d_model = 12;
  c.n_temporal_layers = 2;
  c.n_spatial_layers = 1;
  c.n_heads = 2;
  c.kernel_rows = 3;
  c.kernel_cols = 3;
  c.d_context = 6;
  c.dropout = 0.0;
  c.n_neurons = 4;
  c.n_sites = 2;
  return c;
}

RpntConfig RpntConfig::desk() {
  RpntConfig c;
  c.d_model = 36;
  c.n_temporal_layers = 2;
  c.n_spatial_layers = 1;
  c.n_heads = 2;
  c.kernel_rows = 5;
  c.kernel_cols = 5;
  c.n_neurons = 20;
  c.n_sites = 4;
  return c;
}

std::size_t RpntConfig::site_coord_count() const {
  switch (rope_preset) {
    case RopePreset::k3D: return 2;
    case RopePreset::k4D: return 3;
    case RopePreset::kCustom: return custom_groups.empty() ? 0 : custom_groups.size() - 1;
  }
  return 0;
}

posenc::RopeGroupSpec RpntConfig::rope_spec() const {
  using posenc::RopeGroupSpec;
  if (pe == posenc::PeKind::kRope) return RopeGroupSpec::standard(d_model);
  if (pe != posenc::PeKind::kMrope) return {};
  switch (rope_preset) {
    case RopePreset::k3D: return RopeGroupSpec::preset_3d(d_model);
    case RopePreset::k4D: return RopeGroupSpec::preset_4d(d_model);
    case RopePreset::kCustom: {
      std::size_t m = custom_groups.size();
      if (m == 0) throw ConfigError("custom rope preset needs at least one group");
      if (d_model % (2 * m) != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by 2*" +
                          std::to_string(m) + " rope groups");
      }
      std::vector<posenc::RopeGroup> g = custom_groups;
      for (auto& e : g) e.dim = d_model / m;
      return RopeGroupSpec(std::move(g));
    }
  }
  return {};
}

attention::ContextAttnConfig RpntConfig::attention_config() const {
  attention::ContextAttnConfig a;
  a.d_model = d_model;
  a.n_heads = n_heads;
  a.d_context = d_context;
  a.kernel_rows = kernel_rows;
  a.kernel_cols = kernel_cols;
  a.kind = attention;
  a.history = history;
  a.dropout = dropout;
  return a;
}

void RpntConfig::validate() const {
  if (d_model < 4 || d_model % 4 != 0) {
    throw ConfigError("d_model must be a positive multiple of 4 (decoder widths D/2 and D/4), got " +
                      std::to_string(d_model));
  }
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (head_dim() % 2 != 0) throw ConfigError("head dimension must be even for pairwise rotation");
  if (n_neurons == 0) throw ConfigError("n_neurons must be positive");
  if (n_sites == 0) throw ConfigError("n_sites must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  attention_config().validate();
  (void)rope_spec();  // throws on incompatible group splits
}

json to_json(const RpntConfig& c) {
  json groups = json::array();
  for (const auto& g : c.custom_groups) groups.push_back({{"name", g.name}, {"base", g.base}});
  json spec = json::array();
  auto rope = c.rope_spec();
  for (const auto& g : rope.groups()) {
    spec.push_back({{"name", g.name}, {"dim", g.dim}, {"base", g.base}});
  }
  return json{{"d_model", c.d_model},
              {"n_temporal_layers", c.n_temporal_layers},
              {"n_spatial_layers", c.n_spatial_layers},
              {"n_heads", c.n_heads},
              {"kernel", {c.kernel_rows, c.kernel_cols}},
              {"d_context", c.d_context},
              {"rope_preset", to_string(c.rope_preset)},
              {"custom_groups", groups},
              {"rope_groups", spec},
              {"pe", posenc::to_string(c.pe)},
              {"attention", attention::to_string(c.attention)},
              {"history", c.history.str()},
              {"dropout", c.dropout},
              {"ffn", c.ffn},
              {"n_neurons", c.n_neurons},
              {"n_sites", c.n_sites}};
}

RpntConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  RpntConfig c;
  try {
    if (j.contains("preset")) {
      std::string p = j.at("preset").get<std::string>();
      if (p == "benchmark") c = RpntConfig::benchmark();
      else if (p == "neuropixel") c = RpntConfig::neuropixel();
      else if (p == "tiny") c = RpntConfig::tiny();
      else if (p == "desk") c = RpntConfig::desk();
      else throw ConfigError("unknown model preset '" + p + "' (expected benchmark, neuropixel, tiny or desk)");
    }
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("n_temporal_layers", c.n_temporal_layers);
    get("n_spatial_layers", c.n_spatial_layers);
    get("n_heads", c.n_heads);
    get("d_context", c.d_context);
    get("dropout", c.dropout);
    get("ffn", c.ffn);
    get("n_neurons", c.n_neurons);
    get("n_sites", c.n_sites);
    if (j.contains("kernel")) {
      auto k = j.at("kernel").get<std::vector<std::size_t>>();
      if (k.size() != 2) throw ConfigError("kernel must list two extents");
      c.kernel_rows = k[0];
      c.kernel_cols = k[1];
    }
    if (j.contains("rope_preset")) c.rope_preset = parse_rope_preset(j.at("rope_preset").get<std::string>());
    if (j.contains("custom_groups")) {
      c.custom_groups.clear();
      for (const auto& g : j.at("custom_groups")) {
        c.custom_groups.push_back({g.at("name").get<std::string>(), 0, g.at("base").get<double>()});
      }
    }
    if (j.contains("pe")) c.pe = posenc::parse_pe_kind(j.at("pe").get<std::string>());
    if (j.contains("attention")) c.attention = attention::parse_attention_kind(j.at("attention").get<std::string>());
    if (j.contains("history")) c.history = attention::HistoryMode::parse(j.at("history").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

Rpnt::Rpnt(const RpntConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  rope_ = config_.rope_spec();
  nn::Rng rng(seed);
  std::size_t d = config_.d_model;
  embed_ = nn::Linear(config_.n_neurons, d, rng);
  if (config_.pe == posenc::PeKind::kLearnable) {
    learnable_pe_ = posenc::LearnablePe(config_.site_coord_count() + 1, d, rng);
  }
  auto attn_cfg = config_.attention_config();
  for (std::size_t l = 0; l < config_.n_temporal_layers; ++l) {
    TemporalBlock b;
    b.ln_attn = nn::LayerNorm(d);
    b.attn = attention::ContextAttnLayer(attn_cfg, rng);
    b.attn.layer_index = l;
    if (config_.ffn) {
      b.ln_ffn = nn::LayerNorm(d);
      b.ffn = nn::Mlp(d, 4 * d, d, rng);
    }
    temporal_.push_back(std::move(b));
  }
  for (std::size_t l = 0; l < config_.n_spatial_layers; ++l) {
    SpatialBlock b;
    b.ln_attn = nn::LayerNorm(d);
    b.attn = attention::MultiHeadAttention(d, config_.n_heads, rng);
    if (config_.ffn) {
      b.ln_ffn = nn::LayerNorm(d);
      b.ffn = nn::Mlp(d, 4 * d, d, rng);
    }
    spatial_.push_back(std::move(b));
  }
  decoder_.ln = nn::LayerNorm(d);
  decoder_.ffn1 = nn::Linear(d, d / 2, rng);
  decoder_.ffn2 = nn::Linear(d / 2, d / 4, rng);
  decoder_.out = nn::Linear(d / 4, config_.n_neurons, rng);
}

bool Rpnt::needs_site_coords() const {
  bool uses = config_.pe == posenc::PeKind::kMrope || config_.pe == posenc::PeKind::kLearnable;
  return uses && config_.site_coord_count() > 0;
}

Rpnt Rpnt::clone() const {
  Rpnt copy(config_, 0);
  if (task_head_) copy.attach_task_head(0);
  auto src = parameters();
  auto dst = copy.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto from = src[i].second.data();
    std::copy(from.begin(), from.end(), dst[i].second.mutable_data().begin());
  }
  for (std::size_t l = 0; l < temporal_.size(); ++l) {
    copy.temporal_[l].attn.forced_kernel = temporal_[l].attn.forced_kernel;
  }
  return copy;
}

Tensor Rpnt::embed(const Tensor& x) const {
  if (x.dim() != 3 || x.size(2) != config_.n_neurons) {
    throw DimensionError("embedding expects [B, T, " + std::to_string(config_.n_neurons) + "] spikes, got " +
                         ad::shape_str(x.shape()) + "; bring recordings to the model width with resample_to_width");
  }
  return embed_(x);
}

attention::RotaryAngles Rpnt::rotary_table(std::size_t B, std::size_t T,
                                           std::span<const SiteCoords> coords) const {
  if (rope_.empty()) return {};
  bool temporal_only = config_.pe == posenc::PeKind::kRope;
  std::size_t half = config_.d_model / 2;
  attention::RotaryAngles angles;
  angles.reserve(B * T * half);
  for (std::size_t b = 0; b < B; ++b) {
    posenc::PositionVector pos;
    if (!temporal_only && !coords.empty()) pos.coords = coords[coords.size() == 1 ? 0 : b];
    pos.coords.push_back(0.0);
    for (std::size_t t = 0; t < T; ++t) {
      pos.coords.back() = static_cast<double>(t);
      auto a = posenc::rope_angles(rope_, pos);
      angles.insert(angles.end(), a.begin(), a.end());
    }
  }
  return angles;
}

Tensor Rpnt::additive_pe(std::size_t B, std::size_t T, std::span<const SiteCoords> coords) const {
  std::size_t d = config_.d_model;
  if (config_.pe == posenc::PeKind::kSinusoidal) {
    std::vector<double> pe;
    pe.reserve(T * d);
    for (std::size_t t = 0; t < T; ++t) {
      auto row = posenc::sinusoidal_pe(static_cast<double>(t), d);
      pe.insert(pe.end(), row.data().begin(), row.data().end());
    }
    return Tensor({T, d}, std::move(pe));
  }
  std::vector<posenc::PositionVector> pos;
  pos.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      posenc::PositionVector p;
      if (!coords.empty()) p.coords = coords[coords.size() == 1 ? 0 : b];
      p.coords.push_back(static_cast<double>(t));
      pos.push_back(std::move(p));
    }
  }
  return ad::reshape(learnable_pe_(pos), {B, T, d});
}

TemporalOutput Rpnt::forward_temporal(const Tensor& x, std::span<const SiteCoords> coords,
                                      const nn::ForwardContext& ctx) const {
  Tensor h = embed(x);
  std::size_t B = x.size(0), T = x.size(1);
  if (needs_site_coords()) {
    if (coords.size() != B && coords.size() != 1) {
      throw DimensionError("forward_temporal: " + std::to_string(coords.size()) + " coordinate sets for " +
                           std::to_string(B) + " sequences");
    }
    for (const auto& c : coords) {
      if (c.size() != config_.site_coord_count()) {
        throw ConfigError("site coordinates have " + std::to_string(c.size()) + " entries, the " +
                          to_string(config_.rope_preset) + " preset needs " +
                          std::to_string(config_.site_coord_count()));
      }
    }
  }
  attention::RotaryAngles angles;
  if (posenc::is_rotary(config_.pe)) {
    angles = rotary_table(B, T, coords);
  } else {
    h = ad::add(h, additive_pe(B, T, coords));
  }
  TemporalOutput out;
  for (const auto& blk : temporal_) {
    auto a = blk.attn.forward(blk.ln_attn(h), angles, ctx);
    h = ad::add(h, nn::dropout(a.output, config_.dropout, ctx));
    if (config_.ffn) h = ad::add(h, nn::dropout(blk.ffn(blk.ln_ffn(h)), config_.dropout, ctx));
    if (ctx.retain_attention) out.weights.push_back(a.weights);
  }
  out.hidden = h;
  return out;
}

SpatialOutput Rpnt::forward_spatial(const Tensor& z, const nn::ForwardContext& ctx) const {
  if (spatial_.empty()) throw ConfigError("the model has no spatial layers");
  if (z.dim() != 4 || z.size(3) != config_.d_model) {
    throw DimensionError("forward_spatial expects [B, S, T, D], got " + ad::shape_str(z.shape()));
  }
  std::size_t B = z.size(0), S = z.size(1), T = z.size(2), D = z.size(3);
  if (S == 0) throw ConfigError("forward_spatial called with zero sites");
  Tensor h = ad::reshape(ad::permute(z, {0, 2, 1, 3}), {B * T, S, D});
  SpatialOutput out;
  for (const auto& blk : spatial_) {
    auto a = blk.attn.forward(blk.ln_attn(h), ctx);
    h = ad::add(h, nn::dropout(a.output, config_.dropout, ctx));
    if (config_.ffn) h = ad::add(h, nn::dropout(blk.ffn(blk.ln_ffn(h)), config_.dropout, ctx));
    if (ctx.retain_attention) out.weights.push_back(a.weights);
  }
  out.hidden = ad::permute(ad::reshape(h, {B, T, S, D}), {0, 2, 1, 3});
  return out;
}

Tensor Rpnt::decode_rates(const Tensor& h, const nn::ForwardContext& ctx) const {
  Tensor y = decoder_.ln(h);
  y = nn::dropout(ad::gelu(decoder_.ffn1(y)), config_.dropout, ctx);
  y = nn::dropout(ad::gelu(decoder_.ffn2(y)), config_.dropout, ctx);
  return ad::softplus(decoder_.out(y));
}

PretrainOutput Rpnt::forward_pretrain(const Tensor& x, std::span<const SiteCoords> coords,
                                      const nn::ForwardContext& ctx) const {
  if (x.dim() != 4) throw DimensionError("forward_pretrain expects [B, S, T, N], got " + ad::shape_str(x.shape()));
  std::size_t B = x.size(0), S = x.size(1), T = x.size(2), N = x.size(3);
  std::vector<SiteCoords> seq;
  if (needs_site_coords()) {
    if (coords.size() != S) {
      throw DimensionError("forward_pretrain: " + std::to_string(coords.size()) + " site coordinates for " +
                           std::to_string(S) + " sites");
    }
    seq.reserve(B * S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t s = 0; s < S; ++s) seq.push_back(coords[s]);
  }
  auto temporal = forward_temporal(ad::reshape(x, {B * S, T, N}), seq, ctx);
  PretrainOutput out;
  out.temporal_weights = std::move(temporal.weights);
  out.representation = ad::reshape(temporal.hidden, {B, S, T, config_.d_model});
  if (!spatial_.empty()) {
    auto sp = forward_spatial(out.representation, ctx);
    out.representation = sp.hidden;
    out.spatial_weights = std::move(sp.weights);
  }
  out.rates = decode_rates(out.representation, ctx);
  return out;
}

Tensor Rpnt::forward_decode(const Tensor& x, std::span<const SiteCoords> coords,
                            const nn::ForwardContext& ctx) const {
  if (!task_head_) {
    throw UsageError("forward_decode needs a task head; call attach_task_head before finetuning or decoding");
  }
  return (*task_head_)(forward_temporal(x, coords, ctx).hidden);
}

void Rpnt::attach_task_head(std::uint64_t seed) {
  nn::Rng rng(nn::mix_seed(seed, 0x7a5cULL));
  task_head_ = nn::Mlp(config_.d_model, config_.d_model / 2, 2, rng);
}

nn::Mlp& Rpnt::task_head() {
  if (!task_head_) throw UsageError("no task head attached");
  return *task_head_;
}

nn::NamedParams Rpnt::encoder_parameters() const {
  nn::NamedParams out;
  embed_.collect("embed", out);
  if (config_.pe == posenc::PeKind::kLearnable) learnable_pe_.collect("learnable_pe", out);
  for (std::size_t l = 0; l < temporal_.size(); ++l) {
    append(out, collect_block(temporal_[l], "temporal." + std::to_string(l), config_.ffn));
  }
  for (std::size_t l = 0; l < spatial_.size(); ++l) {
    std::string p = "spatial." + std::to_string(l);
    const auto& b = spatial_[l];
    b.ln_attn.collect(p + ".ln_attn", out);
    b.attn.collect(p + ".attn", out);
    if (config_.ffn) {
      b.ln_ffn.collect(p + ".ln_ffn", out);
      b.ffn.collect(p + ".ffn", out);
    }
  }
  decoder_.ln.collect("decoder.ln", out);
  decoder_.ffn1.collect("decoder.ffn1", out);
  decoder_.ffn2.collect("decoder.ffn2", out);
  decoder_.out.collect("decoder.out", out);
  return out;
}

nn::NamedParams Rpnt::parameters() const {
  nn::NamedParams out = encoder_parameters();
  if (task_head_) task_head_->collect("task_head", out);
  return out;
}

Tensor extract_fc(const std::vector<Tensor>& spatial_weights, std::size_t batch, std::size_t steps) {
  if (spatial_weights.empty()) {
    throw UsageError("no spatial attention weights; run the forward pass with retain_attention set");
  }
  Tensor acc;
  for (const auto& w : spatial_weights) {
    if (!w.defined()) throw UsageError("spatial attention weights were not retained");
    if (w.dim() != 4 || w.size(0) != batch * steps || w.size(2) != w.size(3)) {
      throw DimensionError("spatial weights must be [B*T, H, S, S], got " + ad::shape_str(w.shape()));
    }
    std::size_t H = w.size(1), S = w.size(2);
    // [B, T, H, S, S] -> mean over heads then batch.
    Tensor m = ad::mean(ad::mean(ad::reshape(w, {batch, steps, H, S, S}), 2), 0);
    acc = acc.defined() ? ad::add(acc, m) : m;
  }
  return ad::scale(acc, 1.0 / static_cast<double>(spatial_weights.size()));
}

}  // namespace rpnt::model
