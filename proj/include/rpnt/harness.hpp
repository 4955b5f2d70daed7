#pragma once

// Optimization, SSL pretraining, supervised finetuning, sweeps and the
// verification/export commands built on top of them.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rpnt/data.hpp"
#include "rpnt/model.hpp"
#include "rpnt/objectives.hpp"

namespace rpnt::harness {

using ad::Tensor;
using nlohmann::json;

// ---- optimizer ----

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay: p <- p - lr*wd*p, then the
// bias-corrected moment step. Parameters without a gradient are skipped.
class AdamW {
 public:
  AdamW(nn::NamedParams params, AdamWConfig config = {});

  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  const nn::NamedParams& params() const { return params_; }

 private:
  nn::NamedParams params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// Linear warmup from 0 to peak over warmup_steps, then cosine decay to
// min_lr at total_steps (held there afterwards).
struct LrSchedule {
  double peak = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double min_lr = 0.0;

  double at(std::size_t step) const;
};

double global_grad_norm(const nn::NamedParams& params);
// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(const nn::NamedParams& params, double max_norm);

// ---- records ----

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  objectives::LossBreakdown train;
  double val_loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  std::optional<double> r2;
};

struct RunRecord {
  json config;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::string checkpoint;
  std::optional<objectives::R2Report> r2;

  json to_json() const;
};

// Newline-delimited JSON metrics; a default-constructed sink discards.
class MetricsSink {
 public:
  MetricsSink() = default;
  explicit MetricsSink(const std::filesystem::path& path);
  explicit MetricsSink(std::ostream* stream) : stream_(stream) {}

  void write(const json& record);
  void epoch(const std::string& phase, const EpochRecord& e);

 private:
  std::shared_ptr<std::ostream> owned_;
  std::ostream* stream_ = nullptr;
};

// ---- pretraining ----

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr = 5e-5;
  double warmup_fraction = 0.1;  // of total steps
  AdamWConfig adamw;
  double clip = 1.0;
  double mu = 0.1;   // contrastive weight, ignored for single-site data
  double tau = 0.1;
  objectives::MaskStrategy masking;
  std::size_t patience = 0;  // epochs without validation improvement; 0 never stops early
  std::uint64_t seed = 3407;

  json to_json() const;
  static PretrainConfig from_json(const json& j);
};

struct PretrainResult {
  model::Rpnt model;  // best validation checkpoint
  RunRecord record;
};

// Site coordinates of a dataset as model inputs.
std::vector<model::SiteCoords> site_coords(const data::Dataset& ds);

// Masked Poisson (+ contrastive) loss of a batch; masks keyed by mask_seed.
objectives::SslLoss pretrain_loss(const model::Rpnt& m, const Tensor& spikes,
                                  std::span<const model::SiteCoords> coords, const PretrainConfig& cfg,
                                  std::uint64_t mask_seed, const nn::ForwardContext& ctx);

// Writes pretrain_best.rpnt into out_dir when given. A non-finite loss
// stores last_good.rpnt and raises NumericFault.
PretrainResult pretrain(const data::Dataset& ds, const model::RpntConfig& model_cfg, const PretrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir, MetricsSink& metrics);

// ---- finetuning ----

enum class FinetuneMode { kFullSft, kFsSft, kScratch };
FinetuneMode parse_finetune_mode(std::string_view name);
std::string to_string(FinetuneMode mode);

struct Session {
  Tensor spikes;    // [C, T, N]
  Tensor velocity;  // [C, T, 2]
  model::SiteCoords coords;
};

struct FinetuneData {
  std::vector<Session> train;
  std::vector<Session> test;
};

struct FinetuneConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double lr = 1e-4;
  double warmup_fraction = 0.1;
  AdamWConfig adamw;
  double clip = 1.0;
  std::uint64_t seed = 3407;

  json to_json() const;
  static FinetuneConfig from_json(const json& j);
};

struct FinetuneResult {
  RunRecord record;
  objectives::R2Report test_r2;
  Tensor predictions;  // test velocities, concatenated over sessions [C, T, 2]
  Tensor targets;
};

// pretrained may be null only for kScratch, which initializes from
// model_cfg with cfg.seed. fs_sft needs exactly one training session.
// Velocity targets are scaled by the training standard deviation per axis;
// r2 is reported on the unscaled test split after the last epoch.
FinetuneResult finetune(const model::Rpnt* pretrained, const model::RpntConfig& model_cfg, FinetuneMode mode,
                        const FinetuneData& data, const FinetuneConfig& cfg, MetricsSink& metrics);

// Held-out site sessions: train is the first train_ratio of all trials, test
// the dataset's test split (the last trials).
FinetuneData heldout_data(const data::Dataset& heldout, double train_ratio);

// ---- sweeps ----

enum class SweepAxis { kTrainRatio, kKernelSize, kLayers, kHeads, kPeKind, kAttentionKind, kMasking };
SweepAxis parse_sweep_axis(std::string_view name);
std::string to_string(SweepAxis axis);
std::vector<std::string> default_grid(SweepAxis axis);
// "20%" or "0.2" -> 0.2; must lie in (0, 1].
double parse_ratio(const std::string& text);

struct SweepRow {
  std::string value;
  std::string method;  // "pretrained" or "scratch"
  std::uint64_t seed = 0;
  double r2 = 0.0;
  double r2_x = 0.0;
  double r2_y = 0.0;
  std::string status = "ok";
  std::string error;
};

struct SweepResult {
  SweepAxis axis;
  std::vector<std::string> grid;
  std::vector<SweepRow> rows;
};

struct SweepConfig {
  SweepAxis axis = SweepAxis::kPeKind;
  std::vector<std::string> grid;  // empty -> default_grid
  std::vector<std::uint64_t> seeds{3407};
  model::RpntConfig model;
  PretrainConfig pretrain;
  FinetuneConfig finetune;
  double train_ratio = 0.2;
};

SweepResult run_sweep(const data::Dataset& pretrain_ds, const data::Dataset& heldout_ds, const SweepConfig& cfg,
                      MetricsSink& metrics);
// sweep_<axis>.csv, sweep_<axis>.json (grouped the way the ablation
// tables are laid out) and sweep_<axis>.svg.
void write_sweep(const SweepResult& result, const std::filesystem::path& out_dir);
json sweep_table(const SweepResult& result);

// ---- verification / export ----

struct GradcheckReport {
  std::vector<ad::ParamGradReport> params;
  double max_rel_error = 0.0;
  std::string worst;
};

// Tiny model (d=12, 2 heads, T=6, N=4, S=2 by default) with dropout off and
// a frozen mask; central differences over every parameter.
GradcheckReport gradcheck_model(const model::RpntConfig& cfg, std::size_t layers, std::size_t steps,
                                std::uint64_t seed, double h = 1e-5);

struct FcExport {
  Tensor fc;  // [T, S, S]
  std::vector<std::size_t> bins;
};

inline std::size_t ms_to_bin(double ms, double bin_ms = 20.0) {
  return static_cast<std::size_t>(ms / bin_ms + 1e-9);
}

FcExport export_fc(const model::Rpnt& m, const data::Dataset& ds, const std::string& split,
                   const std::vector<double>& times_ms, const std::filesystem::path& out_dir);

// ---- plots ----

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);
std::string svg_heatmap(const std::string& title, std::span<const double> values, std::size_t rows,
                        std::size_t cols);

}  // namespace rpnt::harness
