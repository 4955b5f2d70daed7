#pragma once

// Multi-group rotary positional embedding and the additive baselines it is
// compared against.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rpnt/layers.hpp"
#include "rpnt/tensor.hpp"

namespace rpnt::posenc {

using ad::Tensor;

struct RopeGroup {
  std::string name;
  std::size_t dim = 0;  // even
  double base = 10000.0;
};

// Partition of a rotary dimension into groups, one per coordinate.
// Pair i of group m rotates by pos_m * base_m^(-2i/dim_m).
class RopeGroupSpec {
 public:
  RopeGroupSpec() = default;
  explicit RopeGroupSpec(std::vector<RopeGroup> groups);

  // (x, y, t) with bases 5000, 5000, 10000 and equal thirds.
  static RopeGroupSpec preset_3d(std::size_t dim);
  // (task, subject, recording time, t) with bases 10, 100, 1000, 10000.
  static RopeGroupSpec preset_4d(std::size_t dim);
  // Plain RoPE: one temporal group.
  static RopeGroupSpec standard(std::size_t dim, double base = 10000.0);

  const std::vector<RopeGroup>& groups() const { return groups_; }
  std::size_t num_groups() const { return groups_.size(); }
  std::size_t total_dim() const { return total_dim_; }
  bool empty() const { return groups_.empty(); }

  // Rotation frequency for each of the total_dim/2 pairs, in group order.
  const std::vector<double>& frequencies() const { return freqs_; }
  // Group index owning each pair.
  const std::vector<std::size_t>& pair_groups() const { return pair_group_; }

  bool operator==(const RopeGroupSpec& other) const;

 private:
  std::vector<RopeGroup> groups_;
  std::size_t total_dim_ = 0;
  std::vector<double> freqs_;
  std::vector<std::size_t> pair_group_;
};

// One coordinate per rope group, in group order; the last is usually the
// temporal bin index.
struct PositionVector {
  std::vector<double> coords;
};

// Angles for each pair (length total_dim / 2).
std::vector<double> rope_angles(const RopeGroupSpec& spec, const PositionVector& pos);

// Rotates every row v[..., d] by the position of that row. positions holds
// either one entry per row (numel / d) or a single entry shared by all rows.
Tensor apply_mrope(const Tensor& v, const RopeGroupSpec& spec,
                   std::span<const PositionVector> positions);

// <R(pos_i) q, R(pos_j) k>, used to check the relative-position property.
double relative_score(const Tensor& q, const Tensor& k, const RopeGroupSpec& spec,
                      const PositionVector& pos_i, const PositionVector& pos_j);

// Discrete codes for string metadata and a min-max normalizer for
// recording dates (ISO yyyy-mm-dd). Codes are vocabulary indices.
class MetadataCodec {
 public:
  MetadataCodec(std::vector<std::string> tasks, std::vector<std::string> subjects,
                std::string first_date, std::string last_date);
  // CO/RT tasks, subjects c/j/m/t in alphabetical order.
  static MetadataCodec benchmark_default(std::string first_date, std::string last_date);

  double encode_task(std::string_view task) const;
  std::string decode_task(double code) const;
  double encode_subject(std::string_view subject) const;
  std::string decode_subject(double code) const;
  double encode_recording_time(std::string_view iso_date) const;
  std::string decode_recording_time(double normalized) const;

  // (task, subject, normalized recording time, t).
  PositionVector encode(std::string_view task, std::string_view subject, std::string_view iso_date,
                        double t) const;

 private:
  std::vector<std::string> tasks_;
  std::vector<std::string> subjects_;
  long first_day_ = 0;
  long last_day_ = 0;
};

// Days since 1970-01-01 for an ISO date; ConfigError when malformed.
long parse_iso_day(std::string_view iso_date);
std::string format_iso_day(long day);

enum class PeKind { kMrope, kRope, kSinusoidal, kLearnable };

PeKind parse_pe_kind(std::string_view name);
std::string to_string(PeKind kind);
// Rotary kinds act on queries and keys; the others are added to embeddings.
inline bool is_rotary(PeKind kind) { return kind == PeKind::kMrope || kind == PeKind::kRope; }

// pe[2i] = sin(t / 10000^(2i/d)), pe[2i+1] = cos(t / 10000^(2i/d)).
Tensor sinusoidal_pe(double t, std::size_t d);

// MLP over [spatial coords * alpha, t] producing an additive embedding.
// The output layer starts at zero.
class LearnablePe {
 public:
  LearnablePe() = default;
  LearnablePe(std::size_t num_coords, std::size_t d_model, nn::Rng& rng, double alpha = 1.0);

  // positions: one per row; result [rows, d_model].
  Tensor operator()(std::span<const PositionVector> positions) const;
  void collect(const std::string& prefix, nn::NamedParams& out) const;

  std::size_t num_coords() const { return num_coords_; }

 private:
  nn::Mlp mlp_;
  std::size_t num_coords_ = 0;
  double alpha_ = 1.0;
};

}  // namespace rpnt::posenc
