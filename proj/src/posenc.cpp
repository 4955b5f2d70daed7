#include "rpnt/posenc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "rpnt/errors.hpp"

namespace rpnt::posenc {

RopeGroupSpec::RopeGroupSpec(std::vector<RopeGroup> groups) : groups_(std::move(groups)) {
  if (groups_.empty()) throw ConfigError("rope spec needs at least one group");
  for (const auto& g : groups_) {
    if (g.dim == 0 || g.dim % 2 != 0) {
      throw ConfigError("rope group '" + g.name + "' needs an even positive dimension, got " +
                        std::to_string(g.dim));
    }
    if (!(g.base > 0.0)) throw ConfigError("rope group '" + g.name + "' needs a positive base");
    for (std::size_t i = 0; i < g.dim / 2; ++i) {
      freqs_.push_back(std::pow(g.base, -2.0 * static_cast<double>(i) / static_cast<double>(g.dim)));
      pair_group_.push_back(static_cast<std::size_t>(&g - groups_.data()));
    }
    total_dim_ += g.dim;
  }
}

namespace {

RopeGroupSpec equal_split(std::size_t dim, const std::vector<std::pair<const char*, double>>& groups) {
  std::size_t m = groups.size();
  if (dim == 0 || dim % (2 * m) != 0) {
    throw ConfigError("rotary dimension " + std::to_string(dim) + " is not divisible by 2*" +
                      std::to_string(m) + " rope groups");
  }
  std::vector<RopeGroup> out;
  for (const auto& [name, base] : groups) out.push_back({name, dim / m, base});
  return RopeGroupSpec(std::move(out));
}

}  // namespace

RopeGroupSpec RopeGroupSpec::preset_3d(std::size_t dim) {
  return equal_split(dim, {{"x", 5000.0}, {"y", 5000.0}, {"t", 10000.0}});
}

RopeGroupSpec RopeGroupSpec::preset_4d(std::size_t dim) {
  return equal_split(dim,
                     {{"task", 10.0}, {"subject", 100.0}, {"recording_time", 1000.0}, {"t", 10000.0}});
}

RopeGroupSpec RopeGroupSpec::standard(std::size_t dim, double base) {
  return equal_split(dim, {{"t", base}});
}

bool RopeGroupSpec::operator==(const RopeGroupSpec& other) const {
  if (groups_.size() != other.groups_.size()) return false;
  for (std::size_t i = 0; i < groups_.size(); ++i) {
    const auto& a = groups_[i];
    const auto& b = other.groups_[i];
    if (a.name != b.name || a.dim != b.dim || a.base != b.base) return false;
  }
  return true;
}

std::vector<double> rope_angles(const RopeGroupSpec& spec, const PositionVector& pos) {
  if (pos.coords.size() != spec.num_groups()) {
    throw ConfigError("position has " + std::to_string(pos.coords.size()) + " coordinates, rope spec has " +
                      std::to_string(spec.num_groups()) + " groups");
  }
  const auto& f = spec.frequencies();
  const auto& grp = spec.pair_groups();
  std::vector<double> angles(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) angles[i] = pos.coords[grp[i]] * f[i];
  return angles;
}

Tensor apply_mrope(const Tensor& v, const RopeGroupSpec& spec, std::span<const PositionVector> positions) {
  std::size_t d = spec.total_dim();
  if (v.dim() == 0 || v.shape().back() != d) {
    throw ConfigError("apply_mrope: last extent of " + ad::shape_str(v.shape()) +
                      " must equal rope dimension " + std::to_string(d));
  }
  std::size_t rows = v.numel() / d;
  if (positions.size() != rows && positions.size() != 1) {
    throw ConfigError("apply_mrope: " + std::to_string(positions.size()) + " positions for " +
                      std::to_string(rows) + " rows");
  }
  std::vector<double> angles;
  angles.reserve(rows * d / 2);
  if (positions.size() == 1) {
    auto a = rope_angles(spec, positions[0]);
    for (std::size_t r = 0; r < rows; ++r) angles.insert(angles.end(), a.begin(), a.end());
  } else {
    for (const auto& p : positions) {
      auto a = rope_angles(spec, p);
      angles.insert(angles.end(), a.begin(), a.end());
    }
  }
  return ad::rotate_pairs(v, angles);
}

double relative_score(const Tensor& q, const Tensor& k, const RopeGroupSpec& spec,
                      const PositionVector& pos_i, const PositionVector& pos_j) {
  ad::NoGradGuard no_grad;
  Tensor rq = apply_mrope(q, spec, std::span(&pos_i, 1));
  Tensor rk = apply_mrope(k, spec, std::span(&pos_j, 1));
  if (rq.numel() != rk.numel()) throw DimensionError("relative_score: q and k differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < rq.numel(); ++i) s += rq.data()[i] * rk.data()[i];
  return s;
}

// ---------------------------------------------------------------------------
// Metadata

long parse_iso_day(std::string_view iso_date) {
  int y = 0;
  unsigned m = 0, d = 0;
  std::string s(iso_date);
  char tail = 0;
  if (std::sscanf(s.c_str(), "%d-%u-%u%c", &y, &m, &d, &tail) != 3) {
    throw ConfigError("expected an ISO date yyyy-mm-dd, got '" + s + "'");
  }
  std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw ConfigError("invalid calendar date '" + s + "'");
  return std::chrono::sys_days{ymd}.time_since_epoch().count();
}

std::string format_iso_day(long day) {
  std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{day}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

MetadataCodec::MetadataCodec(std::vector<std::string> tasks, std::vector<std::string> subjects,
                             std::string first_date, std::string last_date)
    : tasks_(std::move(tasks)),
      subjects_(std::move(subjects)),
      first_day_(parse_iso_day(first_date)),
      last_day_(parse_iso_day(last_date)) {
  auto unique = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return std::adjacent_find(v.begin(), v.end()) == v.end();
  };
  if (tasks_.empty() || subjects_.empty() || !unique(tasks_) || !unique(subjects_)) {
    throw ConfigError("metadata vocabularies must be non-empty and free of duplicates");
  }
  if (last_day_ < first_day_) throw ConfigError("recording date range is reversed");
}

MetadataCodec MetadataCodec::benchmark_default(std::string first_date, std::string last_date) {
  return MetadataCodec({"CO", "RT"}, {"c", "j", "m", "t"}, std::move(first_date), std::move(last_date));
}

namespace {

double encode_in(const std::vector<std::string>& vocab, std::string_view s, const char* what) {
  auto it = std::find(vocab.begin(), vocab.end(), s);
  if (it == vocab.end()) throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "'");
  return static_cast<double>(it - vocab.begin());
}

std::string decode_in(const std::vector<std::string>& vocab, double code, const char* what) {
  double r = std::round(code);
  if (r < 0.0 || r >= static_cast<double>(vocab.size()) || std::abs(code - r) > 1e-9) {
    throw ConfigError(std::string("no ") + what + " for code " + std::to_string(code));
  }
  return vocab[static_cast<std::size_t>(r)];
}

}  // namespace

double MetadataCodec::encode_task(std::string_view task) const { return encode_in(tasks_, task, "task"); }
std::string MetadataCodec::decode_task(double code) const { return decode_in(tasks_, code, "task"); }
double MetadataCodec::encode_subject(std::string_view subject) const {
  return encode_in(subjects_, subject, "subject");
}
std::string MetadataCodec::decode_subject(double code) const { return decode_in(subjects_, code, "subject"); }

double MetadataCodec::encode_recording_time(std::string_view iso_date) const {
  long day = parse_iso_day(iso_date);
  if (day < first_day_ || day > last_day_) {
    throw ConfigError("recording date " + std::string(iso_date) + " outside the normalizer range");
  }
  if (last_day_ == first_day_) return 0.0;
  return static_cast<double>(day - first_day_) / static_cast<double>(last_day_ - first_day_);
}

std::string MetadataCodec::decode_recording_time(double normalized) const {
  if (normalized < 0.0 || normalized > 1.0) throw ConfigError("normalized recording time outside [0,1]");
  double span = static_cast<double>(last_day_ - first_day_);
  return format_iso_day(first_day_ + std::lround(normalized * span));
}

PositionVector MetadataCodec::encode(std::string_view task, std::string_view subject,
                                     std::string_view iso_date, double t) const {
  return {{encode_task(task), encode_subject(subject), encode_recording_time(iso_date), t}};
}

// ---------------------------------------------------------------------------
// Baselines

PeKind parse_pe_kind(std::string_view name) {
  if (name == "mrope") return PeKind::kMrope;
  if (name == "rope") return PeKind::kRope;
  if (name == "sinusoidal") return PeKind::kSinusoidal;
  if (name == "learnable") return PeKind::kLearnable;
  throw ConfigError("unknown positional encoding '" + std::string(name) +
                    "' (expected mrope, rope, sinusoidal or learnable)");
}

std::string to_string(PeKind kind) {
  switch (kind) {
    case PeKind::kMrope: return "mrope";
    case PeKind::kRope: return "rope";
    case PeKind::kSinusoidal: return "sinusoidal";
    case PeKind::kLearnable: return "learnable";
  }
  return "?";
}

Tensor sinusoidal_pe(double t, std::size_t d) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; 2 * i < d; ++i) {
    double f = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    pe[2 * i] = std::sin(t * f);
    if (2 * i + 1 < d) pe[2 * i + 1] = std::cos(t * f);
  }
  return Tensor({d}, std::move(pe));
}

LearnablePe::LearnablePe(std::size_t num_coords, std::size_t d_model, nn::Rng& rng, double alpha)
    : mlp_(num_coords, d_model, d_model, rng, true), num_coords_(num_coords), alpha_(alpha) {
  if (num_coords == 0) throw ConfigError("learnable PE needs at least one coordinate");
}

Tensor LearnablePe::operator()(std::span<const PositionVector> positions) const {
  std::vector<double> in;
  in.reserve(positions.size() * num_coords_);
  for (const auto& p : positions) {
    if (p.coords.size() != num_coords_) throw ConfigError("learnable PE: coordinate count mismatch");
    // Every coordinate but the temporal one is scaled by alpha.
    for (std::size_t c = 0; c < num_coords_; ++c) {
      in.push_back(c + 1 < num_coords_ ? p.coords[c] * alpha_ : p.coords[c]);
    }
  }
  return mlp_(Tensor({positions.size(), num_coords_}, std::move(in)));
}

void LearnablePe::collect(const std::string& prefix, nn::NamedParams& out) const {
  mlp_.collect(prefix, out);
}

}  // namespace rpnt::posenc
