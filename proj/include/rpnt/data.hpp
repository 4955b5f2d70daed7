#pragma once

// Synthetic multi-site reaching sessions, spike binning, width resampling,
// the multi-site standardization pipeline and the on-disk dataset format.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "rpnt/layers.hpp"
#include "rpnt/tensor.hpp"

namespace rpnt::data {

using ad::Tensor;

enum class ReachModel { kCenterOut, kRandomTarget };

ReachModel parse_reach_model(std::string_view name);
std::string to_string(ReachModel model);

struct SiteSpec {
  std::string name;
  double x = 0.0;
  double y = 0.0;
  std::size_t neurons = 20;
  std::size_t trials = 400;
};

// Integer (x, y) insertion coordinates of a 17-site probe layout.
const std::vector<std::array<double, 2>>& grid_coordinates();

struct SyntheticConfig {
  std::vector<SiteSpec> sites;
  double bin_ms = 20.0;
  double window_ms = 1000.0;
  // Rate in Hz is softplus(b + a * <u, v>) * g with v in cm/s.
  double baseline_lo = 5.0;
  double baseline_hi = 20.0;
  double gain_lo = 0.5;
  double gain_hi = 1.5;
  // Per-trial standard deviation of each neuron's log-gain random walk.
  double drift_sigma = 0.02;
  ReachModel reach = ReachModel::kCenterOut;
  std::size_t n_targets = 8;
  double reach_cm = 10.0;
  double reach_ms = 500.0;
  std::size_t onset_min_bin = 5;
  std::size_t onset_max_bin = 20;
  std::uint64_t seed = 3407;

  std::size_t bins() const;
  double bin_seconds() const { return bin_ms / 1000.0; }
  void validate() const;

  // n sites on the grid layout, each with the same neuron and trial counts.
  static SyntheticConfig grid(std::size_t n_sites, std::size_t neurons, std::size_t trials,
                              std::uint64_t seed);
};

struct NeuronTuning {
  double baseline = 0.0;
  double gain = 0.0;
  double preferred = 0.0;  // radians
};

struct TrialInfo {
  std::size_t target = 0;  // center-out target index (random_target: 0)
  double direction = 0.0;  // radians
  std::size_t onset_bin = 0;
};

struct SiteRecording {
  SiteSpec spec;
  std::vector<NeuronTuning> tuning;
  std::vector<TrialInfo> trials;
  Tensor spikes;              // [C, T, N] counts
  Tensor velocity;            // [C, T, 2] cm/s
  std::vector<double> gains;  // [C, N] drift multipliers
};

struct Session {
  SyntheticConfig config;
  std::vector<SiteRecording> sites;
};

// Minimum-jerk reach of reach_cm over reach_ms starting at onset_bin,
// sampled at bin centers -> T x 2 (row-major).
std::vector<double> reach_velocity(const SyntheticConfig& cfg, double direction, std::size_t onset_bin);

// Expected rate in Hz of one neuron for velocity (vx, vy) and drift gain g.
double firing_rate(const NeuronTuning& n, double vx, double vy, double g);

// Deterministic per seed; trial c of site i draws from its own stream.
Session generate_session(const SyntheticConfig& cfg);

// spike_times_ms[n] lists neuron n's spike times. Bins are half-open
// [k*bin, (k+1)*bin). Times outside [0, window) raise DomainError naming
// the neuron and spike index. Result [T, N].
Tensor bin_spikes(const std::vector<std::vector<double>>& spike_times_ms, double bin_ms = 20.0,
                  double window_ms = 1000.0);

// ---- sampling primitives (portable: built on raw mt19937_64 output) ----
// Uniform integer in [0, n) by rejection.
std::size_t uniform_index(nn::Rng& rng, std::size_t n);
// Partial Fisher-Yates over 0..n-1, first k entries.
std::vector<std::size_t> sample_without_replacement(nn::Rng& rng, std::size_t n, std::size_t k);
std::vector<std::size_t> sample_with_replacement(nn::Rng& rng, std::size_t n, std::size_t k);

struct Resampled {
  Tensor data;                      // [T, W]
  std::vector<std::size_t> source;  // source column for each output column
};

// Fewer columns than W: the recording is repeated in order (column j takes
// source j mod N_i). More: W distinct columns drawn without replacement.
// Equal: identity.
Resampled resample_to_width(const Tensor& x, std::size_t width, nn::Rng& rng);

// ---- standardization ----

struct RawSite {
  Tensor spikes;    // [C_i, T, N_i]
  Tensor velocity;  // [C_i, T, 2]
};

struct StandardizeConfig {
  std::size_t neurons = 50;       // N
  std::size_t sample_times = 1;   // M
  std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
  std::array<std::size_t, 3> split_targets{0, 0, 0};  // trials per split (0 keeps C_i^(s) * M)
  std::uint64_t seed = 3407;
  // Draw the neuron sample once per site and reuse it in every split, so a
  // column means the same neuron in train and test (needed for decoding).
  // Off: each split samples its own neurons.
  bool shared_neurons = false;
};

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

struct SiteTrace {
  std::vector<std::size_t> split_trials;  // original trial ids in this split
  bool neurons_with_replacement = false;
  std::vector<std::size_t> neuron_index;  // nu, length N*M
  bool trials_with_replacement = false;
  std::vector<std::size_t> trial_index;   // tau, into the C*M multi-sampled trials
  std::vector<std::size_t> source_trial;  // original trial id for every output row
};

struct SplitData {
  Tensor spikes;    // [C, S, T, N]
  Tensor velocity;  // [C, S, T, 2]
  std::vector<SiteTrace> trace;  // one per site
};

// Contiguous split by trial order, then per split and site: neuron
// multi-sampling to N*M columns, regrouping into C*M trials of width N,
// trial sampling to the split target, and stacking to [C, S, T, N].
std::array<SplitData, 3> standardize_sites(const std::vector<RawSite>& sites, const StandardizeConfig& cfg);

// Contiguous trial ranges [begin, end) per split for C trials.
std::array<std::pair<std::size_t, std::size_t>, 3> split_ranges(std::size_t trials,
                                                                const std::array<double, 3>& fractions);

// ---- dataset directory ----

struct SiteInfo {
  std::string name;
  std::vector<double> coords;
};

struct Dataset {
  std::vector<SiteInfo> sites;
  std::size_t bins = 50;
  std::size_t neurons = 0;
  double bin_ms = 20.0;
  std::uint64_t seed = 0;
  std::array<double, 3> split_fractions{0.8, 0.1, 0.1};
  std::map<std::string, SplitData> splits;

  const SplitData& split(const std::string& name) const;
};

// manifest.json plus <split>_spikes.f64 and <split>_velocity.f64 holding
// little-endian float64 arrays [C, S, T, N] and [C, S, T, 2].
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);

// Standardizes the listed sites of a generated session; site coordinates
// are their (x, y) insertion positions.
Dataset build_dataset(const Session& session, std::span<const std::size_t> site_ids, const StandardizeConfig& cfg);
Dataset load_dataset(const std::filesystem::path& dir);

void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected);

// ---- oracle ----

// Posterior-mean velocity for the given trials using the generator's true
// tuning, drift gains and reach prior. Center-out enumerates every
// (target, onset) pair; random_target uses a 72-direction grid.
Tensor bayes_velocity(const SiteRecording& site, const SyntheticConfig& cfg,
                      std::span<const std::size_t> trials);

}  // namespace rpnt::data
