#include "rpnt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "rpnt/errors.hpp"

namespace rpnt::data {

using nlohmann::json;

ReachModel parse_reach_model(std::string_view name) {
  if (name == "center_out") return ReachModel::kCenterOut;
  if (name == "random_target") return ReachModel::kRandomTarget;
  throw ConfigError("unknown reach model '" + std::string(name) + "' (expected center_out or random_target)");
}

std::string to_string(ReachModel model) {
  return model == ReachModel::kCenterOut ? "center_out" : "random_target";
}

const std::vector<std::array<double, 2>>& grid_coordinates() {
  static const std::vector<std::array<double, 2>> coords{
      {-1, 1}, {3, 2},  {-3, 2}, {-2, 4}, {-1, 4}, {3, -4}, {5, 2}, {1, 5},  {2, 4},
      {-1, 5}, {2, -4}, {-1, 3}, {3, -2}, {2, 2},  {2, 3},  {3, -3}, {0, 4}};
  return coords;
}

std::size_t SyntheticConfig::bins() const {
  return static_cast<std::size_t>(std::llround(window_ms / bin_ms));
}

void SyntheticConfig::validate() const {
  if (sites.empty()) throw ConfigError("synthetic session needs at least one site");
  if (!(bin_ms > 0.0) || !(window_ms >= bin_ms)) throw ConfigError("bin and window lengths must be positive");
  if (std::abs(window_ms / bin_ms - static_cast<double>(bins())) > 1e-9) {
    throw ConfigError("window must be a whole number of bins");
  }
  for (const auto& s : sites) {
    if (s.neurons == 0 || s.trials == 0) throw ConfigError("site " + s.name + " needs neurons and trials");
  }
  if (baseline_lo > baseline_hi || gain_lo > gain_hi) throw ConfigError("tuning ranges are reversed");
  if (drift_sigma < 0.0) throw ConfigError("drift sigma must be nonnegative");
  if (reach == ReachModel::kCenterOut && n_targets == 0) throw ConfigError("center-out needs targets");
  if (onset_min_bin > onset_max_bin || onset_max_bin >= bins()) {
    throw ConfigError("reach onset range must lie inside the window");
  }
  if (!(reach_ms > 0.0)) throw ConfigError("reach duration must be positive");
}

SyntheticConfig SyntheticConfig::grid(std::size_t n_sites, std::size_t neurons, std::size_t trials,
                                      std::uint64_t seed) {
  const auto& g = grid_coordinates();
  if (n_sites == 0 || n_sites > g.size()) {
    throw ConfigError("grid layout holds 1.." + std::to_string(g.size()) + " sites");
  }
  SyntheticConfig c;
  c.seed = seed;
  for (std::size_t i = 0; i < n_sites; ++i) {
    c.sites.push_back({"site" + std::to_string(i), g[i][0], g[i][1], neurons, trials});
  }
  return c;
}

std::vector<double> reach_velocity(const SyntheticConfig& cfg, double direction, std::size_t onset_bin) {
  std::size_t T = cfg.bins();
  std::vector<double> v(T * 2, 0.0);
  double dur = cfg.reach_ms / 1000.0;
  double start = static_cast<double>(onset_bin) * cfg.bin_seconds();
  double ux = std::cos(direction), uy = std::sin(direction);
  for (std::size_t t = 0; t < T; ++t) {
    double s = ((static_cast<double>(t) + 0.5) * cfg.bin_seconds() - start) / dur;
    if (s <= 0.0 || s >= 1.0) continue;
    double speed = cfg.reach_cm / dur * 30.0 * s * s * (1.0 - s) * (1.0 - s);
    v[2 * t] = speed * ux;
    v[2 * t + 1] = speed * uy;
  }
  return v;
}

double firing_rate(const NeuronTuning& n, double vx, double vy, double g) {
  double u = n.baseline + n.gain * (std::cos(n.preferred) * vx + std::sin(n.preferred) * vy);
  double sp = u > 40.0 ? u : std::log1p(std::exp(u));
  return sp * g;
}

Session generate_session(const SyntheticConfig& cfg) {
  cfg.validate();
  Session session{cfg, {}};
  std::size_t T = cfg.bins();
  double dt = cfg.bin_seconds();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < cfg.sites.size(); ++i) {
    const SiteSpec& spec = cfg.sites[i];
    std::uint64_t site_seed = nn::mix_seed(cfg.seed, i);
    nn::Rng rng(site_seed);
    SiteRecording rec;
    rec.spec = spec;
    std::size_t N = spec.neurons, C = spec.trials;
    rec.tuning.resize(N);
    for (auto& n : rec.tuning) {
      n.baseline = cfg.baseline_lo + (cfg.baseline_hi - cfg.baseline_lo) * unit(rng);
      n.gain = cfg.gain_lo + (cfg.gain_hi - cfg.gain_lo) * unit(rng);
      n.preferred = 2.0 * std::numbers::pi * unit(rng);
    }
    rec.gains.resize(C * N);
    std::normal_distribution<double> step(0.0, 1.0);
    std::vector<double> logg(N, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t n = 0; n < N; ++n) {
        if (c > 0) logg[n] += cfg.drift_sigma * step(rng);
        rec.gains[c * N + n] = std::exp(logg[n]);
      }
    }
    std::vector<double> spikes(C * T * N), vel(C * T * 2);
    rec.trials.resize(C);
    for (std::size_t c = 0; c < C; ++c) {
      nn::Rng trng(nn::mix_seed(site_seed, 1000003ULL + c));
      TrialInfo& tr = rec.trials[c];
      if (cfg.reach == ReachModel::kCenterOut) {
        tr.target = uniform_index(trng, cfg.n_targets);
        tr.direction = 2.0 * std::numbers::pi * static_cast<double>(tr.target) / static_cast<double>(cfg.n_targets);
      } else {
        tr.direction = 2.0 * std::numbers::pi * unit(trng);
      }
      tr.onset_bin = cfg.onset_min_bin + uniform_index(trng, cfg.onset_max_bin - cfg.onset_min_bin + 1);
      auto v = reach_velocity(cfg, tr.direction, tr.onset_bin);
      std::copy(v.begin(), v.end(), vel.begin() + static_cast<std::ptrdiff_t>(c * T * 2));
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t n = 0; n < N; ++n) {
          double mean = firing_rate(rec.tuning[n], v[2 * t], v[2 * t + 1], rec.gains[c * N + n]) * dt;
          std::poisson_distribution<long> pois(mean);
          spikes[(c * T + t) * N + n] = static_cast<double>(pois(trng));
        }
      }
    }
    rec.spikes = Tensor({C, T, N}, std::move(spikes));
    rec.velocity = Tensor({C, T, 2}, std::move(vel));
    session.sites.push_back(std::move(rec));
  }
  return session;
}

Tensor bin_spikes(const std::vector<std::vector<double>>& spike_times_ms, double bin_ms, double window_ms) {
  if (!(bin_ms > 0.0) || !(window_ms > 0.0)) throw ConfigError("bin and window lengths must be positive");
  std::size_t T = static_cast<std::size_t>(std::llround(window_ms / bin_ms));
  std::size_t N = spike_times_ms.size();
  std::vector<double> counts(T * N, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t k = 0; k < spike_times_ms[n].size(); ++k) {
      double t = spike_times_ms[n][k];
      if (!(t >= 0.0 && t < window_ms)) {
        throw DomainError("spike " + std::to_string(k) + " of neuron " + std::to_string(n) + " at " +
                          std::to_string(t) + " ms lies outside the [0, " + std::to_string(window_ms) +
                          ") ms window");
      }
      std::size_t b = std::min(T - 1, static_cast<std::size_t>(std::floor(t / bin_ms)));
      counts[b * N + n] += 1.0;
    }
  }
  return Tensor({T, N}, std::move(counts));
}

std::size_t uniform_index(nn::Rng& rng, std::size_t n) {
  if (n == 0) throw ConfigError("uniform_index over an empty range");
  std::uint64_t range = n;
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return static_cast<std::size_t>(r % range);
}

std::vector<std::size_t> sample_without_replacement(nn::Rng& rng, std::size_t n, std::size_t k) {
  if (k > n) throw ConfigError("cannot draw " + std::to_string(k) + " of " + std::to_string(n) + " without replacement");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + uniform_index(rng, n - i)]);
  pool.resize(k);
  return pool;
}

std::vector<std::size_t> sample_with_replacement(nn::Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out(k);
  for (auto& v : out) v = uniform_index(rng, n);
  return out;
}

Resampled resample_to_width(const Tensor& x, std::size_t width, nn::Rng& rng) {
  if (x.dim() != 2 || x.size(1) == 0) throw DimensionError("resample_to_width expects [T, N_i] with N_i >= 1");
  std::size_t T = x.size(0), Ni = x.size(1);
  Resampled out;
  if (Ni > width) {
    out.source = sample_without_replacement(rng, Ni, width);
  } else {
    out.source.resize(width);
    for (std::size_t j = 0; j < width; ++j) out.source[j] = j % Ni;
  }
  std::vector<double> d(T * width);
  auto src = x.data();
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < width; ++j) d[t * width + j] = src[t * Ni + out.source[j]];
  out.data = Tensor({T, width}, std::move(d));
  return out;
}

std::array<std::pair<std::size_t, std::size_t>, 3> split_ranges(std::size_t trials,
                                                                const std::array<double, 3>& f) {
  double total = f[0] + f[1] + f[2];
  if (f[0] < 0 || f[1] < 0 || f[2] < 0 || total > 1.0 + 1e-9) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  std::array<std::pair<std::size_t, std::size_t>, 3> r;
  double cum = 0.0;
  std::size_t begin = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    cum += f[s];
    std::size_t end = std::min<std::size_t>(trials, static_cast<std::size_t>(std::llround(cum * static_cast<double>(trials))));
    r[s] = {begin, end};
    begin = end;
  }
  return r;
}

std::array<SplitData, 3> standardize_sites(const std::vector<RawSite>& sites, const StandardizeConfig& cfg) {
  if (sites.empty()) throw ConfigError("standardize_sites needs at least one site");
  if (cfg.neurons == 0 || cfg.sample_times == 0) throw ConfigError("target neurons and sample times must be positive");
  std::size_t T = sites[0].spikes.dim() == 3 ? sites[0].spikes.size(1) : 0;
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const auto& s = sites[i];
    if (s.spikes.dim() != 3 || s.spikes.size(1) != T || s.spikes.size(0) == 0 || s.spikes.size(2) == 0) {
      throw ConfigError("site " + std::to_string(i) + " spikes " + ad::shape_str(s.spikes.shape()) +
                        " do not match [C_i, " + std::to_string(T) + ", N_i] with C_i, N_i >= 1");
    }
    if (s.velocity.shape() != ad::Shape{s.spikes.size(0), T, 2}) {
      throw ConfigError("site " + std::to_string(i) + " velocity must be [C_i, T, 2]");
    }
  }
  std::size_t N = cfg.neurons, M = cfg.sample_times, S = sites.size();
  std::array<SplitData, 3> out;
  for (std::size_t sp = 0; sp < 3; ++sp) {
    // Every site must land on the same trial count.
    std::size_t target = cfg.split_targets[sp];
    std::vector<std::pair<std::size_t, std::size_t>> ranges(S);
    for (std::size_t i = 0; i < S; ++i) {
      ranges[i] = split_ranges(sites[i].spikes.size(0), cfg.split_fractions)[sp];
      std::size_t ci = ranges[i].second - ranges[i].first;
      if (ci == 0) {
        throw ConfigError("site " + std::to_string(i) + " has no trials in the " + kSplitNames[sp] + " split");
      }
      if (cfg.split_targets[sp] == 0) {
        if (target == 0) target = ci * M;
        else if (target != ci * M) {
          throw ConfigError(std::string("sites disagree on the ") + kSplitNames[sp] +
                            " trial count; set an explicit split target");
        }
      }
    }
    std::vector<double> spk(target * S * T * N), vel(target * S * T * 2);
    out[sp].trace.resize(S);
    for (std::size_t i = 0; i < S; ++i) {
      nn::Rng rng(nn::mix_seed(cfg.seed, sp * 1000003ULL + i));
      SiteTrace& tr = out[sp].trace[i];
      auto [begin, end] = ranges[i];
      std::size_t Ci = end - begin, Ni = sites[i].spikes.size(2);
      for (std::size_t c = begin; c < end; ++c) tr.split_trials.push_back(c);
      std::size_t n_total = N * M;
      tr.neurons_with_replacement = Ni < n_total;
      nn::Rng site_rng(nn::mix_seed(cfg.seed, 0x5A11ULL + i));
      nn::Rng& neuron_rng = cfg.shared_neurons ? site_rng : rng;
      tr.neuron_index = tr.neurons_with_replacement ? sample_with_replacement(neuron_rng, Ni, n_total)
                                                    : sample_without_replacement(neuron_rng, Ni, n_total);
      std::size_t available = Ci * M;
      tr.trials_with_replacement = available < target;
      tr.trial_index = tr.trials_with_replacement ? sample_with_replacement(rng, available, target)
                                                  : sample_without_replacement(rng, available, target);
      auto src = sites[i].spikes.data();
      auto vsrc = sites[i].velocity.data();
      for (std::size_t r = 0; r < target; ++r) {
        // Multi-sampled trial z = c*M + m holds neurons nu[m*N .. m*N+N-1] of trial c.
        std::size_t z = tr.trial_index[r];
        std::size_t c = begin + z / M, m = z % M;
        tr.source_trial.push_back(c);
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t n = 0; n < N; ++n) {
            spk[((r * S + i) * T + t) * N + n] = src[(c * T + t) * Ni + tr.neuron_index[m * N + n]];
          }
          vel[((r * S + i) * T + t) * 2] = vsrc[(c * T + t) * 2];
          vel[((r * S + i) * T + t) * 2 + 1] = vsrc[(c * T + t) * 2 + 1];
        }
      }
    }
    out[sp].spikes = Tensor({target, S, T, N}, std::move(spk));
    out[sp].velocity = Tensor({target, S, T, 2}, std::move(vel));
  }
  return out;
}

// ---------------------------------------------------------------------------

const SplitData& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw UsageError("dataset has no '" + name + "' split");
  return it->second;
}

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto u = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw IoError("cannot read " + path.string());
  auto bytes = static_cast<std::size_t>(is.tellg());
  if (bytes != expected * 8) {
    throw IoError(path.string() + " holds " + std::to_string(bytes / 8) + " values, manifest implies " +
                  std::to_string(expected));
  }
  is.seekg(0);
  std::vector<unsigned char> buf(bytes);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint64_t u = 0;
    for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(u);
  }
  return out;
}

Dataset build_dataset(const Session& session, std::span<const std::size_t> site_ids, const StandardizeConfig& cfg) {
  if (site_ids.empty()) throw ConfigError("a dataset needs at least one site");
  std::vector<RawSite> raw;
  Dataset ds;
  for (std::size_t id : site_ids) {
    if (id >= session.sites.size()) {
      throw ConfigError("site index " + std::to_string(id) + " out of range for " +
                        std::to_string(session.sites.size()) + " generated sites");
    }
    const auto& rec = session.sites[id];
    raw.push_back({rec.spikes, rec.velocity});
    ds.sites.push_back({rec.spec.name, {rec.spec.x, rec.spec.y}});
  }
  auto splits = standardize_sites(raw, cfg);
  ds.bins = session.config.bins();
  ds.neurons = cfg.neurons;
  ds.bin_ms = session.config.bin_ms;
  ds.seed = cfg.seed;
  ds.split_fractions = cfg.split_fractions;
  for (std::size_t sp = 0; sp < 3; ++sp) ds.splits.emplace(kSplitNames[sp], std::move(splits[sp]));
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json sites = json::array();
  for (const auto& s : ds.sites) sites.push_back({{"name", s.name}, {"coords", s.coords}});
  json splits = json::object();
  for (const auto& [name, sd] : ds.splits) {
    std::size_t S = ds.sites.size();
    if (sd.spikes.shape() != ad::Shape{sd.spikes.size(0), S, ds.bins, ds.neurons}) {
      throw DimensionError("split " + name + " spikes " + ad::shape_str(sd.spikes.shape()) +
                           " disagree with the dataset header");
    }
    write_f64(dir / (name + "_spikes.f64"), sd.spikes.data());
    write_f64(dir / (name + "_velocity.f64"), sd.velocity.data());
    splits[name] = {{"trials", sd.spikes.size(0)},
                    {"spikes", name + "_spikes.f64"},
                    {"velocity", name + "_velocity.f64"}};
  }
  json manifest{{"format", "rpnt-dataset"},
                {"version", 1},
                {"sites", sites},
                {"bins", ds.bins},
                {"bin_ms", ds.bin_ms},
                {"neurons", ds.neurons},
                {"seed", ds.seed},
                {"split_fractions", ds.split_fractions},
                {"splits", splits}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  Dataset ds;
  try {
    json m = json::parse(is);
    if (m.at("format") != "rpnt-dataset") throw IoError("unrecognized dataset format in " + dir.string());
    for (const auto& s : m.at("sites")) {
      ds.sites.push_back({s.at("name").get<std::string>(), s.at("coords").get<std::vector<double>>()});
    }
    ds.bins = m.at("bins").get<std::size_t>();
    ds.bin_ms = m.at("bin_ms").get<double>();
    ds.neurons = m.at("neurons").get<std::size_t>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.split_fractions = m.at("split_fractions").get<std::array<double, 3>>();
    std::size_t S = ds.sites.size();
    for (const auto& [name, e] : m.at("splits").items()) {
      std::size_t C = e.at("trials").get<std::size_t>();
      SplitData sd;
      sd.spikes = Tensor({C, S, ds.bins, ds.neurons},
                         read_f64(dir / e.at("spikes").get<std::string>(), C * S * ds.bins * ds.neurons));
      sd.velocity = Tensor({C, S, ds.bins, 2}, read_f64(dir / e.at("velocity").get<std::string>(), C * S * ds.bins * 2));
      ds.splits.emplace(name, std::move(sd));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------

Tensor bayes_velocity(const SiteRecording& site, const SyntheticConfig& cfg, std::span<const std::size_t> trials) {
  std::size_t T = cfg.bins(), N = site.spec.neurons;
  double dt = cfg.bin_seconds();
  std::vector<std::vector<double>> hyp;
  if (cfg.reach == ReachModel::kCenterOut) {
    for (std::size_t k = 0; k < cfg.n_targets; ++k) {
      double dir = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(cfg.n_targets);
      for (std::size_t o = cfg.onset_min_bin; o <= cfg.onset_max_bin; ++o) hyp.push_back(reach_velocity(cfg, dir, o));
    }
  } else {
    for (std::size_t k = 0; k < 72; ++k) {
      double dir = 2.0 * std::numbers::pi * static_cast<double>(k) / 72.0;
      for (std::size_t o = cfg.onset_min_bin; o <= cfg.onset_max_bin; ++o) hyp.push_back(reach_velocity(cfg, dir, o));
    }
  }
  auto x = site.spikes.data();
  std::vector<double> out(trials.size() * T * 2, 0.0);
  std::vector<double> loglik(hyp.size());
  for (std::size_t r = 0; r < trials.size(); ++r) {
    std::size_t c = trials[r];
    if (c >= site.trials.size()) throw ConfigError("oracle trial index out of range");
    const double* g = site.gains.data() + c * N;
    for (std::size_t h = 0; h < hyp.size(); ++h) {
      double ll = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t n = 0; n < N; ++n) {
          double mu = firing_rate(site.tuning[n], hyp[h][2 * t], hyp[h][2 * t + 1], g[n]) * dt;
          ll += x[(c * T + t) * N + n] * std::log(mu) - mu;
        }
      }
      loglik[h] = ll;
    }
    double mx = *std::max_element(loglik.begin(), loglik.end());
    double z = 0.0;
    for (auto& l : loglik) z += (l = std::exp(l - mx));
    for (std::size_t h = 0; h < hyp.size(); ++h) {
      double w = loglik[h] / z;
      for (std::size_t i = 0; i < T * 2; ++i) out[r * T * 2 + i] += w * hyp[h][i];
    }
  }
  return Tensor({trials.size(), T, 2}, std::move(out));
}

}  // namespace rpnt::data
