// rpnt: command-line front end for data generation, pretraining,
// finetuning, sweeps, gradient checks and connectivity export.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rpnt/errors.hpp"
#include "rpnt/harness.hpp"

namespace {

using namespace rpnt;
using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitAcceptance = 3;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> pe, attention, masking, kernel, ffn, history;
};

struct Common {
  std::string config;
  std::string out;
  Overrides ov;
};

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  try {
    json j = json::parse(is);
    if (!j.is_object()) throw ConfigError("config " + path + " must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
}

json section(const json& cfg, const char* name) {
  return cfg.contains(name) ? cfg.at(name) : json::object();
}

fs::path out_dir(const Common& c) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("RPNT_OUT_DIR"); env && *env) return env;
  return "rpnt_out";
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

model::RpntConfig model_config(const json& cfg, const Overrides& ov) {
  json m = section(cfg, "model");
  if (!m.contains("preset") && !m.contains("d_model")) m["preset"] = "desk";
  if (ov.pe) m["pe"] = *ov.pe;
  if (ov.attention) m["attention"] = *ov.attention;
  if (ov.history) m["history"] = *ov.history;
  if (ov.ffn) {
    if (*ov.ffn != "on" && *ov.ffn != "off") throw ConfigError("--ffn takes on or off");
    m["ffn"] = *ov.ffn == "on";
  }
  if (ov.kernel) {
    auto x = ov.kernel->find('x');
    if (x == std::string::npos) throw ConfigError("--kernel takes RxC, e.g. 9x9");
    try {
      m["kernel"] = {std::stoul(ov.kernel->substr(0, x)), std::stoul(ov.kernel->substr(x + 1))};
    } catch (const std::exception&) {
      throw ConfigError("--kernel takes RxC, e.g. 9x9");
    }
  }
  return model::config_from_json(m);
}

harness::PretrainConfig pretrain_config(const json& cfg, const Overrides& ov) {
  auto p = harness::PretrainConfig::from_json(section(cfg, "pretrain"));
  if (ov.seed) p.seed = *ov.seed;
  if (ov.masking) p.masking = objectives::MaskStrategy::parse(*ov.masking);
  return p;
}

harness::FinetuneConfig finetune_config(const json& cfg, const Overrides& ov) {
  auto f = harness::FinetuneConfig::from_json(section(cfg, "finetune"));
  if (ov.seed) f.seed = *ov.seed;
  return f;
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void add_common(CLI::App* sub, Common& c, bool model_flags) {
  sub->add_option("--config", c.config, "JSON config with model/pretrain/finetune/data/sweep sections");
  sub->add_option("--out", c.out, "output directory (default $RPNT_OUT_DIR or ./rpnt_out)");
  sub->add_option("--seed", c.ov.seed, "seed for model init, masks and batching");
  if (!model_flags) return;
  sub->add_option("--pe", c.ov.pe, "positional encoding: mrope, rope, sinusoidal, learnable");
  sub->add_option("--attention", c.ov.attention, "attention: context or standard");
  sub->add_option("--masking", c.ov.masking, "masking: uniform, entrywise or fixed:PN,PT");
  sub->add_option("--kernel", c.ov.kernel, "context kernel extents, e.g. 9x9");
  sub->add_option("--ffn", c.ov.ffn, "feed-forward sublayers on|off");
  sub->add_option("--history", c.ov.history, "context history: full or past:K");
}

// ---- gen-data ----

struct GenArgs {
  Common c;
  std::optional<std::size_t> sites, heldout, neurons, trials;
  std::optional<std::string> reach;
  std::optional<double> drift;
};

int run_gen_data(const GenArgs& a) {
  json cfg = read_config(a.c.config);
  json d = section(cfg, "data");
  std::size_t sites = a.sites.value_or(d.value("sites", std::size_t{5}));
  std::size_t heldout = a.heldout.value_or(d.value("heldout", std::size_t{1}));
  std::size_t neurons = a.neurons.value_or(d.value("neurons", std::size_t{20}));
  std::size_t trials = a.trials.value_or(d.value("trials", std::size_t{400}));
  std::uint64_t seed = a.c.ov.seed.value_or(d.value("seed", std::uint64_t{3407}));
  if (heldout >= sites) throw ConfigError("need at least one pretraining site besides the held-out ones");
  auto syn = data::SyntheticConfig::grid(sites, neurons, trials, seed);
  syn.reach = data::parse_reach_model(a.reach.value_or(d.value("reach", std::string("center_out"))));
  syn.drift_sigma = a.drift.value_or(d.value("drift_sigma", syn.drift_sigma));
  syn.validate();
  auto session = data::generate_session(syn);

  data::StandardizeConfig sc;
  sc.neurons = d.value("width", neurons);
  sc.sample_times = d.value("sample_times", std::size_t{1});
  sc.seed = seed;
  sc.split_fractions = d.value("pretrain_split", std::array<double, 3>{0.8, 0.1, 0.1});
  std::vector<std::size_t> pre_ids, held_ids;
  for (std::size_t i = 0; i < sites; ++i) (i < sites - heldout ? pre_ids : held_ids).push_back(i);
  auto pre = data::build_dataset(session, pre_ids, sc);
  sc.split_fractions = d.value("heldout_split", std::array<double, 3>{0.2, 0.3, 0.5});
  sc.sample_times = 1;
  sc.shared_neurons = true;
  fs::path out = out_dir(a.c);
  data::save_dataset(pre, out / "pretrain");
  for (std::size_t h : held_ids) {
    std::vector<std::size_t> one{h};
    data::save_dataset(data::build_dataset(session, one, sc), out / ("heldout_" + session.sites[h].spec.name));
  }
  json sites_json = json::array();
  for (const auto& s : session.sites) sites_json.push_back({{"name", s.spec.name}, {"x", s.spec.x}, {"y", s.spec.y}});
  write_json(out / "generator.json", {{"seed", seed}, {"sites", sites_json}, {"neurons", neurons}, {"trials", trials},
                                      {"reach", data::to_string(syn.reach)}, {"drift_sigma", syn.drift_sigma},
                                      {"bin_ms", syn.bin_ms}, {"window_ms", syn.window_ms}});
  std::cout << "wrote " << (out / "pretrain").string() << " (" << pre_ids.size() << " sites) and " << held_ids.size()
            << " held-out dataset(s) under " << out.string() << "\n";
  return kExitOk;
}

// ---- pretrain ----

struct PretrainArgs {
  Common c;
  std::string data;
  std::optional<std::size_t> epochs;
};

int run_pretrain(const PretrainArgs& a) {
  json cfg = read_config(a.c.config);
  auto m = model_config(cfg, a.c.ov);
  auto p = pretrain_config(cfg, a.c.ov);
  if (a.epochs) p.epochs = *a.epochs;
  auto ds = data::load_dataset(a.data);
  fs::path out = out_dir(a.c);
  harness::MetricsSink sink(out / "metrics.jsonl");
  auto result = harness::pretrain(ds, m, p, out, sink);
  write_json(out / "pretrain_run.json", result.record.to_json());
  const auto& last = result.record.epochs.back();
  std::cout << "pretrained " << result.record.epochs.size() << " epochs in " << result.record.wall_seconds
            << " s; final val loss " << last.val_loss << "; checkpoint " << result.record.checkpoint << "\n";
  return kExitOk;
}

// ---- finetune ----

struct FinetuneArgs {
  Common c;
  std::string data, checkpoint, mode = "fs_sft";
  double train_ratio = 0.2;
  std::optional<std::size_t> epochs;
};

int run_finetune(const FinetuneArgs& a) {
  json cfg = read_config(a.c.config);
  auto mode = harness::parse_finetune_mode(a.mode);
  auto f = finetune_config(cfg, a.c.ov);
  if (a.epochs) f.epochs = *a.epochs;
  std::optional<model::Rpnt> pretrained;
  model::RpntConfig m;
  if (mode == harness::FinetuneMode::kScratch) {
    m = model_config(cfg, a.c.ov);
  } else {
    if (a.checkpoint.empty()) throw UsageError(a.mode + " needs --checkpoint");
    pretrained = model::load_checkpoint(a.checkpoint);
    m = pretrained->config();
  }
  auto ds = data::load_dataset(a.data);
  auto fd = harness::heldout_data(ds, a.train_ratio);
  if (mode == harness::FinetuneMode::kFsSft) fd.train.resize(1), fd.test.resize(1);
  fs::path out = out_dir(a.c);
  harness::MetricsSink sink(out / "metrics.jsonl");
  auto r = harness::finetune(pretrained ? &*pretrained : nullptr, m, mode, fd, f, sink);
  write_json(out / ("finetune_" + a.mode + "_run.json"), r.record.to_json());
  std::cout << a.mode << " test r2 " << r.test_r2.mean << " (x " << r.test_r2.per_dim[0] << ", y "
            << r.test_r2.per_dim[1] << ")\n";
  for (const auto& w : r.test_r2.warnings) std::cerr << "warning: " << w << "\n";
  return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
  Common c;
  std::string axis, grid, seeds, pretrain_data, heldout_data;
  std::optional<double> train_ratio;
};

int run_sweep(const SweepArgs& a) {
  json cfg = read_config(a.c.config);
  json s = section(cfg, "sweep");
  harness::SweepConfig sc;
  std::string axis = !a.axis.empty() ? a.axis : s.value("axis", std::string());
  if (axis.empty()) throw UsageError("sweep needs --axis");
  sc.axis = harness::parse_sweep_axis(axis);
  if (!a.grid.empty()) sc.grid = split_list(a.grid);
  else if (s.contains("grid")) sc.grid = s.at("grid").get<std::vector<std::string>>();
  if (!a.seeds.empty()) {
    sc.seeds.clear();
    for (const auto& v : split_list(a.seeds)) sc.seeds.push_back(std::stoull(v));
  } else if (s.contains("seeds")) {
    sc.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
  } else if (a.c.ov.seed) {
    sc.seeds = {*a.c.ov.seed};
  }
  sc.model = model_config(cfg, a.c.ov);
  sc.pretrain = pretrain_config(cfg, a.c.ov);
  sc.finetune = finetune_config(cfg, a.c.ov);
  sc.train_ratio = a.train_ratio.value_or(s.value("train_ratio", 0.2));
  auto pre = data::load_dataset(a.pretrain_data);
  auto held = data::load_dataset(a.heldout_data);
  fs::path out = out_dir(a.c);
  harness::MetricsSink sink(out / "metrics.jsonl");
  auto result = harness::run_sweep(pre, held, sc, sink);
  harness::write_sweep(result, out);
  std::size_t failed = 0;
  for (const auto& r : result.rows) failed += r.status != "ok";
  std::cout << "sweep " << axis << ": " << result.rows.size() << " runs, " << failed << " failed; tables in "
            << out.string() << "\n";
  return kExitOk;
}

// ---- gradcheck ----

struct GradArgs {
  Common c;
  std::size_t layers = 0, steps = 6;
  double h = 1e-5;
};

int run_gradcheck(const GradArgs& a) {
  json cfg = read_config(a.c.config);
  json m = section(cfg, "model");
  if (!m.contains("preset") && !m.contains("d_model")) m["preset"] = "tiny";
  auto mc = model::config_from_json(m);
  auto report = harness::gradcheck_model(mc, a.layers, a.steps, a.c.ov.seed.value_or(3407), a.h);
  for (const auto& r : report.params) {
    std::cout << r.name << " n=" << r.count << " max_rel_error=" << r.max_rel_error << " (index " << r.worst_index
              << ": analytic " << r.analytic << ", numeric " << r.numeric << ")\n";
  }
  constexpr double kThreshold = 1e-4;
  bool ok = report.max_rel_error <= kThreshold;
  std::cout << "worst " << report.worst << " " << report.max_rel_error << (ok ? " <= " : " > ") << kThreshold
            << (ok ? " PASS" : " FAIL") << "\n";
  return ok ? kExitOk : kExitAcceptance;
}

// ---- export-fc ----

struct FcArgs {
  Common c;
  std::string checkpoint, data, split = "test", times = "0,300,600";
};

int run_export_fc(const FcArgs& a) {
  auto m = model::load_checkpoint(a.checkpoint);
  auto ds = data::load_dataset(a.data);
  std::vector<double> times;
  for (const auto& t : split_list(a.times)) times.push_back(std::stod(t));
  fs::path out = out_dir(a.c);
  auto fc = harness::export_fc(m, ds, a.split, times, out);
  std::cout << "wrote fc.f64 [" << fc.fc.size(0) << ", " << fc.fc.size(1) << ", " << fc.fc.size(2) << "] and "
            << fc.bins.size() << " heatmap(s) to " << out.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RPNT neural transformer: synthetic data, pretraining, finetuning and verification"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic multi-site session and standardize it");
  add_common(g, gen.c, false);
  g->add_option("--sites", gen.sites, "recording sites (default 5)");
  g->add_option("--heldout", gen.heldout, "trailing sites kept out of pretraining (default 1)");
  g->add_option("--neurons", gen.neurons, "neurons per site (default 20)");
  g->add_option("--trials", gen.trials, "trials per site (default 400)");
  g->add_option("--reach", gen.reach, "center_out or random_target");
  g->add_option("--drift", gen.drift, "per-trial log-gain drift sigma");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "masked Poisson (+ contrastive) pretraining");
  add_common(p, pre.c, true);
  p->add_option("--data", pre.data, "dataset directory")->required();
  p->add_option("--epochs", pre.epochs, "override pretrain.epochs");

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "velocity decoding on a held-out dataset");
  add_common(f, ft.c, true);
  f->add_option("--data", ft.data, "held-out dataset directory")->required();
  f->add_option("--checkpoint", ft.checkpoint, "pretrained checkpoint (not used by scratch)");
  f->add_option("--mode", ft.mode, "full_sft, fs_sft or scratch")->capture_default_str();
  f->add_option("--train-ratio", ft.train_ratio, "fraction of trials used for training")->capture_default_str();
  f->add_option("--epochs", ft.epochs, "override finetune.epochs");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "grid sweep over one ablation axis");
  add_common(s, sw.c, true);
  s->add_option("--axis", sw.axis, "train_ratio, kernel_size, layers, heads, pe_kind, attention_kind or masking");
  s->add_option("--grid", sw.grid, "comma-separated grid (default: the axis' standard grid)");
  s->add_option("--seeds", sw.seeds, "comma-separated seeds");
  s->add_option("--pretrain-data", sw.pretrain_data, "pretraining dataset directory")->required();
  s->add_option("--heldout-data", sw.heldout_data, "held-out dataset directory")->required();
  s->add_option("--train-ratio", sw.train_ratio, "finetuning train ratio for non train_ratio axes");

  GradArgs gr;
  auto* gc = app.add_subcommand("gradcheck", "central-difference check of every parameter gradient");
  add_common(gc, gr.c, false);
  gc->add_option("--layers", gr.layers, "temporal layers (0 keeps the config)");
  gc->add_option("--steps", gr.steps, "time bins")->capture_default_str();
  gc->add_option("--step", gr.h, "finite-difference step")->capture_default_str();

  FcArgs fa;
  auto* e = app.add_subcommand("export-fc", "export spatial attention as functional connectivity");
  add_common(e, fa.c, false);
  e->add_option("--checkpoint", fa.checkpoint, "checkpoint with a spatial encoder")->required();
  e->add_option("--data", fa.data, "dataset directory")->required();
  e->add_option("--split", fa.split, "split to average over")->capture_default_str();
  e->add_option("--times", fa.times, "comma-separated times in ms for heatmaps")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) return run_gen_data(gen);
    if (p->parsed()) return run_pretrain(pre);
    if (f->parsed()) return run_finetune(ft);
    if (s->parsed()) return run_sweep(sw);
    if (gc->parsed()) return run_gradcheck(gr);
    if (e->parsed()) return run_export_fc(fa);
  } catch (const NumericFault& err) {
    std::cerr << "numeric fault: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
