#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rpnt/errors.hpp"
#include "rpnt/harness.hpp"

namespace rpnt::harness {

namespace {

constexpr std::array<std::pair<SweepAxis, const char*>, 7> kAxisNames{{
    {SweepAxis::kTrainRatio, "train_ratio"},
    {SweepAxis::kKernelSize, "kernel_size"},
    {SweepAxis::kLayers, "layers"},
    {SweepAxis::kHeads, "heads"},
    {SweepAxis::kPeKind, "pe_kind"},
    {SweepAxis::kAttentionKind, "attention_kind"},
    {SweepAxis::kMasking, "masking"},
}};

std::size_t parse_count(const std::string& text, const char* what) {
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || v == 0) throw ConfigError(std::string("invalid ") + what + " '" + text + "'");
  return v;
}

}  // namespace

SweepAxis parse_sweep_axis(std::string_view name) {
  for (auto [axis, n] : kAxisNames) {
    if (name == n) return axis;
  }
  throw ConfigError("unknown sweep axis '" + std::string(name) +
                    "' (expected train_ratio, kernel_size, layers, heads, pe_kind, attention_kind or masking)");
}

std::string to_string(SweepAxis axis) {
  for (auto [a, n] : kAxisNames) {
    if (a == axis) return n;
  }
  return "?";
}

std::vector<std::string> default_grid(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kTrainRatio: return {"1%", "5%", "10%", "20%", "30%", "40%", "50%"};
    case SweepAxis::kKernelSize: return {"3x3", "7x7", "9x9", "11x11", "15x15"};
    case SweepAxis::kLayers: return {"2", "3", "4", "5", "6"};
    case SweepAxis::kHeads: return {"4", "8", "16", "32", "64"};
    case SweepAxis::kPeKind: return {"sinusoidal", "rope", "learnable", "mrope"};
    case SweepAxis::kAttentionKind: return {"standard", "context"};
    case SweepAxis::kMasking: {
      std::vector<std::string> out;
      for (const auto& m : objectives::MaskStrategy::ablation_grid()) out.push_back(m.str());
      return out;
    }
  }
  return {};
}

double parse_ratio(const std::string& text) {
  std::string body = text;
  bool percent = !body.empty() && body.back() == '%';
  if (percent) body.pop_back();
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(body, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != body.size() || body.empty()) throw ConfigError("invalid train ratio '" + text + "'");
  if (percent) v /= 100.0;
  if (!(v > 0.0 && v <= 1.0)) throw ConfigError("train ratio '" + text + "' outside (0, 1]");
  return v;
}

namespace {

// Applies one grid value to copies of the model and pretraining configs.
void apply_point(SweepAxis axis, const std::string& value, model::RpntConfig& m, PretrainConfig& p) {
  switch (axis) {
    case SweepAxis::kTrainRatio: parse_ratio(value); break;
    case SweepAxis::kKernelSize: {
      auto x = value.find('x');
      if (x == std::string::npos) throw ConfigError("kernel size '" + value + "' is not of the form RxC");
      m.kernel_rows = parse_count(value.substr(0, x), "kernel rows");
      m.kernel_cols = parse_count(value.substr(x + 1), "kernel columns");
      break;
    }
    case SweepAxis::kLayers: m.n_temporal_layers = parse_count(value, "layer count"); break;
    case SweepAxis::kHeads: m.n_heads = parse_count(value, "head count"); break;
    case SweepAxis::kPeKind: m.pe = posenc::parse_pe_kind(value); break;
    case SweepAxis::kAttentionKind: m.attention = attention::parse_attention_kind(value); break;
    case SweepAxis::kMasking: p.masking = objectives::MaskStrategy::parse(value); break;
  }
  m.validate();
}

SweepRow make_row(const std::string& value, const std::string& method, std::uint64_t seed) {
  SweepRow r;
  r.value = value;
  r.method = method;
  r.seed = seed;
  return r;
}

void fill(SweepRow& row, const FinetuneResult& f) {
  row.r2 = f.test_r2.mean;
  row.r2_x = f.test_r2.per_dim.size() > 0 ? f.test_r2.per_dim[0] : std::nan("");
  row.r2_y = f.test_r2.per_dim.size() > 1 ? f.test_r2.per_dim[1] : std::nan("");
}

void fail(SweepRow& row, const std::exception& e) {
  row.status = "error";
  row.error = e.what();
  row.r2 = row.r2_x = row.r2_y = std::nan("");
}

}  // namespace

SweepResult run_sweep(const data::Dataset& pretrain_ds, const data::Dataset& heldout_ds, const SweepConfig& cfg,
                      MetricsSink& metrics) {
  SweepResult result{cfg.axis, cfg.grid.empty() ? default_grid(cfg.axis) : cfg.grid, {}};
  if (cfg.seeds.empty()) throw ConfigError("sweep needs at least one seed");
  auto record = [&](const SweepRow& row) {
    metrics.write({{"phase", "sweep"}, {"axis", to_string(cfg.axis)}, {"value", row.value}, {"method", row.method},
                   {"seed", row.seed}, {"r2", row.r2}, {"status", row.status}, {"error", row.error}});
    result.rows.push_back(row);
  };

  if (cfg.axis == SweepAxis::kTrainRatio) {
    for (auto seed : cfg.seeds) {
      PretrainConfig p = cfg.pretrain;
      p.seed = seed;
      std::optional<model::Rpnt> pretrained;
      std::string pretrain_error;
      try {
        pretrained = pretrain(pretrain_ds, cfg.model, p, std::nullopt, metrics).model;
      } catch (const Error& e) {
        pretrain_error = e.what();
      }
      for (const auto& value : result.grid) {
        for (const char* method : {"pretrained", "scratch"}) {
          SweepRow row = make_row(value, method, seed);
          try {
            if (std::string(method) == "pretrained" && !pretrained) throw NumericFault(pretrain_error);
            FinetuneConfig f = cfg.finetune;
            f.seed = seed;
            auto data = heldout_data(heldout_ds, parse_ratio(value));
            bool scratch = std::string(method) == "scratch";
            fill(row, finetune(scratch ? nullptr : &*pretrained, cfg.model,
                               scratch ? FinetuneMode::kScratch : FinetuneMode::kFsSft, data, f, metrics));
          } catch (const Error& e) {
            fail(row, e);
          }
          record(row);
        }
      }
    }
    return result;
  }

  for (const auto& value : result.grid) {
    for (auto seed : cfg.seeds) {
      SweepRow row = make_row(value, "pretrained", seed);
      try {
        model::RpntConfig m = cfg.model;
        PretrainConfig p = cfg.pretrain;
        apply_point(cfg.axis, value, m, p);
        p.seed = seed;
        FinetuneConfig f = cfg.finetune;
        f.seed = seed;
        auto pre = pretrain(pretrain_ds, m, p, std::nullopt, metrics);
        fill(row, finetune(&pre.model, m, FinetuneMode::kFsSft, heldout_data(heldout_ds, cfg.train_ratio), f, metrics));
      } catch (const Error& e) {
        fail(row, e);
      }
      record(row);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

json summarize(const std::vector<const SweepRow*>& rows) {
  std::vector<double> ok;
  json errors = json::array();
  json per_seed = json::array();
  for (const auto* r : rows) {
    if (r->status == "ok" && std::isfinite(r->r2)) {
      ok.push_back(r->r2);
      per_seed.push_back({{"seed", r->seed}, {"r2", r->r2}});
    } else {
      errors.push_back({{"seed", r->seed}, {"error", r->error}});
    }
  }
  json cell{{"n", ok.size()}, {"per_seed", per_seed}};
  if (!ok.empty()) {
    double mean = 0.0;
    for (double v : ok) mean += v;
    mean /= static_cast<double>(ok.size());
    double var = 0.0;
    for (double v : ok) var += (v - mean) * (v - mean);
    cell["mean"] = mean;
    cell["std"] = ok.size() > 1 ? std::sqrt(var / static_cast<double>(ok.size() - 1)) : 0.0;
  } else {
    cell["mean"] = nullptr;
    cell["std"] = nullptr;
  }
  if (!errors.empty()) cell["errors"] = errors;
  return cell;
}

std::vector<const SweepRow*> select(const SweepResult& r, const std::string& value, const std::string& method) {
  std::vector<const SweepRow*> out;
  for (const auto& row : r.rows) {
    if (row.value == value && row.method == method) out.push_back(&row);
  }
  return out;
}

std::string axis_label(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kTrainRatio: return "Method";
    case SweepAxis::kKernelSize: return "Kernel size";
    case SweepAxis::kLayers: return "Transformer layers";
    case SweepAxis::kHeads: return "Attention heads";
    case SweepAxis::kPeKind: return "Method";
    case SweepAxis::kAttentionKind: return "Method";
    case SweepAxis::kMasking: return "Masking Strategy";
  }
  return "?";
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

json sweep_table(const SweepResult& result) {
  json table{{"axis", to_string(result.axis)}, {"metric", "r2"}};
  json rows = json::array();
  if (result.axis == SweepAxis::kTrainRatio) {
    json columns{axis_label(result.axis)};
    for (const auto& v : result.grid) columns.push_back(v);
    table["columns"] = columns;
    for (const char* method : {"pretrained", "scratch"}) {
      json row{{"Method", method}};
      for (const auto& v : result.grid) row[v] = summarize(select(result, v, method));
      rows.push_back(row);
    }
  } else if (result.axis == SweepAxis::kMasking) {
    table["columns"] = {"group", "neuron_ratio", "temporal_ratio", "r2"};
    for (const auto& v : result.grid) {
      json row{{"value", v}};
      try {
        auto m = objectives::MaskStrategy::parse(v);
        bool fixed = m.kind == objectives::MaskStrategy::Kind::kFixed;
        row["group"] = fixed ? "Fixed" : (m.kind == objectives::MaskStrategy::Kind::kEntrywise ? "Entrywise" : "Random");
        row["neuron_ratio"] = fixed ? json(m.p_neuron) : json("U(0,1)");
        row["temporal_ratio"] = fixed ? json(m.p_time) : json("U(0,1)");
      } catch (const Error&) {
        row["group"] = "invalid";
      }
      row["r2"] = summarize(select(result, v, "pretrained"));
      rows.push_back(row);
    }
  } else {
    table["columns"] = {axis_label(result.axis), "r2"};
    for (const auto& v : result.grid) {
      rows.push_back({{axis_label(result.axis), v}, {"r2", summarize(select(result, v, "pretrained"))}});
    }
  }
  table["rows"] = rows;
  return table;
}

void write_sweep(const SweepResult& result, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::string stem = "sweep_" + to_string(result.axis);
  {
    std::ofstream csv(out_dir / (stem + ".csv"));
    if (!csv) throw IoError("cannot write " + (out_dir / (stem + ".csv")).string());
    csv << "axis,value,method,seed,r2,r2_x,r2_y,status,error\n";
    for (const auto& r : result.rows) {
      csv << to_string(result.axis) << ',' << csv_escape(r.value) << ',' << r.method << ',' << r.seed << ','
          << fmt(r.r2) << ',' << fmt(r.r2_x) << ',' << fmt(r.r2_y) << ',' << r.status << ',' << csv_escape(r.error)
          << '\n';
    }
  }
  {
    std::ofstream js(out_dir / (stem + ".json"));
    if (!js) throw IoError("cannot write " + (out_dir / (stem + ".json")).string());
    js << sweep_table(result).dump(2) << '\n';
  }
  std::vector<Series> series;
  std::vector<std::string> methods{"pretrained"};
  if (result.axis == SweepAxis::kTrainRatio) methods.push_back("scratch");
  for (const auto& method : methods) {
    Series s{method, {}, {}};
    for (std::size_t i = 0; i < result.grid.size(); ++i) {
      auto cell = summarize(select(result, result.grid[i], method));
      if (cell["mean"].is_null()) continue;
      s.x.push_back(result.axis == SweepAxis::kTrainRatio ? 100.0 * parse_ratio(result.grid[i])
                                                           : static_cast<double>(i));
      s.y.push_back(cell["mean"].get<double>());
    }
    series.push_back(std::move(s));
  }
  std::string x_label = result.axis == SweepAxis::kTrainRatio ? "train split (%)" : to_string(result.axis) + " (grid index)";
  std::ofstream svg(out_dir / (stem + ".svg"));
  if (!svg) throw IoError("cannot write " + (out_dir / (stem + ".svg")).string());
  svg << svg_line_plot("r2 vs " + to_string(result.axis), x_label, "r2", series);
}

}  // namespace rpnt::harness
