#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include "rpnt/errors.hpp"
#include "rpnt/harness.hpp"

namespace rpnt::harness {

namespace {

// Rows idx of x along the leading axis.
Tensor gather(const Tensor& x, std::span<const std::size_t> idx) {
  ad::Shape shape = x.shape();
  std::size_t row = x.numel() / shape[0];
  shape[0] = idx.size();
  std::vector<double> out(idx.size() * row);
  auto src = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(idx[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return Tensor(std::move(shape), std::move(out));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json breakdown_json(const objectives::LossBreakdown& b) {
  return {{"loss_recon", b.recon}, {"loss_contrast", b.contrast}, {"loss_total", b.total}};
}

template <typename T>
void read_opt(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

// ---------------------------------------------------------------------------

json RunRecord::to_json() const {
  json epochs_json = json::array();
  for (const auto& e : epochs) {
    json r = breakdown_json(e.train);
    r["epoch"] = e.epoch;
    r["step"] = e.step;
    r["val_loss"] = e.val_loss;
    r["lr"] = e.lr;
    r["grad_norm"] = e.grad_norm;
    if (e.r2) r["r2"] = *e.r2;
    epochs_json.push_back(r);
  }
  json out{{"config", config}, {"seed", seed}, {"epochs", epochs_json}, {"wall_seconds", wall_seconds},
           {"checkpoint", checkpoint}};
  if (r2) out["r2"] = {{"per_dim", r2->per_dim}, {"mean", r2->mean}, {"warnings", r2->warnings}};
  return out;
}

MetricsSink::MetricsSink(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto f = std::make_shared<std::ofstream>(path, std::ios::app);
  if (!*f) throw IoError("cannot open metrics stream " + path.string());
  owned_ = f;
  stream_ = f.get();
}

void MetricsSink::write(const json& record) {
  if (!stream_) return;
  *stream_ << record.dump() << "\n";
  stream_->flush();
}

void MetricsSink::epoch(const std::string& phase, const EpochRecord& e) {
  json r = breakdown_json(e.train);
  r["phase"] = phase;
  r["epoch"] = e.epoch;
  r["step"] = e.step;
  r["lr"] = e.lr;
  r["grad_norm"] = e.grad_norm;
  r["val_loss"] = e.val_loss;
  if (e.r2) r["r2"] = *e.r2;
  write(r);
}

json PretrainConfig::to_json() const {
  return {{"epochs", epochs},           {"batch_size", batch_size},
          {"lr", lr},                   {"warmup_fraction", warmup_fraction},
          {"weight_decay", adamw.weight_decay},
          {"clip", clip},               {"mu", mu},
          {"tau", tau},                 {"masking", masking.str()},
          {"patience", patience},       {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const json& j) {
  PretrainConfig c;
  try {
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "lr", c.lr);
    read_opt(j, "warmup_fraction", c.warmup_fraction);
    read_opt(j, "weight_decay", c.adamw.weight_decay);
    read_opt(j, "clip", c.clip);
    read_opt(j, "mu", c.mu);
    read_opt(j, "tau", c.tau);
    read_opt(j, "patience", c.patience);
    read_opt(j, "seed", c.seed);
    if (j.contains("masking")) c.masking = objectives::MaskStrategy::parse(j.at("masking").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed pretrain config: ") + e.what());
  }
  if (c.batch_size == 0) throw ConfigError("batch size must be positive");
  return c;
}

json FinetuneConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr}, {"warmup_fraction", warmup_fraction},
          {"weight_decay", adamw.weight_decay}, {"clip", clip}, {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const json& j) {
  FinetuneConfig c;
  try {
    read_opt(j, "epochs", c.epochs);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "lr", c.lr);
    read_opt(j, "warmup_fraction", c.warmup_fraction);
    read_opt(j, "weight_decay", c.adamw.weight_decay);
    read_opt(j, "clip", c.clip);
    read_opt(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed finetune config: ") + e.what());
  }
  if (c.batch_size == 0) throw ConfigError("batch size must be positive");
  return c;
}

// ---------------------------------------------------------------------------

std::vector<model::SiteCoords> site_coords(const data::Dataset& ds) {
  std::vector<model::SiteCoords> out;
  for (const auto& s : ds.sites) out.push_back(s.coords);
  return out;
}

objectives::SslLoss pretrain_loss(const model::Rpnt& m, const Tensor& spikes,
                                  std::span<const model::SiteCoords> coords, const PretrainConfig& cfg,
                                  std::uint64_t mask_seed, const nn::ForwardContext& ctx) {
  std::size_t B = spikes.size(0), S = spikes.size(1), T = spikes.size(2), N = spikes.size(3);
  auto spec = objectives::sample_mask(B * S, T, N, cfg.masking, mask_seed);
  Tensor mask = ad::reshape(spec.mask, {B, S, T, N});
  auto out = m.forward_pretrain(objectives::apply_mask(spikes, mask), coords, ctx);
  double mu = S >= 2 ? cfg.mu : 0.0;
  return objectives::ssl_loss(out.rates, spikes, mask, out.representation, mu, cfg.tau);
}

namespace {

double evaluate_pretrain(const model::Rpnt& m, const data::SplitData& split,
                         std::span<const model::SiteCoords> coords, const PretrainConfig& cfg) {
  ad::NoGradGuard no_grad;
  std::size_t C = split.spikes.size(0);
  double total = 0.0;
  for (std::size_t start = 0, b = 0; start < C; start += cfg.batch_size, ++b) {
    std::size_t end = std::min(C, start + cfg.batch_size);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    // Validation masks are fixed across epochs.
    auto l = pretrain_loss(m, gather(split.spikes, idx), coords, cfg, nn::mix_seed(cfg.seed ^ 0x5EEDULL, b), {});
    total += l.breakdown.total * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(C);
}

}  // namespace

PretrainResult pretrain(const data::Dataset& ds, const model::RpntConfig& model_cfg, const PretrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir, MetricsSink& metrics) {
  auto t0 = std::chrono::steady_clock::now();
  const auto& train = ds.split("train");
  const data::SplitData* val = ds.splits.count("val") && ds.split("val").spikes.size(0) > 0 ? &ds.split("val") : nullptr;
  if (train.spikes.size(3) != model_cfg.n_neurons) {
    throw ConfigError("dataset width " + std::to_string(train.spikes.size(3)) + " differs from model n_neurons " +
                      std::to_string(model_cfg.n_neurons));
  }
  auto coords = site_coords(ds);
  model::Rpnt m(model_cfg, cfg.seed);
  auto params = m.parameters();
  AdamW opt(params, cfg.adamw);
  std::size_t C = train.spikes.size(0);
  std::size_t per_epoch = (C + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule sched{cfg.lr,
                   static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(per_epoch * cfg.epochs))),
                   per_epoch * cfg.epochs};
  nn::Rng shuffle(nn::mix_seed(cfg.seed, 11));
  nn::Rng drop(nn::mix_seed(cfg.seed, 12));

  PretrainResult result{m.clone(), {}};
  result.record.seed = cfg.seed;
  result.record.config = {{"model", model::to_json(model_cfg)}, {"pretrain", cfg.to_json()}};
  model::Rpnt last_good = m.clone();
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0, step = 0;
  auto save_last_good = [&](const std::string& why) {
    std::string where;
    if (out_dir) {
      std::filesystem::create_directories(*out_dir);
      auto p = *out_dir / "last_good.rpnt";
      model::save_checkpoint(last_good, p);
      where = "; last good checkpoint saved to " + p.string();
    }
    throw NumericFault("pretraining diverged at step " + std::to_string(step) + ": " + why + where);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = data::sample_without_replacement(shuffle, C, C);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    objectives::LossBreakdown sum;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::span<const std::size_t> idx(order.data() + b * cfg.batch_size,
                                       std::min(cfg.batch_size, C - b * cfg.batch_size));
      nn::ForwardContext ctx{true, &drop, false};
      objectives::SslLoss loss;
      try {
        loss = pretrain_loss(m, gather(train.spikes, idx), coords, cfg, nn::mix_seed(cfg.seed, 1000 + step), ctx);
      } catch (const NumericFault& e) {
        save_last_good(e.what());
      }
      if (!std::isfinite(loss.breakdown.total)) save_last_good("non-finite loss");
      opt.zero_grad();
      ad::backward(loss.total);
      rec.grad_norm = clip_grad_norm(params, cfg.clip);
      rec.lr = sched.at(step + 1);
      opt.step(rec.lr);
      ++step;
      sum.recon += loss.breakdown.recon;
      sum.contrast += loss.breakdown.contrast;
      sum.total += loss.breakdown.total;
      sum.masked_count += loss.breakdown.masked_count;
    }
    double nb = static_cast<double>(per_epoch);
    rec.train = {sum.recon / nb, sum.contrast / nb, sum.total / nb, sum.masked_count, cfg.mu};
    rec.step = step;
    rec.val_loss = val ? evaluate_pretrain(m, *val, coords, cfg) : rec.train.total;
    if (!std::isfinite(rec.val_loss)) save_last_good("non-finite validation loss");
    last_good = m.clone();
    if (rec.val_loss < best) {
      best = rec.val_loss;
      since_best = 0;
      result.model = m.clone();
      if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        auto p = *out_dir / "pretrain_best.rpnt";
        model::save_checkpoint(result.model, p);
        result.record.checkpoint = p.string();
      }
    } else {
      ++since_best;
    }
    metrics.epoch("pretrain", rec);
    result.record.epochs.push_back(rec);
    if (cfg.patience > 0 && since_best >= cfg.patience) break;
  }
  result.record.wall_seconds = seconds_since(t0);
  return result;
}

// ---------------------------------------------------------------------------

FinetuneMode parse_finetune_mode(std::string_view name) {
  if (name == "full_sft") return FinetuneMode::kFullSft;
  if (name == "fs_sft") return FinetuneMode::kFsSft;
  if (name == "scratch") return FinetuneMode::kScratch;
  throw ConfigError("unknown finetune mode '" + std::string(name) + "' (expected full_sft, fs_sft or scratch)");
}

std::string to_string(FinetuneMode mode) {
  switch (mode) {
    case FinetuneMode::kFullSft: return "full_sft";
    case FinetuneMode::kFsSft: return "fs_sft";
    case FinetuneMode::kScratch: return "scratch";
  }
  return "?";
}

FinetuneData heldout_data(const data::Dataset& ds, double train_ratio) {
  if (!(train_ratio > 0.0 && train_ratio <= 1.0)) throw ConfigError("train ratio must lie in (0, 1]");
  const auto& test = ds.split("test");
  std::vector<const data::SplitData*> ordered;
  for (const char* name : data::kSplitNames) {
    if (std::string(name) != "test" && ds.splits.count(name)) ordered.push_back(&ds.split(name));
  }
  std::size_t before_test = 0;
  for (auto* s : ordered) before_test += s->spikes.size(0);
  std::size_t total = before_test + test.spikes.size(0);
  std::size_t want = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(train_ratio * static_cast<double>(total))));
  if (want > before_test) {
    throw ConfigError("train ratio " + std::to_string(train_ratio) + " would reach into the test trials");
  }
  FinetuneData out;
  std::size_t S = ds.sites.size();
  for (std::size_t s = 0; s < S; ++s) {
    auto site_slice = [&](const data::SplitData& sd, std::size_t count, std::vector<double>& sp,
                          std::vector<double>& ve) {
      std::size_t T = sd.spikes.size(2), N = sd.spikes.size(3);
      auto x = sd.spikes.data();
      auto v = sd.velocity.data();
      for (std::size_t c = 0; c < count; ++c) {
        sp.insert(sp.end(), x.begin() + static_cast<std::ptrdiff_t>(((c * S + s) * T) * N),
                  x.begin() + static_cast<std::ptrdiff_t>(((c * S + s) * T + T) * N));
        ve.insert(ve.end(), v.begin() + static_cast<std::ptrdiff_t>(((c * S + s) * T) * 2),
                  v.begin() + static_cast<std::ptrdiff_t>(((c * S + s) * T + T) * 2));
      }
    };
    Session tr, te;
    tr.coords = te.coords = ds.sites[s].coords;
    std::vector<double> sp, ve;
    std::size_t left = want;
    for (auto* split : ordered) {
      std::size_t take = std::min(left, split->spikes.size(0));
      site_slice(*split, take, sp, ve);
      left -= take;
    }
    std::size_t T = test.spikes.size(2), N = test.spikes.size(3);
    tr.spikes = Tensor({want, T, N}, std::move(sp));
    tr.velocity = Tensor({want, T, 2}, std::move(ve));
    std::vector<double> tsp, tve;
    site_slice(test, test.spikes.size(0), tsp, tve);
    te.spikes = Tensor({test.spikes.size(0), T, N}, std::move(tsp));
    te.velocity = Tensor({test.spikes.size(0), T, 2}, std::move(tve));
    out.train.push_back(std::move(tr));
    out.test.push_back(std::move(te));
  }
  return out;
}

FinetuneResult finetune(const model::Rpnt* pretrained, const model::RpntConfig& model_cfg, FinetuneMode mode,
                        const FinetuneData& data, const FinetuneConfig& cfg, MetricsSink& metrics) {
  auto t0 = std::chrono::steady_clock::now();
  if (data.train.empty() || data.test.empty()) throw UsageError("finetuning needs training and test sessions");
  if (mode == FinetuneMode::kFsSft && data.train.size() != 1) {
    throw UsageError("fs_sft finetunes on exactly one session, got " + std::to_string(data.train.size()));
  }
  if (mode != FinetuneMode::kScratch && pretrained == nullptr) {
    throw UsageError(to_string(mode) + " needs a pretrained checkpoint");
  }
  model::Rpnt m = mode == FinetuneMode::kScratch ? model::Rpnt(model_cfg, cfg.seed) : pretrained->clone();
  m.attach_task_head(cfg.seed);

  // Flatten (session, trial) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> items;
  double sum[2] = {0, 0}, sq[2] = {0, 0};
  std::size_t count = 0;
  for (std::size_t s = 0; s < data.train.size(); ++s) {
    const auto& sess = data.train[s];
    for (std::size_t c = 0; c < sess.spikes.size(0); ++c) items.emplace_back(s, c);
    auto v = sess.velocity.data();
    for (std::size_t i = 0; i < v.size(); i += 2) {
      for (int k = 0; k < 2; ++k) {
        sum[k] += v[i + k];
        sq[k] += v[i + k] * v[i + k];
      }
      ++count;
    }
  }
  double scale[2];
  for (int k = 0; k < 2; ++k) {
    double mean = sum[k] / static_cast<double>(count);
    double var = sq[k] / static_cast<double>(count) - mean * mean;
    scale[k] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  Tensor inv_scale({2}, {1.0 / scale[0], 1.0 / scale[1]});
  Tensor fwd_scale({2}, {scale[0], scale[1]});

  auto batch = [&](const std::vector<Session>& sessions, std::span<const std::pair<std::size_t, std::size_t>> sel,
                   Tensor& x, Tensor& y, std::vector<model::SiteCoords>& coords) {
    std::size_t T = sessions[0].spikes.size(1), N = sessions[0].spikes.size(2);
    std::vector<double> xs, ys;
    xs.reserve(sel.size() * T * N);
    coords.clear();
    for (auto [s, c] : sel) {
      auto sx = sessions[s].spikes.data();
      auto sy = sessions[s].velocity.data();
      xs.insert(xs.end(), sx.begin() + static_cast<std::ptrdiff_t>(c * T * N), sx.begin() + static_cast<std::ptrdiff_t>((c + 1) * T * N));
      ys.insert(ys.end(), sy.begin() + static_cast<std::ptrdiff_t>(c * T * 2), sy.begin() + static_cast<std::ptrdiff_t>((c + 1) * T * 2));
      coords.push_back(sessions[s].coords);
    }
    x = Tensor({sel.size(), T, N}, std::move(xs));
    y = Tensor({sel.size(), T, 2}, std::move(ys));
  };

  auto params = m.parameters();
  AdamW opt(params, cfg.adamw);
  std::size_t C = items.size();
  std::size_t per_epoch = (C + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule sched{cfg.lr,
                   static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(per_epoch * cfg.epochs))),
                   per_epoch * cfg.epochs};
  nn::Rng shuffle(nn::mix_seed(cfg.seed, 21));
  nn::Rng drop(nn::mix_seed(cfg.seed, 22));
  FinetuneResult result;
  result.record.seed = cfg.seed;
  result.record.config = {{"model", model::to_json(m.config())}, {"finetune", cfg.to_json()}, {"mode", to_string(mode)}};
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = data::sample_without_replacement(shuffle, C, C);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double total = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<std::pair<std::size_t, std::size_t>> sel;
      for (std::size_t i = b * cfg.batch_size; i < std::min(C, (b + 1) * cfg.batch_size); ++i) sel.push_back(items[order[i]]);
      Tensor x, y;
      std::vector<model::SiteCoords> coords;
      batch(data.train, sel, x, y, coords);
      nn::ForwardContext ctx{true, &drop, false};
      Tensor loss = objectives::mse_loss(m.forward_decode(x, coords, ctx), ad::mul(y, inv_scale));
      if (!std::isfinite(loss.item())) throw NumericFault("finetuning diverged at step " + std::to_string(step));
      opt.zero_grad();
      ad::backward(loss);
      rec.grad_norm = clip_grad_norm(params, cfg.clip);
      rec.lr = sched.at(step + 1);
      opt.step(rec.lr);
      ++step;
      total += loss.item();
    }
    rec.step = step;
    rec.train.recon = rec.train.total = total / static_cast<double>(per_epoch);
    rec.train.mu = 0.0;
    metrics.epoch("finetune", rec);
    result.record.epochs.push_back(rec);
  }

  // Last-epoch evaluation on the test sessions.
  {
    ad::NoGradGuard no_grad;
    std::vector<double> preds, targets;
    for (std::size_t s = 0; s < data.test.size(); ++s) {
      std::size_t Cs = data.test[s].spikes.size(0);
      for (std::size_t start = 0; start < Cs; start += 64) {
        std::vector<std::pair<std::size_t, std::size_t>> sel;
        for (std::size_t c = start; c < std::min(Cs, start + 64); ++c) sel.emplace_back(s, c);
        Tensor x, y;
        std::vector<model::SiteCoords> coords;
        batch(data.test, sel, x, y, coords);
        Tensor p = ad::mul(m.forward_decode(x, coords, {}), fwd_scale);
        preds.insert(preds.end(), p.data().begin(), p.data().end());
        targets.insert(targets.end(), y.data().begin(), y.data().end());
      }
    }
    std::size_t T = data.test[0].spikes.size(1);
    std::size_t rows = preds.size() / (T * 2);
    result.predictions = Tensor({rows, T, 2}, std::move(preds));
    result.targets = Tensor({rows, T, 2}, std::move(targets));
  }
  result.test_r2 = objectives::r2_score(result.predictions, result.targets);
  result.record.r2 = result.test_r2;
  if (!result.record.epochs.empty()) {
    result.record.epochs.back().r2 = result.test_r2.mean;
    metrics.write({{"phase", "finetune_eval"}, {"epoch", cfg.epochs}, {"step", step}, {"r2", result.test_r2.mean},
                   {"r2_per_dim", result.test_r2.per_dim}});
  }
  result.record.wall_seconds = seconds_since(t0);
  return result;
}

}  // namespace rpnt::harness
