#pragma once

// Single-pass streaming pretraining: every step draws fresh sequences from
// the Lorenz generator, then runs grad -> global-norm clip -> schedule -> AdamW.

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "chaoscast/chaos_gen.hpp"
#include "chaoscast/checkpoint.hpp"
#include "chaoscast/csv.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/eval_metrics.hpp"
#include "chaoscast/model.hpp"
#include "chaoscast/rng.hpp"

namespace chaoscast {

struct TrainConfig {
  std::uint64_t total_samples = 10'000'000;
  std::size_t batch_size = 60;
  double base_lr = 1e-3;
  double warmup_frac = 0.06;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  std::uint64_t eval_every = 0;        // steps; 0 evaluates only at start and end
  std::uint64_t checkpoint_every = 0;  // steps; 0 checkpoints only at the end
  std::uint64_t interval = 100;
  std::uint64_t seed = 0;
  std::size_t val_sequences = 256;

  void validate() const {
    if (total_samples < 1) throw UsageError("total_samples must be positive");
    if (batch_size < 1) throw UsageError("batch_size must be positive");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw UsageError("warmup_frac must lie in (0, 1)");
    if (!(base_lr > 0.0) || !(clip_norm > 0.0) || !(adam_eps > 0.0) || weight_decay < 0.0)
      throw UsageError("rates must be positive");
    if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
      throw UsageError("Adam betas must lie in (0, 1)");
    if (interval < 1) throw UsageError("interval must be >= 1");
    if (val_sequences < 1) throw UsageError("val_sequences must be >= 1");
  }

  // Every context position is one training sample.
  std::uint64_t samples_per_step(std::size_t context_len) const { return batch_size * context_len; }
  std::uint64_t total_steps(std::size_t context_len) const {
    const auto per = samples_per_step(context_len);
    return (total_samples + per - 1) / per;
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"total_samples", c.total_samples}, {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},             {"warmup_frac", c.warmup_frac},
           {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},           {"weight_decay", c.weight_decay},
           {"clip_norm", c.clip_norm},         {"eval_every", c.eval_every},
           {"checkpoint_every", c.checkpoint_every}, {"interval", c.interval},
           {"seed", c.seed},                   {"val_sequences", c.val_sequences}};
}

inline void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.total_samples = j.value("total_samples", d.total_samples);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.interval = j.value("interval", d.interval);
  c.seed = j.value("seed", d.seed);
  c.val_sequences = j.value("val_sequences", d.val_sequences);
}

// Linear warm-up to base_lr over warmup_frac of the samples, then cosine
// decay to zero at total_samples.
inline double lr_schedule(std::uint64_t samples_seen, std::uint64_t total_samples, double warmup_frac,
                          double base_lr) {
  const double s = static_cast<double>(std::min(samples_seen, total_samples));
  const double total = static_cast<double>(total_samples);
  const double warm = warmup_frac * total;
  if (s < warm) return base_lr * s / warm;
  const double progress = total > warm ? (s - warm) / (total - warm) : 1.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Scales every coordinate by max_norm/||g|| when ||g|| exceeds max_norm.
// Returns the norm before clipping.
template <typename Real>
double clip_global_norm(ModelParams<Real>& grads, double max_norm) {
  double sq = 0.0;
  for (Real g : grads.values) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const Real scale = static_cast<Real>(max_norm / norm);
    for (Real& g : grads.values) g *= scale;
  }
  return norm;
}

struct OptimizerState {
  AlignedVector<double> m, v;
  std::uint64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay:
//   theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// Decay applies to weight matrices only (not biases, norms or positions).
inline void adam_update(ModelParams<double>& params, const ModelParams<double>& grads, OptimizerState& state,
                        double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeMismatch("adam_update: buffer sizes differ");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  double* theta = params.values.data();
  const double* g = grads.values.data();
  for (const auto& spec : params.layout->tensors()) {
    const double wd = spec.decayed() ? cfg.weight_decay : 0.0;
    for (std::size_t i = spec.offset; i < spec.offset + spec.size(); ++i) {
      state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
      state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = state.m[i] / c1;
      const double v_hat = state.v[i] / c2;
      theta[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.eps) + wd * theta[i]);
    }
  }
}

struct MetricsRecord {
  std::uint64_t samples_seen = 0;
  std::uint64_t step = 0;
  double train_loss = 0.0;  // mean batch loss since the previous record; NaN for the step-0 record
  double val_loss = 0.0;
  double ic_x = 0.0, ic_y = 0.0, ic_z = 0.0;
  double lr = 0.0;
  double seconds = 0.0;  // wall-clock since start; 0 unless wall-clock recording is on

  bool operator==(const MetricsRecord&) const = default;
};

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h{"samples_seen", "step", "train_loss", "val_loss", "ic_x",
                                          "ic_y",         "ic_z", "lr",         "seconds"};
  return h;
}

struct MetricsLog {
  std::vector<MetricsRecord> records;

  void append(const MetricsRecord& r) {
    if (!records.empty() && r.samples_seen <= records.back().samples_seen)
      throw UsageError("metrics samples_seen must be strictly increasing");
    records.push_back(r);
  }

  // dim: 0 = x, 1 = y, 2 = z
  ICCurve ic_curve(int dim = 1) const {
    ICCurve c;
    for (const auto& r : records) c.add(r.samples_seen, dim == 0 ? r.ic_x : dim == 1 ? r.ic_y : r.ic_z);
    return c;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::string text;
    for (std::size_t i = 0; i < metrics_header().size(); ++i) text += (i ? "," : "") + metrics_header()[i];
    text += '\n';
    for (const auto& r : records) {
      text += csv::format(r.samples_seen) + ',' + csv::format(r.step) + ',' + csv::format(r.train_loss) + ',' +
              csv::format(r.val_loss) + ',' + csv::format(r.ic_x) + ',' + csv::format(r.ic_y) + ',' +
              csv::format(r.ic_z) + ',' + csv::format(r.lr) + ',' + csv::format(r.seconds) + '\n';
    }
    write_file_atomic(path, text);
  }

  static MetricsLog read_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("metrics log not found: " + path.string());
    const auto table = csv::read(path);
    std::vector<std::size_t> col;
    for (const auto& name : metrics_header()) {
      const auto c = table.column(name);
      if (!c) throw SchemaMismatch(path.string() + " lacks column " + name);
      col.push_back(*c);
    }
    MetricsLog log;
    for (const auto& row : table.rows) {
      auto num = [&](std::size_t k) {
        if (col[k] >= row.size()) throw SchemaMismatch("short row in " + path.string());
        const auto v = csv::parse_double(row[col[k]]);
        if (!v) throw SchemaMismatch("bad number '" + row[col[k]] + "' in " + path.string());
        return *v;
      };
      MetricsRecord r;
      r.samples_seen = static_cast<std::uint64_t>(num(0));
      r.step = static_cast<std::uint64_t>(num(1));
      r.train_loss = num(2);
      r.val_loss = num(3);
      r.ic_x = num(4);
      r.ic_y = num(5);
      r.ic_z = num(6);
      r.lr = num(7);
      r.seconds = num(8);
      log.append(r);
    }
    return log;
  }
};

namespace detail {

// JSON has no NaN; it is stored as null.
inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double null_as_nan(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

inline json to_json(const MetricsRecord& r) {
  return json{{"samples_seen", r.samples_seen}, {"step", r.step},
              {"train_loss", finite_or_null(r.train_loss)}, {"val_loss", finite_or_null(r.val_loss)},
              {"ic_x", finite_or_null(r.ic_x)}, {"ic_y", finite_or_null(r.ic_y)},
              {"ic_z", finite_or_null(r.ic_z)}, {"lr", r.lr}, {"seconds", r.seconds}};
}

inline MetricsRecord record_from_json(const json& j) {
  MetricsRecord r;
  r.samples_seen = j.at("samples_seen").get<std::uint64_t>();
  r.step = j.at("step").get<std::uint64_t>();
  r.train_loss = null_as_nan(j.at("train_loss"));
  r.val_loss = null_as_nan(j.at("val_loss"));
  r.ic_x = null_as_nan(j.at("ic_x"));
  r.ic_y = null_as_nan(j.at("ic_y"));
  r.ic_z = null_as_nan(j.at("ic_z"));
  r.lr = j.at("lr").get<double>();
  r.seconds = j.at("seconds").get<double>();
  return r;
}

}  // namespace detail

struct TrainOptions {
  std::filesystem::path out_dir;                 // empty: nothing is written
  std::optional<std::filesystem::path> resume;   // checkpoint manifest to continue from
  std::size_t workers = 1;
  std::uint64_t stop_after_step = 0;  // stop early (with a checkpoint) at this step; 0 runs to the end
  bool record_wallclock = false;
  std::function<void(const MetricsRecord&)> on_eval;
  std::function<void(std::uint64_t step, double loss, double grad_norm)> on_step;
};

struct TrainResult {
  ModelParams<double> params;
  OptimizerState optimizer;
  MetricsLog metrics;
  std::vector<std::filesystem::path> checkpoints;
  std::uint64_t samples_seen = 0;
  std::uint64_t next_sequence_index = 0;
  std::uint64_t sequences_skipped = 0;
};

inline constexpr std::uint64_t kInitSeedIndex = std::uint64_t{1} << 62;

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::uint64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%09llu.json", static_cast<unsigned long long>(step));
  return out_dir / "checkpoints" / name;
}

// Checkpoint holding everything train() needs to continue bit-exactly.
inline Checkpoint make_training_checkpoint(const ModelParams<double>& params, const OptimizerState& opt,
                                           const TrainConfig& cfg, std::uint64_t samples_seen,
                                           std::uint64_t next_index, double loss_sum, std::uint64_t loss_count,
                                           const MetricsLog& metrics) {
  Checkpoint ck;
  ck.config = params.config;
  ck.step = opt.step;
  ck.rng = {{"base_seed", cfg.seed}, {"next_sequence_index", next_index}};
  json recs = json::array();
  for (const auto& r : metrics.records) recs.push_back(detail::to_json(r));
  ck.extra = {{"train_config", cfg},
              {"samples_seen", samples_seen},
              {"optimizer_step", opt.step},
              {"train_loss_sum", loss_sum},
              {"train_loss_count", loss_count},
              {"metrics", recs}};
  ck.buffers.emplace_back("params", params.values);
  ck.buffers.emplace_back("adam_m", opt.m);
  ck.buffers.emplace_back("adam_v", opt.v);
  return ck;
}

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const TrainOptions& opts = {}) {
  model_cfg.validate();
  cfg.validate();
  const std::size_t T = model_cfg.context_len;
  const std::uint64_t per_step = cfg.samples_per_step(T);
  const std::uint64_t total_steps = cfg.total_steps(T);
  const AdamConfig adam{cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps};
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return opts.record_wallclock ? std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() : 0.0;
  };

  TrainResult res;
  double loss_sum = 0.0;
  std::uint64_t loss_count = 0;
  std::uint64_t next_index = 0;
  if (opts.resume) {
    const Checkpoint ck = load_checkpoint(*opts.resume, &model_cfg);
    const auto& ex = ck.extra;
    if (!ex.contains("train_config") || !ck.has_buffer("adam_m") || !ck.has_buffer("adam_v"))
      throw CheckpointMismatch(opts.resume->string() + " holds no optimizer state to resume from");
    const TrainConfig saved = ex.at("train_config").get<TrainConfig>();
    if (json(saved) != json(cfg))
      throw CheckpointMismatch("training config differs from the checkpoint's: " + json(saved).dump());
    res.params = ck.params();
    res.optimizer.m = ck.buffer("adam_m");
    res.optimizer.v = ck.buffer("adam_v");
    res.optimizer.step = ex.at("optimizer_step").get<std::uint64_t>();
    res.samples_seen = ex.at("samples_seen").get<std::uint64_t>();
    loss_sum = ex.at("train_loss_sum").get<double>();
    loss_count = ex.at("train_loss_count").get<std::uint64_t>();
    next_index = ck.rng.at("next_sequence_index").get<std::uint64_t>();
    for (const auto& r : ex.at("metrics")) res.metrics.append(detail::record_from_json(r));
  } else {
    res.params = init_model<double>(model_cfg, derive_seed(cfg.seed, kInitSeedIndex));
    res.optimizer = OptimizerState(res.params.size());
  }

  const auto val = validation_sequences(cfg.interval, cfg.val_sequences, cfg.seed, T, opts.workers);
  GenConfig gen;
  gen.interval = cfg.interval;
  gen.context_len = T;
  BatchStream stream(cfg.seed, gen, cfg.batch_size, opts.workers, next_index);

  auto evaluate = [&](double lr) {
    const EvalResult e = eval_model(ModelPredictor<double>(res.params), val, opts.workers);
    MetricsRecord r;
    r.samples_seen = res.samples_seen;
    r.step = res.optimizer.step;
    r.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : std::nan("");
    r.val_loss = e.val_loss;
    r.ic_x = e.ic[0];
    r.ic_y = e.ic[1];
    r.ic_z = e.ic[2];
    r.lr = lr;
    r.seconds = elapsed();
    res.metrics.append(r);
    loss_sum = 0.0;
    loss_count = 0;
    if (!opts.out_dir.empty()) res.metrics.write_csv(opts.out_dir / "metrics.csv");
    if (opts.on_eval) opts.on_eval(r);
  };
  auto checkpoint = [&] {
    if (opts.out_dir.empty()) return;
    const auto path = checkpoint_path(opts.out_dir, res.optimizer.step);
    save_checkpoint(make_training_checkpoint(res.params, res.optimizer, cfg, res.samples_seen, stream.next_index(),
                                             loss_sum, loss_count, res.metrics),
                    path);
    res.checkpoints.push_back(path);
  };

  if (res.metrics.records.empty()) evaluate(0.0);

  while (res.optimizer.step < total_steps) {
    const auto seqs = stream.next_batch();
    const auto batch = Batch<double>::from_sequences(seqs);
    auto g = grad(res.params, batch, opts.workers);
    const double norm = clip_global_norm(g.grads, cfg.clip_norm);
    res.samples_seen += per_step;
    const double lr = lr_schedule(res.samples_seen, cfg.total_samples, cfg.warmup_frac, cfg.base_lr);
    adam_update(res.params, g.grads, res.optimizer, lr, adam);
    loss_sum += g.loss;
    ++loss_count;
    if (opts.on_step) opts.on_step(res.optimizer.step, g.loss, norm);

    const std::uint64_t step = res.optimizer.step;
    const bool last = step == total_steps;
    if (last || (cfg.eval_every && step % cfg.eval_every == 0)) evaluate(lr);
    const bool stopping = opts.stop_after_step && step >= opts.stop_after_step && !last;
    if (last || stopping || (cfg.checkpoint_every && step % cfg.checkpoint_every == 0)) checkpoint();
    if (stopping) break;
  }

  res.next_sequence_index = stream.next_index();
  res.sequences_skipped = stream.skipped();
  return res;
}

}  // namespace chaoscast
