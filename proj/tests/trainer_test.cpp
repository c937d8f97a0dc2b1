#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "chaoscast/trainer.hpp"

namespace chaoscast {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("chaoscast_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig smoke_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 16;
  c.context_len = 512;
  c.positional = PositionalEncoding::learned;
  return c;
}

TrainConfig smoke_train() {
  TrainConfig t;
  t.batch_size = 2;
  t.total_samples = 100ull * 2 * 512;
  t.eval_every = 50;
  t.checkpoint_every = 50;
  t.interval = 100;
  t.seed = 5;
  t.val_sequences = 8;
  return t;
}

TEST(LrSchedule, RampPeakAndDecayMidpoint) {
  const std::uint64_t total = 1'000'000;
  EXPECT_EQ(lr_schedule(0, total, 0.06, 1e-3), 0.0);
  EXPECT_NEAR(lr_schedule(60'000, total, 0.06, 1e-3), 1e-3, 1e-15);
  EXPECT_NEAR(lr_schedule(530'000, total, 0.06, 1e-3), 0.5e-3, 1e-12);
  EXPECT_NEAR(lr_schedule(total, total, 0.06, 1e-3), 0.0, 1e-18);
  EXPECT_NEAR(lr_schedule(30'000, total, 0.06, 1e-3), 0.5e-3, 1e-15);
}

TEST(LrSchedule, ContinuousAtJunctionAndPeaksAtBaseLr) {
  const std::uint64_t total = 1'000'000;
  const double below = lr_schedule(59'999, total, 0.06, 1e-3);
  const double above = lr_schedule(60'001, total, 0.06, 1e-3);
  EXPECT_NEAR(below, 1e-3, 1e-7);
  EXPECT_NEAR(above, 1e-3, 1e-7);
  double peak = 0.0;
  for (std::uint64_t s = 0; s <= total; s += 1000) peak = std::max(peak, lr_schedule(s, total, 0.06, 1e-3));
  EXPECT_DOUBLE_EQ(peak, 1e-3);
}

ModelParams<double> random_grads(std::uint64_t seed, double scale) {
  ModelConfig c = smoke_model();
  c.context_len = 8;
  ModelParams<double> g(c);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : g.values) v = n(rng);
  return g;
}

double norm_of(const ModelParams<double>& g) {
  double s = 0;
  for (double v : g.values) s += v * v;
  return std::sqrt(s);
}

TEST(ClipGlobalNorm, HalvesWhenNormIsTwice) {
  auto g = random_grads(1, 1.0);
  const double n0 = norm_of(g);
  for (double& v : g.values) v *= 2.0 / n0;
  const auto before = g.values;
  EXPECT_NEAR(clip_global_norm(g, 1.0), 2.0, 1e-12);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g.values[i], before[i] / 2, 1e-15);
}

TEST(ClipGlobalNorm, LeavesSmallGradientsBitExact) {
  auto g = random_grads(2, 1.0);
  const double n0 = norm_of(g);
  for (double& v : g.values) v *= 0.5 / n0;
  const auto before = g.values;
  clip_global_norm(g, 1.0);
  EXPECT_EQ(g.values, before);
}

TEST(ClipGlobalNorm, PostNormNeverExceedsMax) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto g = random_grads(s, std::pow(10.0, static_cast<double>(s % 7) - 3));
    clip_global_norm(g, 1.0);
    EXPECT_LE(norm_of(g), 1.0 + 1e-12);
  }
}

TEST(AdamUpdate, ZeroGradientOnlyDecaysWeightMatrices) {
  auto p = random_grads(3, 0.1);
  const auto before = p.values;
  const auto zero = p.zeros_like();
  OptimizerState st(p.size());
  const double lr = 1e-3;
  adam_update(p, zero, st, lr, AdamConfig{});
  EXPECT_EQ(st.step, 1u);
  for (const auto& t : p.layout->tensors())
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      if (t.decayed()) EXPECT_NEAR(p.values[i], before[i] * (1 - lr * 0.1), 1e-15 * std::abs(before[i])) << t.name;
      else EXPECT_EQ(p.values[i], before[i]) << t.name;
    }
}

TEST(AdamUpdate, FirstStepMovesNonDecayedTensorsByLrTimesSign) {
  auto p = random_grads(4, 0.1);
  const auto before = p.values;
  const auto g = random_grads(5, 1.0);
  OptimizerState st(p.size());
  const double lr = 1e-3;
  adam_update(p, g, st, lr, AdamConfig{});
  std::size_t checked = 0;
  for (const auto& t : p.layout->tensors()) {
    if (t.decayed()) continue;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      if (std::abs(g.values[i]) < 0.05) continue;
      const double step = p.values[i] - before[i];
      const double expected = -lr * (g.values[i] > 0 ? 1.0 : -1.0);
      EXPECT_LT(std::abs(step / expected - 1.0), 1e-6);
      ++checked;
    }
  }
  EXPECT_GT(checked, 100u);
}

// Scalar Adam with decoupled decay, written out longhand.
double scalar_adam(double theta, double g, int steps, double lr, double wd) {
  double m = 0, v = 0;
  for (int t = 1; t <= steps; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.95 * v + 0.05 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.95, t));
    theta = theta - lr * (mh / (std::sqrt(vh) + 1e-8) + wd * theta);
  }
  return theta;
}

TEST(AdamUpdate, TwoStepsMatchScalarReference) {
  auto p = random_grads(6, 0.1);
  const auto before = p.values;
  const auto g = random_grads(7, 0.3);
  OptimizerState st(p.size());
  adam_update(p, g, st, 2e-3, AdamConfig{});
  adam_update(p, g, st, 2e-3, AdamConfig{});
  EXPECT_EQ(st.step, 2u);
  for (const auto& t : p.layout->tensors()) {
    const double wd = t.decayed() ? 0.1 : 0.0;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i)
      EXPECT_NEAR(p.values[i], scalar_adam(before[i], g.values[i], 2, 2e-3, wd), 1e-15);
  }
}

TEST(AdamUpdate, DecayExclusionsAreBiasesNormsAndPositions) {
  const ParamLayout layout(smoke_model());
  for (const auto& t : layout.tensors()) {
    const bool excluded = t.group == ParamGroup::bias || t.group == ParamGroup::norm_gain ||
                          t.group == ParamGroup::norm_bias || t.group == ParamGroup::positional;
    EXPECT_EQ(t.decayed(), !excluded) << t.name;
    const bool named_weight = t.name.find(".w") != std::string::npos;
    EXPECT_EQ(t.decayed(), named_weight) << t.name;
  }
}

TEST(AdamUpdate, RejectsMismatchedShapes) {
  auto p = random_grads(8, 0.1);
  OptimizerState st(p.size() - 1);
  EXPECT_THROW(adam_update(p, p.zeros_like(), st, 1e-3, AdamConfig{}), ShapeMismatch);
}

TEST(TrainConfig, ValidatesAndCountsSamplesPerStep) {
  TrainConfig t;
  EXPECT_EQ(t.samples_per_step(512), 60u * 512);
  t.warmup_frac = 0.0;
  EXPECT_THROW(t.validate(), UsageError);
  t = TrainConfig{};
  t.base_lr = -1;
  EXPECT_THROW(t.validate(), UsageError);
  t = TrainConfig{};
  t.total_samples = 1'000'000;
  EXPECT_EQ(t.total_steps(512), 33u);
  const json j = t;
  EXPECT_EQ(json(j.get<TrainConfig>()), j);
}

struct SmokeRuns {
  TrainResult full, stopped, resumed;
  fs::path full_dir, stopped_dir, resumed_dir;
};

// The 100-step runs are shared by several tests.
const SmokeRuns& smoke_runs() {
  static const SmokeRuns runs = [] {
    SmokeRuns r;
    TrainOptions o;
    r.full_dir = scratch_dir("full");
    o.out_dir = r.full_dir;
    r.full = train(smoke_model(), smoke_train(), o);

    r.stopped_dir = scratch_dir("stopped");
    o.out_dir = r.stopped_dir;
    o.stop_after_step = 50;
    r.stopped = train(smoke_model(), smoke_train(), o);

    r.resumed_dir = scratch_dir("resumed");
    o.out_dir = r.resumed_dir;
    o.stop_after_step = 0;
    o.resume = checkpoint_path(r.stopped_dir, 50);
    r.resumed = train(smoke_model(), smoke_train(), o);
    return r;
  }();
  return runs;
}

TEST(Train, ValidationLossFallsOverOneHundredSteps) {
  const auto& m = smoke_runs().full.metrics.records;
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.front().step, 0u);
  EXPECT_EQ(m.back().step, 100u);
  EXPECT_LT(m.back().val_loss, m.front().val_loss);
  EXPECT_TRUE(std::isnan(m.front().train_loss));
  EXPECT_TRUE(std::isfinite(m.back().train_loss));
}

TEST(Train, SamplesSeenAdvanceByBatchTimesContext) {
  const auto& r = smoke_runs().full;
  for (const auto& rec : r.metrics.records) EXPECT_EQ(rec.samples_seen, rec.step * 2 * 512);
  EXPECT_EQ(r.samples_seen, 100u * 2 * 512);
  EXPECT_EQ(r.optimizer.step, 100u);
}

TEST(Train, ResumeAtStepFiftyIsBitExact) {
  const auto& r = smoke_runs();
  EXPECT_EQ(r.stopped.optimizer.step, 50u);
  EXPECT_EQ(r.resumed.params.values, r.full.params.values);
  EXPECT_EQ(r.resumed.optimizer.m, r.full.optimizer.m);
  EXPECT_EQ(r.resumed.optimizer.v, r.full.optimizer.v);
  EXPECT_EQ(read_file(r.resumed_dir / "metrics.csv"), read_file(r.full_dir / "metrics.csv"));
  EXPECT_EQ(read_file(checkpoint_path(r.resumed_dir, 100)), read_file(checkpoint_path(r.full_dir, 100)));
  EXPECT_EQ(read_file(checkpoint_bin_path(checkpoint_path(r.resumed_dir, 100))),
            read_file(checkpoint_bin_path(checkpoint_path(r.full_dir, 100))));
}

TEST(Train, WritesCheckpointsOnSchedule) {
  const auto& r = smoke_runs();
  ASSERT_EQ(r.full.checkpoints.size(), 2u);
  EXPECT_EQ(r.full.checkpoints[0], checkpoint_path(r.full_dir, 50));
  EXPECT_EQ(r.full.checkpoints[1], checkpoint_path(r.full_dir, 100));
  for (const auto& p : r.full.checkpoints) EXPECT_TRUE(fs::exists(checkpoint_bin_path(p)));
}

TEST(Train, SingleEpochNeverRevisitsASequenceSeed) {
  const auto& r = smoke_runs().full;
  const auto cfg = smoke_train();
  EXPECT_EQ(r.next_sequence_index, 100u * cfg.batch_size + r.sequences_skipped);
  std::set<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < r.next_sequence_index; ++i) seeds.insert(derive_seed(cfg.seed, i));
  for (std::uint64_t i = 0; i < cfg.val_sequences; ++i) seeds.insert(derive_seed(cfg.seed, kValidationIndexBase + i));
  seeds.insert(derive_seed(cfg.seed, kInitSeedIndex));
  EXPECT_EQ(seeds.size(), r.next_sequence_index + cfg.val_sequences + 1);
}

TEST(Train, ResumeRefusesADifferentConfig) {
  const auto& r = smoke_runs();
  TrainOptions o;
  o.resume = checkpoint_path(r.stopped_dir, 50);
  auto other = smoke_model();
  other.d_model = 32;
  other.d_ff = 32;
  EXPECT_THROW(train(other, smoke_train(), o), CheckpointMismatch);
  auto tc = smoke_train();
  tc.base_lr = 5e-4;
  EXPECT_THROW(train(smoke_model(), tc, o), CheckpointMismatch);
}

TEST(MetricsLog, CsvRoundTripKeepsEveryField) {
  const auto& r = smoke_runs();
  const auto log = MetricsLog::read_csv(r.full_dir / "metrics.csv");
  ASSERT_EQ(log.records.size(), r.full.metrics.records.size());
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto &a = log.records[i], &b = r.full.metrics.records[i];
    EXPECT_EQ(a.samples_seen, b.samples_seen);
    EXPECT_EQ(a.step, b.step);
    if (std::isnan(b.train_loss)) EXPECT_TRUE(std::isnan(a.train_loss));
    else EXPECT_EQ(a.train_loss, b.train_loss);
    EXPECT_EQ(a.val_loss, b.val_loss);
    EXPECT_EQ(a.ic_y, b.ic_y);
    EXPECT_EQ(a.lr, b.lr);
    EXPECT_EQ(a.seconds, 0.0);
  }
}

TEST(MetricsLog, RejectsNonIncreasingSamples) {
  MetricsLog log;
  MetricsRecord r;
  r.samples_seen = 10;
  log.append(r);
  EXPECT_THROW(log.append(r), UsageError);
}

}  // namespace
}  // namespace chaoscast
