#pragma once

// Lorenz trajectory generation, resampling into one-step-ahead training
// sequences, and the diagnostics used to inspect resampled series.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chaoscast/csv.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/parallel.hpp"
#include "chaoscast/rng.hpp"

namespace chaoscast {

using Vec3 = std::array<double, 3>;

struct LorenzParams {
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;

  bool operator==(const LorenzParams&) const = default;
};

struct LorenzState {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  Vec3 vec() const { return {x, y, z}; }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
  bool operator==(const LorenzState&) const = default;
};

// Sampling box for parameters and initial conditions.
struct SamplingRanges {
  static constexpr double sigma_lo = 9.0, sigma_hi = 11.0;
  static constexpr double rho_lo = 26.0, rho_hi = 30.0;
  static constexpr double beta_lo = 2.3, beta_hi = 3.1;
  static constexpr double init_lo = 0.18, init_hi = 0.22;
};

struct GenConfig {
  double dt = 0.01;
  std::uint64_t warmup_steps = 1000;
  std::size_t context_len = 512;
  std::uint64_t interval = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw UsageError("dt must be positive");
    if (context_len < 1) throw UsageError("context_len must be >= 1");
    if (interval < 1) throw UsageError("interval must be >= 1");
  }

  // Integration steps consumed by one sequence, warm-up included.
  std::uint64_t steps_per_sequence() const {
    return warmup_steps + (context_len + 1) * interval;
  }
};

struct TrainingSequence {
  std::vector<Vec3> inputs;
  std::vector<Vec3> targets;
  LorenzParams params;
  LorenzState initial;
  std::uint64_t seed = 0;
};

inline LorenzState lorenz_deriv(const LorenzState& s, const LorenzParams& p) noexcept {
  return {p.sigma * (s.y - s.x), s.x * (p.rho - s.z) - s.y, s.x * s.y - p.beta * s.z};
}

// Classical fourth-order Runge-Kutta.
inline LorenzState rk4_step(const LorenzState& s, const LorenzParams& p, double dt) noexcept {
  const double h2 = 0.5 * dt;
  const LorenzState k1 = lorenz_deriv(s, p);
  const LorenzState k2 = lorenz_deriv({s.x + h2 * k1.x, s.y + h2 * k1.y, s.z + h2 * k1.z}, p);
  const LorenzState k3 = lorenz_deriv({s.x + h2 * k2.x, s.y + h2 * k2.y, s.z + h2 * k2.z}, p);
  const LorenzState k4 = lorenz_deriv({s.x + dt * k3.x, s.y + dt * k3.y, s.z + dt * k3.z}, p);
  const double w = dt / 6.0;
  return {s.x + w * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
          s.y + w * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
          s.z + w * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z)};
}

struct SampledSystem {
  LorenzParams params;
  LorenzState initial;
};

inline SampledSystem sample_params(Rng& rng) {
  using R = SamplingRanges;
  SampledSystem out;
  out.params.sigma = uniform(rng, R::sigma_lo, R::sigma_hi);
  out.params.rho = uniform(rng, R::rho_lo, R::rho_hi);
  out.params.beta = uniform(rng, R::beta_lo, R::beta_hi);
  out.initial.x = uniform(rng, R::init_lo, R::init_hi);
  out.initial.y = uniform(rng, R::init_lo, R::init_hi);
  out.initial.z = uniform(rng, R::init_lo, R::init_hi);
  return out;
}

// Advances `steps` RK4 steps, throwing if the state leaves the finite range.
inline LorenzState integrate(LorenzState s, const LorenzParams& p, double dt, std::uint64_t steps) {
  for (std::uint64_t i = 0; i < steps; ++i) {
    s = rk4_step(s, p, dt);
    if (!s.finite()) throw NonFiniteTrajectory("trajectory diverged after " + std::to_string(i + 1) + " steps");
  }
  return s;
}

// Resampled trajectory: `count` points, one every `interval` steps after the
// warm-up. Point k is the state after warmup + (k + 1) * interval steps.
inline std::vector<Vec3> resampled_trajectory(const LorenzParams& p, LorenzState s, double dt,
                                              std::uint64_t warmup_steps, std::uint64_t interval,
                                              std::size_t count) {
  s = integrate(s, p, dt, warmup_steps);
  std::vector<Vec3> points;
  points.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    s = integrate(s, p, dt, interval);
    points.push_back(s.vec());
  }
  return points;
}

inline TrainingSequence generate_sequence(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const SampledSystem sys = sample_params(rng);
  const auto points = resampled_trajectory(sys.params, sys.initial, cfg.dt, cfg.warmup_steps,
                                           cfg.interval, cfg.context_len + 1);
  TrainingSequence seq;
  seq.inputs.assign(points.begin(), points.end() - 1);
  seq.targets.assign(points.begin() + 1, points.end());
  seq.params = sys.params;
  seq.initial = sys.initial;
  seq.seed = cfg.seed;
  return seq;
}

// Unbounded, single-pass stream of training batches. Sequence i of the stream
// is generated from derive_seed(base_seed, i); indices whose trajectory
// diverges are skipped (and reported through the skip hook) and the next
// index takes their place. The cursor can be saved and restored for resume.
class BatchStream {
 public:
  using SkipHook = std::function<void(std::uint64_t index, std::uint64_t seed, const std::string& why)>;
  using Generator = std::function<TrainingSequence(const GenConfig&)>;

  BatchStream(std::uint64_t base_seed, GenConfig cfg, std::size_t batch_size, std::size_t workers = 1,
              std::uint64_t start_index = 0, Generator generator = generate_sequence)
      : base_seed_(base_seed),
        cfg_(cfg),
        batch_size_(batch_size),
        workers_(workers),
        next_index_(start_index),
        generator_(std::move(generator)) {
    cfg_.validate();
    if (batch_size_ < 1) throw UsageError("batch_size must be >= 1");
  }

  std::vector<TrainingSequence> next_batch() {
    std::vector<TrainingSequence> batch;
    batch.reserve(batch_size_);
    while (batch.size() < batch_size_) {
      const std::size_t want = batch_size_ - batch.size();
      std::vector<std::optional<TrainingSequence>> slots(want);
      std::vector<std::string> failures(want);
      const std::uint64_t first = next_index_;
      parallel_for(want, workers_, [&](std::size_t i, std::size_t) {
        GenConfig c = cfg_;
        c.seed = derive_seed(base_seed_, first + i);
        try {
          slots[i] = generator_(c);
        } catch (const NonFiniteTrajectory& e) {
          failures[i] = e.what();
        }
      });
      for (std::size_t i = 0; i < want; ++i) {
        steps_integrated_ += cfg_.steps_per_sequence();
        if (slots[i]) {
          batch.push_back(std::move(*slots[i]));
        } else {
          ++skipped_;
          if (on_skip_) on_skip_(first + i, derive_seed(base_seed_, first + i), failures[i]);
        }
      }
      next_index_ += want;
    }
    return batch;
  }

  void on_skip(SkipHook hook) { on_skip_ = std::move(hook); }

  std::uint64_t base_seed() const { return base_seed_; }
  std::uint64_t next_index() const { return next_index_; }
  std::uint64_t skipped() const { return skipped_; }
  // Upper bound on RK4 steps taken so far (diverged sequences count in full).
  std::uint64_t steps_integrated() const { return steps_integrated_; }
  const GenConfig& config() const { return cfg_; }

 private:
  std::uint64_t base_seed_;
  GenConfig cfg_;
  std::size_t batch_size_;
  std::size_t workers_;
  std::uint64_t next_index_;
  std::uint64_t skipped_ = 0;
  std::uint64_t steps_integrated_ = 0;
  Generator generator_;
  SkipHook on_skip_;
};

// Pearson correlation between series[0 .. n-lag) and series[lag .. n).
inline double autocorrelation(std::span<const double> series, std::size_t lag) {
  if (series.size() <= lag + 1) throw DegenerateSeries("series too short for lag " + std::to_string(lag));
  const std::size_t n = series.size() - lag;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += series[i];
    mb += series[i + lag];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = series[i] - ma;
    const double b = series[i + lag] - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateSeries("zero variance in autocorrelation slice");
  return sab / std::sqrt(saa * sbb);
}

inline std::vector<double> component(std::span<const Vec3> points, std::size_t dim) {
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(p[dim]);
  return out;
}

// Writes a point cloud as CSV with header x,y,z.
inline void export_attractor(std::span<const Vec3> points, const std::filesystem::path& path) {
  if (points.empty()) throw DegenerateSeries("refusing to export an empty attractor");
  csv::Writer w(path, {"x", "y", "z"});
  for (const auto& p : points) w.row({csv::format(p[0]), csv::format(p[1]), csv::format(p[2])});
  w.close();
}

inline std::vector<Vec3> read_attractor(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto cx = table.column("x"), cy = table.column("y"), cz = table.column("z");
  if (!cx || !cy || !cz) throw SchemaMismatch(path.string() + ": expected header x,y,z");
  std::vector<Vec3> out;
  out.reserve(table.rows.size());
  for (const auto& r : table.rows) {
    auto x = csv::parse_double(r.at(*cx)), y = csv::parse_double(r.at(*cy)), z = csv::parse_double(r.at(*cz));
    if (!x || !y || !z) throw SchemaMismatch(path.string() + ": malformed row");
    out.push_back({*x, *y, *z});
  }
  return out;
}

}  // namespace chaoscast
