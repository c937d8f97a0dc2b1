#pragma once

// Skill metrics: information coefficient, held-out evaluation, threshold
// crossing on IC curves, and the log-linear samples-vs-horizon fit.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "chaoscast/chaos_gen.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/model.hpp"
#include "chaoscast/parallel.hpp"
#include "chaoscast/rng.hpp"

namespace chaoscast {

// Pearson correlation, two-pass in double precision.
inline double information_coefficient(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeMismatch("information_coefficient: length mismatch");
  if (pred.size() < 3) throw DegenerateSeries("information_coefficient needs at least 3 points");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += target[i];
  }
  mp /= n;
  mt /= n;
  double spp = 0.0, stt = 0.0, spt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = target[i] - mt;
    spp += a * a;
    stt += b * b;
    spt += a * b;
  }
  if (!(spp > 0.0) || !(stt > 0.0)) throw DegenerateSeries("information_coefficient: zero variance");
  return std::clamp(spt / std::sqrt(spp * stt), -1.0, 1.0);
}

// Held-out sequences come from an index range the training stream never
// reaches, so they are disjoint from every training sequence.
inline constexpr std::uint64_t kValidationIndexBase = std::uint64_t{1} << 63;

inline std::vector<TrainingSequence> validation_sequences(std::uint64_t interval, std::size_t n, std::uint64_t seed,
                                                          std::size_t context_len = 512, std::size_t workers = 1) {
  if (n < 1) throw UsageError("need at least one validation sequence");
  GenConfig cfg;
  cfg.interval = interval;
  cfg.context_len = context_len;
  cfg.validate();
  BatchStream stream(seed, cfg, n, workers, kValidationIndexBase);
  return stream.next_batch();
}

// Anything that maps a sequence's inputs to one-step-ahead predictions.
template <typename P>
concept SequencePredictor = requires(const P& p, const TrainingSequence& s) {
  { p(s) } -> std::convertible_to<std::vector<Vec3>>;
};

template <typename Real = double>
class ModelPredictor {
 public:
  explicit ModelPredictor(const ModelParams<Real>& params) : params_(params), engine_(params) {}

  std::vector<Vec3> operator()(const TrainingSequence& s) const {
    const std::size_t T = s.inputs.size();
    AlignedVector<Real> in(T * 3), out(T * 3);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < 3; ++k) in[t * 3 + k] = static_cast<Real>(s.inputs[t][k]);
    detail::SequenceCache<Real> cache;
    engine_.forward(in.data(), T, cache, false, out.data());
    std::vector<Vec3> pred(T);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < 3; ++k) pred[t][k] = static_cast<double>(out[t * 3 + k]);
    return pred;
  }

 private:
  const ModelParams<Real>& params_;
  detail::Engine<Real> engine_;
};

struct EvalResult {
  double val_loss = 0.0;
  std::array<double, 3> ic{};
  std::size_t n_points = 0;

  double ic_x() const { return ic[0]; }
  double ic_y() const { return ic[1]; }
  double ic_z() const { return ic[2]; }
};

// Every position's prediction pooled across all sequences, in sequence order.
struct PooledPredictions {
  std::array<std::vector<double>, 3> pred, target;
  double squared_error = 0.0;
  std::size_t positions = 0;
};

template <SequencePredictor P>
PooledPredictions pool_predictions(const P& predictor, std::span<const TrainingSequence> seqs,
                                   std::size_t workers = 1) {
  std::vector<std::vector<Vec3>> preds(seqs.size());
  parallel_for(seqs.size(), workers, [&](std::size_t i, std::size_t) {
    preds[i] = predictor(seqs[i]);
    if (preds[i].size() != seqs[i].targets.size()) throw ShapeMismatch("predictor returned wrong length");
  });
  PooledPredictions out;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    double sq = 0.0;
    for (std::size_t t = 0; t < preds[i].size(); ++t) {
      for (std::size_t k = 0; k < 3; ++k) {
        const double p = preds[i][t][k], y = seqs[i].targets[t][k];
        out.pred[k].push_back(p);
        out.target[k].push_back(y);
        sq += (p - y) * (p - y);
      }
    }
    out.squared_error += sq;
    out.positions += preds[i].size();
  }
  return out;
}

template <SequencePredictor P>
EvalResult eval_model(const P& predictor, std::span<const TrainingSequence> seqs, std::size_t workers = 1) {
  if (seqs.empty()) throw UsageError("eval_model needs at least one sequence");
  const auto pooled = pool_predictions(predictor, seqs, workers);
  EvalResult r;
  r.n_points = pooled.positions;
  r.val_loss = pooled.squared_error / static_cast<double>(pooled.positions);
  for (std::size_t k = 0; k < 3; ++k) r.ic[k] = information_coefficient(pooled.pred[k], pooled.target[k]);
  return r;
}

template <typename Real>
EvalResult eval_model(const ModelParams<Real>& params, std::uint64_t interval, std::size_t n_sequences,
                      std::uint64_t seed, std::size_t workers = 1) {
  const auto seqs = validation_sequences(interval, n_sequences, seed, params.config.context_len, workers);
  return eval_model(ModelPredictor<Real>(params), seqs, workers);
}

struct ICPoint {
  std::uint64_t samples_seen = 0;
  double ic = 0.0;
};

struct ICCurve {
  std::vector<ICPoint> points;

  void add(std::uint64_t samples_seen, double ic) {
    if (!points.empty() && samples_seen <= points.back().samples_seen)
      throw UsageError("IC curve samples_seen must be strictly increasing");
    points.push_back({samples_seen, ic});
  }
};

// First samples_seen at which the trailing moving average of IC (over up to
// `window` points; shorter at the start of the curve) reaches `threshold`.
inline std::optional<std::uint64_t> samples_to_threshold(const ICCurve& curve, double threshold,
                                                         std::size_t window = 3) {
  if (curve.points.empty()) throw UsageError("samples_to_threshold: empty curve");
  if (window < 1) throw UsageError("moving-average window must be >= 1");
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const std::size_t first = i + 1 >= window ? i + 1 - window : 0;
    double sum = 0.0;
    for (std::size_t j = first; j <= i; ++j) sum += curve.points[j].ic;
    if (sum / static_cast<double>(i - first + 1) >= threshold) return curve.points[i].samples_seen;
  }
  return std::nullopt;
}

struct ScalingPoint {
  double horizon = 0.0;
  double samples_to_threshold = 0.0;
};

struct ScalingFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double slope_stderr = 0.0;  // NaN with only two points
  std::size_t n = 0;

  double predict_log10(double horizon) const { return intercept + slope * horizon; }
};

// Least squares of log10(samples) on horizon.
inline ScalingFit fit_scaling_law(std::span<const ScalingPoint> points) {
  if (points.size() < 2) throw DegenerateFit("need at least two scaling points");
  const double n = static_cast<double>(points.size());
  double mh = 0.0, ml = 0.0;
  for (const auto& p : points) {
    if (!(p.samples_to_threshold > 0.0) || !(p.horizon > 0.0))
      throw DegenerateFit("scaling points must be positive");
    mh += p.horizon;
    ml += std::log10(p.samples_to_threshold);
  }
  mh /= n;
  ml /= n;
  double shh = 0.0, shl = 0.0, sll = 0.0;
  for (const auto& p : points) {
    const double a = p.horizon - mh, b = std::log10(p.samples_to_threshold) - ml;
    shh += a * a;
    shl += a * b;
    sll += b * b;
  }
  if (!(shh > 0.0)) throw DegenerateFit("all horizons are equal");
  ScalingFit f;
  f.n = points.size();
  f.slope = shl / shh;
  f.intercept = ml - f.slope * mh;
  double ss_res = 0.0;
  for (const auto& p : points) {
    const double e = std::log10(p.samples_to_threshold) - f.predict_log10(p.horizon);
    ss_res += e * e;
  }
  f.r2 = sll > 0.0 ? 1.0 - ss_res / sll : 1.0;
  f.slope_stderr = points.size() > 2 ? std::sqrt(ss_res / (n - 2.0) / shh) : std::nan("");
  return f;
}

}  // namespace chaoscast
