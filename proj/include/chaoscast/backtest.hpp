#pragma once

// Zero-shot one-step prediction over test windows and the quantile
// long/short strategy: long when the predicted y is in the top tail of the
// calibration predictions, short in the bottom tail, flat otherwise.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chaoscast/checkpoint.hpp"
#include "chaoscast/csv.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/market_ingest.hpp"
#include "chaoscast/model.hpp"
#include "chaoscast/parallel.hpp"

namespace chaoscast {

struct PredictionSeries {
  std::vector<std::int64_t> t_pred;
  std::vector<double> pred_y;      // scaled
  std::vector<double> realized_y;  // unscaled

  std::size_t size() const { return pred_y.size(); }
  bool operator==(const PredictionSeries&) const = default;
};

// Maps one window's scaled context (context_len x 3, row-major) to the
// predicted next 3-vector.
template <typename P>
concept WindowPredictor = requires(const P& p, std::span<const double> ctx, std::size_t len) {
  { p(ctx, len) } -> std::convertible_to<Vec3>;
};

// The autocorrelation baseline: the final context row is the forecast.
struct LastRowStub {
  Vec3 operator()(std::span<const double> ctx, std::size_t len) const {
    const std::size_t r = (len - 1) * 3;
    return {ctx[r], ctx[r + 1], ctx[r + 2]};
  }
};

template <typename Real = double>
class ModelWindowPredictor {
 public:
  explicit ModelWindowPredictor(const ModelParams<Real>& params) : params_(params), engine_(params) {}

  Vec3 operator()(std::span<const double> ctx, std::size_t len) const {
    if (len != params_.config.context_len)
      throw ShapeMismatch("window length " + std::to_string(len) + " differs from the model context " +
                          std::to_string(params_.config.context_len));
    AlignedVector<Real> in(ctx.begin(), ctx.end()), out(len * 3);
    detail::SequenceCache<Real> cache;
    engine_.forward(in.data(), len, cache, false, out.data());
    const std::size_t r = (len - 1) * 3;
    return {static_cast<double>(out[r]), static_cast<double>(out[r + 1]), static_cast<double>(out[r + 2])};
  }

 private:
  const ModelParams<Real>& params_;
  detail::Engine<Real> engine_;
};

template <WindowPredictor P>
PredictionSeries predict_series(const P& predictor, const WindowSet& windows, std::size_t workers = 1) {
  PredictionSeries s;
  const std::size_t n = windows.size();
  s.t_pred.resize(n);
  s.pred_y.resize(n);
  s.realized_y.resize(n);
  parallel_for(n, workers, [&](std::size_t i, std::size_t) {
    const TestWindow w = windows[i];
    s.pred_y[i] = Vec3(predictor(w.inputs, windows.context_len()))[1];
    s.t_pred[i] = w.t_pred;
    s.realized_y[i] = w.realized_next_y;
  });
  return s;
}

template <typename Real>
PredictionSeries predict_series(const ModelParams<Real>& params, const WindowSet& windows, std::size_t workers = 1) {
  return predict_series(ModelWindowPredictor<Real>(params), windows, workers);
}

inline PredictionSeries baseline_series(const WindowSet& windows) {
  if (windows.size() == 0) throw InsufficientData("no windows");
  return predict_series(LastRowStub{}, windows);
}

struct Thresholds {
  double lo = 0.0;
  double hi = 0.0;
};

// Nearest-rank quantile: the ceil(q * n)-th smallest value (1-based).
inline double nearest_rank(std::span<const double> sorted, double q) {
  const double n = static_cast<double>(sorted.size());
  // The small slack keeps q * n that lands on an integer from rounding up.
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

inline Thresholds percentile_thresholds(std::span<const double> calib_preds, double lo_q, double hi_q) {
  if (!(lo_q > 0.0 && lo_q < hi_q && hi_q < 1.0)) throw UsageError("need 0 < lo_q < hi_q < 1");
  if (calib_preds.size() < 20)
    throw InsufficientCalibration("need at least 20 calibration predictions, have " +
                                  std::to_string(calib_preds.size()));
  std::vector<double> sorted(calib_preds.begin(), calib_preds.end());
  std::sort(sorted.begin(), sorted.end());
  return {nearest_rank(sorted, lo_q), nearest_rank(sorted, hi_q)};
}

struct StrategyResult {
  double total_return = 0.0;
  std::vector<double> balance_curve;  // cumulative return after each step
  std::size_t n_trades = 0;
};

inline int position_for(double pred, const Thresholds& th) {
  if (th.lo == th.hi && pred == th.lo) return 0;
  if (pred >= th.hi) return 1;
  if (pred <= th.lo) return -1;
  return 0;
}

// Unit notional, zero costs; profit is position times the realized return.
inline StrategyResult run_strategy(const PredictionSeries& series, const Thresholds& th) {
  if (!std::isfinite(th.lo) || !std::isfinite(th.hi) || th.lo > th.hi)
    throw UsageError("thresholds must be finite with lo <= hi");
  if (series.realized_y.size() != series.pred_y.size()) throw ShapeMismatch("prediction series is misaligned");
  StrategyResult r;
  r.balance_curve.reserve(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    const int pos = position_for(series.pred_y[i], th);
    if (pos != 0) {
      ++r.n_trades;
      r.total_return += pos * series.realized_y[i];
    }
    r.balance_curve.push_back(r.total_return);
  }
  return r;
}

struct StrategyConfig {
  double long_quantile = 0.95;
  double short_quantile = 0.05;

  void validate() const {
    if (!(short_quantile > 0.0 && short_quantile < long_quantile && long_quantile < 1.0))
      throw UsageError("need 0 < short_quantile < long_quantile < 1");
  }
};

// Thresholds from the calibration windows, trading on the test windows.
struct StrategyRun {
  Thresholds thresholds;
  StrategyResult result;
  std::vector<std::int64_t> t_pred;
};

template <WindowPredictor P>
StrategyRun backtest_predictor(const P& predictor, const WindowSet& calibration, const WindowSet& test,
                               const StrategyConfig& cfg, std::size_t workers = 1) {
  const auto calib = predict_series(predictor, calibration, workers);
  const auto th = percentile_thresholds(calib.pred_y, cfg.short_quantile, cfg.long_quantile);
  const auto series = predict_series(predictor, test, workers);
  return {th, run_strategy(series, th), series.t_pred};
}

struct TimeframeData {
  std::int64_t timeframe_s = 0;
  std::vector<Bar> bars;
  Scaler scaler;
  std::optional<std::size_t> calibration_bars;  // overrides GridConfig::calibration_bars
};

struct HorizonModel {
  std::uint64_t horizon = 0;
  std::filesystem::path checkpoint;                       // loaded when `params` is empty
  std::shared_ptr<const ModelParams<double>> params;
};

struct GridConfig {
  std::size_t calibration_bars = 10'000;
  std::size_t context_len = 512;
  StrategyConfig strategy;
  std::size_t workers = 1;
};

struct CellResult {
  std::int64_t timeframe_s = 0;
  std::uint64_t horizon = 0;
  std::string error;  // empty when the cell ran
  double model_return = 0.0;
  double baseline_return = 0.0;
  double excess_return = 0.0;
  std::size_t n_trades = 0;
  StrategyRun run;

  bool ok() const { return error.empty(); }
};

struct BaselineResult {
  std::int64_t timeframe_s = 0;
  std::string error;
  StrategyRun run;

  bool ok() const { return error.empty(); }
};

struct BacktestReport {
  std::vector<BaselineResult> baselines;  // one per timeframe
  std::vector<CellResult> cells;          // timeframe-major, horizons in the given order
};

// Fills every (timeframe x horizon) cell. Per-cell failures (missing
// checkpoint, too little data) are recorded in the cell, not thrown.
inline BacktestReport grid_report(const std::vector<TimeframeData>& timeframes,
                                  const std::vector<HorizonModel>& horizons, const GridConfig& cfg) {
  cfg.strategy.validate();
  std::vector<std::shared_ptr<const ModelParams<double>>> models;
  std::vector<std::string> model_errors;
  for (const auto& h : horizons) {
    if (h.params) {
      models.push_back(h.params);
      model_errors.emplace_back();
      continue;
    }
    try {
      const auto ck = load_checkpoint(h.checkpoint);
      if (ck.config.context_len != cfg.context_len)
        throw CheckpointMismatch("checkpoint context " + std::to_string(ck.config.context_len) +
                                 " differs from window length " + std::to_string(cfg.context_len));
      models.push_back(std::make_shared<const ModelParams<double>>(ck.params()));
      model_errors.emplace_back();
    } catch (const Error& e) {
      models.push_back(nullptr);
      model_errors.emplace_back(e.what());
    }
  }

  BacktestReport report;
  for (const auto& tf : timeframes) {
    BaselineResult base{tf.timeframe_s, {}, {}};
    std::optional<WindowSet> calib, test;
    const std::size_t n_cal = tf.calibration_bars.value_or(cfg.calibration_bars);
    try {
      calib.emplace(build_calibration_windows(tf.bars, tf.scaler, n_cal, cfg.context_len));
      test.emplace(build_test_windows(tf.bars, tf.scaler, n_cal, cfg.context_len));
      base.run = backtest_predictor(LastRowStub{}, *calib, *test, cfg.strategy, 1);
    } catch (const Error& e) {
      base.error = e.what();
    }
    for (std::size_t h = 0; h < horizons.size(); ++h) {
      CellResult cell;
      cell.timeframe_s = tf.timeframe_s;
      cell.horizon = horizons[h].horizon;
      if (!base.ok()) {
        cell.error = base.error;
      } else if (!models[h]) {
        cell.error = model_errors[h];
      } else {
        try {
          cell.run = backtest_predictor(ModelWindowPredictor<double>(*models[h]), *calib, *test, cfg.strategy,
                                        cfg.workers);
          cell.model_return = cell.run.result.total_return;
          cell.baseline_return = base.run.result.total_return;
          cell.excess_return = cell.model_return - cell.baseline_return;
          cell.n_trades = cell.run.result.n_trades;
        } catch (const Error& e) {
          cell.error = e.what();
        }
      }
      report.cells.push_back(std::move(cell));
    }
    report.baselines.push_back(std::move(base));
  }
  return report;
}

inline const std::vector<std::string>& report_header() {
  static const std::vector<std::string> h{"timeframe_s",     "horizon",       "model_return",
                                          "baseline_return", "excess_return", "n_trades"};
  return h;
}

// Successful cells only; failed cells go to write_report_errors.
inline void write_report_csv(const BacktestReport& report, const std::filesystem::path& path) {
  std::string text = "timeframe_s,horizon,model_return,baseline_return,excess_return,n_trades\n";
  for (const auto& c : report.cells) {
    if (!c.ok()) continue;
    text += std::to_string(c.timeframe_s) + ',' + std::to_string(c.horizon) + ',' + csv::format(c.model_return) +
            ',' + csv::format(c.baseline_return) + ',' + csv::format(c.excess_return) + ',' +
            std::to_string(c.n_trades) + '\n';
  }
  write_file_atomic(path, text);
}

inline void write_report_errors(const BacktestReport& report, const std::filesystem::path& path) {
  std::string text = "timeframe_s,horizon,error\n";
  auto clean = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  for (const auto& b : report.baselines)
    if (!b.ok()) text += std::to_string(b.timeframe_s) + ",baseline," + clean(b.error) + '\n';
  for (const auto& c : report.cells)
    if (!c.ok()) text += std::to_string(c.timeframe_s) + ',' + std::to_string(c.horizon) + ',' + clean(c.error) + '\n';
  write_file_atomic(path, text);
}

inline void write_balance_curve(const StrategyRun& run, const std::filesystem::path& path) {
  std::string text = "t_pred,cumulative_return\n";
  for (std::size_t i = 0; i < run.t_pred.size(); ++i)
    text += std::to_string(run.t_pred[i]) + ',' + csv::format(run.result.balance_curve[i]) + '\n';
  write_file_atomic(path, text);
}

struct ReportRow {
  std::int64_t timeframe_s = 0;
  std::uint64_t horizon = 0;
  double model_return = 0.0;
  double baseline_return = 0.0;
  double excess_return = 0.0;
  std::size_t n_trades = 0;
};

inline std::vector<ReportRow> report_rows(const BacktestReport& report) {
  std::vector<ReportRow> rows;
  for (const auto& c : report.cells)
    if (c.ok()) rows.push_back({c.timeframe_s, c.horizon, c.model_return, c.baseline_return, c.excess_return, c.n_trades});
  return rows;
}

inline std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("report not found: " + path.string());
  const auto table = csv::read(path);
  std::vector<std::size_t> col;
  for (const auto& name : report_header()) {
    const auto c = table.column(name);
    if (!c) throw SchemaMismatch(path.string() + " lacks column " + name);
    col.push_back(*c);
  }
  std::vector<ReportRow> rows;
  for (const auto& r : table.rows) {
    const auto tf = csv::parse_int(r.at(col[0])), h = csv::parse_int(r.at(col[1])), n = csv::parse_int(r.at(col[5]));
    const auto m = csv::parse_double(r.at(col[2])), b = csv::parse_double(r.at(col[3])),
               e = csv::parse_double(r.at(col[4]));
    if (!tf || !h || !n || !m || !b || !e || *h < 0 || *n < 0) throw SchemaMismatch("malformed row in " + path.string());
    rows.push_back({*tf, static_cast<std::uint64_t>(*h), *m, *b, *e, static_cast<std::size_t>(*n)});
  }
  return rows;
}

// Markdown table: one row per timeframe with the baseline return and each
// horizon's model return and excess return. Per row, the best excess return
// is bold and the second best italic.
inline std::string render_report(const std::vector<ReportRow>& rows) {
  std::vector<std::int64_t> tfs;
  std::vector<std::uint64_t> hs;
  std::map<std::pair<std::int64_t, std::uint64_t>, ReportRow> cell;
  for (const auto& r : rows) {
    if (std::find(tfs.begin(), tfs.end(), r.timeframe_s) == tfs.end()) tfs.push_back(r.timeframe_s);
    if (std::find(hs.begin(), hs.end(), r.horizon) == hs.end()) hs.push_back(r.horizon);
    cell[{r.timeframe_s, r.horizon}] = r;
  }
  std::sort(tfs.begin(), tfs.end());
  std::sort(hs.begin(), hs.end());
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  std::string out = "| timeframe | baseline |";
  for (auto h : hs) out += " h=" + std::to_string(h) + " model (excess) |";
  out += "\n|---|---|";
  for (std::size_t i = 0; i < hs.size(); ++i) out += "---|";
  out += '\n';
  for (auto tf : tfs) {
    std::vector<double> excess;
    double baseline = std::nan("");
    for (auto h : hs)
      if (auto it = cell.find({tf, h}); it != cell.end()) {
        excess.push_back(it->second.excess_return);
        baseline = it->second.baseline_return;
      }
    std::sort(excess.begin(), excess.end(), std::greater<>());
    out += "| " + std::to_string(tf) + "s | " + fmt(baseline) + " |";
    for (auto h : hs) {
      const auto it = cell.find({tf, h});
      if (it == cell.end()) {
        out += " n/a |";
        continue;
      }
      std::string text = fmt(it->second.model_return) + " (" + fmt(it->second.excess_return) + ")";
      if (!excess.empty() && it->second.excess_return == excess[0]) {
        text = "**" + text + "**";
      } else if (excess.size() > 1 && it->second.excess_return == excess[1]) {
        text = "_" + text + "_";
      }
      out += " " + text + " |";
    }
    out += '\n';
  }
  return out;
}

}  // namespace chaoscast
