#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "chaoscast/market_ingest.hpp"

namespace chaoscast {
namespace {

namespace fs = std::filesystem;

fs::path write_temp(const std::string& name, const std::string& text) {
  const auto dir = fs::temp_directory_path() / "chaoscast_ingest";
  fs::create_directories(dir);
  const auto p = dir / name;
  std::ofstream(p) << text;
  return p;
}

TradeRecord trade(std::int64_t t_ms, double price, double size, Side side) { return {t_ms, price, size, side}; }

std::vector<TradeRecord> random_trades(std::uint64_t seed, std::size_t n, std::int64_t span_ms) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> t(0, span_ms);
  std::uniform_real_distribution<double> size(0.001, 2.0), step(-0.5, 0.5);
  std::vector<TradeRecord> out;
  double price = 100.0;
  for (std::size_t i = 0; i < n; ++i) {
    price += step(rng);
    out.push_back(trade(t(rng), price, size(rng), rng() % 2 ? Side::buy : Side::sell));
  }
  std::stable_sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.timestamp_ms < b.timestamp_ms; });
  return out;
}

TEST(ParseTrades, ReadsWellFormedRowsInTimestampOrder) {
  const auto p = write_temp("three.csv", "timestamp_ms,price,size,side\n3000,101,1,sell\n0,100,2,buy\n1000,100.5,0.5,BUY\n");
  const auto r = parse_trades(p);
  ASSERT_EQ(r.trades.size(), 3u);
  EXPECT_EQ(r.rows, 3u);
  EXPECT_EQ(r.skipped, 0u);
  EXPECT_EQ(r.trades[0].timestamp_ms, 0);
  EXPECT_EQ(r.trades[1].timestamp_ms, 1000);
  EXPECT_EQ(r.trades[2].timestamp_ms, 3000);
  EXPECT_EQ(r.trades[2].side, Side::sell);
}

TEST(ParseTrades, SkipsNonPositiveSizeAndMalformedRows) {
  const auto p = write_temp("skips.csv", "timestamp_ms,price,size,side\n0,100,0,buy\n1,100,1,buy\n2,abc,1,sell\n");
  const auto r = parse_trades(p);
  EXPECT_EQ(r.trades.size(), 1u);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_FALSE(r.skip_reasons.empty());
  const auto q = write_temp("one_skip.csv", "timestamp_ms,price,size,side\n0,100,-1,buy\n1,100,1,buy\n");
  EXPECT_EQ(parse_trades(q).skipped, 1u);
}

TEST(ParseTrades, SortIsStableOnTies) {
  const auto p = write_temp("ties.csv", "side,size,price,timestamp_ms\nbuy,1,100,50\nsell,2,101,10\nbuy,3,102,50\n");
  const auto r = parse_trades(p);
  ASSERT_EQ(r.trades.size(), 3u);
  EXPECT_EQ(r.trades[0].size, 2.0);
  EXPECT_EQ(r.trades[1].size, 1.0);
  EXPECT_EQ(r.trades[2].size, 3.0);
}

TEST(ParseTrades, SchemaAndFileErrors) {
  EXPECT_THROW(parse_trades(write_temp("noside.csv", "timestamp_ms,price,size\n0,1,1\n")), SchemaMismatch);
  EXPECT_THROW(parse_trades(fs::temp_directory_path() / "chaoscast_ingest" / "absent.csv"), UnreadableFile);
}

TEST(AggregateBars, HandAggregatedBucket) {
  const std::vector<TradeRecord> t{trade(0, 100, 2, Side::buy), trade(3000, 101, 1, Side::sell)};
  const auto bars = aggregate_bars(t, 5, 100.0);
  ASSERT_EQ(bars.size(), 1u);
  EXPECT_EQ(bars[0].x, 1.0);
  EXPECT_EQ(bars[0].z, 3.0);
  EXPECT_NEAR(bars[0].y, 0.01, 1e-15);
  EXPECT_EQ(aggregate_bars(t, 5)[0].y, 0.0);
}

TEST(AggregateBars, EmptyBucketsCarryTheClose) {
  const std::vector<TradeRecord> t{trade(1000, 100, 1, Side::buy), trade(16000, 110, 1, Side::sell)};
  const auto bars = aggregate_bars(t, 5);
  ASSERT_EQ(bars.size(), 4u);
  for (int b : {1, 2}) {
    EXPECT_EQ(bars[b].x, 0.0);
    EXPECT_EQ(bars[b].y, 0.0);
    EXPECT_EQ(bars[b].z, 0.0);
  }
  EXPECT_EQ(bars[0].y, 0.0);
  EXPECT_NEAR(bars[3].y, 0.1, 1e-15);
  EXPECT_EQ(bars[3].t_open_ms, 15000);
}

TEST(AggregateBars, BucketsAlignToEpochMultiples) {
  const std::vector<TradeRecord> t{trade(7'400, 100, 1, Side::buy), trade(-2'000, 100, 1, Side::buy)};
  std::vector<TradeRecord> sorted{t[1], t[0]};
  const auto bars = aggregate_bars(sorted, 5);
  EXPECT_EQ(bars.front().t_open_ms, -5000);
  EXPECT_EQ(bars.back().t_open_ms, 5000);
  EXPECT_THROW(aggregate_bars(t, 5), UsageError);
}

TEST(AggregateBars, ConservesVolumeAndBoundsOrderFlow) {
  const auto trades = random_trades(4, 20'000, 3'600'000);
  double total = 0;
  for (const auto& t : trades) total += t.size;
  for (std::int64_t tf : {5, 10, 15, 20, 25, 30, 60}) {
    const auto bars = aggregate_bars(trades, tf);
    double z = 0;
    for (const auto& b : bars) {
      EXPECT_GE(b.z, std::abs(b.x));
      EXPECT_TRUE(std::isfinite(b.y));
      z += b.z;
    }
    EXPECT_NEAR(z, total, 1e-9 * total) << tf;
  }
}

TEST(AggregateBars, EmptyInputThrows) {
  EXPECT_THROW(aggregate_bars(std::vector<TradeRecord>{}, 5), EmptyInput);
}

TEST(Bars, CsvRoundTrip) {
  const auto bars = aggregate_bars(random_trades(5, 500, 600'000), 10);
  const auto p = fs::temp_directory_path() / "chaoscast_ingest" / "bars.csv";
  write_bars(bars, p);
  EXPECT_EQ(read_bars(p), bars);
}

std::vector<Bar> gaussian_bars(std::uint64_t seed, std::size_t n, Moments m) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Bar> bars(n);
  for (std::size_t i = 0; i < n; ++i) {
    bars[i].t_open_ms = static_cast<std::int64_t>(i) * 5000;
    bars[i].x = m.mean[0] + m.std[0] * g(rng);
    bars[i].y = m.mean[1] + m.std[1] * g(rng);
    bars[i].z = m.mean[2] + m.std[2] * g(rng);
  }
  return bars;
}

TEST(FitScaler, MatchingCalibrationIsNearIdentity) {
  const auto bars = gaussian_bars(1, 10'000, {{0, 0, 25}, {8, 9, 8}});
  std::vector<Vec3> pts;
  for (const auto& b : bars) pts.push_back(b.vec());
  const auto s = fit_scaler(bars, moments_of(pts));
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(s.gain[k], 1.0, 1e-12);
    EXPECT_NEAR(s.offset[k], 0.0, 1e-9);
  }
}

TEST(FitScaler, ScaledCalibrationMatchesReferenceMoments) {
  const auto bars = gaussian_bars(2, 10'000, {{3.0, 1e-4, 40.0}, {20.0, 2e-4, 15.0}});
  const Moments ref{{-0.1, 0.2, 23.5}, {7.9, 8.9, 8.4}};
  const auto s = fit_scaler(bars, ref, 1000);
  EXPECT_EQ(s.calibration_count, 10'000u);
  EXPECT_EQ(s.reference_interval, 1000u);
  std::vector<Vec3> scaled;
  for (const auto& b : bars) scaled.push_back(s.apply(b.vec()));
  const auto m = moments_of(scaled);
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(m.mean[k], ref.mean[k], 1e-9);
    EXPECT_NEAR(m.std[k], ref.std[k], 1e-9);
  }
  for (const auto& b : bars) {
    const auto back = s.unapply(s.apply(b.vec()));
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(back[k], b.vec()[k], 1e-12 * std::max(1.0, std::abs(b.vec()[k])));
  }
}

TEST(FitScaler, RejectsConstantCalibration) {
  auto bars = gaussian_bars(3, 100, {{0, 0, 1}, {1, 1, 1}});
  for (auto& b : bars) b.y = 0.0;
  EXPECT_THROW(fit_scaler(bars, Moments{{0, 0, 0}, {1, 1, 1}}), DegenerateCalibration);
  EXPECT_THROW(fit_scaler(std::span<const Bar>(bars).first(1), Moments{}), DegenerateCalibration);
}

TEST(FitScaler, JsonRoundTrip) {
  const auto bars = gaussian_bars(4, 200, {{0, 0, 5}, {2, 1, 3}});
  const auto s = fit_scaler(bars, Moments{{0, 0, 23}, {8, 9, 8}}, 1000);
  const auto p = fs::temp_directory_path() / "chaoscast_ingest" / "scaler.json";
  save_scaler(s, p);
  const auto back = load_scaler(p);
  EXPECT_EQ(back.gain, s.gain);
  EXPECT_EQ(back.offset, s.offset);
  EXPECT_EQ(back.calibration_count, s.calibration_count);
}

TEST(ReferenceMoments, LorenzInputsAtLongIntervalAreFiniteAndSpread) {
  const auto m = lorenz_reference_moments(1000, 1000, 0);
  for (int k = 0; k < 3; ++k) {
    EXPECT_TRUE(std::isfinite(m.mean[k]));
    EXPECT_GT(m.std[k], 0.0);
  }
  EXPECT_GT(m.mean[2], 10.0);
  EXPECT_NEAR(m.mean[0], 0.0, 1.0);
}

TEST(TestWindows, CountOverlapAndFiniteness) {
  const std::size_t calib = 10'000;
  const auto bars = gaussian_bars(5, calib + 10'513, {{0, 0, 5}, {2, 1e-3, 3}});
  const auto s = fit_scaler(std::span<const Bar>(bars).first(calib), Moments{{0, 0, 23}, {8, 9, 8}});
  const auto w = build_test_windows(bars, s, calib);
  ASSERT_EQ(w.size(), 10'001u);
  for (std::size_t i = 0; i + 1 < w.size(); i += 997) {
    const auto a = w[i], b = w[i + 1];
    EXPECT_TRUE(std::equal(a.inputs.begin() + 3, a.inputs.end(), b.inputs.begin(), b.inputs.begin() + 511 * 3));
    EXPECT_EQ(a.realized_next_y, bars[calib + i + 512].y);
    EXPECT_EQ(a.t_pred, bars[calib + i + 512].t_open_ms);
  }
  for (std::size_t i = 0; i < w.size(); ++i)
    for (double v : w[i].inputs) ASSERT_TRUE(std::isfinite(v));
  // First test window starts at the first post-calibration bar.
  const auto first = s.apply(bars[calib].vec());
  EXPECT_EQ(w[0].inputs[0], first[0]);
  EXPECT_EQ(w[w.size() - 1].t_pred, bars.back().t_open_ms);
}

TEST(TestWindows, CalibrationWindowsStayInsideThePrefix) {
  const auto bars = gaussian_bars(6, 2000, {{0, 0, 5}, {2, 1e-3, 3}});
  const auto s = fit_scaler(std::span<const Bar>(bars).first(1000), Moments{{0, 0, 23}, {8, 9, 8}});
  const auto w = build_calibration_windows(bars, s, 1000, 100);
  EXPECT_EQ(w.size(), 900u);
  EXPECT_EQ(w[w.size() - 1].t_pred, bars[999].t_open_ms);
}

TEST(TestWindows, TooFewBarsIsInsufficientData) {
  const auto bars = gaussian_bars(7, 600, {{0, 0, 5}, {2, 1e-3, 3}});
  const auto s = fit_scaler(std::span<const Bar>(bars).first(100), Moments{{0, 0, 23}, {8, 9, 8}});
  EXPECT_THROW(build_test_windows(bars, s, 100), InsufficientData);
  EXPECT_THROW(build_test_windows(bars, s, 600), InsufficientData);
  EXPECT_NO_THROW(build_test_windows(bars, s, 100, 64));
}

}  // namespace
}  // namespace chaoscast
