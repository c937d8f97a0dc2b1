#pragma once

// Trades -> fixed-timeframe (order flow x, price change rate y, volume z)
// bars -> moment-matched scaling -> sliding one-step-ahead test windows.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chaoscast/chaos_gen.hpp"
#include "chaoscast/checkpoint.hpp"
#include "chaoscast/csv.hpp"
#include "chaoscast/error.hpp"

namespace chaoscast {

enum class Side { buy, sell };

struct TradeRecord {
  std::int64_t timestamp_ms = 0;
  double price = 0.0;
  double size = 0.0;
  Side side = Side::buy;

  bool operator==(const TradeRecord&) const = default;
};

struct ParsedTrades {
  std::vector<TradeRecord> trades;
  std::size_t rows = 0;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;  // the first few, for reporting
};

namespace detail {

inline std::optional<Side> parse_side(std::string_view s) {
  std::string lower(s);
  for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "buy" || lower == "b") return Side::buy;
  if (lower == "sell" || lower == "s") return Side::sell;
  return std::nullopt;
}

}  // namespace detail

// Reads `timestamp_ms,price,size,side` (columns in any order, extra columns
// ignored). Malformed rows are counted and skipped; the result is stably
// sorted by timestamp.
inline ParsedTrades parse_trades(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UnreadableFile("cannot read trade file " + path.string());
  ParsedTrades out;
  std::string line;
  std::optional<std::array<std::size_t, 4>> cols;
  std::size_t line_no = 0;
  auto skip = [&](const std::string& why) {
    ++out.skipped;
    if (out.skip_reasons.size() < 20) out.skip_reasons.push_back("line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) continue;
    const auto cells = csv::split(line);
    if (!cols) {
      const std::array<std::string_view, 4> want{"timestamp_ms", "price", "size", "side"};
      std::array<std::size_t, 4> idx{};
      for (std::size_t k = 0; k < 4; ++k) {
        const auto it = std::find(cells.begin(), cells.end(), want[k]);
        if (it == cells.end())
          throw SchemaMismatch(path.string() + ": header lacks column '" + std::string(want[k]) +
                               "' (expected timestamp_ms,price,size,side)");
        idx[k] = static_cast<std::size_t>(it - cells.begin());
      }
      cols = idx;
      continue;
    }
    ++out.rows;
    const auto& c = *cols;
    if (cells.size() <= *std::max_element(c.begin(), c.end())) {
      skip("too few fields");
      continue;
    }
    const auto ts = csv::parse_int(cells[c[0]]);
    const auto price = csv::parse_double(cells[c[1]]);
    const auto size = csv::parse_double(cells[c[2]]);
    const auto side = detail::parse_side(cells[c[3]]);
    if (!ts || !price || !size || !side) {
      skip("unparseable field");
      continue;
    }
    if (!(*price > 0.0) || !std::isfinite(*price)) {
      skip("price must be positive");
      continue;
    }
    if (!(*size > 0.0) || !std::isfinite(*size)) {
      skip("size must be positive");
      continue;
    }
    out.trades.push_back({*ts, *price, *size, *side});
  }
  if (in.bad()) throw UnreadableFile("read error on " + path.string());
  std::stable_sort(out.trades.begin(), out.trades.end(),
                   [](const TradeRecord& a, const TradeRecord& b) { return a.timestamp_ms < b.timestamp_ms; });
  return out;
}

struct Bar {
  std::int64_t t_open_ms = 0;
  double x = 0.0;  // buy volume - sell volume
  double y = 0.0;  // close-to-close simple return
  double z = 0.0;  // buy volume + sell volume

  Vec3 vec() const { return {x, y, z}; }
  bool operator==(const Bar&) const = default;
};

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Buckets are aligned to multiples of the timeframe since the epoch and span
// the first to the last trade. Empty buckets carry the previous close. The
// first bucket's y is 0 unless `prev_close` supplies the close before it.
inline std::vector<Bar> aggregate_bars(std::span<const TradeRecord> trades, std::int64_t timeframe_s,
                                       std::optional<double> prev_close = std::nullopt) {
  if (timeframe_s < 1) throw UsageError("timeframe must be at least 1 second");
  if (trades.empty()) throw EmptyInput("no trades to aggregate");
  const std::int64_t width = timeframe_s * 1000;
  for (std::size_t i = 1; i < trades.size(); ++i)
    if (trades[i].timestamp_ms < trades[i - 1].timestamp_ms) throw UsageError("trades must be sorted by timestamp");
  const std::int64_t first = floor_div(trades.front().timestamp_ms, width);
  const std::int64_t last = floor_div(trades.back().timestamp_ms, width);
  std::vector<Bar> bars(static_cast<std::size_t>(last - first + 1));
  std::size_t i = 0;
  std::optional<double> close = prev_close;
  for (std::size_t b = 0; b < bars.size(); ++b) {
    const std::int64_t bucket = first + static_cast<std::int64_t>(b);
    Bar& bar = bars[b];
    bar.t_open_ms = bucket * width;
    double buy = 0.0, sell = 0.0, last_price = 0.0;
    bool any = false;
    while (i < trades.size() && floor_div(trades[i].timestamp_ms, width) == bucket) {
      (trades[i].side == Side::buy ? buy : sell) += trades[i].size;
      last_price = trades[i].price;
      any = true;
      ++i;
    }
    bar.x = buy - sell;
    bar.z = buy + sell;
    if (any) {
      bar.y = close ? (last_price - *close) / *close : 0.0;
      close = last_price;
    }
  }
  return bars;
}

inline void write_bars(std::span<const Bar> bars, const std::filesystem::path& path) {
  std::string text = "t_open,x,y,z\n";
  for (const auto& b : bars)
    text += std::to_string(b.t_open_ms) + ',' + csv::format(b.x) + ',' + csv::format(b.y) + ',' + csv::format(b.z) +
            '\n';
  write_file_atomic(path, text);
}

inline std::vector<Bar> read_bars(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UnreadableFile("bar file not found: " + path.string());
  const auto table = csv::read(path);
  const auto ct = table.column("t_open"), cx = table.column("x"), cy = table.column("y"), cz = table.column("z");
  if (!ct || !cx || !cy || !cz) throw SchemaMismatch(path.string() + ": expected columns t_open,x,y,z");
  std::vector<Bar> bars;
  for (const auto& row : table.rows) {
    const auto t = csv::parse_int(row.at(*ct));
    const auto x = csv::parse_double(row.at(*cx)), y = csv::parse_double(row.at(*cy)), z = csv::parse_double(row.at(*cz));
    if (!t || !x || !y || !z) throw SchemaMismatch("malformed bar row in " + path.string());
    bars.push_back({*t, *x, *y, *z});
  }
  return bars;
}

struct Moments {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};
};

// Per-dimension mean and population standard deviation.
inline Moments moments_of(std::span<const Vec3> pts) {
  if (pts.empty()) throw EmptyInput("no points for moments");
  Moments m;
  const double n = static_cast<double>(pts.size());
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0.0;
    for (const auto& p : pts) s += p[k];
    m.mean[k] = s / n;
    double v = 0.0;
    for (const auto& p : pts) v += (p[k] - m.mean[k]) * (p[k] - m.mean[k]);
    m.std[k] = std::sqrt(v / n);
  }
  return m;
}

// Moments of the model's training inputs at a given resampling interval,
// pooled over `n_sequences` generated sequences.
inline Moments lorenz_reference_moments(std::uint64_t interval, std::size_t n_sequences, std::uint64_t seed,
                                        std::size_t context_len = 512, std::size_t workers = 1) {
  GenConfig cfg;
  cfg.interval = interval;
  cfg.context_len = context_len;
  BatchStream stream(seed, cfg, n_sequences, workers);
  std::vector<Vec3> pts;
  for (const auto& s : stream.next_batch()) pts.insert(pts.end(), s.inputs.begin(), s.inputs.end());
  return moments_of(pts);
}

// scaled = gain * v + offset per dimension, with gain = ref_std / calib_std
// and offset = ref_mean - gain * calib_mean.
struct Scaler {
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> offset{};
  std::size_t calibration_first = 0;
  std::size_t calibration_count = 0;
  std::uint64_t reference_interval = 0;

  Vec3 apply(const Vec3& v) const {
    return {gain[0] * v[0] + offset[0], gain[1] * v[1] + offset[1], gain[2] * v[2] + offset[2]};
  }
  Vec3 unapply(const Vec3& s) const {
    return {(s[0] - offset[0]) / gain[0], (s[1] - offset[1]) / gain[1], (s[2] - offset[2]) / gain[2]};
  }
};

inline void to_json(json& j, const Scaler& s) {
  j = json{{"gain", s.gain},
           {"offset", s.offset},
           {"calibration_first_bar", s.calibration_first},
           {"calibration_bars", s.calibration_count},
           {"reference_interval", s.reference_interval}};
}

inline void from_json(const json& j, Scaler& s) {
  s.gain = j.at("gain").get<std::array<double, 3>>();
  s.offset = j.at("offset").get<std::array<double, 3>>();
  s.calibration_first = j.at("calibration_first_bar").get<std::size_t>();
  s.calibration_count = j.at("calibration_bars").get<std::size_t>();
  s.reference_interval = j.at("reference_interval").get<std::uint64_t>();
  for (double g : s.gain)
    if (!(g != 0.0) || !std::isfinite(g)) throw SchemaMismatch("scaler gains must be finite and non-zero");
}

inline void save_scaler(const Scaler& s, const std::filesystem::path& path) {
  write_file_atomic(path, json(s).dump(2) + "\n");
}

inline Scaler load_scaler(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path)).get<Scaler>();
  } catch (const json::exception& e) {
    throw SchemaMismatch("bad scaler file " + path.string() + ": " + e.what());
  }
}

inline Scaler fit_scaler(std::span<const Bar> calibration, const Moments& reference,
                         std::uint64_t reference_interval = 0) {
  if (calibration.size() < 2) throw DegenerateCalibration("calibration needs at least two bars");
  std::vector<Vec3> pts;
  pts.reserve(calibration.size());
  for (const auto& b : calibration) pts.push_back(b.vec());
  const Moments cal = moments_of(pts);
  Scaler s;
  for (std::size_t k = 0; k < 3; ++k) {
    if (!(cal.std[k] > 0.0)) throw DegenerateCalibration("calibration dimension " + std::to_string(k) + " is constant");
    s.gain[k] = reference.std[k] / cal.std[k];
    s.offset[k] = reference.mean[k] - s.gain[k] * cal.mean[k];
    if (!std::isfinite(s.gain[k]) || !(s.gain[k] != 0.0) || !std::isfinite(s.offset[k]))
      throw DegenerateCalibration("scaler coefficients are not finite and non-zero");
  }
  s.calibration_count = calibration.size();
  s.reference_interval = reference_interval;
  return s;
}

struct TestWindow {
  std::span<const double> inputs;  // context_len x 3, scaled, row-major
  double realized_next_y = 0.0;    // unscaled
  std::int64_t t_pred = 0;         // t_open of the predicted bar
};

// Windows over a scaled copy of a bar series. Window i covers bars
// [first + i, first + i + context_len) and predicts bar first + i + context_len.
class WindowSet {
 public:
  WindowSet(std::span<const Bar> bars, const Scaler& scaler, std::size_t first, std::size_t end,
            std::size_t context_len = 512)
      : context_len_(context_len), first_(first) {
    if (context_len < 1) throw UsageError("context_len must be >= 1");
    if (end > bars.size() || first > end) throw UsageError("window range outside the bar series");
    if (end - first <= context_len)
      throw InsufficientData("need more than " + std::to_string(context_len) + " bars, have " +
                             std::to_string(end - first));
    scaled_.reserve((end - first) * 3);
    for (std::size_t i = first; i < end; ++i) {
      const Vec3 s = scaler.apply(bars[i].vec());
      for (double v : s) {
        if (!std::isfinite(v)) throw InsufficientData("non-finite scaled value at bar " + std::to_string(i));
        scaled_.push_back(v);
      }
      realized_y_.push_back(bars[i].y);
      t_open_.push_back(bars[i].t_open_ms);
    }
  }

  std::size_t size() const { return realized_y_.size() - context_len_; }
  std::size_t context_len() const { return context_len_; }
  std::size_t first_bar() const { return first_; }

  TestWindow operator[](std::size_t i) const {
    return {std::span<const double>(scaled_.data() + i * 3, context_len_ * 3), realized_y_[i + context_len_],
            t_open_[i + context_len_]};
  }

 private:
  std::size_t context_len_;
  std::size_t first_;
  std::vector<double> scaled_;
  std::vector<double> realized_y_;
  std::vector<std::int64_t> t_open_;
};

// Test windows start after the calibration prefix, so no test input row is
// a calibration row.
inline WindowSet build_test_windows(std::span<const Bar> bars, const Scaler& scaler, std::size_t calibration_bars,
                                    std::size_t context_len = 512) {
  if (bars.size() <= calibration_bars)
    throw InsufficientData("no bars after the " + std::to_string(calibration_bars) + "-bar calibration segment");
  return WindowSet(bars, scaler, calibration_bars, bars.size(), context_len);
}

// Windows lying entirely inside the calibration prefix (for thresholds).
inline WindowSet build_calibration_windows(std::span<const Bar> bars, const Scaler& scaler,
                                           std::size_t calibration_bars, std::size_t context_len = 512) {
  return WindowSet(bars, scaler, 0, std::min(calibration_bars, bars.size()), context_len);
}

}  // namespace chaoscast
