#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "chaoscast/backtest.hpp"
#include "chaoscast/trainer.hpp"

namespace chaoscast {
namespace {

namespace fs = std::filesystem;

#ifndef CHAOSCAST_CLI
#error "CHAOSCAST_CLI must name the chaoscast binary"
#endif

const fs::path kRoot = fs::temp_directory_path() / "chaoscast_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(CHAOSCAST_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh(const std::string& name) {
  const auto dir = kRoot / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Same relative file set with identical bytes, ignoring run manifests.
void expect_same_tree(const fs::path& a, const fs::path& b) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    if (rel.filename().string().rfind("manifest_", 0) == 0) continue;
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(read_file(e.path()), read_file(b / rel)) << rel;
    ++n;
  }
  EXPECT_GT(n, 0u);
}

const std::string kTinyModel =
    "--layers 1 --d-model 8 --heads 2 --d-ff 8 --context-len 32 --positional learned --interval 100 "
    "--batch-size 4 --lr 3e-3 --val-sequences 4 --quiet";

TEST(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run("generate"), 2);
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("generate --interval 100 --bogus 1"), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST(Cli, GenerateWritesOneBundlePerIntervalReproducibly) {
  const auto a = fresh("gen_a"), b = fresh("gen_b");
  const std::string args = "generate --interval 100,1000 --sequences 2 --points 2000 --max-lag 5 --seed 3";
  ASSERT_EQ(run(args + " --out-dir " + q(a)), 0);
  ASSERT_EQ(run(args + " --out-dir " + q(b)), 0);
  for (const char* d : {"interval_100", "interval_1000"}) {
    EXPECT_TRUE(fs::exists(a / d / "sequences.csv"));
    EXPECT_TRUE(fs::exists(a / d / "attractor.csv"));
    EXPECT_TRUE(fs::exists(a / d / "autocorrelation.csv"));
  }
  EXPECT_TRUE(fs::exists(a / "manifest_generate.json"));
  expect_same_tree(a, b);
  const auto m = json::parse(read_file(a / "manifest_generate.json"));
  EXPECT_EQ(m.at("command"), "generate");
  EXPECT_EQ(m.at("seed"), 3);
  EXPECT_FALSE(m.at("outputs").empty());
  EXPECT_EQ(m.at("outputs")[0].at("sha256").get<std::string>().size(), 64u);
}

struct TrainRuns {
  fs::path a, b;
  int code_a = -1, code_b = -1;
};

const TrainRuns& train_runs() {
  static const TrainRuns runs = [] {
    TrainRuns r;
    r.a = fresh("train_a");
    r.b = fresh("train_b");
    const std::string args = "train " + kTinyModel + " --total-samples 1536 --eval-every 4 --checkpoint-every 6 --seed 2";
    r.code_a = run(args + " --out-dir " + q(r.a));
    r.code_b = run(args + " --out-dir " + q(r.b));
    return r;
  }();
  return runs;
}

TEST(Cli, TrainIsByteReproducibleAndLogsEveryEval) {
  const auto& r = train_runs();
  ASSERT_EQ(r.code_a, 0);
  ASSERT_EQ(r.code_b, 0);
  expect_same_tree(r.a, r.b);
  // 1536 samples / (4 x 32) = 12 steps: evals at 0, 4, 8, 12.
  const auto log = MetricsLog::read_csv(r.a / "metrics.csv");
  ASSERT_EQ(log.records.size(), 4u);
  EXPECT_EQ(log.records.back().step, 12u);
  EXPECT_TRUE(fs::exists(checkpoint_path(r.a, 6)));
  EXPECT_TRUE(fs::exists(checkpoint_path(r.a, 12)));
  EXPECT_TRUE(fs::exists(r.a / "final.json"));
  EXPECT_TRUE(fs::exists(r.a / "final.bin"));
  EXPECT_NO_THROW(load_checkpoint(r.a / "final.json"));
}

TEST(Cli, ResumeMatchesTheUninterruptedRun) {
  const auto& r = train_runs();
  ASSERT_EQ(r.code_a, 0);
  const auto stop = fresh("train_stop"), resumed = fresh("train_resumed");
  const std::string args = "train " + kTinyModel + " --total-samples 1536 --eval-every 4 --checkpoint-every 6 --seed 2";
  ASSERT_EQ(run(args + " --stop-after-step 6 --out-dir " + q(stop)), 0);
  EXPECT_FALSE(fs::exists(stop / "final.json"));
  ASSERT_EQ(run(args + " --resume " + q(checkpoint_path(stop, 6)) + " --out-dir " + q(resumed)), 0);
  EXPECT_EQ(read_file(resumed / "final.bin"), read_file(r.a / "final.bin"));
  EXPECT_EQ(read_file(resumed / "metrics.csv"), read_file(r.a / "metrics.csv"));
}

TEST(Cli, ResumeWithADifferentModelIsRefused) {
  const auto& r = train_runs();
  ASSERT_EQ(r.code_a, 0);
  const auto out = fresh("train_mismatch");
  const std::string other =
      "train --layers 2 --d-model 8 --heads 2 --d-ff 8 --context-len 32 --positional learned --interval 100 "
      "--batch-size 4 --lr 3e-3 --val-sequences 4 --quiet --total-samples 1536 --eval-every 4 --checkpoint-every 6 "
      "--seed 2";
  EXPECT_EQ(run(other + " --resume " + q(checkpoint_path(r.a, 6)) + " --out-dir " + q(out)), 3);
  EXPECT_EQ(run(other + " --resume " + q(out / "absent.json") + " --out-dir " + q(out)), 3);
}

TEST(Cli, ConfigFileSuppliesDefaultsAndFlagsWin) {
  const auto dir = fresh("config");
  std::ofstream(dir / "cfg.json") << R"({"seed": 2, "train": {"batch_size": 8, "total_samples": 1024, "quiet": true}})";
  ASSERT_EQ(run("train " + kTinyModel + " --eval-every 0 --config " + q(dir / "cfg.json") + " --batch-size 4 --out-dir " +
                q(dir / "run")),
            0);
  const auto m = json::parse(read_file(dir / "run" / "manifest_train.json"));
  EXPECT_EQ(m.at("seed"), 2);
  EXPECT_EQ(m.at("config").at("batch-size"), "4");
  // 1024 / (4 x 32) = 8 steps.
  EXPECT_EQ(MetricsLog::read_csv(dir / "run" / "metrics.csv").records.back().step, 8u);
  std::ofstream(dir / "bad.json") << "[1, 2";
  EXPECT_EQ(run("train " + kTinyModel + " --config " + q(dir / "bad.json") + " --out-dir " + q(dir / "bad")), 2);
}

// Metrics log whose IC rises linearly by `slope` per million samples.
fs::path synthetic_metrics(const fs::path& dir, const std::string& name, double slope) {
  MetricsLog log;
  for (std::uint64_t k = 0; k <= 20; ++k) {
    MetricsRecord r;
    r.samples_seen = k * 1'000'000;
    r.step = k;
    r.train_loss = k ? 1.0 : std::nan("");
    r.val_loss = 1.0;
    r.ic_y = slope * static_cast<double>(k);
    log.append(r);
  }
  log.write_csv(dir / name);
  return dir / name;
}

TEST(Cli, EvalRecordsScalingPointsAndNotReached) {
  const auto out = fresh("eval");
  // With window 1 the crossings of 0.1 are at 2M (slope 0.05) and 8M (slope 0.0125).
  const auto fast = synthetic_metrics(out, "fast.csv", 0.05), slow = synthetic_metrics(out, "slow.csv", 0.0125);
  const auto flat = synthetic_metrics(out, "flat.csv", 0.001);
  ASSERT_EQ(run("eval --metrics " + q(fast) + "," + q(slow) + "," + q(flat) +
                " --horizons 100,300,500 --window 1 --out-dir " + q(out)),
            0);
  EXPECT_EQ(read_file(out / "scaling_points.csv"),
            "horizon,samples_to_threshold\n100,2000000\n300,8000000\n500,NotReached\n");
  const auto fit = csv::read(out / "scaling_fit.csv");
  ASSERT_EQ(fit.rows.size(), 1u);
  EXPECT_NEAR(*csv::parse_double(fit.rows[0][0]), (std::log10(8e6) - std::log10(2e6)) / 200, 1e-12);
  EXPECT_EQ(fit.rows[0][4], "2");
  EXPECT_TRUE(fs::exists(out / "scaling.svg"));
  const auto m = json::parse(read_file(out / "manifest_eval.json"));
  EXPECT_EQ(m.at("config").at("threshold"), "0.1");

  // A curve that is above the threshold from the start crosses at 0 and is not fitted.
  ASSERT_EQ(run("eval --metrics " + q(fast) + " --horizons 100 --threshold -1 --out-dir " + q(out)), 0);
  EXPECT_EQ(read_file(out / "scaling_points.csv"), "horizon,samples_to_threshold\n100,0\n");
  EXPECT_EQ(run("eval --metrics " + q(fast) + " --horizons 100,300 --out-dir " + q(out)), 2);
}

void write_trades(const fs::path& p, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> gap(0, 1500);
  std::uniform_real_distribution<double> size(0.01, 1.0), step(-0.05, 0.05);
  std::ofstream out(p);
  out << "timestamp_ms,price,size,side\n";
  std::int64_t t = 1'700'000'000'000;
  double price = 100.0;
  for (std::size_t i = 0; i < n; ++i) {
    t += gap(rng);
    price *= 1.0 + 1e-3 * step(rng);
    out << t << ',' << price << ',' << size(rng) << ',' << (rng() % 2 ? "buy" : "sell") << '\n';
  }
}

TEST(Cli, IngestAndBacktestProduceReproducibleReports) {
  const auto& r = train_runs();
  ASSERT_EQ(r.code_a, 0);
  const auto dir = fresh("market");
  write_trades(dir / "trades.csv", 30'000, 4);
  const std::string ingest = "ingest --trades " + q(dir / "trades.csv") +
                             " --calibration-bars 200 --reference-sequences 8 --context-len 32 --out-dir ";
  ASSERT_EQ(run(ingest + q(dir / "in")), 0);
  for (int tf : {5, 10, 15, 20, 25, 30, 60}) {
    EXPECT_TRUE(fs::exists(dir / "in" / "bars" / ("bars_" + std::to_string(tf) + "s.csv"))) << tf;
    EXPECT_TRUE(fs::exists(dir / "in" / "scalers" / ("scaler_" + std::to_string(tf) + "s.json"))) << tf;
  }
  const std::string models = "--models 100=" + q(r.a / "final.json") + ",300=" + q(r.a / "missing.json");
  const std::string backtest = "backtest --ingest-dir " + q(dir / "in") + " --timeframes 5,10 --calibration-bars 200 " +
                               models + " --out-dir ";
  ASSERT_EQ(run(backtest + q(dir / "bt_a")), 0);
  ASSERT_EQ(run(backtest + q(dir / "bt_b")), 0);
  EXPECT_EQ(read_file(dir / "bt_a" / "report.csv"), read_file(dir / "bt_b" / "report.csv"));
  expect_same_tree(dir / "bt_a", dir / "bt_b");
  const auto rows = read_report_csv(dir / "bt_a" / "report.csv");
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& row : rows) {
    EXPECT_EQ(row.horizon, 100u);
    EXPECT_EQ(row.excess_return, row.model_return - row.baseline_return);
  }
  const auto errors = read_file(dir / "bt_a" / "report_errors.csv");
  EXPECT_NE(errors.find("5,300,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "bt_a" / "balance" / "tf5s_h100.csv"));
  EXPECT_TRUE(fs::exists(dir / "bt_a" / "balance" / "tf5s_baseline.csv"));
  ASSERT_EQ(run("report --report " + q(dir / "bt_a" / "report.csv") + " --out-dir " + q(dir / "rep")), 0);
  EXPECT_EQ(read_file(dir / "rep" / "report.md"), read_file(dir / "bt_a" / "report.md"));
}

TEST(Cli, BadTradeFilesMapToDataAndIoExitCodes) {
  const auto dir = fresh("empty");
  std::ofstream(dir / "trades.csv") << "timestamp_ms,price,size,side\n";
  EXPECT_EQ(run("ingest --trades " + q(dir / "trades.csv") + " --out-dir " + q(dir / "out")), 3);
  std::ofstream(dir / "noheader.csv") << "a,b\n1,2\n";
  EXPECT_EQ(run("ingest --trades " + q(dir / "noheader.csv") + " --out-dir " + q(dir / "out")), 3);
  EXPECT_EQ(run("ingest --trades " + q(dir / "absent.csv") + " --out-dir " + q(dir / "out")), 5);
}

}  // namespace
}  // namespace chaoscast
