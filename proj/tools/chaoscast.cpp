// chaoscast command-line front end.
//
//   chaoscast generate  --interval 100,1000
//   chaoscast train     --preset 0.1M --interval 100 --total-samples 1e7
//   chaoscast eval      --metrics a/metrics.csv,b/metrics.csv --horizons 100,300
//   chaoscast ingest    --trades trades.csv
//   chaoscast backtest  --models 100=run/final.json
//   chaoscast report    --report out/report.csv
//
// Global flags: --config <json>, --seed, --workers, --out-dir. Keys of the
// JSON config (top level, or nested under the subcommand name) supply
// defaults for flags; flags on the command line win.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chaoscast/backtest.hpp"
#include "chaoscast/chaos_gen.hpp"
#include "chaoscast/checkpoint.hpp"
#include "chaoscast/error.hpp"
#include "chaoscast/eval_metrics.hpp"
#include "chaoscast/manifest.hpp"
#include "chaoscast/market_ingest.hpp"
#include "chaoscast/model.hpp"
#include "chaoscast/svg.hpp"
#include "chaoscast/trainer.hpp"

namespace fs = std::filesystem;
using namespace chaoscast;

namespace {

struct Global {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string out_dir = "out";
};

void add_globals(CLI::App* cmd, Global& g) {
  cmd->add_option("--config", g.config, "JSON file supplying flag defaults")->check(CLI::ExistingFile);
  cmd->add_option("--seed", g.seed, "Base seed for all randomness");
  cmd->add_option("--workers", g.workers, "Worker threads (1 keeps runs bit-reproducible)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out-dir", g.out_dir, "Output directory");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto part : csv::split(s))
    if (!part.empty()) out.emplace_back(part);
  return out;
}

std::vector<std::uint64_t> parse_counts(const std::string& s, const std::string& what) {
  std::vector<std::uint64_t> out;
  for (const auto& p : split_list(s)) {
    const auto v = csv::parse_int(p);
    if (!v || *v < 1) throw UsageError(what + ": '" + p + "' is not a positive integer");
    out.push_back(static_cast<std::uint64_t>(*v));
  }
  if (out.empty()) throw UsageError(what + " is empty");
  return out;
}

std::uint64_t parse_count(const std::string& s, const std::string& what) {
  const auto v = csv::parse_double(s);
  if (!v || !(*v >= 1) || *v != std::floor(*v) || *v > 1e18)
    throw UsageError(what + ": '" + s + "' is not a positive integer count");
  return static_cast<std::uint64_t>(*v);
}

// Turns JSON config entries into command-line tokens placed ahead of the
// user's own tokens, so explicit flags take precedence.
std::vector<std::string> config_tokens(const fs::path& path, const std::string& command) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  std::vector<std::string> tokens;
  auto emit = [&](const std::string& key, const json& v) {
    std::string flag = "--" + key;
    for (char& c : flag)
      if (c == '_') c = '-';
    if (v.is_boolean()) {
      if (v.get<bool>()) tokens.push_back(flag);
      return;
    }
    std::string value;
    if (v.is_string()) {
      value = v.get<std::string>();
    } else if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i)
        value += (i ? "," : "") + (v[i].is_string() ? v[i].get<std::string>() : v[i].dump());
    } else {
      value = v.dump();
    }
    tokens.push_back(flag);
    tokens.push_back(value);
  };
  static const std::vector<std::string> commands{"generate", "train", "eval", "ingest", "backtest", "report"};
  for (const auto& [key, v] : j.items())
    if (std::find(commands.begin(), commands.end(), key) == commands.end() && key != "config") emit(key, v);
  if (j.contains(command) && j[command].is_object())
    for (const auto& [key, v] : j[command].items()) emit(key, v);
  return tokens;
}

// Every option of the subcommand with its resolved value.
json resolved_config(const CLI::App* cmd) {
  json j = json::object();
  for (const CLI::Option* opt : cmd->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help") continue;
    if (opt->count() > 0) {
      j[name] = opt->as<std::string>();
    } else if (!opt->get_default_str().empty()) {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

void finish(RunManifest& manifest, const CLI::App* cmd, const Global& g) {
  manifest.set_config(resolved_config(cmd));
  const fs::path path = fs::path(g.out_dir) / ("manifest_" + cmd->get_name() + ".json");
  manifest.write(path);
  std::cerr << "wrote " << path.string() << "\n";
}

// ---------------------------------------------------------------- generate

struct GenerateOpts {
  std::string intervals;
  std::size_t sequences = 2;
  std::size_t points = 10000;
  std::size_t max_lag = 20;
  std::size_t context_len = 512;
  std::size_t warmup = 1000;
};

void cmd_generate(const GenerateOpts& o, const Global& g, const CLI::App* cmd) {
  const auto intervals = parse_counts(o.intervals, "--interval");
  RunManifest manifest("generate", g.seed);
  const fs::path out(g.out_dir);
  std::vector<std::vector<std::string>> summary;
  std::vector<svg::Series> acf_series;
  for (std::size_t n = 0; n < intervals.size(); ++n) {
    const auto interval = intervals[n];
    const fs::path dir = out / ("interval_" + std::to_string(interval));

    GenConfig gc;
    gc.interval = interval;
    gc.context_len = o.context_len;
    gc.warmup_steps = o.warmup;
    BatchStream stream(g.seed, gc, o.sequences, g.workers);
    {
      csv::Writer w(dir / "sequences.csv", {"sequence", "seed", "t", "x", "y", "z"});
      const auto seqs = stream.next_batch();
      for (std::size_t s = 0; s < seqs.size(); ++s) {
        std::vector<Vec3> pts = seqs[s].inputs;
        pts.push_back(seqs[s].targets.back());
        for (std::size_t t = 0; t < pts.size(); ++t)
          w.row({csv::format(static_cast<std::uint64_t>(s)), csv::format(seqs[s].seed),
                 csv::format(static_cast<std::uint64_t>(t)), csv::format(pts[t][0]), csv::format(pts[t][1]),
                 csv::format(pts[t][2])});
      }
      w.close();
      manifest.add_output(dir / "sequences.csv");
    }

    // Diagnostics on one long resampled trajectory of a single sampled
    // system; the same system is used for every interval.
    Rng rng(derive_seed(g.seed, kValidationIndexBase - 1));
    const auto sys = sample_params(rng);
    const auto pts = resampled_trajectory(sys.params, sys.initial, gc.dt, gc.warmup_steps, interval, o.points);
    export_attractor(pts, dir / "attractor.csv");
    manifest.add_output(dir / "attractor.csv");

    csv::Writer acf(dir / "autocorrelation.csv", {"lag", "x", "y", "z"});
    svg::Series acf_y{"interval " + std::to_string(interval), {}, {}, svg::palette(n)};
    std::array<std::vector<double>, 3> comp{component(pts, 0), component(pts, 1), component(pts, 2)};
    for (std::size_t lag = 1; lag <= o.max_lag && lag + 2 < pts.size(); ++lag) {
      std::vector<std::string> row{csv::format(static_cast<std::uint64_t>(lag))};
      for (int k = 0; k < 3; ++k) row.push_back(csv::format(autocorrelation(comp[k], lag)));
      acf.row(row);
      acf_y.x.push_back(static_cast<double>(lag));
      acf_y.y.push_back(autocorrelation(comp[0], lag));
    }
    acf.close();
    manifest.add_output(dir / "autocorrelation.csv");
    acf_series.push_back(acf_y);
    summary.push_back({csv::format(interval), csv::format(autocorrelation(comp[0], 1)),
                       csv::format(autocorrelation(comp[1], 1)), csv::format(autocorrelation(comp[2], 1))});

    svg::write(dir / "attractor_xz.svg", {{"", comp[0], comp[2], svg::palette(n)}},
               {"Resampled attractor, interval " + std::to_string(interval), "x", "z", false, true});
    manifest.add_output(dir / "attractor_xz.svg");
  }
  csv::Writer w(out / "autocorrelation_summary.csv", {"interval", "lag1_x", "lag1_y", "lag1_z"});
  for (const auto& r : summary) w.row(r);
  w.close();
  manifest.add_output(out / "autocorrelation_summary.csv");
  svg::write(out / "autocorrelation_x.svg", acf_series, {"Autocorrelation of x by lag", "lag", "acf", false, false});
  manifest.add_output(out / "autocorrelation_x.svg");
  finish(manifest, cmd, g);
}

// ---------------------------------------------------------------- train

struct TrainOpts {
  std::string preset = "0.1M";
  std::optional<std::size_t> layers, d_model, heads, d_ff, context_len;
  std::string positional;
  std::uint64_t interval = 100;
  std::string total_samples = "1e6";
  std::size_t batch_size = 60;
  double lr = 1e-3, warmup_frac = 0.06, weight_decay = 0.1, clip_norm = 1.0, beta1 = 0.9, beta2 = 0.95;
  std::uint64_t eval_every = 0, checkpoint_every = 0, stop_after_step = 0;
  std::size_t val_sequences = 256;
  std::string resume;
  bool wallclock = false;
  bool quiet = false;
};

ModelConfig model_config_from(const TrainOpts& o) {
  ModelConfig c = preset_config(o.preset);
  if (o.layers) c.n_layers = *o.layers;
  if (o.d_model) {
    c.d_model = *o.d_model;
    if (!o.d_ff) c.d_ff = *o.d_model;
  }
  if (o.heads) c.n_heads = *o.heads;
  if (o.d_ff) c.d_ff = *o.d_ff;
  if (o.context_len) c.context_len = *o.context_len;
  if (o.positional == "learned") {
    c.positional = PositionalEncoding::learned;
  } else if (o.positional == "sinusoidal") {
    c.positional = PositionalEncoding::sinusoidal;
  } else if (!o.positional.empty()) {
    throw UsageError("--positional must be learned or sinusoidal");
  }
  c.validate();
  return c;
}

void cmd_train(const TrainOpts& o, const Global& g, const CLI::App* cmd) {
  const ModelConfig mc = model_config_from(o);
  TrainConfig tc;
  tc.total_samples = parse_count(o.total_samples, "--total-samples");
  tc.batch_size = o.batch_size;
  tc.base_lr = o.lr;
  tc.warmup_frac = o.warmup_frac;
  tc.weight_decay = o.weight_decay;
  tc.clip_norm = o.clip_norm;
  tc.adam_beta1 = o.beta1;
  tc.adam_beta2 = o.beta2;
  tc.eval_every = o.eval_every;
  tc.checkpoint_every = o.checkpoint_every;
  tc.interval = o.interval;
  tc.seed = g.seed;
  tc.val_sequences = o.val_sequences;
  tc.validate();

  RunManifest manifest("train", g.seed);
  const fs::path out(g.out_dir);
  TrainOptions opts;
  opts.out_dir = out;
  opts.workers = g.workers;
  opts.record_wallclock = o.wallclock;
  opts.stop_after_step = o.stop_after_step;
  if (!o.resume.empty()) {
    opts.resume = fs::path(o.resume);
    manifest.add_input(o.resume);
    manifest.add_input(checkpoint_bin_path(o.resume));
  }
  if (!o.quiet)
    opts.on_eval = [](const MetricsRecord& r) {
      std::fprintf(stderr, "step %llu samples %llu val_loss %.5g ic_y %.4f lr %.3g\n",
                   static_cast<unsigned long long>(r.step), static_cast<unsigned long long>(r.samples_seen),
                   r.val_loss, r.ic_y, r.lr);
    };

  std::fprintf(stderr, "model %zu params, %llu steps of %llu samples\n", param_count(mc),
               static_cast<unsigned long long>(tc.total_steps(mc.context_len)),
               static_cast<unsigned long long>(tc.samples_per_step(mc.context_len)));
  const TrainResult res = train(mc, tc, opts);
  manifest.add_output(out / "metrics.csv");
  for (const auto& p : res.checkpoints) {
    manifest.add_output(p);
    manifest.add_output(checkpoint_bin_path(p));
  }
  if (res.optimizer.step == tc.total_steps(mc.context_len)) {
    Checkpoint final;
    final.config = mc;
    final.step = res.optimizer.step;
    final.rng = {{"base_seed", tc.seed}, {"next_sequence_index", res.next_sequence_index}};
    final.extra = {{"train_config", tc}, {"samples_seen", res.samples_seen}};
    final.buffers.emplace_back("params", res.params.values);
    save_checkpoint(final, out / "final.json");
    manifest.add_output(out / "final.json");
    manifest.add_output(out / "final.bin");
  }

  std::vector<double> s, val, ic_x, ic_y, ic_z;
  for (const auto& r : res.metrics.records) {
    s.push_back(static_cast<double>(std::max<std::uint64_t>(r.samples_seen, 1)));
    val.push_back(r.val_loss);
    ic_x.push_back(r.ic_x);
    ic_y.push_back(r.ic_y);
    ic_z.push_back(r.ic_z);
  }
  svg::write(out / "loss.svg", {{"validation loss", s, val, svg::palette(0)}},
             {"Validation loss", "training samples", "MSE (summed over x, y, z)", true, false});
  svg::write(out / "ic.svg",
             {{"x", s, ic_x, svg::palette(0)}, {"y", s, ic_y, svg::palette(1)}, {"z", s, ic_z, svg::palette(2)}},
             {"Held-out information coefficient", "training samples", "IC", true, false});
  manifest.add_output(out / "loss.svg");
  manifest.add_output(out / "ic.svg");
  if (res.sequences_skipped)
    std::fprintf(stderr, "skipped %llu diverged sequences\n", static_cast<unsigned long long>(res.sequences_skipped));
  finish(manifest, cmd, g);
}

// ---------------------------------------------------------------- eval

struct EvalOpts {
  std::string metrics;
  std::string horizons;
  double threshold = 0.1;
  std::size_t window = 3;
  std::string dim = "y";
  std::string checkpoint;
  std::uint64_t interval = 100;
  std::size_t val_sequences = 64;
  std::size_t attractor_points = 20000;
};

void cmd_eval(const EvalOpts& o, const Global& g, const CLI::App* cmd) {
  if (o.metrics.empty() && o.checkpoint.empty()) throw UsageError("eval needs --metrics and/or --checkpoint");
  RunManifest manifest("eval", g.seed);
  const fs::path out(g.out_dir);
  const int dim = o.dim == "x" ? 0 : o.dim == "y" ? 1 : o.dim == "z" ? 2 : -1;
  if (dim < 0) throw UsageError("--dim must be x, y or z");

  if (!o.metrics.empty()) {
    const auto paths = split_list(o.metrics);
    const auto horizons = parse_counts(o.horizons, "--horizons");
    if (paths.size() != horizons.size()) throw UsageError("--metrics and --horizons need the same number of entries");
    csv::Writer curves(out / "ic_curves.csv", {"horizon", "samples_seen", "ic"});
    csv::Writer pts(out / "scaling_points.csv", {"horizon", "samples_to_threshold"});
    std::vector<ScalingPoint> reached;
    std::vector<svg::Series> plot;
    for (std::size_t i = 0; i < paths.size(); ++i) {
      manifest.add_input(paths[i]);
      const ICCurve curve = MetricsLog::read_csv(paths[i]).ic_curve(dim);
      svg::Series line{"horizon " + std::to_string(horizons[i]), {}, {}, svg::palette(i)};
      for (const auto& p : curve.points) {
        curves.row({csv::format(horizons[i]), csv::format(p.samples_seen), csv::format(p.ic)});
        if (p.samples_seen > 0) {
          line.x.push_back(static_cast<double>(p.samples_seen));
          line.y.push_back(p.ic);
        }
      }
      plot.push_back(line);
      const auto hit = samples_to_threshold(curve, o.threshold, o.window);
      pts.row({csv::format(horizons[i]), hit ? csv::format(*hit) : std::string("NotReached")});
      // A crossing at sample 0 has no logarithm, so it stays out of the fit.
      if (hit && *hit > 0) reached.push_back({static_cast<double>(horizons[i]), static_cast<double>(*hit)});
    }
    curves.close();
    pts.close();
    csv::Writer fit(out / "scaling_fit.csv", {"slope", "intercept", "r2", "slope_stderr", "n_points"});
    if (reached.size() >= 2) {
      const auto f = fit_scaling_law(reached);
      fit.row({csv::format(f.slope), csv::format(f.intercept), csv::format(f.r2), csv::format(f.slope_stderr),
               csv::format(static_cast<std::uint64_t>(f.n))});
      svg::Series measured{"samples to threshold", {}, {}, svg::palette(0)}, line{"fit", {}, {}, svg::palette(3)};
      for (const auto& p : reached) {
        measured.x.push_back(p.horizon);
        measured.y.push_back(std::log10(p.samples_to_threshold));
        line.x.push_back(p.horizon);
        line.y.push_back(f.predict_log10(p.horizon));
      }
      svg::write(out / "scaling.svg", {measured, line},
                 {"Samples to reach the IC threshold", "horizon (resampling interval)", "log10 samples", false, false});
      manifest.add_output(out / "scaling.svg");
    } else {
      std::fprintf(stderr, "fewer than two horizons reached IC %.3g; no scaling fit\n", o.threshold);
    }
    fit.close();
    svg::write(out / "ic_curves.svg", plot, {"IC during training", "training samples", "IC", true, false});
    for (const char* f : {"ic_curves.csv", "scaling_points.csv", "scaling_fit.csv", "ic_curves.svg"})
      manifest.add_output(out / f);
  }

  if (!o.checkpoint.empty()) {
    manifest.add_input(o.checkpoint);
    const auto ck = load_checkpoint(o.checkpoint);
    const auto params = ck.params();
    const auto seqs = validation_sequences(o.interval, o.val_sequences, g.seed, params.config.context_len, g.workers);
    const ModelPredictor<double> predictor(params);
    const auto pooled = pool_predictions(predictor, seqs, g.workers);
    const auto r = eval_model(predictor, seqs, g.workers);
    csv::Writer m(out / "checkpoint_eval.csv", {"interval", "sequences", "val_loss", "ic_x", "ic_y", "ic_z"});
    m.row({csv::format(o.interval), csv::format(static_cast<std::uint64_t>(seqs.size())), csv::format(r.val_loss),
           csv::format(r.ic[0]), csv::format(r.ic[1]), csv::format(r.ic[2])});
    m.close();
    std::vector<Vec3> pred, target;
    const std::size_t n = std::min(o.attractor_points, pooled.pred[0].size());
    for (std::size_t i = 0; i < n; ++i) {
      pred.push_back({pooled.pred[0][i], pooled.pred[1][i], pooled.pred[2][i]});
      target.push_back({pooled.target[0][i], pooled.target[1][i], pooled.target[2][i]});
    }
    export_attractor(pred, out / "attractor_pred.csv");
    export_attractor(target, out / "attractor_target.csv");
    svg::write(out / "attractor_pred_xz.svg",
               {{"target", component(target, 0), component(target, 2), "#7f7f7f"},
                {"prediction", component(pred, 0), component(pred, 2), svg::palette(1)}},
               {"Predicted vs target state space", "x", "z", false, true});
    for (const char* f : {"checkpoint_eval.csv", "attractor_pred.csv", "attractor_target.csv", "attractor_pred_xz.svg"})
      manifest.add_output(out / f);
    std::fprintf(stderr, "val_loss %.6g ic_x %.4f ic_y %.4f ic_z %.4f\n", r.val_loss, r.ic[0], r.ic[1], r.ic[2]);
  }
  finish(manifest, cmd, g);
}

// ---------------------------------------------------------------- ingest

struct IngestOpts {
  std::string trades;
  std::string timeframes = "5,10,15,20,25,30,60";
  std::size_t calibration_bars = 10'000;
  std::uint64_t reference_interval = 1000;
  std::size_t reference_sequences = 1000;
  std::size_t context_len = 512;
};

void cmd_ingest(const IngestOpts& o, const Global& g, const CLI::App* cmd) {
  const auto timeframes = parse_counts(o.timeframes, "--timeframes");
  RunManifest manifest("ingest", g.seed);
  manifest.add_input(o.trades);
  const fs::path out(g.out_dir);
  const auto parsed = parse_trades(o.trades);
  if (parsed.skipped) {
    std::fprintf(stderr, "skipped %zu of %zu trade rows\n", parsed.skipped, parsed.rows);
    for (const auto& why : parsed.skip_reasons) std::fprintf(stderr, "  %s\n", why.c_str());
  }
  if (parsed.trades.empty()) throw EmptyInput(o.trades + " contains no valid trades");

  const Moments ref = lorenz_reference_moments(o.reference_interval, o.reference_sequences, g.seed, o.context_len,
                                               g.workers);
  write_file_atomic(out / "reference_moments.json",
                    json{{"interval", o.reference_interval},
                         {"sequences", o.reference_sequences},
                         {"mean", ref.mean},
                         {"std", ref.std}}
                            .dump(2) +
                        "\n");
  manifest.add_output(out / "reference_moments.json");

  csv::Writer summary(out / "ingest_summary.csv", {"timeframe_s", "bars", "calibration_bars", "status"});
  for (const auto tf : timeframes) {
    const auto bars = aggregate_bars(parsed.trades, static_cast<std::int64_t>(tf));
    const fs::path bar_path = out / "bars" / ("bars_" + std::to_string(tf) + "s.csv");
    write_bars(bars, bar_path);
    manifest.add_output(bar_path);
    std::string status = "ok";
    const std::size_t n_cal = std::min(o.calibration_bars, bars.size());
    try {
      const Scaler s = fit_scaler(std::span<const Bar>(bars).first(n_cal), ref, o.reference_interval);
      const fs::path sp = out / "scalers" / ("scaler_" + std::to_string(tf) + "s.json");
      save_scaler(s, sp);
      manifest.add_output(sp);
      if (bars.size() <= o.calibration_bars + o.context_len) status = "insufficient bars for test windows";
    } catch (const DegenerateCalibration& e) {
      status = e.what();
    }
    summary.row({csv::format(tf), csv::format(static_cast<std::uint64_t>(bars.size())),
                 csv::format(static_cast<std::uint64_t>(n_cal)), status});
  }
  summary.close();
  manifest.add_output(out / "ingest_summary.csv");
  finish(manifest, cmd, g);
}

// ---------------------------------------------------------------- backtest

struct BacktestOpts {
  std::string ingest_dir;
  std::string timeframes = "5,10,15,20,25,30,60";
  std::string models;
  std::optional<std::size_t> calibration_bars;
  double long_quantile = 0.95;
  double short_quantile = 0.05;
};

void cmd_backtest(const BacktestOpts& o, const Global& g, const CLI::App* cmd) {
  RunManifest manifest("backtest", g.seed);
  const fs::path out(g.out_dir);
  const fs::path in = o.ingest_dir.empty() ? out : fs::path(o.ingest_dir);

  std::vector<HorizonModel> horizons;
  std::optional<std::size_t> context_len;
  for (const auto& entry : split_list(o.models)) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) throw UsageError("--models entries look like <horizon>=<checkpoint.json>");
    HorizonModel h;
    h.horizon = parse_counts(entry.substr(0, eq), "--models horizon").front();
    h.checkpoint = entry.substr(eq + 1);
    if (fs::exists(h.checkpoint)) {
      manifest.add_input(h.checkpoint);
      manifest.add_input(checkpoint_bin_path(h.checkpoint));
      const auto ck = load_checkpoint(h.checkpoint);
      if (context_len && *context_len != ck.config.context_len)
        throw UsageError("all models must share one context length");
      context_len = ck.config.context_len;
      h.params = std::make_shared<const ModelParams<double>>(ck.params());
    }
    horizons.push_back(std::move(h));
  }
  if (horizons.empty()) throw UsageError("--models is required");

  GridConfig gcfg;
  gcfg.context_len = context_len.value_or(512);
  gcfg.strategy = {o.long_quantile, o.short_quantile};
  gcfg.strategy.validate();
  gcfg.workers = g.workers;
  std::vector<TimeframeData> data;
  for (const auto tf : parse_counts(o.timeframes, "--timeframes")) {
    const fs::path bars = in / "bars" / ("bars_" + std::to_string(tf) + "s.csv");
    const fs::path scaler = in / "scalers" / ("scaler_" + std::to_string(tf) + "s.json");
    if (!fs::exists(bars) || !fs::exists(scaler)) {
      std::fprintf(stderr, "timeframe %llus: no ingested bars/scaler under %s, skipped\n",
                   static_cast<unsigned long long>(tf), in.string().c_str());
      continue;
    }
    manifest.add_input(bars);
    manifest.add_input(scaler);
    TimeframeData d{static_cast<std::int64_t>(tf), read_bars(bars), load_scaler(scaler), std::nullopt};
    // Test windows start after the bars the scaler was fitted on.
    d.calibration_bars = o.calibration_bars.value_or(d.scaler.calibration_count);
    if (*d.calibration_bars < d.scaler.calibration_count)
      throw UsageError("--calibration-bars is shorter than the scaler's calibration segment");
    data.push_back(std::move(d));
  }
  if (data.empty()) throw InsufficientData("no ingested timeframes found under " + in.string());

  const BacktestReport report = grid_report(data, horizons, gcfg);
  write_report_csv(report, out / "report.csv");
  write_report_errors(report, out / "report_errors.csv");
  manifest.add_output(out / "report.csv");
  manifest.add_output(out / "report_errors.csv");
  for (const auto& b : report.baselines) {
    if (!b.ok()) {
      std::fprintf(stderr, "timeframe %llds: %s\n", static_cast<long long>(b.timeframe_s), b.error.c_str());
      continue;
    }
    const std::string tf = std::to_string(b.timeframe_s);
    const fs::path p = out / "balance" / ("tf" + tf + "s_baseline.csv");
    write_balance_curve(b.run, p);
    manifest.add_output(p);
    std::vector<svg::Series> lines;
    auto as_series = [](const StrategyRun& r, std::string label, const char* color) {
      svg::Series s{std::move(label), {}, r.result.balance_curve, color};
      for (std::size_t i = 0; i < r.t_pred.size(); ++i) s.x.push_back(static_cast<double>(i));
      return s;
    };
    lines.push_back(as_series(b.run, "baseline", "#7f7f7f"));
    std::size_t k = 0;
    for (const auto& c : report.cells) {
      if (c.timeframe_s != b.timeframe_s) continue;
      if (!c.ok()) {
        std::fprintf(stderr, "cell %llds / h%llu: %s\n", static_cast<long long>(c.timeframe_s),
                     static_cast<unsigned long long>(c.horizon), c.error.c_str());
        continue;
      }
      const fs::path cp = out / "balance" / ("tf" + tf + "s_h" + std::to_string(c.horizon) + ".csv");
      write_balance_curve(c.run, cp);
      manifest.add_output(cp);
      lines.push_back(as_series(c.run, "h=" + std::to_string(c.horizon), svg::palette(k++)));
    }
    const fs::path sp = out / "balance" / ("tf" + tf + "s.svg");
    svg::write(sp, lines, {"Cumulative return, " + tf + "s bars", "test window", "cumulative return", false, false});
    manifest.add_output(sp);
  }
  const std::string table = render_report(report_rows(report));
  write_file_atomic(out / "report.md", table);
  manifest.add_output(out / "report.md");
  std::cout << table;
  finish(manifest, cmd, g);
}

// ---------------------------------------------------------------- report

struct ReportOpts {
  std::string report;
};

void cmd_report(const ReportOpts& o, const Global& g, const CLI::App* cmd) {
  RunManifest manifest("report", g.seed);
  const fs::path path = o.report.empty() ? fs::path(g.out_dir) / "report.csv" : fs::path(o.report);
  manifest.add_input(path);
  const std::string table = render_report(read_report_csv(path));
  const fs::path md = fs::path(g.out_dir) / "report.md";
  write_file_atomic(md, table);
  manifest.add_output(md);
  std::cout << table;
  finish(manifest, cmd, g);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chaotic time-series pretraining and zero-shot market backtests"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CHAOSCAST_VERSION));
  app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  Global g;
  GenerateOpts gen;
  TrainOpts tr;
  EvalOpts ev;
  IngestOpts in;
  BacktestOpts bt;
  ReportOpts rp;

  auto* generate = app.add_subcommand("generate", "Generate sequences and resampling diagnostics");
  add_globals(generate, g);
  generate->add_option("--interval", gen.intervals, "Resampling intervals, comma separated")->required();
  generate->add_option("--sequences", gen.sequences, "Training sequences exported per interval");
  generate->add_option("--points", gen.points, "Resampled points for the diagnostics");
  generate->add_option("--max-lag", gen.max_lag, "Largest autocorrelation lag");
  generate->add_option("--context-len", gen.context_len, "Context length of exported sequences");
  generate->add_option("--warmup", gen.warmup, "Discarded integration steps");

  auto* train_cmd = app.add_subcommand("train", "Streaming single-epoch pretraining");
  add_globals(train_cmd, g);
  train_cmd->add_option("--preset", tr.preset, "Model size preset: 0.1M, 1M or 10M");
  train_cmd->add_option("--layers", tr.layers);
  train_cmd->add_option("--d-model", tr.d_model);
  train_cmd->add_option("--heads", tr.heads);
  train_cmd->add_option("--d-ff", tr.d_ff);
  train_cmd->add_option("--context-len", tr.context_len);
  train_cmd->add_option("--positional", tr.positional, "learned or sinusoidal");
  train_cmd->add_option("--interval", tr.interval, "Resampling interval (predictive horizon)");
  train_cmd->add_option("--total-samples", tr.total_samples, "Training samples, e.g. 1e7");
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate");
  train_cmd->add_option("--warmup-frac", tr.warmup_frac);
  train_cmd->add_option("--weight-decay", tr.weight_decay);
  train_cmd->add_option("--clip-norm", tr.clip_norm);
  train_cmd->add_option("--beta1", tr.beta1);
  train_cmd->add_option("--beta2", tr.beta2);
  train_cmd->add_option("--eval-every", tr.eval_every, "Evaluate every N steps (0: start and end only)");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint every N steps (0: end only)");
  train_cmd->add_option("--stop-after-step", tr.stop_after_step, "Stop early with a checkpoint at this step");
  train_cmd->add_option("--val-sequences", tr.val_sequences, "Held-out sequences per evaluation");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint manifest to continue from");
  train_cmd->add_flag("--wallclock", tr.wallclock, "Record elapsed seconds in metrics.csv (breaks byte-reproducibility)");
  train_cmd->add_flag("--quiet", tr.quiet);

  auto* eval_cmd = app.add_subcommand("eval", "IC curves, threshold crossings and scaling fit");
  add_globals(eval_cmd, g);
  eval_cmd->add_option("--metrics", ev.metrics, "metrics.csv files, comma separated");
  eval_cmd->add_option("--horizons", ev.horizons, "Horizon of each metrics file");
  eval_cmd->add_option("--threshold", ev.threshold, "IC benchmark level");
  eval_cmd->add_option("--window", ev.window, "Moving-average window for threshold detection");
  eval_cmd->add_option("--dim", ev.dim, "IC dimension: x, y or z");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Also evaluate this checkpoint on held-out data");
  eval_cmd->add_option("--interval", ev.interval, "Resampling interval for --checkpoint evaluation");
  eval_cmd->add_option("--val-sequences", ev.val_sequences);
  eval_cmd->add_option("--attractor-points", ev.attractor_points);

  auto* ingest = app.add_subcommand("ingest", "Aggregate trades into bars and fit scalers");
  add_globals(ingest, g);
  ingest->add_option("--trades", in.trades, "CSV with timestamp_ms,price,size,side")->required();
  ingest->add_option("--timeframes", in.timeframes, "Bar widths in seconds, comma separated");
  ingest->add_option("--calibration-bars", in.calibration_bars);
  ingest->add_option("--reference-interval", in.reference_interval);
  ingest->add_option("--reference-sequences", in.reference_sequences);
  ingest->add_option("--context-len", in.context_len);

  auto* backtest = app.add_subcommand("backtest", "Quantile long/short backtest over timeframes x horizons");
  add_globals(backtest, g);
  backtest->add_option("--ingest-dir", bt.ingest_dir, "Output directory of `ingest` (default: --out-dir)");
  backtest->add_option("--timeframes", bt.timeframes);
  backtest->add_option("--models", bt.models, "horizon=checkpoint.json pairs, comma separated");
  backtest->add_option("--calibration-bars", bt.calibration_bars);
  backtest->add_option("--long-quantile", bt.long_quantile);
  backtest->add_option("--short-quantile", bt.short_quantile);

  auto* report = app.add_subcommand("report", "Render report.csv as a table with best/second-best marks");
  add_globals(report, g);
  report->add_option("--report", rp.report, "report.csv (default: <out-dir>/report.csv)");

  try {
    // Splice config-file defaults in ahead of the user's own flags.
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == "--config" && !args.empty()) {
        const auto extra = config_tokens(args[i + 1], args.front());
        args.insert(args.begin() + 1, extra.begin(), extra.end());
        break;
      }
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::usage);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  }

  try {
    if (*generate) cmd_generate(gen, g, generate);
    if (*train_cmd) cmd_train(tr, g, train_cmd);
    if (*eval_cmd) cmd_eval(ev, g, eval_cmd);
    if (*ingest) cmd_ingest(in, g, ingest);
    if (*backtest) cmd_backtest(bt, g, backtest);
    if (*report) cmd_report(rp, g, report);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::io);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
