// triforecaster: train / evaluate / forecast / synth / gradcheck.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "triforecaster/config.hpp"
#include "triforecaster/data.hpp"
#include "triforecaster/errors.hpp"
#include "triforecaster/gradcheck.hpp"
#include "triforecaster/models.hpp"
#include "triforecaster/synth.hpp"
#include "triforecaster/training.hpp"

namespace fs = std::filesystem;
using namespace triforecaster;
using nlohmann::json;

namespace {

constexpr int kUsageError = 2;

// Thrown for missing inputs the caller named explicitly (exit code 2).
struct NotFound : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::size_t run_threads() {
  const char* env = std::getenv("RUN_THREADS");
  if (!env || !*env) return 1;
  try {
    const long v = std::stol(env);
    return v > 0 ? static_cast<std::size_t>(v) : 1;
  } catch (const std::exception&) {
    throw ConfigError(std::string("RUN_THREADS must be a positive integer, got '") + env + "'");
  }
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path.string());
  json j;
  in >> j;
  return j;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

fs::path manifest_path(const fs::path& data) {
  if (!fs::exists(data)) throw NotFound("data directory not found: " + data.string());
  return fs::is_directory(data) ? data / "manifest.json" : data;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void print_eval(const EvalResult& r, std::string_view split) {
  std::printf("%-16s %-6s %-24s %-24s\n", "region", "split", "mse", "mae");
  for (std::size_t i = 0; i < r.regions.size(); ++i) {
    std::printf("%-16s %-6.*s %-24s %-24s\n", r.regions[i].c_str(), static_cast<int>(split.size()), split.data(),
                fmt(r.per_region[i].mse).c_str(), fmt(r.per_region[i].mae).c_str());
  }
  std::printf("%-16s %-6.*s %-24s %-24s\n", "mean", static_cast<int>(split.size()), split.data(),
              fmt(r.mean_mse).c_str(), fmt(r.mean_mae).c_str());
}

// A trained run loaded back from its directory.
struct LoadedRun {
  TrainConfig cfg;
  Dataset data;
  std::unique_ptr<Forecaster> model;
};

LoadedRun load_run(const fs::path& run) {
  if (!fs::is_directory(run) || !fs::exists(run / "config.json")) throw NotFound("run directory not found: " + run.string());
  LoadedRun out{load_config(run / "config.json"), {}, nullptr};
  const json inputs = read_json(run / "inputs.json");
  out.data = load_dataset(inputs.at("manifest_path").get<std::string>(), out.cfg.train_stride, out.cfg.eval_stride);
  out.model = build_model(out.cfg, out.data.dims());
  const CheckpointMeta meta = load_checkpoint(run / "checkpoints" / "best", out.model->parameters());
  if (meta.config_hash != out.cfg.hash()) {
    throw DataError("checkpoint was written for config " + meta.config_hash + ", run config hashes to " + out.cfg.hash());
  }
  return out;
}

void write_forecasts(const fs::path& dir, const Forecaster& model, const Dataset& data, const TrainConfig& cfg) {
  fs::create_directories(dir);
  const std::size_t L = data.lookback();
  const std::size_t H = data.horizon();
  for (std::size_t r = 0; r < data.regions.size(); ++r) {
    const RegionData& region = data.regions[r];
    // Consecutive non-overlapping horizons across the test span.
    const auto origins = window_starts_in(region.bounds.test_begin, region.bounds.length, L, H, H);
    std::ofstream out(dir / (region.raw.id + ".csv"), std::ios::binary);
    out << "origin,timestamp,forecast,actual\n";
    if (origins.empty()) continue;
    const auto pred = predict(model, data, r, origins, cfg);
    for (std::size_t i = 0; i < origins.size(); ++i) {
      const std::size_t first = origins[i] + L;
      for (std::size_t h = 0; h < H; ++h) {
        out << region.raw.timestamp_text[first] << ',' << region.raw.timestamp_text[first + h] << ','
            << fmt(data.normalizer.denormalize_load(region.raw.id, pred[i * H + h])) << ','
            << fmt(region.raw.load()[first + h]) << '\n';
      }
    }
  }
}

int cmd_train(const std::string& config_path, const fs::path& data_dir, const fs::path& out_dir,
              const std::optional<std::string>& model, const std::optional<std::string>& ablate,
              const std::optional<std::uint64_t>& seed) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  if (model) cfg.model = parse_model_kind(*model);
  if (ablate) cfg.ablation = parse_ablation(*ablate);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  if (cfg.ablation != Ablation::kNone && cfg.model != ModelKind::kTriForecaster) {
    throw ConfigError("--ablate applies to the triforecaster model only");
  }
  const fs::path manifest = fs::absolute(manifest_path(data_dir));
  const std::size_t threads = run_threads();

  Dataset data = load_dataset(manifest, cfg.train_stride, cfg.eval_stride);
  auto net = build_model(cfg, data.dims());

  fs::create_directories(out_dir / "checkpoints");
  write_json(out_dir / "config.json", to_json(cfg));
  json inputs;
  inputs["manifest_path"] = manifest.string();
  inputs["manifest"] = data.manifest.to_json();
  inputs["files"] = json::object();
  for (const auto& r : data.manifest.regions) {
    const auto path = data.manifest.resolve(r);
    inputs["files"][r.id] = {{"path", fs::absolute(path).string()}, {"fnv1a64", file_digest(path)}};
  }
  write_json(out_dir / "inputs.json", inputs);

  std::fprintf(stderr, "model %s (%zu parameters), %zu regions, config %s\n", std::string(net->kind()).c_str(),
               param_count(*net), data.regions.size(), cfg.hash().c_str());
  TrainOptions options;
  options.threads = threads;
  options.on_epoch = [](std::size_t epoch, std::span<const HistoryRow> rows) {
    double train = std::nan(""), val = std::nan("");
    for (const auto& r : rows) {
      if (r.region == "mean" && r.split == "train") train = r.loss;
      if (r.region == "mean" && r.split == "val") val = r.mse;
    }
    std::fprintf(stderr, "epoch %4zu  train loss %.6g  val mse %.6g\n", epoch, train, val);
  };
  const TrainResult result = train(*net, data, cfg, options);

  write_history_csv(out_dir / "history.csv", result.history);
  save_checkpoint(out_dir / "checkpoints" / "best", net->parameters(), CheckpointMeta{cfg.hash(), cfg.seed});

  json metrics;
  metrics["model"] = std::string(net->kind());
  metrics["ablation"] = std::string(to_string(cfg.ablation));
  metrics["config_hash"] = cfg.hash();
  metrics["param_count"] = param_count(*net);
  metrics["epochs_run"] = result.epochs_run;
  metrics["best_epoch"] = json::object();
  for (std::size_t r = 0; r < data.regions.size(); ++r) metrics["best_epoch"][data.regions[r].raw.id] = result.best_epoch[r];
  bool has_val = true, has_test = true;
  for (const auto& r : data.regions) {
    has_val = has_val && !r.windows.val.empty();
    has_test = has_test && !r.windows.test.empty();
  }
  if (has_val) metrics["val"] = result.best_val.to_json();
  if (has_test) {
    const EvalResult test = evaluate(*net, data, Split::kTest, cfg, threads);
    metrics["test"] = test.to_json();
    print_eval(test, "test");
  }
  write_json(out_dir / "metrics.json", metrics);
  write_forecasts(out_dir / "forecasts", *net, data, cfg);
  return 0;
}

int cmd_evaluate(const fs::path& run, const std::string& split_name) {
  const Split split = parse_split(split_name);
  LoadedRun loaded = load_run(run);
  const EvalResult result = evaluate(*loaded.model, loaded.data, split, loaded.cfg, run_threads());
  print_eval(result, split_name);
  json metrics = fs::exists(run / "metrics.json") ? read_json(run / "metrics.json") : json::object();
  metrics[split_name] = result.to_json();
  write_json(run / "metrics.json", metrics);
  return 0;
}

int cmd_forecast(const fs::path& run, const std::string& region_id, const std::string& at, const std::string& out_path) {
  LoadedRun loaded = load_run(run);
  const Dataset& data = loaded.data;
  std::size_t region = 0;
  try {
    region = data.region_index(region_id);
  } catch (const DataError&) {
    throw NotFound("unknown region '" + region_id + "'");
  }
  const RegionSeries& raw = data.regions[region].raw;
  const std::int64_t instant = parse_timestamp(at).instant;
  std::size_t row = raw.length();
  for (std::size_t i = 0; i < raw.length(); ++i) {
    if (raw.timestamps[i].instant == instant) {
      row = i;
      break;
    }
  }
  const std::size_t L = data.lookback();
  const std::size_t H = data.horizon();
  if (row == raw.length()) throw DataError("timestamp " + at + " is not in region '" + region_id + "'");
  if (row < L || row + H > raw.length()) {
    throw DataError("forecast at " + at + " needs " + std::to_string(L) + " rows of history and " + std::to_string(H) +
                    " rows of future covariates");
  }
  const std::size_t starts[] = {row - L};
  const auto pred = predict(*loaded.model, data, region, starts, loaded.cfg);
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path, std::ios::binary);
    if (!file) throw DataError("cannot write " + out_path);
  }
  std::ostream& out = out_path.empty() ? std::cout : file;
  out << "timestamp,forecast\n";
  for (std::size_t h = 0; h < H; ++h) {
    out << raw.timestamp_text[row + h] << ',' << fmt(data.normalizer.denormalize_load(region_id, pred[h])) << '\n';
  }
  return 0;
}

int cmd_gradcheck(double tolerance) {
  bool ok = true;
  for (ModelKind kind : {ModelKind::kTriForecaster, ModelKind::kMtl, ModelKind::kStl}) {
    const TrainConfig cfg = tiny_config(kind);
    const ModelDims dims = tiny_dims();
    const auto net = build_model(cfg, dims);
    const GradcheckResult r = gradcheck_model(*net, dims, cfg.seed);
    const bool pass = r.max_rel_error <= tolerance;
    ok = ok && pass;
    std::printf("%-14s params %6zu  max rel err %.3e  max abs err %.3e  worst %s  %s\n",
                std::string(to_string(kind)).c_str(), r.checked, r.max_rel_error, r.max_abs_error, r.worst.c_str(),
                pass ? "PASS" : "FAIL");
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-region load forecasting"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, run_dir, split = "test", region, at, forecast_out;
  std::optional<std::string> model, ablate;
  std::optional<std::uint64_t> seed;
  auto* train_cmd = app.add_subcommand("train", "Train a model and populate a run directory");
  train_cmd->add_option("--config", config_path, "JSON config; omitted keys take defaults");
  train_cmd->add_option("--data", data_dir, "Dataset directory (with manifest.json) or manifest path")->required();
  train_cmd->add_option("--out", out_dir, "Run directory to create")->required();
  train_cmd->add_option("--model", model, "triforecaster|mtl|stl");
  train_cmd->add_option("--ablate", ablate, "none|regionmixer|contextmoe|timemoe");
  train_cmd->add_option("--seed", seed, "Overrides the config seed");

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a trained run");
  eval_cmd->add_option("--run", run_dir, "Run directory")->required();
  eval_cmd->add_option("--split", split, "val|test");

  auto* forecast_cmd = app.add_subcommand("forecast", "Emit one denormalized H-step forecast");
  forecast_cmd->add_option("--run", run_dir, "Run directory")->required();
  forecast_cmd->add_option("--region", region, "Region id")->required();
  forecast_cmd->add_option("--at", at, "Timestamp of the first forecast step")->required();
  forecast_cmd->add_option("--out", forecast_out, "Output CSV (default stdout)");

  SynthOptions synth;
  std::string synth_out;
  std::optional<int> val_days, test_days;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic multi-region dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--regions", synth.regions, "Number of regions")->capture_default_str();
  synth_cmd->add_option("--days", synth.days, "Days of data")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--interval", synth.interval_minutes, "Minutes per step")->capture_default_str();
  synth_cmd->add_option("--noise", synth.noise_sd, "Load noise stddev")->capture_default_str();
  synth_cmd->add_option("--lookback", synth.lookback, "Manifest lookback L")->capture_default_str();
  synth_cmd->add_option("--horizon", synth.horizon, "Manifest horizon H")->capture_default_str();
  synth_cmd->add_option("--val-days", val_days, "Validation span in days (default: calendar month)");
  synth_cmd->add_option("--test-days", test_days, "Test span in days (default: calendar month)");

  bool tiny = true;
  double tolerance = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every model's gradients");
  grad_cmd->add_flag("--tiny", tiny, "Use the tiny configuration (the only one supported)");
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path, data_dir, out_dir, model, ablate, seed);
    if (*eval_cmd) return cmd_evaluate(run_dir, split);
    if (*forecast_cmd) return cmd_forecast(run_dir, region, at, forecast_out);
    if (*synth_cmd) {
      synth.val_span_days = val_days;
      synth.test_span_days = test_days;
      write_synth_dataset(synth_out, synth);
      std::fprintf(stderr, "wrote %zu regions to %s\n", synth.regions, synth_out.c_str());
      return 0;
    }
    if (*grad_cmd) return cmd_gradcheck(tolerance);
  } catch (const NotFound& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
