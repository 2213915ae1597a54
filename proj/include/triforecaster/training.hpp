#pragma once
// Optimizer, objective, training loop and evaluation.
#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "triforecaster/config.hpp"
#include "triforecaster/data.hpp"
#include "triforecaster/models.hpp"

namespace triforecaster {

/// Adam with bias correction. Step counts and moments are kept per
/// parameter; parameters whose gradient was not touched since the last
/// zero_grad() are skipped entirely, as if absent from the step.
class Adam {
 public:
  Adam(ParamList params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8);

  void step();
  void zero_grad();

  const ParamList& params() const { return params_; }
  std::size_t steps(std::size_t i) const { return steps_[i]; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  ParamList params_;
  double lr_, beta1_, beta2_, epsilon_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> steps_;
};

/// mean((pred - target)^2) + alpha * mean(contrastive). `contrastive` holds
/// per-sample losses and may be undefined when alpha is zero.
Tensor total_loss(const Tensor& prediction, const Tensor& target, const Tensor& contrastive, double alpha);

/// Per-sample contrastive losses for N anchors. anchors and positives are
/// [N, ...]; negatives is [N * K, ...] with sample i's negatives at rows
/// i*K .. i*K+K-1. Returns [N].
Tensor batched_contrastive(const Tensor& anchors, const Tensor& positives, const Tensor& negatives, double tau);

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t count = 0;  // predicted scalars
};

struct EvalResult {
  std::vector<std::string> regions;
  std::vector<Metrics> per_region;
  double mean_mse = 0.0;  // mean over regions
  double mean_mae = 0.0;
  nlohmann::json to_json() const;
};

enum class Split { kTrain, kVal, kTest };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);
const std::vector<std::size_t>& split_starts(const RegionData& region, Split split);

/// Normalized-scale predictions [n, H] for the given windows of one region,
/// computed in contiguous chunks of batch_size.
std::vector<double> predict(const Forecaster& model, const Dataset& data, std::size_t region,
                            std::span<const std::size_t> starts, const TrainConfig& cfg);

/// MSE/MAE on the normalized scale over all windows x horizon steps of a split.
/// Deterministic; regions run on up to `threads` threads.
EvalResult evaluate(const Forecaster& model, const Dataset& data, Split split, const TrainConfig& cfg,
                    std::size_t threads = 1);

struct HistoryRow {
  std::size_t epoch = 0;
  std::string region;  // region id, or "mean"
  std::string split;   // "train" | "val"
  double mse = 0.0;
  double mae = 0.0;
  double loss = 0.0;
};

struct TrainOptions {
  std::size_t threads = 1;
  std::function<void(std::size_t epoch, std::span<const HistoryRow> rows)> on_epoch;
  /// Checked after each epoch; returning true ends training there.
  std::function<bool(std::size_t epoch, std::span<const HistoryRow> rows)> stop_when;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t epochs_run = 0;
  std::vector<std::size_t> best_epoch;  // per region
  EvalResult best_val;                  // validation metrics at each region's best epoch
  std::vector<std::size_t> steps_per_region;
};

/// Trains in place and leaves the model at its best-on-validation parameters.
TrainResult train(Forecaster& model, const Dataset& data, const TrainConfig& cfg, const TrainOptions& options = {});

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows);

}  // namespace triforecaster
