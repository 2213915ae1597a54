#pragma once
// Region CSV ingestion, calendar features, windowing, chronological splits,
// per-region z-scoring and contrastive pair selection.
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "triforecaster/models.hpp"
#include "triforecaster/rng.hpp"
#include "triforecaster/tensor.hpp"

namespace triforecaster {

struct RegionFile {
  std::string id;
  std::filesystem::path file;  // relative paths resolve against the manifest's directory
};

struct DatasetManifest {
  int interval_minutes = 60;
  std::size_t lookback = 0;
  std::size_t horizon = 0;
  std::vector<RegionFile> regions;
  std::vector<std::string> future_covariates;  // CSV columns known over the horizon
  // Absent: the last calendar month is test, the one before it validation.
  std::optional<int> val_span_days;
  std::optional<int> test_span_days;
  std::filesystem::path base_dir;  // not serialized

  static DatasetManifest load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;
  std::filesystem::path resolve(const RegionFile& region) const;
};

/// Wall-clock calendar fields of a parsed ISO-8601 timestamp.
struct Timestamp {
  std::int64_t instant = 0;     // seconds since the epoch, UTC
  std::int64_t local_days = 0;  // days since 1970-01-01 in the written offset
  int minute_of_day = 0;        // in the written offset
  int weekday = 0;              // Monday = 0
  int year = 0;
  unsigned month = 0;
};

/// Accepts YYYY-MM-DD[T| ]HH:MM[:SS[.fff]][Z|+HH:MM|-HH:MM]. Throws DataError.
Timestamp parse_timestamp(std::string_view text);
/// YYYY-MM-DDTHH:MM:SS for a UTC instant.
std::string format_timestamp(std::int64_t instant);

/// Number of calendar features appended to the future covariates:
/// sin/cos of hour-of-day and a Monday-first day-of-week one-hot.
inline constexpr std::size_t kCalendarFeatures = 9;
std::vector<std::string> calendar_feature_names();
void calendar_features(const Timestamp& ts, std::span<double> out);

struct RegionSeries {
  std::string id;
  std::vector<std::string> timestamp_text;
  std::vector<Timestamp> timestamps;
  std::vector<std::string> history_names;  // "load" first, then every CSV covariate
  std::vector<std::vector<double>> history;  // [C][len]
  std::vector<std::string> future_names;   // listed covariates, then calendar features
  std::vector<std::vector<double>> future;   // [Cz][len]

  std::size_t length() const { return timestamps.size(); }
  std::size_t history_channels() const { return history.size(); }
  std::size_t future_channels() const { return future.size(); }
  const std::vector<double>& load() const { return history.front(); }
};

/// Parses one region CSV (`timestamp,load,<covariates>...`). Rejects missing
/// columns, NaN or unparsable values, and timestamps that are not strictly
/// increasing at `interval_minutes`, naming the offending row.
RegionSeries read_region_csv(const std::filesystem::path& path, const std::string& id, int interval_minutes,
                             std::span<const std::string> future_covariates);

/// Reads every region of the manifest; all regions must share one schema and be
/// at least lookback + horizon long.
std::vector<RegionSeries> ingest(const DatasetManifest& manifest);

/// Window starts s = 0, stride, ... with s + L + H <= len.
std::vector<std::size_t> window_starts(std::size_t length, std::size_t lookback, std::size_t horizon,
                                       std::size_t stride = 1);
/// Window starts whose whole [s, s + L + H) lies in [begin, end).
std::vector<std::size_t> window_starts_in(std::size_t begin, std::size_t end, std::size_t lookback,
                                          std::size_t horizon, std::size_t stride = 1);

struct Sample {
  std::string region;
  Tensor history;  // [L, C]
  Tensor future;   // [H, Cz]
  Tensor target;   // [H, 1]
  std::size_t start = 0;
  std::vector<double> context;  // mean of future over the horizon, [Cz]
};

Sample make_sample(const RegionSeries& series, std::size_t start, std::size_t lookback, std::size_t horizon);
std::vector<Sample> window(const RegionSeries& series, std::size_t lookback, std::size_t horizon,
                           std::size_t stride = 1);
std::vector<double> context_vector(const RegionSeries& series, std::size_t start, std::size_t lookback,
                                   std::size_t horizon);

/// Row boundaries: train = [0, val_begin), val = [val_begin, test_begin), test = [test_begin, len).
struct SplitBounds {
  std::size_t val_begin = 0;
  std::size_t test_begin = 0;
  std::size_t length = 0;
};

/// Spans counted in rows from the end of the series.
SplitBounds split_by_rows(std::size_t length, std::size_t val_rows, std::size_t test_rows);
/// Test = the calendar month of the last row, val = the month before it.
SplitBounds split_by_calendar_months(const RegionSeries& series);
SplitBounds split_for(const DatasetManifest& manifest, const RegionSeries& series);

struct SplitWindows {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};
SplitWindows split_windows(const SplitBounds& bounds, std::size_t lookback, std::size_t horizon,
                           std::size_t train_stride = 1, std::size_t eval_stride = 1);

struct NormStats {
  std::vector<double> history_mean, history_std;
  std::vector<double> future_mean, future_std;
};

/// Per-channel mean and population stddev over rows [0, train_end); constant
/// channels get stddev 1.
NormStats compute_stats(const RegionSeries& series, std::size_t train_end);

class Normalizer {
 public:
  void add(const std::string& region, NormStats stats) { stats_[region] = std::move(stats); }
  const NormStats& stats(const std::string& region) const;
  bool contains(const std::string& region) const { return stats_.count(region) != 0; }

  std::vector<double> normalize_history(const std::string& region, std::size_t channel,
                                        std::span<const double> x) const;
  std::vector<double> denormalize_history(const std::string& region, std::size_t channel,
                                          std::span<const double> x) const;
  double denormalize_load(const std::string& region, double x) const;
  RegionSeries normalize(const RegionSeries& series) const;

  nlohmann::json to_json() const;

 private:
  std::map<std::string, NormStats> stats_;
};

/// One region, z-scored, with its window index sets.
struct RegionData {
  RegionSeries raw;
  RegionSeries normalized;
  SplitBounds bounds;
  SplitWindows windows;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<RegionData> regions;
  Normalizer normalizer;

  std::size_t lookback() const { return manifest.lookback; }
  std::size_t horizon() const { return manifest.horizon; }
  ModelDims dims() const;
  /// Region position for an id; throws DataError if absent.
  std::size_t region_index(const std::string& id) const;
};

Dataset prepare_dataset(DatasetManifest manifest, std::vector<RegionSeries> series, std::size_t train_stride = 1,
                        std::size_t eval_stride = 1);
Dataset load_dataset(const std::filesystem::path& manifest_path, std::size_t train_stride = 1,
                     std::size_t eval_stride = 1);

struct Batch {
  std::size_t region = 0;
  std::vector<std::size_t> starts;
  Tensor history;  // [N, L, C]
  Tensor future;   // [N, H, Cz], undefined if Cz == 0
  Tensor target;   // [N, H, 1]
};

Batch make_batch(const RegionSeries& series, std::size_t region, std::span<const std::size_t> starts,
                 std::size_t lookback, std::size_t horizon);
Batch make_batch(const Dataset& data, std::size_t region, std::span<const std::size_t> starts);

/// Fixed per-region structure for contrastive pair sampling.
class ContrastivePool {
 public:
  /// `starts`: the region's training windows. The positive of each window is
  /// its nearest non-overlapping neighbour by Euclidean distance of context
  /// vectors; negatives come from the farthest `negative_fraction` of the
  /// remaining pool.
  ContrastivePool(const RegionSeries& series, std::vector<std::size_t> starts, std::size_t lookback,
                  std::size_t horizon, std::size_t negatives, double negative_fraction);

  struct Pair {
    std::size_t positive;                // window start
    std::vector<std::size_t> negatives;  // window starts, distinct
  };

  std::size_t size() const { return starts_.size(); }
  const std::vector<std::size_t>& starts() const { return starts_; }
  /// Index of a window start in the pool; throws ContractError if absent.
  std::size_t position(std::size_t start) const;
  std::size_t positive_of(std::size_t index) const { return positive_[index]; }
  double distance(std::size_t i, std::size_t j) const;

  /// Pair for pool entry `index`; negatives drawn uniformly without replacement.
  Pair sample(std::size_t index, Rng& rng) const;
  /// Pairs for every pool entry, in pool order.
  std::vector<Pair> sample_all(Rng& rng) const;

 private:
  std::vector<std::size_t> starts_;
  std::map<std::size_t, std::size_t> position_;
  std::size_t dim_ = 0;
  std::vector<double> contexts_;  // [P, dim]
  std::size_t negatives_ = 0;
  std::size_t window_ = 0;
  std::vector<std::size_t> positive_;  // pool indices
  std::vector<double> threshold_;      // per entry: smallest admissible negative distance
};

/// Single-anchor form: returns (positive, negatives) as window starts.
ContrastivePool::Pair contrastive_pairs(const ContrastivePool& pool, std::size_t anchor_start, Rng& rng);

}  // namespace triforecaster
