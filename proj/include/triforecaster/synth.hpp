#pragma once
// Synthetic multi-region load generator.
//
// Region t at step k (hour-of-day h in [0, 24), day index t_days from the
// start, weekend flag w, Monday 2023-01-02 00:00 as the origin):
//
//   daily(h) = exp(-((h - 12) / 3)^2) + 0.8 exp(-((h - 20) / 2.5)^2)
//   tod(h)   = 0.3 + 0.7 exp(-((h - 14) / 4)^2)
//   temp     = offset + 8 cos(2 pi (t_days - 200) / 365) + 4 sin(2 pi (h - 9) / 24) + u
//              u_k = 0.98 u_{k-1} + eta_k,  eta ~ N(0, 0.25^2),  u_{-1} = 0
//   price    = 1.0 if 8 <= h < 22 else 0.5
//   load     = base + a daily + b w + (c + c' w) temp tod + d price + eps,  eps ~ N(0, sigma^2)
//
// Coefficients are drawn per region, uniformly from
//   base [80, 120], a [10, 30], b [-20, -5], c [-3, 3], c' [-2, 2], d [-20, 0], offset [-3, 3].
//
// Region t uses the generator Rng(seed, 100 + t): first the seven
// coefficients in the order listed above, then for each step eta then eps
// (each drawn only when its standard deviation is positive).
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "triforecaster/data.hpp"

namespace triforecaster {

struct RegionCoefficients {
  double base = 0, a = 0, b = 0, c = 0, c_weekend = 0, d = 0, temp_offset = 0;
};

struct SynthOptions {
  std::size_t regions = 3;
  std::size_t days = 180;
  int interval_minutes = 15;
  std::uint64_t seed = 0;
  double noise_sd = 1.0;            // sigma
  double temp_noise_sd = 0.25;      // eta
  std::size_t lookback = 96;        // written into the manifest
  std::size_t horizon = 24;
  std::optional<int> val_span_days;  // absent: calendar-month split
  std::optional<int> test_span_days;
  /// Applied to each region's drawn coefficients before generation.
  std::function<void(std::size_t region, RegionCoefficients&)> adjust;
};

struct SynthRegion {
  std::string id;
  RegionCoefficients coefficients;
  std::vector<std::int64_t> instants;
  std::vector<double> load;
  std::vector<double> temperature;
  std::vector<double> price;
};

double synth_daily(double hour);
double synth_tod(double hour);
double synth_price(double hour);

std::vector<SynthRegion> synth_generate(const SynthOptions& options);

/// Converts to ingested form (history: load, temperature, price; future:
/// temperature, price and calendar features).
RegionSeries to_series(const SynthRegion& region);

/// Writes `<id>.csv` per region, `manifest.json` and `truth.json` (coefficients).
DatasetManifest write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& options);

/// Manifest describing an in-memory synthetic dataset (files are not written).
DatasetManifest synth_manifest(const SynthOptions& options);

}  // namespace triforecaster
