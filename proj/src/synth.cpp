#include "triforecaster/synth.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace {

// 2023-01-02T00:00:00Z, a Monday.
constexpr std::int64_t kOrigin = 1672617600;

double bump(double x, double center, double width) {
  const double z = (x - center) / width;
  return std::exp(-z * z);
}

std::string region_id(std::size_t t) { return "region" + std::to_string(t); }

}  // namespace

double synth_daily(double hour) { return bump(hour, 12.0, 3.0) + 0.8 * bump(hour, 20.0, 2.5); }
double synth_tod(double hour) { return 0.3 + 0.7 * bump(hour, 14.0, 4.0); }
double synth_price(double hour) { return hour >= 8.0 && hour < 22.0 ? 1.0 : 0.5; }

std::vector<SynthRegion> synth_generate(const SynthOptions& o) {
  if (o.regions < 2) throw ConfigError("synth: at least 2 regions are required");
  if (o.days < 14) throw ConfigError("synth: at least 14 days are required");
  if (o.interval_minutes <= 0 || 1440 % o.interval_minutes != 0) {
    throw ConfigError("synth: interval must divide one day");
  }
  const std::size_t per_day = static_cast<std::size_t>(1440 / o.interval_minutes);
  const std::size_t steps = o.days * per_day;
  std::vector<SynthRegion> out;
  for (std::size_t t = 0; t < o.regions; ++t) {
    Rng rng(o.seed, 100 + t);
    SynthRegion r;
    r.id = region_id(t);
    RegionCoefficients& k = r.coefficients;
    k.base = rng.uniform(80.0, 120.0);
    k.a = rng.uniform(10.0, 30.0);
    k.b = rng.uniform(-20.0, -5.0);
    k.c = rng.uniform(-3.0, 3.0);
    k.c_weekend = rng.uniform(-2.0, 2.0);
    k.d = rng.uniform(-20.0, 0.0);
    k.temp_offset = rng.uniform(-3.0, 3.0);
    if (o.adjust) o.adjust(t, k);

    r.instants.resize(steps);
    r.load.resize(steps);
    r.temperature.resize(steps);
    r.price.resize(steps);
    double u = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
      const std::size_t minutes = i * static_cast<std::size_t>(o.interval_minutes);
      const double t_days = static_cast<double>(minutes / 1440);
      const double hour = static_cast<double>(minutes % 1440) / 60.0;
      const bool weekend = (minutes / 1440) % 7 >= 5;
      const double eta = o.temp_noise_sd > 0.0 ? rng.normal(0.0, o.temp_noise_sd) : 0.0;
      const double eps = o.noise_sd > 0.0 ? rng.normal(0.0, o.noise_sd) : 0.0;
      u = 0.98 * u + eta;
      const double temp = k.temp_offset + 8.0 * std::cos(2.0 * std::numbers::pi * (t_days - 200.0) / 365.0) +
                          4.0 * std::sin(2.0 * std::numbers::pi * (hour - 9.0) / 24.0) + u;
      const double w = weekend ? 1.0 : 0.0;
      const double price = synth_price(hour);
      r.instants[i] = kOrigin + static_cast<std::int64_t>(minutes) * 60;
      r.temperature[i] = temp;
      r.price[i] = price;
      r.load[i] = k.base + k.a * synth_daily(hour) + k.b * w + (k.c + k.c_weekend * w) * temp * synth_tod(hour) +
                  k.d * price + eps;
    }
    out.push_back(std::move(r));
  }
  return out;
}

RegionSeries to_series(const SynthRegion& r) {
  RegionSeries s;
  s.id = r.id;
  s.history_names = {"load", "temperature", "price"};
  s.history = {r.load, r.temperature, r.price};
  s.future_names = {"temperature", "price"};
  for (auto& n : calendar_feature_names()) s.future_names.push_back(std::move(n));
  s.future.assign(s.future_names.size(), {});
  s.future[0] = r.temperature;
  s.future[1] = r.price;
  double cal[kCalendarFeatures];
  for (std::size_t i = 0; i < r.instants.size(); ++i) {
    s.timestamp_text.push_back(format_timestamp(r.instants[i]));
    s.timestamps.push_back(parse_timestamp(s.timestamp_text.back()));
    calendar_features(s.timestamps.back(), cal);
    for (std::size_t k = 0; k < kCalendarFeatures; ++k) s.future[2 + k].push_back(cal[k]);
  }
  return s;
}

DatasetManifest synth_manifest(const SynthOptions& o) {
  DatasetManifest m;
  m.interval_minutes = o.interval_minutes;
  m.lookback = o.lookback;
  m.horizon = o.horizon;
  for (std::size_t t = 0; t < o.regions; ++t) m.regions.push_back(RegionFile{region_id(t), region_id(t) + ".csv"});
  m.future_covariates = {"temperature", "price"};
  m.val_span_days = o.val_span_days;
  m.test_span_days = o.test_span_days;
  return m;
}

DatasetManifest write_synth_dataset(const std::filesystem::path& dir, const SynthOptions& o) {
  const auto regions = synth_generate(o);
  std::filesystem::create_directories(dir);
  DatasetManifest m = synth_manifest(o);
  m.base_dir = dir;
  nlohmann::json truth = nlohmann::json::object();
  char buf[160];
  for (const auto& r : regions) {
    std::ofstream out(dir / (r.id + ".csv"), std::ios::binary);
    if (!out) throw DataError("synth: cannot write " + (dir / (r.id + ".csv")).string());
    out << "timestamp,load,temperature,price\n";
    for (std::size_t i = 0; i < r.load.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s,%.12g,%.12g,%.12g\n", format_timestamp(r.instants[i]).c_str(), r.load[i],
                    r.temperature[i], r.price[i]);
      out << buf;
    }
    const auto& k = r.coefficients;
    truth[r.id] = {{"base", k.base}, {"a", k.a},         {"b", k.b},
                   {"c", k.c},       {"c_weekend", k.c_weekend}, {"d", k.d},
                   {"temp_offset", k.temp_offset}};
  }
  m.save(dir / "manifest.json");
  std::ofstream t(dir / "truth.json");
  t << truth.dump(2) << '\n';
  return m;
}

}  // namespace triforecaster
