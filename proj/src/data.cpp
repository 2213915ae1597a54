#include "triforecaster/data.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  DatasetManifest m;
  try {
    nlohmann::json j;
    in >> j;
    m.interval_minutes = j.at("interval_minutes").get<int>();
    m.lookback = j.at("lookback").get<std::size_t>();
    m.horizon = j.at("horizon").get<std::size_t>();
    for (const auto& r : j.at("regions")) {
      m.regions.push_back(RegionFile{r.at("id").get<std::string>(), r.at("file").get<std::string>()});
    }
    if (j.contains("future_covariates")) m.future_covariates = j.at("future_covariates").get<std::vector<std::string>>();
    if (j.contains("val_span_days") && !j.at("val_span_days").is_null()) m.val_span_days = j.at("val_span_days").get<int>();
    if (j.contains("test_span_days") && !j.at("test_span_days").is_null()) m.test_span_days = j.at("test_span_days").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  if (m.interval_minutes <= 0) throw DataError("manifest: interval_minutes must be positive");
  if (m.lookback == 0 || m.horizon == 0) throw DataError("manifest: lookback and horizon must be positive");
  if (m.regions.empty()) throw DataError("manifest: no regions listed");
  if ((m.val_span_days && *m.val_span_days < 0) || (m.test_span_days && *m.test_span_days < 0)) {
    throw DataError("manifest: span days must be >= 0");
  }
  std::set<std::string> ids;
  for (const auto& r : m.regions) {
    if (!ids.insert(r.id).second) throw DataError("manifest: duplicate region id '" + r.id + "'");
  }
  m.base_dir = path.parent_path();
  return m;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["interval_minutes"] = interval_minutes;
  j["lookback"] = lookback;
  j["horizon"] = horizon;
  j["regions"] = nlohmann::json::array();
  for (const auto& r : regions) j["regions"].push_back({{"id", r.id}, {"file", r.file.string()}});
  j["future_covariates"] = future_covariates;
  if (val_span_days) j["val_span_days"] = *val_span_days;
  if (test_span_days) j["test_span_days"] = *test_span_days;
  return j;
}

void DatasetManifest::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("manifest: cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

fs::path DatasetManifest::resolve(const RegionFile& region) const {
  return region.file.is_absolute() ? region.file : base_dir / region.file;
}

// ---------------------------------------------------------------------------
// Timestamps

namespace {

bool read_int(std::string_view text, std::size_t& pos, std::size_t digits, int& out) {
  if (pos + digits > text.size()) return false;
  const auto* first = text.data() + pos;
  auto [ptr, ec] = std::from_chars(first, first + digits, out);
  if (ec != std::errc{} || ptr != first + digits) return false;
  pos += digits;
  return true;
}

bool expect(std::string_view text, std::size_t& pos, char c) {
  if (pos < text.size() && text[pos] == c) {
    ++pos;
    return true;
  }
  return false;
}

}  // namespace

Timestamp parse_timestamp(std::string_view text) {
  auto fail = [&]() -> Timestamp { throw DataError("invalid ISO-8601 timestamp '" + std::string(text) + "'"); };
  std::size_t pos = 0;
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  if (!read_int(text, pos, 4, y) || !expect(text, pos, '-') || !read_int(text, pos, 2, mo) ||
      !expect(text, pos, '-') || !read_int(text, pos, 2, d)) {
    return fail();
  }
  if (!expect(text, pos, 'T') && !expect(text, pos, ' ')) return fail();
  if (!read_int(text, pos, 2, h) || !expect(text, pos, ':') || !read_int(text, pos, 2, mi)) return fail();
  if (expect(text, pos, ':')) {
    if (!read_int(text, pos, 2, s)) return fail();
    if (expect(text, pos, '.')) {
      while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
    }
  }
  int offset_minutes = 0;
  if (expect(text, pos, 'Z')) {
  } else if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) {
    const int sign = text[pos] == '-' ? -1 : 1;
    ++pos;
    int oh = 0, om = 0;
    if (!read_int(text, pos, 2, oh)) return fail();
    expect(text, pos, ':');
    if (!read_int(text, pos, 2, om)) return fail();
    offset_minutes = sign * (oh * 60 + om);
  }
  if (pos != text.size()) return fail();

  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return fail();
  const sys_days days{ymd};
  Timestamp ts;
  ts.local_days = days.time_since_epoch().count();
  ts.minute_of_day = h * 60 + mi;
  ts.weekday = static_cast<int>(weekday{days}.iso_encoding()) - 1;
  ts.year = y;
  ts.month = static_cast<unsigned>(mo);
  ts.instant = ts.local_days * 86400 + ts.minute_of_day * 60 + s - offset_minutes * 60;
  return ts;
}

std::string format_timestamp(std::int64_t instant) {
  using namespace std::chrono;
  const sys_seconds t{seconds{instant}};
  const sys_days days = floor<std::chrono::days>(t);
  const year_month_day ymd{days};
  const auto rest = (t - days).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), static_cast<int>(rest / 3600),
                static_cast<int>(rest / 60 % 60), static_cast<int>(rest % 60));
  return buf;
}

std::vector<std::string> calendar_feature_names() {
  return {"hour_sin", "hour_cos", "dow_mon", "dow_tue", "dow_wed", "dow_thu", "dow_fri", "dow_sat", "dow_sun"};
}

void calendar_features(const Timestamp& ts, std::span<double> out) {
  const double angle = 2.0 * std::numbers::pi * ts.minute_of_day / 1440.0;
  out[0] = std::sin(angle);
  out[1] = std::cos(angle);
  for (int k = 0; k < 7; ++k) out[2 + k] = ts.weekday == k ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t begin = 0;
  while (true) {
    const auto comma = line.find(',', begin);
    out.push_back(line.substr(begin, comma == std::string_view::npos ? std::string_view::npos : comma - begin));
    if (comma == std::string_view::npos) break;
    begin = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

}  // namespace

RegionSeries read_region_csv(const fs::path& path, const std::string& id, int interval_minutes,
                             std::span<const std::string> future_covariates) {
  std::ifstream in(path);
  if (!in) throw DataError("region '" + id + "': cannot open " + path.string());
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line)) throw DataError(where + ": empty file");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto header = split_fields(line);
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!column.emplace(std::string(header[i]), i).second) {
      throw DataError(where + ": duplicate column '" + std::string(header[i]) + "'");
    }
  }
  for (const char* required : {"timestamp", "load"}) {
    if (!column.count(required)) throw DataError(where + ": missing column '" + std::string(required) + "'");
  }
  for (const auto& name : future_covariates) {
    if (!column.count(name)) throw DataError(where + ": missing future covariate column '" + name + "'");
  }

  RegionSeries s;
  s.id = id;
  s.history_names.push_back("load");
  std::vector<std::size_t> history_cols{column.at("load")};
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "timestamp" || header[i] == "load") continue;
    s.history_names.emplace_back(header[i]);
    history_cols.push_back(i);
  }
  std::vector<std::size_t> future_cols;
  for (const auto& name : future_covariates) {
    s.future_names.push_back(name);
    future_cols.push_back(column.at(name));
  }
  for (auto& name : calendar_feature_names()) s.future_names.push_back(std::move(name));
  s.history.resize(history_cols.size());
  s.future.resize(s.future_names.size());

  const std::size_t ts_col = column.at("timestamp");
  const std::int64_t step = static_cast<std::int64_t>(interval_minutes) * 60;
  std::size_t row = 1;  // 1-based file line; the header is line 1
  std::vector<double> values(header.size());
  double calendar[kCalendarFeatures];
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw DataError(where + ": line " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                      " fields, header has " + std::to_string(header.size()));
    }
    Timestamp ts;
    try {
      ts = parse_timestamp(fields[ts_col]);
    } catch (const DataError& e) {
      throw DataError(where + ": line " + std::to_string(row) + ": " + e.what());
    }
    if (!s.timestamps.empty()) {
      const std::int64_t delta = ts.instant - s.timestamps.back().instant;
      if (delta <= 0) {
        throw DataError(where + ": line " + std::to_string(row) + ": timestamp " + std::string(fields[ts_col]) +
                        " is not after " + s.timestamp_text.back());
      }
      if (delta != step) {
        throw DataError(where + ": line " + std::to_string(row) + ": gap of " + std::to_string(delta / 60) +
                        " minutes between " + s.timestamp_text.back() + " and " + std::string(fields[ts_col]) +
                        " (expected " + std::to_string(interval_minutes) + ")");
      }
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == ts_col) continue;
      const auto f = fields[c];
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(v)) {
        throw DataError(where + ": line " + std::to_string(row) + ": column '" + std::string(header[c]) +
                        "' has invalid value '" + std::string(f) + "'");
      }
      values[c] = v;
    }
    for (std::size_t k = 0; k < history_cols.size(); ++k) s.history[k].push_back(values[history_cols[k]]);
    for (std::size_t k = 0; k < future_cols.size(); ++k) s.future[k].push_back(values[future_cols[k]]);
    calendar_features(ts, calendar);
    for (std::size_t k = 0; k < kCalendarFeatures; ++k) s.future[future_cols.size() + k].push_back(calendar[k]);
    s.timestamp_text.emplace_back(fields[ts_col]);
    s.timestamps.push_back(ts);
  }
  if (s.timestamps.empty()) throw DataError(where + ": no data rows");
  return s;
}

std::vector<RegionSeries> ingest(const DatasetManifest& manifest) {
  std::vector<RegionSeries> out;
  for (const auto& region : manifest.regions) {
    const auto path = manifest.resolve(region);
    RegionSeries s = read_region_csv(path, region.id, manifest.interval_minutes, manifest.future_covariates);
    if (s.length() < manifest.lookback + manifest.horizon) {
      throw DataError(path.string() + ": series shorter than L+H (" + std::to_string(s.length()) + " rows < " +
                      std::to_string(manifest.lookback + manifest.horizon) + ")");
    }
    if (!out.empty() && s.history_names != out.front().history_names) {
      throw DataError(path.string() + ": columns differ from region '" + out.front().id + "'");
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows and splits

std::vector<std::size_t> window_starts_in(std::size_t begin, std::size_t end, std::size_t lookback,
                                          std::size_t horizon, std::size_t stride) {
  if (stride == 0) throw ContractError("window: stride must be positive");
  std::vector<std::size_t> out;
  const std::size_t span = lookback + horizon;
  if (end < begin || end - begin < span) return out;
  for (std::size_t s = begin; s + span <= end; s += stride) out.push_back(s);
  return out;
}

std::vector<std::size_t> window_starts(std::size_t length, std::size_t lookback, std::size_t horizon,
                                       std::size_t stride) {
  if (length < lookback + horizon) {
    throw DataError("series shorter than L+H (" + std::to_string(length) + " < " +
                    std::to_string(lookback + horizon) + ")");
  }
  return window_starts_in(0, length, lookback, horizon, stride);
}

std::vector<double> context_vector(const RegionSeries& series, std::size_t start, std::size_t lookback,
                                   std::size_t horizon) {
  std::vector<double> ctx(series.future_channels(), 0.0);
  for (std::size_t c = 0; c < ctx.size(); ++c) {
    const auto& col = series.future[c];
    double acc = 0.0;
    for (std::size_t h = 0; h < horizon; ++h) acc += col[start + lookback + h];
    ctx[c] = acc / static_cast<double>(horizon);
  }
  return ctx;
}

Sample make_sample(const RegionSeries& series, std::size_t start, std::size_t lookback, std::size_t horizon) {
  if (start + lookback + horizon > series.length()) {
    throw ContractError("window: start " + std::to_string(start) + " exceeds series bounds");
  }
  const std::size_t starts[] = {start};
  Batch b = make_batch(series, 0, starts, lookback, horizon);
  Sample s;
  s.region = series.id;
  s.history = reshape(b.history, {lookback, series.history_channels()});
  if (b.future.defined()) s.future = reshape(b.future, {horizon, series.future_channels()});
  s.target = reshape(b.target, {horizon, 1});
  s.start = start;
  s.context = context_vector(series, start, lookback, horizon);
  return s;
}

std::vector<Sample> window(const RegionSeries& series, std::size_t lookback, std::size_t horizon,
                           std::size_t stride) {
  std::vector<Sample> out;
  for (std::size_t s : window_starts(series.length(), lookback, horizon, stride)) {
    out.push_back(make_sample(series, s, lookback, horizon));
  }
  return out;
}

SplitBounds split_by_rows(std::size_t length, std::size_t val_rows, std::size_t test_rows) {
  if (val_rows + test_rows > length) {
    throw DataError("split: validation + test spans (" + std::to_string(val_rows + test_rows) +
                    " rows) exceed the series (" + std::to_string(length) + " rows)");
  }
  return SplitBounds{length - val_rows - test_rows, length - test_rows, length};
}

SplitBounds split_by_calendar_months(const RegionSeries& series) {
  if (series.length() == 0) throw DataError("split: empty series");
  const auto& last = series.timestamps.back();
  const int last_key = last.year * 12 + static_cast<int>(last.month) - 1;
  auto key = [&](std::size_t i) {
    return series.timestamps[i].year * 12 + static_cast<int>(series.timestamps[i].month) - 1;
  };
  std::size_t test_begin = series.length();
  while (test_begin > 0 && key(test_begin - 1) == last_key) --test_begin;
  std::size_t val_begin = test_begin;
  while (val_begin > 0 && key(val_begin - 1) == last_key - 1) --val_begin;
  if (val_begin == test_begin || val_begin == 0) {
    throw DataError("split: region '" + series.id + "' does not cover two calendar months before its last month");
  }
  return SplitBounds{val_begin, test_begin, series.length()};
}

SplitBounds split_for(const DatasetManifest& manifest, const RegionSeries& series) {
  if (!manifest.val_span_days && !manifest.test_span_days) return split_by_calendar_months(series);
  const std::size_t rows_per_day = static_cast<std::size_t>(1440 / manifest.interval_minutes);
  return split_by_rows(series.length(), static_cast<std::size_t>(manifest.val_span_days.value_or(0)) * rows_per_day,
                       static_cast<std::size_t>(manifest.test_span_days.value_or(0)) * rows_per_day);
}

SplitWindows split_windows(const SplitBounds& b, std::size_t lookback, std::size_t horizon, std::size_t train_stride,
                           std::size_t eval_stride) {
  SplitWindows w;
  w.train = window_starts_in(0, b.val_begin, lookback, horizon, train_stride);
  w.val = window_starts_in(b.val_begin, b.test_begin, lookback, horizon, eval_stride);
  w.test = window_starts_in(b.test_begin, b.length, lookback, horizon, eval_stride);
  return w;
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

void channel_stats(const std::vector<std::vector<double>>& channels, std::size_t end, std::vector<double>& mean,
                   std::vector<double>& stddev) {
  mean.assign(channels.size(), 0.0);
  stddev.assign(channels.size(), 1.0);
  for (std::size_t c = 0; c < channels.size(); ++c) {
    const auto& col = channels[c];
    if (std::all_of(col.begin(), col.begin() + static_cast<std::ptrdiff_t>(end), [&](double v) { return v == col[0]; })) {
      mean[c] = col[0];
      continue;
    }
    double m = 0.0;
    for (std::size_t i = 0; i < end; ++i) m += col[i];
    m /= static_cast<double>(end);
    double var = 0.0;
    for (std::size_t i = 0; i < end; ++i) var += (channels[c][i] - m) * (channels[c][i] - m);
    var /= static_cast<double>(end);
    mean[c] = m;
    const double sd = std::sqrt(var);
    stddev[c] = sd > 1e-12 * std::max(1.0, std::abs(m)) ? sd : 1.0;
  }
}

}  // namespace

NormStats compute_stats(const RegionSeries& series, std::size_t train_end) {
  if (train_end == 0 || train_end > series.length()) {
    throw DataError("normalization: region '" + series.id + "' has no training rows");
  }
  NormStats st;
  channel_stats(series.history, train_end, st.history_mean, st.history_std);
  channel_stats(series.future, train_end, st.future_mean, st.future_std);
  return st;
}

const NormStats& Normalizer::stats(const std::string& region) const {
  auto it = stats_.find(region);
  if (it == stats_.end()) throw DataError("normalization: unknown region '" + region + "'");
  return it->second;
}

std::vector<double> Normalizer::normalize_history(const std::string& region, std::size_t channel,
                                                  std::span<const double> x) const {
  const NormStats& st = stats(region);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - st.history_mean.at(channel)) / st.history_std.at(channel);
  return out;
}

std::vector<double> Normalizer::denormalize_history(const std::string& region, std::size_t channel,
                                                    std::span<const double> x) const {
  const NormStats& st = stats(region);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * st.history_std.at(channel) + st.history_mean.at(channel);
  return out;
}

double Normalizer::denormalize_load(const std::string& region, double x) const {
  const NormStats& st = stats(region);
  return x * st.history_std[0] + st.history_mean[0];
}

RegionSeries Normalizer::normalize(const RegionSeries& series) const {
  const NormStats& st = stats(series.id);
  RegionSeries out = series;
  for (std::size_t c = 0; c < out.history.size(); ++c) {
    for (double& v : out.history[c]) v = (v - st.history_mean[c]) / st.history_std[c];
  }
  for (std::size_t c = 0; c < out.future.size(); ++c) {
    for (double& v : out.future[c]) v = (v - st.future_mean[c]) / st.future_std[c];
  }
  return out;
}

nlohmann::json Normalizer::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [region, st] : stats_) {
    j[region] = {{"history_mean", st.history_mean},
                 {"history_std", st.history_std},
                 {"future_mean", st.future_mean},
                 {"future_std", st.future_std}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Dataset

ModelDims Dataset::dims() const {
  ModelDims d;
  d.regions = regions.size();
  d.lookback = lookback();
  d.horizon = horizon();
  if (!regions.empty()) {
    d.history_channels = regions.front().normalized.history_channels();
    d.future_channels = regions.front().normalized.future_channels();
  }
  return d;
}

std::size_t Dataset::region_index(const std::string& id) const {
  for (std::size_t i = 0; i < regions.size(); ++i) {
    if (regions[i].raw.id == id) return i;
  }
  throw DataError("unknown region '" + id + "'");
}

Dataset prepare_dataset(DatasetManifest manifest, std::vector<RegionSeries> series, std::size_t train_stride,
                        std::size_t eval_stride) {
  Dataset data;
  data.manifest = std::move(manifest);
  const std::size_t L = data.manifest.lookback;
  const std::size_t H = data.manifest.horizon;
  for (auto& s : series) {
    if (s.length() < L + H) {
      throw DataError("region '" + s.id + "': series shorter than L+H (" + std::to_string(s.length()) + " < " +
                      std::to_string(L + H) + ")");
    }
    if (!data.regions.empty() && (s.history_channels() != data.regions.front().raw.history_channels() ||
                                  s.future_channels() != data.regions.front().raw.future_channels())) {
      throw DataError("region '" + s.id + "': channel layout differs from the first region");
    }
    RegionData r;
    r.bounds = split_for(data.manifest, s);
    data.normalizer.add(s.id, compute_stats(s, r.bounds.val_begin));
    r.normalized = data.normalizer.normalize(s);
    r.windows = split_windows(r.bounds, L, H, train_stride, eval_stride);
    r.raw = std::move(s);
    data.regions.push_back(std::move(r));
  }
  return data;
}

Dataset load_dataset(const fs::path& manifest_path, std::size_t train_stride, std::size_t eval_stride) {
  DatasetManifest m = DatasetManifest::load(manifest_path);
  auto series = ingest(m);
  return prepare_dataset(std::move(m), std::move(series), train_stride, eval_stride);
}

Batch make_batch(const RegionSeries& series, std::size_t region, std::span<const std::size_t> starts,
                 std::size_t lookback, std::size_t horizon) {
  const std::size_t n = starts.size();
  const std::size_t C = series.history_channels();
  const std::size_t Cz = series.future_channels();
  if (n == 0) throw ContractError("make_batch: empty batch");
  std::vector<double> hist(n * lookback * C);
  std::vector<double> fut(n * horizon * Cz);
  std::vector<double> tgt(n * horizon);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = starts[i];
    if (s + lookback + horizon > series.length()) {
      throw ContractError("make_batch: window at " + std::to_string(s) + " exceeds series bounds");
    }
    for (std::size_t l = 0; l < lookback; ++l) {
      for (std::size_t c = 0; c < C; ++c) hist[(i * lookback + l) * C + c] = series.history[c][s + l];
    }
    for (std::size_t h = 0; h < horizon; ++h) {
      for (std::size_t c = 0; c < Cz; ++c) fut[(i * horizon + h) * Cz + c] = series.future[c][s + lookback + h];
      tgt[i * horizon + h] = series.history[0][s + lookback + h];
    }
  }
  Batch b;
  b.region = region;
  b.starts.assign(starts.begin(), starts.end());
  b.history = Tensor::from({n, lookback, C}, std::move(hist));
  if (Cz > 0) b.future = Tensor::from({n, horizon, Cz}, std::move(fut));
  b.target = Tensor::from({n, horizon, 1}, std::move(tgt));
  return b;
}

Batch make_batch(const Dataset& data, std::size_t region, std::span<const std::size_t> starts) {
  return make_batch(data.regions.at(region).normalized, region, starts, data.lookback(), data.horizon());
}

// ---------------------------------------------------------------------------
// Contrastive pairs

ContrastivePool::ContrastivePool(const RegionSeries& series, std::vector<std::size_t> starts, std::size_t lookback,
                                 std::size_t horizon, std::size_t negatives, double negative_fraction)
    : starts_(std::move(starts)), negatives_(negatives), window_(lookback + horizon) {
  const std::size_t P = starts_.size();
  if (negatives == 0) throw ContractError("contrastive pool: at least one negative is required");
  if (P <= negatives + 1) {
    throw DataError("contrastive pool of region '" + series.id + "' has " + std::to_string(P) +
                    " windows; need more than N_n + 1 = " + std::to_string(negatives + 1));
  }
  if (!(negative_fraction > 0.0 && negative_fraction <= 1.0)) {
    throw ContractError("contrastive pool: negative fraction must be in (0, 1]");
  }
  dim_ = series.future_channels();
  contexts_.reserve(P * dim_);
  for (std::size_t i = 0; i < P; ++i) {
    position_[starts_[i]] = i;
    const auto ctx = context_vector(series, starts_[i], lookback, horizon);
    contexts_.insert(contexts_.end(), ctx.begin(), ctx.end());
  }
  positive_.resize(P);
  threshold_.resize(P);
  std::vector<double> dist(P);
  std::vector<double> others;
  others.reserve(P);
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = P;
    for (std::size_t j = 0; j < P; ++j) {
      dist[j] = distance(i, j);
      const std::size_t gap = starts_[i] > starts_[j] ? starts_[i] - starts_[j] : starts_[j] - starts_[i];
      if (j != i && gap >= window_ && (best == P || dist[j] < dist[best])) best = j;
    }
    if (best == P) {
      throw DataError("contrastive pool of region '" + series.id + "': window at " + std::to_string(starts_[i]) +
                      " has no non-overlapping positive");
    }
    positive_[i] = best;
    others.clear();
    for (std::size_t j = 0; j < P; ++j) {
      if (j != i && j != best) others.push_back(dist[j]);
    }
    const std::size_t keep = std::max(
        negatives, static_cast<std::size_t>(std::ceil(negative_fraction * static_cast<double>(others.size()))));
    auto kth = others.begin() + static_cast<std::ptrdiff_t>(keep - 1);
    std::nth_element(others.begin(), kth, others.end(), std::greater<>());
    threshold_[i] = *kth;
  }
}

std::size_t ContrastivePool::position(std::size_t start) const {
  auto it = position_.find(start);
  if (it == position_.end()) throw ContractError("contrastive pool: window " + std::to_string(start) + " not in pool");
  return it->second;
}

double ContrastivePool::distance(std::size_t i, std::size_t j) const {
  double acc = 0.0;
  const double* a = contexts_.data() + i * dim_;
  const double* b = contexts_.data() + j * dim_;
  for (std::size_t k = 0; k < dim_; ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(acc);
}

ContrastivePool::Pair ContrastivePool::sample(std::size_t index, Rng& rng) const {
  const std::size_t P = starts_.size();
  const std::size_t pos = positive_[index];
  auto admissible = [&](std::size_t j) { return j != index && j != pos && distance(index, j) >= threshold_[index]; };
  std::vector<std::size_t> chosen;
  chosen.reserve(negatives_);
  std::size_t attempts = 0;
  while (chosen.size() < negatives_ && attempts < 32 * negatives_) {
    ++attempts;
    const std::size_t j = rng.index(P);
    if (admissible(j) && std::find(chosen.begin(), chosen.end(), j) == chosen.end()) chosen.push_back(j);
  }
  if (chosen.size() < negatives_) {
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < P; ++j) {
      if (admissible(j) && std::find(chosen.begin(), chosen.end(), j) == chosen.end()) rest.push_back(j);
    }
    while (chosen.size() < negatives_) {
      const std::size_t k = rng.index(rest.size());
      chosen.push_back(rest[k]);
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  Pair pair;
  pair.positive = starts_[pos];
  for (std::size_t j : chosen) pair.negatives.push_back(starts_[j]);
  return pair;
}

std::vector<ContrastivePool::Pair> ContrastivePool::sample_all(Rng& rng) const {
  std::vector<Pair> out;
  out.reserve(starts_.size());
  for (std::size_t i = 0; i < starts_.size(); ++i) out.push_back(sample(i, rng));
  return out;
}

ContrastivePool::Pair contrastive_pairs(const ContrastivePool& pool, std::size_t anchor_start, Rng& rng) {
  return pool.sample(pool.position(anchor_start), rng);
}

}  // namespace triforecaster
