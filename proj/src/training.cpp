#include "triforecaster/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <thread>

#include "triforecaster/errors.hpp"

namespace triforecaster {

namespace {

// Rng sub-streams of a run, keyed off cfg.seed. Stream 1 is model init.
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kForwardStream = 3;
constexpr std::uint64_t kEvalSampleStream = 4;
constexpr std::uint64_t kPairStreamBase = 1000;

}  // namespace

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(ParamList params, double learning_rate, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
  steps_.assign(params_.size(), 0);
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    if (!p.grad_touched()) continue;
    const auto g = p.grad();
    auto x = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const std::size_t t = ++steps_[i];
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
      x[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + epsilon_);
    }
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Objective

Tensor total_loss(const Tensor& prediction, const Tensor& target, const Tensor& contrastive, double alpha) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("total_loss: prediction " + shape_str(prediction.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  if (alpha < 0.0) throw ContractError("total_loss: alpha must be >= 0");
  Tensor loss = mean(square(sub(prediction, target)));
  if (alpha > 0.0 && contrastive.defined()) loss = add(loss, scale(mean(contrastive), alpha));
  return loss;
}

Tensor batched_contrastive(const Tensor& anchors, const Tensor& positives, const Tensor& negatives, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
  if (anchors.shape() != positives.shape() || anchors.dim() == 0) {
    throw DimensionError("batched_contrastive: anchors " + shape_str(anchors.shape()) + " vs positives " +
                         shape_str(positives.shape()));
  }
  const std::size_t n = anchors.size(0);
  const std::size_t f = anchors.numel() / n;
  if (negatives.dim() == 0 || negatives.numel() % (n * f) != 0 || negatives.numel() == 0) {
    throw DimensionError("batched_contrastive: negatives " + shape_str(negatives.shape()) + " do not tile " +
                         std::to_string(n) + " anchors");
  }
  const std::size_t k = negatives.numel() / (n * f);
  const Tensor a = reshape(anchors, {n, f});
  const Tensor p = reshape(positives, {n, f});
  const Tensor q = reshape(negatives, {n, k, f});

  const Tensor a_norm = sqrt(sum(square(a), 1));  // [n]
  const Tensor p_norm = sqrt(sum(square(p), 1));
  const Tensor q_norm = sqrt(sum(square(q), 2));  // [n, k]
  const Tensor pos_sim = div(sum(mul(a, p), 1), mul(a_norm, p_norm));

  const Tensor a_rep = transpose(stack(std::vector<Tensor>(k, a)), {1, 0, 2});           // [n, k, f]
  const Tensor a_norm_rep = swap_last(stack(std::vector<Tensor>(k, a_norm)));            // [n, k]
  const Tensor neg_sim = div(sum(mul(a_rep, q), 2), mul(a_norm_rep, q_norm));           // [n, k]
  const Tensor logits = scale(concat({reshape(pos_sim, {n, 1}), neg_sim}, 1), 1.0 / tau);  // [n, 1 + k]
  return neg(select(swap_last(softmax(logits, 1)), 0));
}

// ---------------------------------------------------------------------------
// Evaluation

nlohmann::json EvalResult::to_json() const {
  nlohmann::json j;
  j["per_region"] = nlohmann::json::object();
  for (std::size_t i = 0; i < regions.size(); ++i) {
    j["per_region"][regions[i]] = {{"mse", per_region[i].mse}, {"mae", per_region[i].mae}, {"count", per_region[i].count}};
  }
  j["mean"] = {{"mse", mean_mse}, {"mae", mean_mae}};
  return j;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw ConfigError("unknown split '" + std::string(text) + "' (expected train|val|test)");
}

const std::vector<std::size_t>& split_starts(const RegionData& region, Split split) {
  switch (split) {
    case Split::kTrain:
      return region.windows.train;
    case Split::kVal:
      return region.windows.val;
    case Split::kTest:
      return region.windows.test;
  }
  return region.windows.test;
}

std::vector<double> predict(const Forecaster& model, const Dataset& data, std::size_t region,
                            std::span<const std::size_t> starts, const TrainConfig& cfg) {
  NoGradGuard no_grad;
  Rng rng(cfg.seed, kEvalSampleStream + 16 * region);
  const bool sample = cfg.eval_pooling == EvalPooling::kSample;
  const ForwardContext ctx{sample ? Mode::kTrain : Mode::kEval, sample ? &rng : nullptr, nullptr};
  std::vector<double> out;
  out.reserve(starts.size() * data.horizon());
  for (std::size_t begin = 0; begin < starts.size(); begin += cfg.batch_size) {
    const auto chunk = starts.subspan(begin, std::min(cfg.batch_size, starts.size() - begin));
    const Batch b = make_batch(data, region, chunk);
    const Tensor pred = model.forward(b.history, b.future, region, ctx).prediction;
    out.insert(out.end(), pred.values().begin(), pred.values().end());
  }
  return out;
}

namespace {

Metrics region_metrics(const Forecaster& model, const Dataset& data, std::size_t region,
                       std::span<const std::size_t> starts, const TrainConfig& cfg) {
  const auto pred = predict(model, data, region, starts, cfg);
  const auto& load = data.regions[region].normalized.load();
  const std::size_t L = data.lookback();
  const std::size_t H = data.horizon();
  Metrics m;
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    for (std::size_t h = 0; h < H; ++h) {
      const double e = pred[i * H + h] - load[starts[i] + L + h];
      se += e * e;
      ae += std::abs(e);
    }
  }
  m.count = starts.size() * H;
  m.mse = se / static_cast<double>(m.count);
  m.mae = ae / static_cast<double>(m.count);
  return m;
}

template <typename Fn>
void for_each_region(std::size_t regions, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, regions));
  if (threads == 1) {
    for (std::size_t r = 0; r < regions; ++r) fn(r);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t r = w; r < regions; r += threads) fn(r);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void fill_means(EvalResult& r) {
  double mse = 0.0, mae = 0.0;
  for (const auto& m : r.per_region) {
    mse += m.mse;
    mae += m.mae;
  }
  r.mean_mse = mse / static_cast<double>(r.per_region.size());
  r.mean_mae = mae / static_cast<double>(r.per_region.size());
}

}  // namespace

EvalResult evaluate(const Forecaster& model, const Dataset& data, Split split, const TrainConfig& cfg,
                    std::size_t threads) {
  EvalResult result;
  const std::size_t T = data.regions.size();
  if (T == 0) throw DataError("evaluate: dataset has no regions");
  for (const auto& r : data.regions) {
    if (split_starts(r, split).empty()) {
      throw DataError("evaluate: region '" + r.raw.id + "' has no " + std::string(to_string(split)) + " windows");
    }
    result.regions.push_back(r.raw.id);
  }
  result.per_region.resize(T);
  for_each_region(T, threads, [&](std::size_t r) {
    result.per_region[r] = region_metrics(model, data, r, split_starts(data.regions[r], split), cfg);
  });
  fill_means(result);
  return result;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct RegionEpoch {
  double se = 0.0, ae = 0.0, loss = 0.0;
  std::size_t count = 0, steps = 0;
};

// One early-stopping unit: all regions for shared models, one region each for
// independent per-region models.
struct Group {
  std::vector<std::size_t> regions;
  ParamList params;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;
  bool active = true;
  ParamSnapshot snapshot;
};

Tensor contrastive_terms(const Forecaster& model, const Dataset& data, std::size_t region, const ForwardOutput& out,
                         const Batch& batch, const ContrastivePool& pool,
                         const std::vector<ContrastivePool::Pair>& pairs, const TrainConfig& cfg,
                         const ForwardContext& ctx) {
  const std::size_t n = batch.starts.size();
  std::vector<std::size_t> aux(n * (1 + cfg.negatives));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pair = pairs[pool.position(batch.starts[i])];
    aux[i] = pair.positive;
    for (std::size_t k = 0; k < cfg.negatives; ++k) aux[n + i * cfg.negatives + k] = pair.negatives[k];
  }
  const Batch aux_batch = make_batch(data, region, aux);
  ForwardOutput aux_out;
  if (cfg.contrastive_keys == ContrastiveKeys::kDetached) {
    NoGradGuard no_grad;
    aux_out = model.forward(aux_batch.history, aux_batch.future, region, ctx);
  } else {
    aux_out = model.forward(aux_batch.history, aux_batch.future, region, ctx);
  }
  const std::size_t layers = out.contexts.size();
  auto layer_loss = [&](std::size_t l) {
    const Tensor& other = aux_out.contexts[l];
    return batched_contrastive(out.contexts[l], slice(other, 0, n), slice(other, n, aux.size()), cfg.tau);
  };
  if (cfg.contrastive_source == ContrastiveSource::kLast) return layer_loss(layers - 1);
  std::vector<Tensor> per_layer;
  for (std::size_t l = 0; l < layers; ++l) per_layer.push_back(layer_loss(l));
  return mean(stack(per_layer), 0);
}

}  // namespace

TrainResult train(Forecaster& model, const Dataset& data, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const std::size_t T = data.regions.size();
  if (T == 0) throw DataError("train: dataset has no regions");
  if (model.regions() != T) {
    throw ConfigError("train: model has " + std::to_string(model.regions()) + " regions, dataset has " +
                      std::to_string(T));
  }
  for (const auto& r : data.regions) {
    if (r.windows.train.empty()) throw DataError("train: region '" + r.raw.id + "' has no training windows");
  }

  std::vector<Group> groups;
  if (model.independent_regions()) {
    for (std::size_t r = 0; r < T; ++r) {
      Group g;
      g.regions = {r};
      g.params = model.parameters_for_region(r);
      groups.push_back(std::move(g));
    }
  } else {
    Group g;
    g.regions.resize(T);
    std::iota(g.regions.begin(), g.regions.end(), 0);
    g.params = model.parameters();
    groups.push_back(std::move(g));
  }
  std::vector<std::size_t> group_of(T);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (std::size_t r : groups[gi].regions) group_of[r] = gi;
  }

  Adam adam(model.parameters(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  adam.zero_grad();
  Rng shuffle_rng(cfg.seed, kShuffleStream);
  Rng forward_rng(cfg.seed, kForwardStream);
  const ForwardContext train_ctx{Mode::kTrain, &forward_rng, nullptr};

  const bool contrastive = cfg.alpha > 0.0 && model.has_contexts();
  std::vector<ContrastivePool> pools;
  if (contrastive) {
    for (const auto& r : data.regions) {
      pools.emplace_back(r.normalized, r.windows.train, data.lookback(), data.horizon(), cfg.negatives,
                         cfg.negative_fraction);
    }
  }

  TrainResult result;
  result.best_epoch.assign(T, 0);
  result.steps_per_region.assign(T, 0);
  result.best_val.regions.resize(T);
  result.best_val.per_region.resize(T);
  for (std::size_t r = 0; r < T; ++r) result.best_val.regions[r] = data.regions[r].raw.id;

  std::vector<Metrics> last_val(T);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> active;
    for (std::size_t r = 0; r < T; ++r) {
      if (groups[group_of[r]].active) active.push_back(r);
    }
    if (active.empty()) break;

    std::vector<std::vector<std::size_t>> order(T);
    std::size_t rounds = 0;
    for (std::size_t r : active) {
      order[r] = data.regions[r].windows.train;
      std::shuffle(order[r].begin(), order[r].end(), shuffle_rng.engine());
      rounds = std::max(rounds, (order[r].size() + cfg.batch_size - 1) / cfg.batch_size);
    }
    std::vector<std::vector<ContrastivePool::Pair>> pairs(T);
    if (contrastive) {
      Rng pair_rng(cfg.seed, kPairStreamBase + epoch);
      for (std::size_t r : active) pairs[r] = pools[r].sample_all(pair_rng);
    }

    std::vector<RegionEpoch> acc(T);
    for (std::size_t k = 0; k < rounds; ++k) {
      for (std::size_t r : active) {
        // Regions with fewer windows cycle through their batches so every
        // region takes the same number of steps per epoch.
        const std::size_t chunks = (order[r].size() + cfg.batch_size - 1) / cfg.batch_size;
        const std::size_t begin = (k % chunks) * cfg.batch_size;
        const std::size_t end = std::min(order[r].size(), begin + cfg.batch_size);
        const std::span<const std::size_t> starts(order[r].data() + begin, end - begin);

        const Batch batch = make_batch(data, r, starts);
        const ForwardOutput out = model.forward(batch.history, batch.future, r, train_ctx);
        Tensor terms;
        if (contrastive) terms = contrastive_terms(model, data, r, out, batch, pools[r], pairs[r], cfg, train_ctx);
        const Tensor loss = total_loss(out.prediction, batch.target, terms, cfg.alpha);
        loss.backward();
        adam.step();
        adam.zero_grad();

        auto& a = acc[r];
        const auto p = out.prediction.values();
        const auto y = batch.target.values();
        for (std::size_t i = 0; i < p.size(); ++i) {
          a.se += (p[i] - y[i]) * (p[i] - y[i]);
          a.ae += std::abs(p[i] - y[i]);
        }
        a.count += p.size();
        a.loss += loss.item();
        ++a.steps;
        ++result.steps_per_region[r];
      }
    }

    // Validation for regions still training; stopped regions keep their last values.
    std::vector<std::size_t> to_eval;
    for (std::size_t r : active) {
      if (!data.regions[r].windows.val.empty()) to_eval.push_back(r);
    }
    for_each_region(to_eval.size(), options.threads, [&](std::size_t i) {
      const std::size_t r = to_eval[i];
      last_val[r] = region_metrics(model, data, r, data.regions[r].windows.val, cfg);
    });

    std::vector<HistoryRow> rows;
    std::vector<double> monitor(T, 0.0);
    double train_mse = 0.0, train_mae = 0.0, train_loss = 0.0, val_mse = 0.0, val_mae = 0.0;
    bool any_val = false;
    for (std::size_t r = 0; r < T; ++r) {
      const auto& id = data.regions[r].raw.id;
      const auto& a = acc[r];
      const bool trained = a.steps > 0;
      const double mse = trained ? a.se / static_cast<double>(a.count) : std::numeric_limits<double>::quiet_NaN();
      const double mae = trained ? a.ae / static_cast<double>(a.count) : std::numeric_limits<double>::quiet_NaN();
      const double loss = trained ? a.loss / static_cast<double>(a.steps) : std::numeric_limits<double>::quiet_NaN();
      if (trained) rows.push_back(HistoryRow{epoch, id, "train", mse, mae, loss});
      train_mse += mse;
      train_mae += mae;
      train_loss += loss;
      if (!data.regions[r].windows.val.empty()) {
        any_val = true;
        rows.push_back(HistoryRow{epoch, id, "val", last_val[r].mse, last_val[r].mae, last_val[r].mse});
        val_mse += last_val[r].mse;
        val_mae += last_val[r].mae;
        monitor[r] = last_val[r].mse;
      } else {
        monitor[r] = mse;
      }
    }
    const double Td = static_cast<double>(T);
    if (active.size() == T) rows.push_back(HistoryRow{epoch, "mean", "train", train_mse / Td, train_mae / Td, train_loss / Td});
    if (any_val) rows.push_back(HistoryRow{epoch, "mean", "val", val_mse / Td, val_mae / Td, val_mse / Td});

    for (auto& g : groups) {
      if (!g.active) continue;
      double m = 0.0;
      for (std::size_t r : g.regions) m += monitor[r];
      m /= static_cast<double>(g.regions.size());
      if (m < g.best) {
        g.best = m;
        g.best_epoch = epoch;
        g.since_best = 0;
        g.snapshot = snapshot(g.params);
        for (std::size_t r : g.regions) {
          result.best_epoch[r] = epoch;
          result.best_val.per_region[r] = last_val[r];
        }
      } else {
        ++g.since_best;
      }
      if (g.since_best >= cfg.patience) g.active = false;
    }

    result.epochs_run = epoch;
    if (options.on_epoch) options.on_epoch(epoch, rows);
    result.history.insert(result.history.end(), rows.begin(), rows.end());
    if (options.stop_when && options.stop_when(epoch, rows)) break;
  }

  for (auto& g : groups) {
    if (!g.snapshot.empty()) restore(g.params, g.snapshot);
  }
  fill_means(result.best_val);
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,region,split,mse,mae,loss\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%s,%.17g,%.17g,%.17g\n", r.epoch, r.region.c_str(), r.split.c_str(), r.mse,
                  r.mae, r.loss);
    out << buf;
  }
}

}  // namespace triforecaster
