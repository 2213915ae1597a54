#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "triforecaster/ct_specializer.hpp"
#include "triforecaster/errors.hpp"
#include "triforecaster/synth.hpp"
#include "triforecaster/training.hpp"

using namespace triforecaster;
using tftest::uniform;
using tftest::vals;

namespace {

Dataset small_data(std::size_t regions = 2, std::uint64_t seed = 3) {
  SynthOptions o;
  o.regions = regions;
  o.days = 14;
  o.interval_minutes = 60;
  o.seed = seed;
  o.lookback = 24;
  o.horizon = 12;
  o.val_span_days = 2;
  o.test_span_days = 2;
  std::vector<RegionSeries> series;
  for (const auto& r : synth_generate(o)) series.push_back(to_series(r));
  return prepare_dataset(synth_manifest(o), std::move(series), 4, 4);
}

TrainConfig small_cfg(ModelKind kind = ModelKind::kTriForecaster) {
  TrainConfig c;
  c.model = kind;
  c.latent_dim = 8;
  c.context_experts = 2;
  c.time_experts = 2;
  c.expert_blocks = 1;
  c.baseline_blocks = 1;
  c.batch_size = 16;
  c.max_epochs = 3;
  c.patience = 10;
  c.seed = 5;
  c.learning_rate = 0.01;
  return c;
}

// Textbook Adam on a scalar, written out independently.
struct RefAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8, m = 0, v = 0;
  int t = 0;
  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return x - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace

TEST(Adam, MatchesReferenceOnQuadratic) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Adam adam({{"x", x}}, 0.05);
  RefAdam ref{0.05};
  double rx = 3.0;
  for (int i = 0; i < 100; ++i) {
    adam.zero_grad();
    sum(square(x)).backward();
    adam.step();
    rx = ref.step(rx, 2 * rx);
    ASSERT_NEAR(x.values()[0], rx, 1e-12) << "step " << i;
  }
  EXPECT_LT(std::abs(rx), 3.0);
  EXPECT_EQ(adam.steps(0), 100u);
}

TEST(Adam, FirstStepIsSignTimesRate) {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({{"x", x}}, 0.01);
  sum(mul(x, Tensor::from({3}, {4.0, -0.3, 100.0}))).backward();
  adam.step();
  EXPECT_NEAR(x.values()[0], 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(x.values()[1], -2.0 + 0.01, 1e-8);
  EXPECT_NEAR(x.values()[2], 0.5 - 0.01, 1e-8);
}

TEST(Adam, UntouchedParameterUnchanged) {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor b = Tensor::from({2}, {3.0, 4.0}, true);
  Adam adam({{"a", a}, {"b", b}}, 0.1);
  sum(square(a)).backward();
  adam.step();
  EXPECT_EQ(vals(b), (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(adam.steps(1), 0u);
  EXPECT_EQ(adam.steps(0), 1u);
}

TEST(Adam, ZeroGradientLeavesValues) {
  Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
  Adam adam({{"a", a}}, 0.1);
  for (int i = 0; i < 5; ++i) {
    adam.zero_grad();
    sum(scale(a, 0.0)).backward();
    adam.step();
  }
  EXPECT_EQ(vals(a), (std::vector<double>{1.0, 2.0}));
}

TEST(Objective, Examples) {
  Tensor y = Tensor::from({2, 1}, {1.0, 2.0});
  EXPECT_DOUBLE_EQ(total_loss(y, y, {}, 0.1).item(), 0.0);
  EXPECT_DOUBLE_EQ(total_loss(Tensor::from({2, 1}, {2.0, 3.0}), y, {}, 0.0).item(), 1.0);
  // equal similarity everywhere with four negatives: -1/5 per sample
  Tensor c = Tensor::from({3}, {-0.2, -0.2, -0.2});
  EXPECT_NEAR(total_loss(y, y, c, 1.0).item(), -0.2, 1e-15);
  EXPECT_NEAR(total_loss(y, y, c, 0.0).item(), 0.0, 1e-15);
  EXPECT_THROW(total_loss(y, Tensor::from({1, 2}, {1.0, 2.0}), {}, 0.0), DimensionError);
  EXPECT_THROW(total_loss(y, y, c, -1.0), ContractError);
}

TEST(Objective, EqualSimilarityGivesReciprocal) {
  Rng rng(1, 0);
  Tensor a = uniform({3, 5}, rng);
  Tensor q = stack({a, a, a, a});  // [4, 3, 5]
  Tensor negs = reshape(transpose(q, {1, 0, 2}), {12, 5});
  EXPECT_NEAR(total_loss(a, a, batched_contrastive(a, a, negs, 0.1), 1.0).item(), -0.2, 1e-12);
}

TEST(Objective, BatchedMatchesPerSample) {
  Rng rng(2, 0);
  const std::size_t n = 4, k = 3;
  Tensor a = uniform({n, 2, 3}, rng, false, -1, 1);
  Tensor p = uniform({n, 2, 3}, rng, false, -1, 1);
  Tensor q = uniform({n * k, 2, 3}, rng, false, -1, 1);
  const auto batched = vals(batched_contrastive(a, p, q, 0.3));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Tensor> negs;
    for (std::size_t j = 0; j < k; ++j) negs.push_back(select(q, i * k + j));
    const double single = contrastive_loss(select(a, i), select(p, i), negs, 0.3).item();
    EXPECT_NEAR(batched[i], single, 1e-12);
  }
  EXPECT_THROW(batched_contrastive(a, p, slice(q, 0, 5), 0.3), DimensionError);
  EXPECT_THROW(batched_contrastive(a, p, q, 0.0), ContractError);
}

TEST(Objective, BatchedGradient) {
  Rng rng(3, 0);
  auto in = std::vector<Tensor>{uniform({2, 4}, rng, true, -1, 1), uniform({2, 4}, rng, true, -1, 1),
                                uniform({4, 4}, rng, true, -1, 1)};
  EXPECT_LT(tftest::fd_max_rel(in, [](const std::vector<Tensor>& t) { return sum(batched_contrastive(t[0], t[1], t[2], 0.5)); }),
            1e-4);
}

TEST(Evaluate, PerfectAndZeroPredictors) {
  Dataset data = small_data();
  struct Oracle : Forecaster {
    const Dataset* data;
    bool zero;
    Oracle(const Dataset* d, bool z) : data(d), zero(z) {}
    ForwardOutput forward(const Tensor& history, const Tensor&, std::size_t region, const ForwardContext&) const override {
      // Identify each window by its lookback load and copy the true continuation.
      const std::size_t n = history.size(0), L = data->lookback(), H = data->horizon(), C = history.size(2);
      const auto& load = data->regions[region].normalized.load();
      std::vector<double> out(n * H, 0.0);
      if (!zero) {
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t s = 0; s + L + H <= load.size(); ++s) {
            bool match = true;
            for (std::size_t l = 0; l < L && match; ++l) match = load[s + l] == history.values()[(i * L + l) * C];
            if (match) {
              for (std::size_t h = 0; h < H; ++h) out[i * H + h] = load[s + L + h];
              break;
            }
          }
        }
      }
      return {Tensor::from({n, H, 1}, out), {}};
    }
    ParamList parameters() const override { return {}; }
    std::size_t regions() const override { return data->regions.size(); }
    std::string_view kind() const override { return "oracle"; }
  };
  TrainConfig cfg = small_cfg();
  Oracle perfect(&data, false), zero(&data, true);
  auto r = evaluate(perfect, data, Split::kTest, cfg);
  EXPECT_EQ(r.mean_mse, 0.0);
  EXPECT_EQ(r.mean_mae, 0.0);
  // train split is z-scored with train statistics, so a zero predictor scores about 1
  auto z = evaluate(zero, data, Split::kTrain, cfg);
  EXPECT_NEAR(z.mean_mse, 1.0, 0.15);
  for (const auto& m : z.per_region) {
    EXPECT_LE(m.mae * m.mae, m.mse + 1e-15);
    EXPECT_EQ(m.count, data.regions[0].windows.train.size() * data.horizon());
  }
}

TEST(Evaluate, MaeSquaredBoundedByMse) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  auto model = build_model(cfg, data.dims());
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    auto r = evaluate(*model, data, s, cfg);
    for (const auto& m : r.per_region) EXPECT_LE(m.mae * m.mae, m.mse * (1 + 1e-12));
  }
  EXPECT_EQ(evaluate(*model, data, Split::kVal, cfg, 2).mean_mse, evaluate(*model, data, Split::kVal, cfg, 1).mean_mse);
}

TEST(Evaluate, EmptySplitRejected) {
  Dataset data = small_data();
  data.regions[1].windows.test.clear();
  TrainConfig cfg = small_cfg();
  auto model = build_model(cfg, data.dims());
  try {
    evaluate(*model, data, Split::kTest, cfg);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("region1"), std::string::npos);
  }
  EXPECT_THROW(parse_split("dev"), ConfigError);
}

TEST(Train, PatienceZeroRunsOneEpoch) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  cfg.patience = 0;
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  EXPECT_EQ(r.epochs_run, 1u);
  EXPECT_EQ(r.best_epoch, (std::vector<std::size_t>{1, 1}));
}

TEST(Train, SameSeedBitIdentical) {
  Dataset data = small_data();
  for (auto kind : {ModelKind::kTriForecaster, ModelKind::kMtl, ModelKind::kStl}) {
    TrainConfig cfg = small_cfg(kind);
    cfg.max_epochs = 2;
    auto m1 = build_model(cfg, data.dims());
    auto m2 = build_model(cfg, data.dims());
    auto r1 = train(*m1, data, cfg);
    auto r2 = train(*m2, data, cfg);
    ASSERT_EQ(r1.history.size(), r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
      EXPECT_EQ(r1.history[i].mse, r2.history[i].mse);
      EXPECT_EQ(r1.history[i].loss, r2.history[i].loss);
    }
    EXPECT_EQ(snapshot(m1->parameters()), snapshot(m2->parameters()));
  }
}

TEST(Train, EmptyRegionRejected) {
  Dataset data = small_data();
  data.regions[0].windows.train.clear();
  TrainConfig cfg = small_cfg();
  auto model = build_model(cfg, data.dims());
  EXPECT_THROW(train(*model, data, cfg), DataError);
}

TEST(Train, EqualStepsPerRegion) {
  Dataset data = small_data(3);
  // make one region shorter so it has to cycle
  data.regions[2].windows.train.resize(data.regions[2].windows.train.size() / 3);
  TrainConfig cfg = small_cfg();
  cfg.alpha = 0.0;  // too few windows left for contrastive positives
  cfg.max_epochs = 2;
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  EXPECT_EQ(r.steps_per_region[0], r.steps_per_region[2]);
  EXPECT_EQ(r.steps_per_region[1], r.steps_per_region[2]);
  const std::size_t per_epoch = (data.regions[0].windows.train.size() + 15) / 16;
  EXPECT_EQ(r.steps_per_region[0], 2 * per_epoch);
}

TEST(Train, BestValNeverWorseThanAnyEpoch) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  cfg.max_epochs = 5;
  cfg.learning_rate = 0.05;  // noisy on purpose
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  double worst_best = 1e300;
  for (const auto& h : r.history) {
    if (h.region == "mean" && h.split == "val") worst_best = std::min(worst_best, h.mse);
  }
  // the restored model reproduces the best epoch exactly
  auto after = evaluate(*model, data, Split::kVal, cfg);
  EXPECT_EQ(after.mean_mse, r.best_val.mean_mse);
  EXPECT_DOUBLE_EQ(after.mean_mse, worst_best);
}

TEST(Train, StlRegionsStopIndependently) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg(ModelKind::kStl);
  cfg.max_epochs = 6;
  cfg.patience = 1;
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  auto after = evaluate(*model, data, Split::kVal, cfg);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(after.per_region[i].mse, r.best_val.per_region[i].mse);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  cfg.learning_rate = 0.0;
  cfg.max_epochs = 1;
  auto model = build_model(cfg, data.dims());
  auto before = snapshot(model->parameters());
  train(*model, data, cfg);
  EXPECT_EQ(snapshot(model->parameters()), before);
}

TEST(Train, AlphaZeroIsPureMse) {
  // One sample per batch: the mean step loss equals the epoch's train MSE.
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  cfg.alpha = 0.0;
  cfg.batch_size = 1;
  cfg.max_epochs = 1;
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  for (const auto& h : r.history) {
    if (h.split == "train" && h.region != "mean") EXPECT_NEAR(h.loss, h.mse, 1e-12);
  }
  cfg.alpha = 0.5;
  auto m2 = build_model(cfg, data.dims());
  auto r2 = train(*m2, data, cfg);
  EXPECT_NE(r2.history.front().loss, r2.history.front().mse);
}

TEST(Train, DetachedKeysChangeOnlyGradients) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg();
  cfg.max_epochs = 1;
  auto m1 = build_model(cfg, data.dims());
  auto r1 = train(*m1, data, cfg);
  cfg.contrastive_keys = ContrastiveKeys::kDetached;
  auto m2 = build_model(cfg, data.dims());
  auto r2 = train(*m2, data, cfg);
  // first step sees the same loss; updates differ afterwards
  EXPECT_NE(snapshot(m1->parameters()), snapshot(m2->parameters()));
  EXPECT_TRUE(std::isfinite(r2.history.front().loss));
}

TEST(Train, OverfitsTinyProblem) {
  Dataset data = small_data();
  for (auto& r : data.regions) r.windows.train.resize(8);
  TrainConfig cfg = small_cfg(ModelKind::kMtl);
  cfg.max_epochs = 150;
  cfg.patience = 150;
  cfg.batch_size = 8;
  auto model = build_model(cfg, data.dims());
  auto r = train(*model, data, cfg);
  double last = 0;
  for (const auto& h : r.history) {
    if (h.region == "mean" && h.split == "train") last = h.mse;
  }
  EXPECT_LT(last, 0.05);
}

TEST(Train, EpochCallbackSeesEveryEpoch) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg(ModelKind::kMtl);
  std::vector<std::size_t> seen;
  TrainOptions opt;
  opt.on_epoch = [&](std::size_t e, std::span<const HistoryRow> rows) {
    seen.push_back(e);
    EXPECT_FALSE(rows.empty());
  };
  train(*build_model(cfg, data.dims()), data, cfg, opt);
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(History, CsvLayout) {
  auto path = std::filesystem::temp_directory_path() / "tf_history_test.csv";
  std::vector<HistoryRow> rows{{1, "mean", "val", 0.5, 0.25, 0.5}};
  write_history_csv(path, rows);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "epoch,region,split,mse,mae,loss\n1,mean,val,0.5,0.25,0.5\n");
  std::filesystem::remove(path);
}

TEST(Config, RoundTripAndHash) {
  TrainConfig c = small_cfg(ModelKind::kStl);
  c.ablation = Ablation::kTimeMoE;
  c.contrastive_keys = ContrastiveKeys::kDetached;
  c.eval_pooling = EvalPooling::kSample;
  TrainConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
  back.seed = 6;
  EXPECT_NE(back.hash(), c.hash());
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(config_from_json({{"learning_rat", 0.1}}), ConfigError);
  EXPECT_THROW(config_from_json({{"model", "lstm"}}), ConfigError);
  EXPECT_THROW(config_from_json({{"contrastive_keys", "frozen"}}), ConfigError);
  TrainConfig c;
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(config_from_json(nlohmann::json::object()).hash(), TrainConfig{}.hash());
}

TEST(Config, FnvKnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Train, StopPredicateEndsEarly) {
  Dataset data = small_data();
  TrainConfig cfg = small_cfg(ModelKind::kMtl);
  cfg.max_epochs = 10;
  TrainOptions opt;
  opt.stop_when = [](std::size_t e, std::span<const HistoryRow>) { return e == 2; };
  auto r = train(*build_model(cfg, data.dims()), data, cfg, opt);
  EXPECT_EQ(r.epochs_run, 2u);
}

TEST(Adam, NoGradientLeakBetweenSteps) {
  // Two identical steps at lr = 0: bias-corrected moments stay at g and g^2.
  Tensor x = Tensor::from({2}, {0.5, -1.5}, true);
  Adam adam({{"x", x}}, 0.0);
  for (int t = 1; t <= 2; ++t) {
    adam.zero_grad();
    sum(square(x)).backward();
    adam.step();
    for (std::size_t k = 0; k < 2; ++k) {
      const double g = 2 * x.values()[k];
      EXPECT_NEAR(adam.first_moment(0)[k] / (1 - std::pow(0.9, t)), g, 1e-12);
      EXPECT_NEAR(adam.second_moment(0)[k] / (1 - std::pow(0.999, t)), g * g, 1e-12);
    }
  }
  EXPECT_EQ(vals(x), (std::vector<double>{0.5, -1.5}));
}
