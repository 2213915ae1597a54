// Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit if any fails.
//
//   acceptance [--workdir DIR] [--only 1,2,...]
//
// PUBLIC_MANIFEST=<manifest.json> enables the optional public-data check (9).
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "triforecaster/ct_specializer.hpp"
#include "triforecaster/fusion.hpp"
#include "triforecaster/gradcheck.hpp"
#include "triforecaster/models.hpp"
#include "triforecaster/synth.hpp"
#include "triforecaster/training.hpp"

namespace fs = std::filesystem;
using namespace triforecaster;

namespace {

enum class Outcome { kPass, kFail, kSkip };

struct Verdict {
  Outcome outcome = Outcome::kFail;
  std::string detail;
};

Verdict pass_if(bool ok, std::string detail) { return {ok ? Outcome::kPass : Outcome::kFail, std::move(detail)}; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// 1 ---------------------------------------------------------------------------
Verdict gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string where;
  for (ModelKind kind : {ModelKind::kTriForecaster, ModelKind::kMtl, ModelKind::kStl}) {
    const TrainConfig cfg = tiny_config(kind);
    const auto net = build_model(cfg, tiny_dims());
    const auto r = gradcheck_model(*net, tiny_dims(), cfg.seed, 3, 1e-5);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = std::string(to_string(kind)) + ":" + r.worst;
    }
  }
  const double secs = seconds_since(t0);
  return pass_if(worst <= 1e-4 && secs < 60.0,
                 fmt("max rel err %.3e at %s, %.1f s (limits 1e-4, 60 s)", worst, where.c_str(), secs));
}

// 2 ---------------------------------------------------------------------------
Verdict probability_invariants() {
  TrainConfig cfg = tiny_config();
  ModelDims dims = tiny_dims();
  const auto net = build_model(cfg, dims);
  Rng rng(2, 0), fwd(2, 1);
  std::size_t checked = 0, violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.index(5);
    const std::size_t region = rng.index(dims.regions);
    RoutingTape tape;
    tape.record();
    const ForwardContext ctx{i % 2 ? Mode::kTrain : Mode::kEval, &fwd, &tape};
    // inputs scaled up now and then to push the softmax towards saturation
    const double scale_by = i % 10 == 0 ? 50.0 : 1.0;
    net->forward(scale(random_tensor({n, dims.lookback, dims.history_channels}, rng), scale_by),
                 scale(random_tensor({n, dims.horizon, dims.future_channels}, rng), scale_by), region, ctx);
    for (const auto& p : tape.entries()) {
      const std::size_t E = p.experts(), cells = p.cells();
      for (std::size_t c = 0; c < cells; ++c) {
        double s = 0.0;
        bool negative = false;
        for (std::size_t e = 0; e < E; ++e) {
          s += p.at(e, c);
          negative = negative || p.at(e, c) < 0.0;
        }
        ++checked;
        if (negative || std::abs(s - 1.0) > 1e-9) ++violations;
      }
    }
  }
  return pass_if(violations == 0 && checked > 0, fmt("%zu cells over 1000 forwards, %zu violations", checked, violations));
}

// 3 ---------------------------------------------------------------------------
Verdict sampling_fidelity() {
  const std::size_t draws = 100000, cells = 4;
  const double p[3] = {0.7, 0.2, 0.1};
  // expert e has value e everywhere, so the pooled value names the pick
  std::vector<double> o(3 * draws * cells), pv(3 * cells);
  for (std::size_t e = 0; e < 3; ++e) {
    std::fill(o.begin() + e * draws * cells, o.begin() + (e + 1) * draws * cells, static_cast<double>(e));
    std::fill(pv.begin() + e * cells, pv.begin() + (e + 1) * cells, p[e]);
  }
  const ProbTensor probs = ProbTensor::checked(Tensor::from({3, cells}, pv));
  Rng rng(3, 0);
  const Tensor pooled = stoch_pool(Tensor::from({3, draws, cells}, o), probs, Mode::kTrain, &rng);
  double worst = 0.0;
  for (std::size_t c = 0; c < cells; ++c) {
    std::size_t count[3] = {0, 0, 0};
    for (std::size_t k = 0; k < draws; ++k) ++count[static_cast<std::size_t>(pooled.values()[k * cells + c])];
    for (std::size_t e = 0; e < 3; ++e) {
      worst = std::max(worst, std::abs(static_cast<double>(count[e]) / draws - p[e]));
    }
  }
  return pass_if(worst <= 0.01, fmt("max |freq - p| = %.4f over %zu draws x %zu cells", worst, draws, cells));
}

// 4 ---------------------------------------------------------------------------
Verdict degenerate_fusion() {
  Rng rng(4, 0);
  double uniform_dev = 0.0, invariance = 0.0;
  const std::size_t E = 3, N = 2, A = 5, B = 4;

  // routing from identical experts is exactly uniform
  const Tensor own = random_tensor({N, A, B}, rng);
  const Tensor one = random_tensor({N, A, B}, rng);
  const Tensor same = stack({one, one, one});
  for (const ProbTensor& p : {affinity_probs(own, same), activation_probs(same)}) {
    for (double v : p.values()) uniform_dev = std::max(uniform_dev, std::abs(v - 1.0 / E));
  }

  // a ContextMoE whose experts are copies routes uniformly inside a real forward
  ContextMoE moe = ContextMoE::init(E, B, B, rng);
  for (std::size_t e = 1; e < E; ++e) {
    ParamList src, dst;
    moe.experts[0].collect("", src);
    moe.experts[e].collect("", dst);
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto to = dst[i].tensor.mutable_values();
      const auto from = src[i].tensor.values();
      std::copy(from.begin(), from.end(), to.begin());
    }
  }
  RoutingTape tape;
  tape.record();
  moe.forward(random_tensor({N, A, B}, rng), ForwardContext{Mode::kEval, nullptr, &tape});
  for (const auto& p : tape.entries()) {
    for (double v : p.values()) uniform_dev = std::max(uniform_dev, std::abs(v - 1.0 / E));
  }

  // with identical expert outputs, fusion ignores the distribution
  const FusionParams fp = FusionParams::init(B, 1, rng);
  const std::vector<Tensor> direct{own};
  const ProbTensor uniform = activation_probs(same);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> raw(E * A * B);
    for (double& x : raw) x = rng.uniform(0.01, 1.0);
    const ProbTensor perturbed = ProbTensor::checked(softmax(Tensor::from({E, A, B}, raw), 0));
    for (Mode mode : {Mode::kEval, Mode::kTrain}) {
      Rng r1(trial, 0), r2(trial, 1);
      const Tensor a = fusion(direct, same, uniform, fp, ForwardContext{mode, &r1, nullptr});
      const Tensor b = fusion(direct, same, perturbed, fp, ForwardContext{mode, &r2, nullptr});
      for (std::size_t i = 0; i < a.numel(); ++i) {
        invariance = std::max(invariance, std::abs(a.values()[i] - b.values()[i]));
      }
    }
  }
  return pass_if(uniform_dev <= 1e-12 && invariance <= 1e-12 && tape.size() > 0,
                 fmt("max |P - 1/E| = %.2e, max output change under P perturbation = %.2e", uniform_dev, invariance));
}

// 5 ---------------------------------------------------------------------------
Verdict contrastive_closed_form() {
  Rng rng(5, 0);
  double worst = 0.0;
  for (std::size_t nn : {1, 4, 16}) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor p = random_tensor({3, 4}, rng);
    // negatives at the same similarity to the anchor as the positive
    const std::vector<Tensor> negs(nn, p);
    const double got = contrastive_loss(a, p, negs, 0.1).item();
    worst = std::max(worst, std::abs(got + 1.0 / (1.0 + static_cast<double>(nn))));
  }
  std::size_t outside = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t nn = 1 + rng.index(16);
    const double tau = rng.uniform(0.05, 1.0);
    std::vector<Tensor> negs;
    for (std::size_t k = 0; k < nn; ++k) negs.push_back(random_tensor({2, 3}, rng));
    const double l = contrastive_loss(random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), negs, tau).item();
    if (!(l > -1.0 && l < 0.0)) ++outside;
  }
  return pass_if(worst <= 1e-9 && outside == 0,
                 fmt("closed-form error %.2e (N_n 1/4/16), %zu of 1000 random cases outside (-1,0)", worst, outside));
}

// 6 ---------------------------------------------------------------------------
Verdict overfit(const fs::path&) {
  const auto t0 = std::chrono::steady_clock::now();
  SynthOptions o;
  o.regions = 3;
  o.days = 25;
  o.interval_minutes = 18;  // 80 steps a day, 2000 in all
  o.seed = 6;
  o.noise_sd = 0.0;  // unit load noise alone is 0.03-0.08 in normalized units
  o.lookback = 24;
  o.horizon = 12;
  o.val_span_days = 0;
  o.test_span_days = 0;
  std::vector<RegionSeries> series;
  for (const auto& r : synth_generate(o)) series.push_back(to_series(r));
  const std::size_t steps = series[0].length();
  Dataset data = prepare_dataset(synth_manifest(o), std::move(series));

  TrainConfig cfg;
  cfg.latent_dim = 16;
  cfg.max_epochs = 200;
  cfg.patience = 200;
  cfg.learning_rate = 0.003;
  cfg.alpha = 0.0;
  cfg.seed = 1;
  auto net = build_model(cfg, data.dims());
  double last = std::nan("");
  TrainOptions opt;
  opt.stop_when = [&](std::size_t, std::span<const HistoryRow> rows) {
    for (const auto& r : rows) {
      if (r.region == "mean" && r.split == "train") last = r.mse;
    }
    return last < 0.01 || seconds_since(t0) > 600.0;
  };
  const auto result = train(*net, data, cfg, opt);
  const double secs = seconds_since(t0);
  return pass_if(last < 0.01 && secs < 600.0,
                 fmt("%zu steps/region, train mse %.5f after %zu epochs, %.0f s (limits 0.01, 200 epochs, 600 s)", steps,
                     last, result.epochs_run, secs));
}

// 7, 8 -------------------------------------------------------------------------
struct Benchmark {
  std::vector<double> tri, mtl, stl, no_region, no_context, no_time;
  double minutes_7 = 0.0, minutes_8 = 0.0;
  bool ran = false;
};

TrainConfig bench_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.max_epochs = 30;
  cfg.patience = 10;
  cfg.train_stride = 16;
  cfg.eval_stride = 8;
  cfg.contrastive_keys = ContrastiveKeys::kDetached;
  return cfg;
}

double bench_run(const Dataset& data, TrainConfig cfg) {
  auto net = build_model(cfg, data.dims());
  train(*net, data, cfg);
  return evaluate(*net, data, Split::kTest, cfg).mean_mse;
}

Dataset bench_data(const TrainConfig& cfg) {
  SynthOptions o;
  o.regions = 5;
  o.days = 180;
  o.interval_minutes = 15;
  o.seed = 1;
  std::vector<RegionSeries> series;
  for (const auto& r : synth_generate(o)) series.push_back(to_series(r));
  return prepare_dataset(synth_manifest(o), std::move(series), cfg.train_stride, cfg.eval_stride);
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += fmt("%s%.4f", s.empty() ? "" : " ", x);
  return s;
}

void run_benchmark(Benchmark& b, bool ablations) {
  const Dataset data = bench_data(bench_config(0));
  auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig cfg = bench_config(seed);
    b.tri.push_back(bench_run(data, cfg));
    cfg.model = ModelKind::kMtl;
    b.mtl.push_back(bench_run(data, cfg));
    cfg.model = ModelKind::kStl;
    b.stl.push_back(bench_run(data, cfg));
    std::fprintf(stderr, "  seed %llu: tri %.4f mtl %.4f stl %.4f\n", static_cast<unsigned long long>(seed),
                 b.tri.back(), b.mtl.back(), b.stl.back());
  }
  b.minutes_7 = seconds_since(t0) / 60.0;
  if (ablations) {
    t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      TrainConfig cfg = bench_config(seed);
      cfg.ablation = Ablation::kRegionMixer;
      b.no_region.push_back(bench_run(data, cfg));
      cfg.ablation = Ablation::kContextMoE;
      b.no_context.push_back(bench_run(data, cfg));
      cfg.ablation = Ablation::kTimeMoE;
      b.no_time.push_back(bench_run(data, cfg));
      std::fprintf(stderr, "  seed %llu: w/o region %.4f w/o context %.4f w/o time %.4f\n",
                   static_cast<unsigned long long>(seed), b.no_region.back(), b.no_context.back(), b.no_time.back());
    }
    b.minutes_8 = seconds_since(t0) / 60.0;
  }
  b.ran = true;
}

Verdict ordering(const Benchmark& b) {
  const double tri = median(b.tri), mtl = median(b.mtl), stl = median(b.stl);
  return pass_if(tri < mtl && tri < stl && b.minutes_7 < 120.0,
                 fmt("median test mse tri %.4f mtl %.4f stl %.4f, %.1f min (limit 120); tri [%s] mtl [%s] stl [%s]", tri,
                     mtl, stl, b.minutes_7, list(b.tri).c_str(), list(b.mtl).c_str(), list(b.stl).c_str()));
}

Verdict ablation(const Benchmark& b) {
  const double full = median(b.tri), r = median(b.no_region), c = median(b.no_context), t = median(b.no_time);
  return pass_if(full <= r && full <= c && full <= t,
                 fmt("median test mse full %.4f, w/o regionmixer %.4f, w/o contextmoe %.4f, w/o timemoe %.4f, %.1f min; "
                     "[%s] [%s] [%s]",
                     full, r, c, t, b.minutes_8, list(b.no_region).c_str(), list(b.no_context).c_str(),
                     list(b.no_time).c_str()));
}

// 9 ---------------------------------------------------------------------------
Verdict public_data() {
  const char* manifest = std::getenv("PUBLIC_MANIFEST");
  if (!manifest || !*manifest) return {Outcome::kSkip, "set PUBLIC_MANIFEST to a dataset manifest to run"};
  TrainConfig cfg;
  cfg.seed = 1;
  const Dataset data = load_dataset(manifest, cfg.train_stride, cfg.eval_stride);
  const double tri = bench_run(data, cfg);
  cfg.model = ModelKind::kMtl;
  const double mtl = bench_run(data, cfg);
  cfg.model = ModelKind::kStl;
  const double stl = bench_run(data, cfg);
  return pass_if(tri < mtl && mtl < stl, fmt("test mse tri %.4f mtl %.4f stl %.4f", tri, mtl, stl));
}

// 10 --------------------------------------------------------------------------
Verdict determinism(const fs::path& workdir) {
  SynthOptions o;
  o.regions = 3;
  o.days = 21;
  o.interval_minutes = 60;
  o.seed = 10;
  o.lookback = 24;
  o.horizon = 12;
  o.val_span_days = 3;
  o.test_span_days = 3;
  std::vector<RegionSeries> series;
  for (const auto& r : synth_generate(o)) series.push_back(to_series(r));
  TrainConfig cfg;
  cfg.latent_dim = 8;
  cfg.max_epochs = 4;
  cfg.train_stride = 2;
  cfg.batch_size = 32;
  cfg.seed = 10;
  const Dataset data = prepare_dataset(synth_manifest(o), std::move(series), cfg.train_stride, cfg.eval_stride);

  std::vector<std::string> histories, checkpoints;
  int run = 0;
  for (std::size_t threads : {1, 1, 3}) {
    for (ModelKind kind : {ModelKind::kTriForecaster, ModelKind::kStl}) {
      TrainConfig c = cfg;
      c.model = kind;
      const fs::path dir = workdir / "determinism" / fmt("run%d", run++);
      fs::create_directories(dir);
      auto net = build_model(c, data.dims());
      TrainOptions opt;
      opt.threads = threads;
      const auto result = train(*net, data, c, opt);
      write_history_csv(dir / "history.csv", result.history);
      save_checkpoint(dir / "best", net->parameters(), CheckpointMeta{c.hash(), c.seed});
      histories.push_back(slurp(dir / "history.csv"));
      checkpoints.push_back(slurp(dir / "best.bin") + slurp(dir / "best.json"));
    }
  }
  bool same = true;
  for (std::size_t i = 2; i < histories.size(); ++i) {
    same = same && histories[i] == histories[i % 2] && checkpoints[i] == checkpoints[i % 2];
  }
  return pass_if(same, fmt("%zu runs (triforecaster and stl, 1 and 3 threads): history.csv and checkpoints %s",
                           histories.size(), same ? "bit-identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string workdir = (fs::temp_directory_path() / "triforecaster_acceptance").string();
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory");
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);
  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int k) { return selected.empty() || selected.count(k) != 0; };

  Benchmark bench;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient suite", gradients},
      {"probability invariants", probability_invariants},
      {"sampling fidelity", sampling_fidelity},
      {"degenerate fusion", degenerate_fusion},
      {"contrastive closed form", contrastive_closed_form},
      {"overfit", [&] { return overfit(workdir); }},
      {"benchmark ordering",
       [&] {
         if (!bench.ran) run_benchmark(bench, want(8));
         return ordering(bench);
       }},
      {"benchmark ablations",
       [&] {
         if (!bench.ran) run_benchmark(bench, true);
         return ablation(bench);
       }},
      {"public data ordering", public_data},
      {"determinism", [&] { return determinism(workdir); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int k = static_cast<int>(i + 1);
    if (!want(k)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {Outcome::kFail, std::string("exception: ") + e.what()};
    }
    const char* tag = v.outcome == Outcome::kPass ? "PASS" : v.outcome == Outcome::kFail ? "FAIL" : "SKIP";
    if (v.outcome == Outcome::kFail) ++failed;
    std::printf("[%s] criterion %2d %-24s %s (%.1f s)\n", tag, k, criteria[i].first.c_str(), v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
