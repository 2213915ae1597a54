#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;  // stdout and stderr
};

Result run(const std::string& args) {
  const std::string cmd = std::string(TRIFORECASTER_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("tf_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// One small trained run shared by the tests below.
class TrainedRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("run"));
    const fs::path data = *root_ / "data";
    ASSERT_EQ(run("synth --out " + data.string() +
                  " --regions 2 --days 14 --interval 60 --lookback 24 --horizon 12 --val-days 2 --test-days 2 --seed 4")
                  .code,
              0);
    std::ofstream(*root_ / "cfg.json") << R"({"latent_dim":8,"context_experts":2,"time_experts":2,"expert_blocks":1,
      "batch_size":16,"max_epochs":3,"train_stride":4,"eval_stride":4,"learning_rate":0.01})";
    train_ = new Result(run("train --config " + (*root_ / "cfg.json").string() + " --data " + data.string() +
                            " --out " + (*root_ / "run").string() + " --seed 2"));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
    delete train_;
  }
  static fs::path* root_;
  static Result* train_;
};

fs::path* TrainedRun::root_ = nullptr;
Result* TrainedRun::train_ = nullptr;

}  // namespace

TEST(Cli, MissingDataDirectoryExitsTwo) {
  auto r = run("train --data /nonexistent/tf_data --out /tmp/tf_never");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("/nonexistent/tf_data"), std::string::npos) << r.output;
  EXPECT_FALSE(fs::exists("/tmp/tf_never"));
}

TEST(Cli, MissingRunExitsTwo) {
  auto r = run("evaluate --run /nonexistent/tf_run");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("/nonexistent/tf_run"), std::string::npos);
}

TEST(Cli, NoSubcommandIsUsageError) {
  EXPECT_NE(run("").code, 0);
  EXPECT_NE(run("bogus").code, 0);
}

TEST(Cli, SynthIsByteIdentical) {
  auto a = scratch("synth_a"), b = scratch("synth_b");
  ASSERT_EQ(run("synth --out " + a.string() + " --regions 2 --days 14 --seed 7").code, 0);
  ASSERT_EQ(run("synth --out " + b.string() + " --regions 2 --days 14 --seed 7").code, 0);
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  EXPECT_TRUE(fs::exists(a / "manifest.json"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cli, GradcheckTinyPasses) {
  auto r = run("gradcheck --tiny");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos);
}

TEST_F(TrainedRun, RunDirectoryLayout) {
  ASSERT_EQ(train_->code, 0) << train_->output;
  const fs::path dir = *root_ / "run";
  for (const char* f : {"config.json", "inputs.json", "history.csv", "metrics.json", "checkpoints/best.json",
                        "checkpoints/best.bin", "forecasts/region0.csv", "forecasts/region1.csv"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  auto cfg = nlohmann::json::parse(slurp(dir / "config.json"));
  EXPECT_EQ(cfg["seed"], 2);
  EXPECT_EQ(cfg["latent_dim"], 8);
  auto metrics = nlohmann::json::parse(slurp(dir / "metrics.json"));
  EXPECT_TRUE(metrics.contains("test"));
  EXPECT_EQ(metrics["epochs_run"], 3);
}

TEST_F(TrainedRun, EvaluateReproducesValidation) {
  ASSERT_EQ(train_->code, 0);
  const fs::path dir = *root_ / "run";
  const auto before = nlohmann::json::parse(slurp(dir / "metrics.json"));
  auto r = run("evaluate --run " + dir.string() + " --split val");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto after = nlohmann::json::parse(slurp(dir / "metrics.json"));
  // bit-for-bit: the JSON numbers round-trip doubles exactly
  EXPECT_EQ(after["val"]["mean"]["mse"].get<double>(), before["val"]["mean"]["mse"].get<double>());
  EXPECT_EQ(after["val"]["per_region"], before["val"]["per_region"]);
  auto t = run("evaluate --run " + dir.string() + " --split test");
  ASSERT_EQ(t.code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "metrics.json"))["test"], before["test"]);
}

TEST_F(TrainedRun, ForecastEmitsHorizonRows) {
  ASSERT_EQ(train_->code, 0);
  const fs::path dir = *root_ / "run";
  const fs::path out = *root_ / "fc.csv";
  // the region files start at 2023-01-02T00:00; two days in leaves room both ways
  auto r = run("forecast --run " + dir.string() + " --region region1 --at 2023-01-04T00:00:00 --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::istringstream lines(slurp(out));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "timestamp,forecast");
  int rows = 0;
  while (std::getline(lines, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, 12);
  // stdout form matches the file
  auto s = run("forecast --run " + dir.string() + " --region region1 --at 2023-01-04T00:00:00");
  EXPECT_EQ(s.output, slurp(out));
}

TEST_F(TrainedRun, UnknownRegionExitsTwo) {
  ASSERT_EQ(train_->code, 0);
  auto r = run("forecast --run " + (*root_ / "run").string() + " --region nowhere --at 2023-01-04T00:00:00");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("nowhere"), std::string::npos);
}

TEST_F(TrainedRun, ForecastWithoutHistoryFails) {
  ASSERT_EQ(train_->code, 0);
  auto r = run("forecast --run " + (*root_ / "run").string() + " --region region0 --at 2023-01-02T03:00:00");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("history"), std::string::npos);
}
