#include "dmu/cli.hpp"

#include <filesystem>
#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "json.hpp"

namespace dmu {
namespace {

namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dmu_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write(dir_ / "cfg.json", R"({
      "task": {"kind": "delayed_recall", "alphabet": 3, "delay": 2, "length": 6,
               "train_size": 12, "test_size": 6},
      "model": {"layers": [{"cell": "rnn", "hidden": 4, "num_delays": 2, "dilation": 2}]},
      "train": {"epochs": 2, "batch_size": 4},
      "sweep": {"theta": [0.0, 0.4, 1.0], "n": [1, 2], "tau": [1, 2]},
      "seed": 5
    })");
  }
  void TearDown() override { fs::remove_all(dir_); }

  static void write(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
  }

  int run(std::vector<std::string> args) {
    // Relative output directories resolve against the working directory, so
    // point every run into the fixture directory unless the test chose one.
    if (args.size() > 1 && std::find(args.begin(), args.end(), "--out") == args.end()) {
      args.push_back("--out");
      args.push_back(run_dir().string());
    }
    args.insert(args.begin(), "dmu");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run_cli(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  std::string cfg() const { return (dir_ / "cfg.json").string(); }
  fs::path run_dir() const { return dir_ / "run"; }

  fs::path dir_;
  std::ostringstream out_, err_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST_F(CliTest, TrainWritesArtifacts) {
  ASSERT_EQ(run({"train", "--config", cfg()}), kExitOk) << err_.str();
  EXPECT_TRUE(fs::exists(run_dir() / "model.ckpt"));
  EXPECT_TRUE(fs::exists(run_dir() / "config.json"));
  const std::string metrics = slurp(run_dir() / "metrics.jsonl");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 2);
  EXPECT_EQ(metrics.find("wall"), std::string::npos);
  EXPECT_NE(slurp(run_dir() / "timing.jsonl").find("wall_seconds"), std::string::npos);
}

TEST_F(CliTest, TrainIsReproducible) {
  ASSERT_EQ(run({"train", "--config", cfg(), "--out", (dir_ / "a").string()}), kExitOk);
  ASSERT_EQ(run({"train", "--config", cfg(), "--out", (dir_ / "b").string()}), kExitOk);
  EXPECT_EQ(slurp(dir_ / "a" / "model.ckpt"), slurp(dir_ / "b" / "model.ckpt"));
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.jsonl"), slurp(dir_ / "b" / "metrics.jsonl"));
}

TEST_F(CliTest, UsageErrorsExitTwoWithoutOutputs) {
  EXPECT_EQ(run({}), kExitUsage);
  EXPECT_EQ(run({"train"}), kExitUsage);
  EXPECT_EQ(run({"frobnicate", "--config", cfg()}), kExitUsage);
  EXPECT_EQ(run({"train", "--config", cfg(), "--theta", "2"}), kExitUsage);
  write(dir_ / "bad.json", R"({"task": {"kind": "delayed_recall"}, "model": {"layers": []},
                              "bogus": 1})");
  EXPECT_EQ(run({"train", "--config", (dir_ / "bad.json").string()}), kExitUsage);
  EXPECT_NE(err_.str().find("bogus"), std::string::npos);
  EXPECT_FALSE(fs::exists(run_dir()));
  EXPECT_EQ(run({"train", "--config", (dir_ / "missing.json").string()}), kExitUsage);
  EXPECT_FALSE(fs::exists(run_dir()));
}

TEST_F(CliTest, HelpExitsZero) {
  EXPECT_EQ(run({"--help"}), kExitOk);
  EXPECT_NE(out_.str().find("gradcheck"), std::string::npos);
}

TEST_F(CliTest, GradcheckPassesAndCorruptHookFails) {
  EXPECT_EQ(run({"gradcheck", "--config", cfg()}), kExitOk) << out_.str() << err_.str();
  EXPECT_NE(out_.str().find("PASS"), std::string::npos);
  EXPECT_EQ(run({"gradcheck", "--config", cfg(), "--corrupt-gradient"}), kExitRuntime);
  EXPECT_NE(out_.str().find("FAIL"), std::string::npos);
  EXPECT_FALSE(fs::exists(run_dir()));
}

TEST_F(CliTest, LooseningToleranceNeverTurnsPassIntoFail) {
  const std::vector<std::string> tolerances = {"1e-9", "1e-7", "1e-5", "1e-4", "1e-2", "1"};
  bool passed = false;
  for (const auto& tol : tolerances) {
    const int code = run({"gradcheck", "--config", cfg(), "--tolerance", tol});
    ASSERT_TRUE(code == kExitOk || code == kExitRuntime);
    if (passed) EXPECT_EQ(code, kExitOk) << "tolerance " << tol;
    passed = passed || code == kExitOk;
  }
  EXPECT_TRUE(passed);
}

TEST_F(CliTest, EvalTraceHistAfterTrain) {
  ASSERT_EQ(run({"train", "--config", cfg()}), kExitOk);
  ASSERT_EQ(run({"eval", "--config", cfg()}), kExitOk) << err_.str();
  const auto j = nlohmann::json::parse(out_.str());
  EXPECT_EQ(j.at("total").get<int>(), 6);

  ASSERT_EQ(run({"trace", "--config", cfg(), "--sequence", "2"}), kExitOk) << err_.str();
  const std::string trace = slurp(run_dir() / "gate_trace.csv");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 1 + 6 * 2);

  ASSERT_EQ(run({"hist", "--config", cfg(), "--bins", "5"}), kExitOk) << err_.str();
  const std::string hist = slurp(run_dir() / "histogram.csv");
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 6);

  EXPECT_EQ(run({"eval", "--config", cfg(), "--checkpoint", (dir_ / "nope.ckpt").string()}),
            kExitRuntime);
  EXPECT_EQ(run({"trace", "--config", cfg(), "--sequence", "99"}), kExitRuntime);
}

TEST_F(CliTest, SweepsWriteCsv) {
  ASSERT_EQ(run({"sweep", "--config", cfg(), "--axis", "theta"}), kExitOk) << err_.str();
  std::string csv = slurp(run_dir() / "sweep.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);

  ASSERT_EQ(run({"sweep", "--config", cfg(), "--axis", "tau", "--span", "2"}), kExitOk)
      << err_.str();
  csv = slurp(run_dir() / "sweep.csv");
  EXPECT_NE(csv.find("2:1,"), std::string::npos);
  EXPECT_NE(csv.find("1:2,"), std::string::npos);

  EXPECT_EQ(run({"sweep", "--config", cfg(), "--axis", "theta", "--theta-values", "0,1.5"}),
            kExitUsage);
  EXPECT_EQ(run({"sweep", "--config", cfg(), "--axis", "depth"}), kExitUsage);
}

}  // namespace
}  // namespace dmu
