#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>

#include <gtest/gtest.h>
#include <json.hpp>

#include "mtil/errors.hpp"
#include "mtil/exp_harness.hpp"

using nlohmann::json;
using namespace mtil;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mtil_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ErrorCode code_of(const json& doc) {
  try {
    parse_config(doc);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInvalidArgument;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.trials_system = 2;
  c.trials_noise = 2;
  c.n2 = {1, 3};
  c.T_test = 50;
  return c;
}

ResultRow row(double tracking, bool stable) {
  ResultRow r;
  r.method = "direct";
  r.N1 = 10;
  r.N2 = 1;
  r.tracking_err = tracking;
  r.param_err = 2 * tracking;
  r.excess_risk = 3 * tracking;
  r.stable = stable;
  return r;
}

}  // namespace

TEST(Config, EmptyFileGivesDefaults) {
  const fs::path dir = scratch("empty");
  std::ofstream(dir / "c.json").close();
  const ExperimentConfig c = load_config(dir / "c.json");
  EXPECT_EQ(c.preset, "hong2021");
  EXPECT_EQ(c.lift_dim, 50);
  EXPECT_EQ(c.H, 9);
  EXPECT_EQ(c.k, 4);
  EXPECT_EQ(c.T, 20);
  EXPECT_EQ(c.T_test, 100);
  EXPECT_EQ(c.n1, std::vector<int>{10});
  ASSERT_EQ(c.n2.size(), 20u);
  EXPECT_EQ(c.n2.front(), 1);
  EXPECT_EQ(c.n2.back(), 20);
  EXPECT_EQ(c.alpha_lo, -2.0);
  EXPECT_EQ(c.alpha_hi, 2.0);
  EXPECT_EQ(c.trials_system, 10);
  EXPECT_EQ(c.trials_noise, 10);
  EXPECT_EQ(load_config(dir / "c.json").seed, parse_config(json::object()).seed);
}

TEST(Config, ValidationNamesField) {
  try {
    parse_config(json::parse(R"({"learn": {"k": 60}})"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kValidationError);
    EXPECT_NE(std::string(e.what()).find("learn.k"), std::string::npos) << e.what();
  }
  EXPECT_EQ(code_of(json::parse(R"({"system": {"lift_dim": 0}, "learn": {"k": 5}})")),
            ErrorCode::kValidationError);
  EXPECT_EQ(code_of(json::parse(R"({"sweep": {"bogus": 1}})")), ErrorCode::kValidationError);
  EXPECT_EQ(code_of(json::parse(R"({"sweep": {"n2": []}})")), ErrorCode::kValidationError);
  EXPECT_EQ(code_of(json::parse(R"({"sweep": {"methods": ["other"]}})")),
            ErrorCode::kValidationError);
}

TEST(Config, SingleGridPointAndRoundTrip) {
  const ExperimentConfig c = parse_config(json::parse(R"({"sweep": {"n2": [5]}})"));
  EXPECT_EQ(c.n2, std::vector<int>{5});
  const ExperimentConfig back = parse_config(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
}

TEST(Config, MalformedFile) {
  const fs::path dir = scratch("bad");
  std::ofstream(dir / "c.json") << "{ not json";
  try {
    load_config(dir / "c.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
  }
  try {
    load_config(dir / "missing.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIoError);
  }
}

TEST(Sweep, SingleDirectRow) {
  ExperimentConfig c;
  c.methods = {"direct"};
  c.n2 = {1};
  c.trials_system = 1;
  c.trials_noise = 1;
  const auto rows = run_sweep(c);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].method, "direct");
  EXPECT_EQ(rows[0].N2, 1);
  EXPECT_TRUE(rows[0].underdetermined);  // 20 samples against 50 lifted states
}

TEST(Sweep, ScaledDefaultsRowCount) {
  ExperimentConfig c;
  c.trials_system = 4;
  c.trials_noise = 5;
  c.parallelism = 2;
  const auto rows = run_sweep(c);
  EXPECT_EQ(rows.size(), 800u);
}

TEST(Sweep, ParallelismDoesNotChangeBytes) {
  ExperimentConfig c = small_config();
  const std::string serial = results_csv(run_sweep(c));
  c.parallelism = 8;
  EXPECT_EQ(results_csv(run_sweep(c)), serial);
}

TEST(Sweep, RowsSortedAndNested) {
  const auto rows = run_sweep(small_config());
  ASSERT_EQ(rows.size(), 16u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& a = rows[i - 1];
    const auto& b = rows[i];
    EXPECT_LE(std::tie(a.method, a.N1, a.N2, a.system_trial, a.noise_trial),
              std::tie(b.method, b.N1, b.N2, b.system_trial, b.noise_trial));
  }
}

TEST(Sweep, SourceTaskEvaluation) {
  ExperimentConfig c = small_config();
  c.eval_task = 1;
  c.n1 = {2, 4};
  const auto rows = run_sweep(c);
  ASSERT_EQ(rows.size(), 2u * 2u * 4u);
  for (const auto& r : rows) EXPECT_EQ(r.N2, 0);
}

TEST(Sweep, ReuseSourceData) {
  ExperimentConfig c = small_config();
  c.methods = {"multitask"};
  c.reuse_source_data = true;
  const auto rows = run_sweep(c);
  EXPECT_EQ(rows.size(), 8u);
  for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.tracking_err));
}

TEST(Results, EmptyRowsGiveHeaderOnly) {
  const std::string csv = results_csv({});
  EXPECT_EQ(csv,
            "method,system_trial,noise_trial,N1,N2,H,T,k,tracking_err,param_err,stable,"
            "excess_risk,underdetermined,nonfinite\n");
}

TEST(Results, SummaryMedianOfThree) {
  const auto summary = summarize_rows({row(5.0, true), row(1.0, false), row(3.0, true)});
  ASSERT_EQ(summary.size(), 1u);
  EXPECT_EQ(summary[0].count, 3);
  EXPECT_EQ(summary[0].tracking_median, 3.0);
  EXPECT_EQ(summary[0].param_median, 6.0);
  EXPECT_EQ(summary[0].risk_median, 9.0);
  EXPECT_NEAR(summary[0].stable_fraction, 2.0 / 3.0, 1e-15);
}

TEST(Results, WriteIsDeterministic) {
  const ExperimentConfig c = small_config();
  const auto rows = run_sweep(c);
  const fs::path a = scratch("write_a");
  const fs::path b = scratch("write_b");
  write_results(rows, c, a, true);
  write_results(rows, c, b, true);
  for (const char* f : {"results.csv", "summary.csv", "manifest.json", "plot.gp"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(slurp(a / "results.csv"), results_csv(rows));
  const json manifest = json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(manifest.at("seed").get<std::uint64_t>(), c.seed);
  EXPECT_EQ(manifest.at("rows").get<std::size_t>(), rows.size());
}

TEST(Results, UnwritableDirectory) {
  const fs::path dir = scratch("blocked");
  std::ofstream(dir / "file").close();
  try {
    write_results({}, ExperimentConfig{}, dir / "file" / "sub");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIoError);
  }
}
