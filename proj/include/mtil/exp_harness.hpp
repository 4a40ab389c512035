#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace mtil {

using Eigen::MatrixXd;

inline constexpr int kResultsSchemaVersion = 1;
inline constexpr const char* kToolVersion = "1.0.0";

struct ExperimentConfig {
  // system
  std::string preset = "hong2021";
  std::optional<MatrixXd> A;  // inline plant, overrides the preset
  std::optional<MatrixXd> B;
  int lift_dim = 50;          // 0 disables lifting
  double sigma_z = 1.0;
  double sigma_w = 1.0;       // process noise is sigma_w^2 I in the observed space
  // tasks
  int H = 9;
  double alpha_lo = -2.0;
  double alpha_hi = 2.0;
  std::optional<MatrixXd> R;  // identity when unset
  // learn
  int k = 4;
  int restarts = 1;
  int max_sweeps = 500;
  double rel_tol = 1e-10;
  // sweep
  int T = 20;
  int T_test = 100;
  std::vector<int> n1 = {10};
  std::vector<int> n2;        // 1..20 when unset
  int trials_system = 10;
  int trials_noise = 10;
  std::vector<std::string> methods = {"multitask", "direct"};
  int eval_task = 0;          // 0 is the target, h in 1..H evaluates source h
  bool reuse_source_data = false;
  // run
  std::uint64_t seed = 1;
  int parallelism = 1;

  ExperimentConfig();
};

struct ResultRow {
  std::string method;
  int system_trial = 0;
  int noise_trial = 0;
  int N1 = 0;
  int N2 = 0;
  int H = 0;
  int T = 0;
  int k = 0;
  double tracking_err = 0.0;
  double param_err = 0.0;
  bool stable = false;
  double excess_risk = 0.0;
  bool underdetermined = false;
  bool nonfinite = false;
  double wall_time_ms = 0.0;
};

struct SummaryRow {
  std::string method;
  int N1 = 0;
  int N2 = 0;
  int count = 0;
  double tracking_median = 0.0, tracking_q20 = 0.0, tracking_q80 = 0.0;
  double param_median = 0.0, param_q20 = 0.0, param_q80 = 0.0;
  double risk_median = 0.0, risk_q20 = 0.0, risk_q80 = 0.0;
  double stable_fraction = 0.0;
};

/// Parses and validates a config document. Unknown keys and bad values raise
/// ValidationError naming the field path.
ExperimentConfig parse_config(const nlohmann::json& doc);

/// Reads a JSON config file; an empty file yields the defaults. Throws
/// IoError, ParseError, ValidationError.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully expanded config, suitable for re-parsing.
nlohmann::json config_to_json(const ExperimentConfig& config);

/// Runs every (method, N1, N2, system trial, noise trial) cell. Rows come back
/// sorted by (method, N1, N2, system_trial, noise_trial) and are independent
/// of `config.parallelism`.
std::vector<ResultRow> run_sweep(const ExperimentConfig& config);

std::vector<SummaryRow> summarize_rows(const std::vector<ResultRow>& rows);

/// Writes results.csv, summary.csv, manifest.json and timings.csv (plus
/// plot.gp when requested) into out_dir. Throws IoError.
std::vector<std::filesystem::path> write_results(const std::vector<ResultRow>& rows,
                                                 const ExperimentConfig& config,
                                                 const std::filesystem::path& out_dir,
                                                 bool emit_plot_script = false);

/// results.csv body for the given rows.
std::string results_csv(const std::vector<ResultRow>& rows);

}  // namespace mtil
