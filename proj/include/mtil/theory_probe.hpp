#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mtil/lti_env.hpp"
#include "mtil/random.hpp"

namespace mtil {

using Eigen::MatrixXd;

/// Outcome of one Monte-Carlo probe. `margin` is the worst ratio of the
/// checked statistic to its allowance; `details` holds named diagnostics.
struct ProbeReport {
  std::string name;
  long long trials = 0;
  long long failures = 0;
  double delta_target = 0.0;
  double margin = 0.0;
  std::map<std::string, double> details;
  std::string note;
  bool pass = false;

  double failure_rate() const {
    return trials > 0 ? static_cast<double>(failures) / static_cast<double>(trials) : 0.0;
  }
};

enum class RegressorKind { kConstant, kGaussianIid, kStateFeedback };

RegressorKind regressor_kind_from_string(const std::string& name);
std::string to_string(RegressorKind kind);

struct MartingaleSetup {
  int H = 1;
  int T = 100;
  int dim_x = 1;
  int dim_eta = 1;
  double sigma = 1.0;
  std::vector<MatrixXd> regularizers;  // one dim_x x dim_x PD matrix per process
};

/// Fraction of trials in which 0.9 S <= E/(NT) <= 1.1 S fails in the PSD order,
/// with S = Sigma_x (or P' Sigma_x P for a projection P, n x 2k). Passes when
/// the fraction is at most `max_failure_fraction`.
ProbeReport verify_covariance_concentration(const LinearSystem& system,
                                            const ExpertTask& task, int N, int T,
                                            const std::optional<MatrixXd>& projection,
                                            int trials, const SeedTree& seeds,
                                            double max_failure_fraction = 0.1);

/// Upper tail of ||R z||^2 against exp(-1/4 min(eps^2/4, eps) ||R||_F^2/||R||^2)
/// for each eps; `failures` counts grid points where the empirical frequency
/// exceeds the bound by more than 3 binomial standard errors.
ProbeReport verify_hanson_wright(const MatrixXd& R, const std::vector<double>& eps_grid,
                                 int trials, const SeedTree& seeds);

/// Sum_h ||Vbar_T^{-1/2} S_T||_F^2 against
/// 2 sigma^2 [sum_h (m/2) log(det Vbar_T / det V) + log(1/delta)].
/// Passes when the failure fraction is at most delta + 3 se.
ProbeReport verify_self_normalized(const MartingaleSetup& setup, double delta,
                                   int trials, const SeedTree& seeds,
                                   RegressorKind kind);

/// E[max_{t<T} ||Delta x_t||^2], x_t iid N(0, Sigma_x), against
/// 3 (1 + log T) trace(Delta Sigma_x Delta').
ProbeReport verify_maximal_inequality(const MatrixXd& delta_gain, const MatrixXd& sigma_x,
                                      int T, int trials, const SeedTree& seeds);

/// Coupled rollouts of K_hat against the task's expert. Checks the
/// deterministic incremental-stability display on every trial and the
/// high-probability tracking display at level delta_prime.
ProbeReport verify_tracking_and_siss(const LinearSystem& system, const ExpertTask& target,
                                     const MatrixXd& K_hat, int T, double delta_prime,
                                     int trials, const SeedTree& seeds);

/// Scalar plant x+ = a x + u + w with k_hat = k_star + eps. Throws UnstablePair.
ProbeReport verify_scalar_sandwich(double a, double k_star, double eps, int T,
                                   int trials, const SeedTree& seeds);

/// Named probes at their default settings, in a fixed order.
std::vector<std::string> probe_names();
ProbeReport run_named_probe(const std::string& name, const SeedTree& seeds);

}  // namespace mtil
