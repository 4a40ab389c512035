#pragma once

#include <vector>

#include <Eigen/Dense>

#include "mtil/lti_env.hpp"
#include "mtil/random.hpp"

namespace mtil {

using Eigen::MatrixXd;

struct MetricsRecord {
  double tracking_err = 0.0;  // max_{1<=t<=T} ||xhat[t] - x*[t]||^2, +inf if nonfinite
  double param_err = 0.0;     // ||Khat - K*||_F
  bool stable = true;         // rho(A + B Khat) < 1
  double excess_risk = 0.0;
  bool underdetermined = false;
  bool nonfinite = false;
};

struct DiversityReport {
  double c = 0.0;
  double nu = 0.0;
  double nu_times_H = 0.0;
  double lambda_bar = 0.0;
  double lambda_under = 0.0;
};

struct CostGap {
  double gap = 0.0;
  double bound = 0.0;
  double ratio = 0.0;  // gap / bound, 0 when both vanish
};

/// 1/2 trace((Khat - K*) Sigma_x (Khat - K*)').
double excess_risk(const MatrixXd& K_hat, const MatrixXd& K_star,
                   const MatrixXd& sigma_x);

/// `trials` coupled rollouts of length T_test against the task's expert.
/// Trial i draws its noise from seeds/("trial", i), so two controllers
/// evaluated with equal seeds see identical realizations.
std::vector<MetricsRecord> evaluate_controller(const LinearSystem& system,
                                               const ExpertTask& target,
                                               const MatrixXd& K_hat, int T_test,
                                               int trials, const SeedTree& seeds);

/// Monte-Carlo gap of h(x, K) = max_t sqrt(x' (Q + K'RK) x) between the learned
/// and expert closed loops, and the bound C sqrt(log T * ER) with
/// C = lmax(Q)^1/2 J ||B|| + lmax(R)^1/2 (||K*|| + sqrt(tr Sigma_x / lmin Sigma_x)).
CostGap lqr_cost_gap(const LinearSystem& system, const ExpertTask& target,
                     const MatrixXd& K_hat, const MatrixXd& Q, const MatrixXd& R,
                     int T, int trials, const SeedTree& seeds);

/// Coverage constant c, nu = ||F_target pinv(F_sources)||_2^2 and the source
/// covariance eigenvalue extremes. Throws RankDeficient.
DiversityReport task_diversity_constants(const TaskEnsemble& ensemble,
                                         const GroundTruthFactors& truth);

/// Linear-interpolation quantiles at position (n-1) q. Throws EmptyInput.
std::vector<double> summarize_quantiles(std::vector<double> values,
                                        const std::vector<double>& qs);

/// Right-hand side 2 J ||B|| max_t ||Delta x*[t]|| of the TaSIL guarantee,
/// over rows t = 0..T-1 of `expert_states`.
double tasil_bound(const MatrixXd& delta, const MatrixXd& expert_states, int T,
                   double j_gain, double b_norm);

}  // namespace mtil
