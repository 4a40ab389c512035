#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mtil/random.hpp"

namespace mtil {

using Eigen::MatrixXd;

/// Plant x[t+1] = A x[t] + B u[t] + w[t], shared by all tasks.
class LinearSystem {
 public:
  LinearSystem() = default;
  LinearSystem(MatrixXd A, MatrixXd B);

  const MatrixXd& A() const { return a_; }
  const MatrixXd& B() const { return b_; }
  Eigen::Index nx() const { return a_.rows(); }
  Eigen::Index nu() const { return b_.cols(); }

  MatrixXd closed_loop(const MatrixXd& K) const { return a_ + b_ * K; }

 private:
  MatrixXd a_;
  MatrixXd b_;
};

/// One expert u = K x + z with z ~ N(0, sigma_z^2 I), process noise
/// covariance sigma_w, and its stationary state covariance sigma_x.
struct ExpertTask {
  MatrixXd K;
  MatrixXd sigma_w;
  double sigma_z = 0.0;
  MatrixXd sigma_x;
};

/// Known factorization K^(h) = F^(h) Phi for every task (sources then target).
struct GroundTruthFactors {
  MatrixXd phi_star;
  std::vector<MatrixXd> f_stars;

  Eigen::Index k() const { return phi_star.rows(); }
};

struct TaskEnsemble {
  LinearSystem system;
  std::vector<ExpertTask> sources;
  ExpertTask target;
  std::optional<GroundTruthFactors> truth;

  int H() const { return static_cast<int>(sources.size()); }
  /// Tasks indexed 0..H-1 (sources) and H (target).
  const ExpertTask& task(int index) const;
};

/// Stationary covariance of x under u = Kx + z. Throws UnstableClosedLoop.
MatrixXd stationary_covariance(const LinearSystem& system, const MatrixXd& K,
                               const MatrixXd& sigma_w, double sigma_z);

/// Builds an ExpertTask, computing its stationary covariance.
ExpertTask make_expert_task(const LinearSystem& system, MatrixXd K,
                            MatrixXd sigma_w, double sigma_z);

/// One LQR gain per alpha from solve_dare(A, B, alpha I, R).
std::vector<MatrixXd> synthesize_expert_family(const LinearSystem& system,
                                               const std::vector<double>& alphas,
                                               const MatrixXd& R);

/// Ensemble from H+1 gains; the last gain is the target. All tasks use the
/// same sigma_w and sigma_z.
TaskEnsemble make_ensemble(const LinearSystem& system,
                           const std::vector<MatrixXd>& gains,
                           const MatrixXd& sigma_w, double sigma_z,
                           std::optional<GroundTruthFactors> truth = {});

/// Lifts every quantity through the injective observation map y = G x:
/// A -> G A G^+, B -> G B, K -> K G^+. Stationary covariances are recomputed
/// with `sigma_w_lifted` (identity by default) and unchanged sigma_z. The
/// returned ensemble records Phi* = G^+ and F*^(h) = K^(h) (composed with any
/// factorization the input already carried).
TaskEnsemble lift_ensemble(const TaskEnsemble& ensemble, const MatrixXd& G,
                           std::optional<MatrixXd> sigma_w_lifted = {});

/// Throws NoFactorization for ensembles built from raw gains.
GroundTruthFactors ground_truth_factors(const TaskEnsemble& ensemble);

/// m x n matrix with i.i.d. N(0,1) entries, redrawn once if not injective.
/// Throws RankDeficientLift on a second failure.
MatrixXd sample_lift_matrix(Eigen::Index m, Eigen::Index n,
                            RandomStream& stream);

/// True when sigma_min(G) > 1e-10 sigma_max(G) and G has at least as many
/// rows as columns.
bool is_injective(const MatrixXd& G);

/// Registry of named plants. Known names: "hong2021" (4 states, 2 inputs)
/// and "scalar" (a = 0.8, b = 1). Throws InvalidArgument otherwise.
LinearSystem preset_system(const std::string& name);
std::vector<std::string> preset_names();

/// LQR family for H sources plus one target with alpha in
/// logspace(lo_exp, hi_exp, H+1), identity process noise.
TaskEnsemble lqr_ensemble(const LinearSystem& system, int H, double lo_exp,
                          double hi_exp, const MatrixXd& R, double sigma_z);

}  // namespace mtil
