#include "mtil/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Eigenvalues>

#include "mtil/control_math.hpp"
#include "mtil/data_gen.hpp"
#include "mtil/errors.hpp"

namespace mtil {

double excess_risk(const MatrixXd& K_hat, const MatrixXd& K_star,
                   const MatrixXd& sigma_x) {
  if (K_hat.rows() != K_star.rows() || K_hat.cols() != K_star.cols() ||
      sigma_x.rows() != K_hat.cols() || sigma_x.cols() != K_hat.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "excess_risk: shape mismatch");
  }
  const MatrixXd delta = K_hat - K_star;
  return 0.5 * (delta * sigma_x * delta.transpose()).trace();
}

namespace {

double max_squared_deviation(const CoupledRollout& r) {
  double worst = 0.0;
  for (Eigen::Index t = 1; t < r.learned.rows(); ++t) {
    worst = std::max(worst, (r.learned.row(t) - r.expert.row(t)).squaredNorm());
  }
  return worst;
}

bool is_stable(const LinearSystem& system, const MatrixXd& K) {
  if (!K.allFinite()) return false;
  return spectral_radius(system.closed_loop(K)) < 1.0;
}

}  // namespace

std::vector<MetricsRecord> evaluate_controller(const LinearSystem& system,
                                               const ExpertTask& target,
                                               const MatrixXd& K_hat, int T_test,
                                               int trials, const SeedTree& seeds) {
  if (T_test < 1 || trials < 0) {
    throw Error(ErrorCode::kInvalidArgument, "evaluate_controller: bad horizon or trials");
  }
  const double param_err = (K_hat - target.K).norm();
  const bool stable = is_stable(system, K_hat);
  const double er = excess_risk(K_hat, target.K, target.sigma_x);
  std::vector<MetricsRecord> out;
  out.reserve(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    const NoiseRealization noise = sample_noise(system, target, T_test, stream);
    const CoupledRollout r = coupled_rollout(system, target.K, K_hat, noise, T_test);
    MetricsRecord rec;
    rec.nonfinite = r.nonfinite;
    rec.tracking_err = r.nonfinite ? std::numeric_limits<double>::infinity()
                                   : max_squared_deviation(r);
    rec.param_err = param_err;
    rec.stable = stable;
    rec.excess_risk = er;
    out.push_back(rec);
  }
  return out;
}

CostGap lqr_cost_gap(const LinearSystem& system, const ExpertTask& target,
                     const MatrixXd& K_hat, const MatrixXd& Q, const MatrixXd& R,
                     int T, int trials, const SeedTree& seeds) {
  if (T < 1 || trials < 1) {
    throw Error(ErrorCode::kInvalidArgument, "lqr_cost_gap: bad horizon or trials");
  }
  const MatrixXd m_star = Q + target.K.transpose() * R * target.K;
  const MatrixXd m_hat = Q + K_hat.transpose() * R * K_hat;
  auto h = [](const MatrixXd& states, const MatrixXd& m) {
    double worst = 0.0;
    for (Eigen::Index t = 1; t < states.rows(); ++t) {
      const Eigen::RowVectorXd x = states.row(t);
      worst = std::max(worst, std::sqrt(std::max(0.0, (x * m * x.transpose())(0, 0))));
    }
    return worst;
  };
  double sum_hat = 0.0;
  double sum_star = 0.0;
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    const NoiseRealization noise = sample_noise(system, target, T, stream);
    const CoupledRollout r = coupled_rollout(system, target.K, K_hat, noise, T);
    if (r.nonfinite) {
      sum_hat = std::numeric_limits<double>::infinity();
    } else {
      sum_hat += h(r.learned, m_hat);
    }
    sum_star += h(r.expert, m_star);
  }
  CostGap out;
  out.gap = std::abs(sum_hat - sum_star) / trials;

  const StabilityProfile prof = stability_profile(system.closed_loop(target.K));
  const double b_norm = spectral_norm(system.B());
  const double lq = std::max(0.0, max_eigenvalue(symmetrize(Q)));
  const double lr = std::max(0.0, max_eigenvalue(symmetrize(R)));
  const double lmin = min_eigenvalue(target.sigma_x);
  const double cond_term = lmin > 0.0 ? std::sqrt(target.sigma_x.trace() / lmin)
                                      : std::numeric_limits<double>::infinity();
  const double c = std::sqrt(lq) * prof.j_gain * b_norm +
                   std::sqrt(lr) * (spectral_norm(target.K) + cond_term);
  const double er = excess_risk(K_hat, target.K, target.sigma_x);
  const double root = std::sqrt(std::log(static_cast<double>(T)) * er);
  out.bound = (root == 0.0) ? 0.0 : c * root;
  out.ratio = out.bound > 0.0 ? out.gap / out.bound : (out.gap > 0.0 ? INFINITY : 0.0);
  return out;
}

DiversityReport task_diversity_constants(const TaskEnsemble& ensemble,
                                         const GroundTruthFactors& truth) {
  const int H = ensemble.H();
  if (H < 1) throw Error(ErrorCode::kInvalidArgument, "task_diversity_constants: no sources");
  if (static_cast<int>(truth.f_stars.size()) != H + 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "task_diversity_constants: need one factor per task");
  }
  DiversityReport rep;
  const MatrixXd& s_target = ensemble.target.sigma_x;
  rep.c = std::numeric_limits<double>::infinity();
  rep.lambda_bar = -std::numeric_limits<double>::infinity();
  rep.lambda_under = std::numeric_limits<double>::infinity();
  for (int h = 0; h < H; ++h) {
    const MatrixXd& s = ensemble.sources[static_cast<std::size_t>(h)].sigma_x;
    // Eigenvalues of S_t^{-1/2} S_h S_t^{-1/2} solve S_h v = lambda S_t v.
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> ges(symmetrize(s), symmetrize(s_target),
                                                           Eigen::EigenvaluesOnly);
    if (ges.info() != Eigen::Success) {
      throw Error(ErrorCode::kCholeskyFailure,
                  "task_diversity_constants: target covariance not positive definite");
    }
    rep.c = std::min(rep.c, ges.eigenvalues().minCoeff());
    rep.lambda_bar = std::max(rep.lambda_bar, max_eigenvalue(s));
    rep.lambda_under = std::min(rep.lambda_under, min_eigenvalue(s));
  }

  const Eigen::Index nu = truth.f_stars[0].rows();
  const Eigen::Index k = truth.f_stars[0].cols();
  MatrixXd stacked(H * nu, k);
  for (int h = 0; h < H; ++h) stacked.middleRows(h * nu, nu) = truth.f_stars[static_cast<std::size_t>(h)];
  Eigen::JacobiSVD<MatrixXd> svd(stacked);
  const auto& sv = svd.singularValues();
  if (sv.size() < k || sv(k - 1) <= 1e-12 * sv(0)) {
    throw Error(ErrorCode::kRankDeficient,
                "task_diversity_constants: stacked source weights have column rank < k");
  }
  const double s = spectral_norm(truth.f_stars.back() * pseudo_inverse(stacked));
  rep.nu = s * s;
  rep.nu_times_H = rep.nu * H;
  return rep;
}

std::vector<double> summarize_quantiles(std::vector<double> values,
                                        const std::vector<double>& qs) {
  if (values.empty()) throw Error(ErrorCode::kEmptyInput, "summarize_quantiles: no values");
  std::sort(values.begin(), values.end());
  const double last = static_cast<double>(values.size() - 1);
  std::vector<double> out;
  out.reserve(qs.size());
  for (double q : qs) {
    if (!(q >= 0.0 && q <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "summarize_quantiles: q outside [0, 1]");
    }
    const double pos = last * q;
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || values[lo] == values[hi]) {
      out.push_back(values[lo]);
    } else {
      out.push_back(values[lo] + (values[hi] - values[lo]) * frac);
    }
  }
  return out;
}

double tasil_bound(const MatrixXd& delta, const MatrixXd& expert_states, int T,
                   double j_gain, double b_norm) {
  double worst = 0.0;
  const Eigen::Index rows = std::min<Eigen::Index>(T, expert_states.rows());
  for (Eigen::Index t = 0; t < rows; ++t) {
    worst = std::max(worst, (delta * expert_states.row(t).transpose()).norm());
  }
  return 2.0 * j_gain * b_norm * worst;
}

}  // namespace mtil
