#include "mtil/lti_env.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include <Eigen/SVD>

#include "mtil/control_math.hpp"
#include "mtil/errors.hpp"

namespace mtil {

LinearSystem::LinearSystem(MatrixXd A, MatrixXd B)
    : a_(std::move(A)), b_(std::move(B)) {
  if (a_.rows() != a_.cols() || a_.rows() == 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "LinearSystem: A must be square and nonempty");
  }
  if (b_.rows() != a_.rows()) {
    throw Error(ErrorCode::kInvalidArgument,
                "LinearSystem: B must have as many rows as A");
  }
}

const ExpertTask& TaskEnsemble::task(int index) const {
  if (index < 0 || index > H()) {
    throw Error(ErrorCode::kInvalidArgument, "TaskEnsemble: task index out of range");
  }
  return index == H() ? target : sources[static_cast<std::size_t>(index)];
}

MatrixXd stationary_covariance(const LinearSystem& system, const MatrixXd& K,
                               const MatrixXd& sigma_w, double sigma_z) {
  if (K.rows() != system.nu() || K.cols() != system.nx()) {
    throw Error(ErrorCode::kInvalidArgument,
                "stationary_covariance: gain has wrong shape");
  }
  if (sigma_w.rows() != system.nx() || sigma_w.cols() != system.nx()) {
    throw Error(ErrorCode::kInvalidArgument,
                "stationary_covariance: sigma_w has wrong shape");
  }
  const MatrixXd a_cl = system.closed_loop(K);
  const double rho = spectral_radius(a_cl);
  if (rho >= 1.0) {
    throw Error(ErrorCode::kUnstableClosedLoop,
                "stationary_covariance: closed-loop spectral radius " +
                    std::to_string(rho));
  }
  const MatrixXd drive = sigma_z * sigma_z * system.B() * system.B().transpose() +
                         symmetrize(sigma_w);
  return solve_discrete_lyapunov(a_cl, drive);
}

ExpertTask make_expert_task(const LinearSystem& system, MatrixXd K,
                            MatrixXd sigma_w, double sigma_z) {
  if (!(sigma_z >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "make_expert_task: sigma_z < 0");
  }
  ExpertTask task;
  task.sigma_x = stationary_covariance(system, K, sigma_w, sigma_z);
  task.K = std::move(K);
  task.sigma_w = std::move(sigma_w);
  task.sigma_z = sigma_z;
  return task;
}

std::vector<MatrixXd> synthesize_expert_family(const LinearSystem& system,
                                               const std::vector<double>& alphas,
                                               const MatrixXd& R) {
  std::vector<MatrixXd> gains;
  gains.reserve(alphas.size());
  const auto identity = MatrixXd::Identity(system.nx(), system.nx());
  for (double alpha : alphas) {
    try {
      gains.push_back(solve_dare(system.A(), system.B(), alpha * identity, R).K);
    } catch (const Error& e) {
      std::ostringstream msg;
      msg << "alpha = " << alpha << ": " << e.what();
      throw Error(e.code(), msg.str());
    }
  }
  return gains;
}

TaskEnsemble make_ensemble(const LinearSystem& system,
                           const std::vector<MatrixXd>& gains,
                           const MatrixXd& sigma_w, double sigma_z,
                           std::optional<GroundTruthFactors> truth) {
  if (gains.size() < 2) {
    throw Error(ErrorCode::kInvalidArgument,
                "make_ensemble: need at least one source and one target gain");
  }
  TaskEnsemble ens;
  ens.system = system;
  for (std::size_t h = 0; h + 1 < gains.size(); ++h) {
    ens.sources.push_back(make_expert_task(system, gains[h], sigma_w, sigma_z));
  }
  ens.target = make_expert_task(system, gains.back(), sigma_w, sigma_z);
  if (truth) {
    if (truth->f_stars.size() != gains.size()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "make_ensemble: factor count differs from task count");
    }
    for (std::size_t h = 0; h < gains.size(); ++h) {
      if ((truth->f_stars[h] * truth->phi_star - gains[h]).norm() >
          1e-10 * std::max(1.0, gains[h].norm())) {
        throw Error(ErrorCode::kInvalidArgument,
                    "make_ensemble: factors do not reproduce gain " +
                        std::to_string(h));
      }
    }
  }
  ens.truth = std::move(truth);
  return ens;
}

bool is_injective(const MatrixXd& G) {
  if (G.rows() < G.cols() || G.cols() == 0) return false;
  Eigen::JacobiSVD<MatrixXd> svd(G);
  const auto& s = svd.singularValues();
  return s(s.size() - 1) > 1e-10 * s(0);
}

TaskEnsemble lift_ensemble(const TaskEnsemble& ensemble, const MatrixXd& G,
                           std::optional<MatrixXd> sigma_w_lifted) {
  const LinearSystem& sys = ensemble.system;
  if (G.cols() != sys.nx()) {
    throw Error(ErrorCode::kInvalidArgument,
                "lift_ensemble: G must have n_x columns");
  }
  if (!is_injective(G)) {
    throw Error(ErrorCode::kRankDeficientLift,
                "lift_ensemble: observation map is not injective");
  }
  const MatrixXd g_pinv = pseudo_inverse(G);
  const Eigen::Index m = G.rows();
  const MatrixXd sigma_w =
      sigma_w_lifted.value_or(MatrixXd::Identity(m, m));

  LinearSystem lifted(G * sys.A() * g_pinv, G * sys.B());
  std::vector<MatrixXd> gains;
  for (int h = 0; h <= ensemble.H(); ++h) {
    gains.push_back(ensemble.task(h).K * g_pinv);
  }

  GroundTruthFactors truth;
  if (ensemble.truth) {
    truth.phi_star = ensemble.truth->phi_star * g_pinv;
    truth.f_stars = ensemble.truth->f_stars;
  } else {
    truth.phi_star = g_pinv;
    for (int h = 0; h <= ensemble.H(); ++h) {
      truth.f_stars.push_back(ensemble.task(h).K);
    }
  }

  TaskEnsemble out;
  out.system = lifted;
  for (int h = 0; h < ensemble.H(); ++h) {
    out.sources.push_back(make_expert_task(
        lifted, gains[static_cast<std::size_t>(h)], sigma_w,
        ensemble.task(h).sigma_z));
  }
  out.target =
      make_expert_task(lifted, gains.back(), sigma_w, ensemble.target.sigma_z);
  out.truth = std::move(truth);
  return out;
}

GroundTruthFactors ground_truth_factors(const TaskEnsemble& ensemble) {
  if (!ensemble.truth) {
    throw Error(ErrorCode::kNoFactorization,
                "ensemble was built from raw gains without a known factorization");
  }
  return *ensemble.truth;
}

MatrixXd sample_lift_matrix(Eigen::Index m, Eigen::Index n,
                            RandomStream& stream) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    MatrixXd G = stream.normal_matrix(m, n);
    if (is_injective(G)) return G;
  }
  throw Error(ErrorCode::kRankDeficientLift,
              "sample_lift_matrix: two consecutive draws were not injective");
}

LinearSystem preset_system(const std::string& name) {
  if (name == "hong2021") {
    MatrixXd A(4, 4);
    A << 0.99, 0.03, -0.02, -0.32,
         0.01, 0.47, 4.70, 0.00,
         0.02, -0.06, 0.40, 0.00,
         0.01, -0.04, 0.72, 0.99;
    MatrixXd B(4, 2);
    B << 0.01, 0.99,
         -3.44, 1.66,
         -0.83, 0.44,
         -0.47, 0.25;
    return LinearSystem(A, B);
  }
  if (name == "scalar") {
    return LinearSystem(MatrixXd::Constant(1, 1, 0.8), MatrixXd::Ones(1, 1));
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown preset '" + name + "'");
}

std::vector<std::string> preset_names() { return {"hong2021", "scalar"}; }

TaskEnsemble lqr_ensemble(const LinearSystem& system, int H, double lo_exp,
                          double hi_exp, const MatrixXd& R, double sigma_z) {
  if (H < 1) throw Error(ErrorCode::kInvalidArgument, "lqr_ensemble: H < 1");
  const auto alphas = logspace(lo_exp, hi_exp, H + 1);
  const auto gains = synthesize_expert_family(system, alphas, R);
  return make_ensemble(system, gains,
                       MatrixXd::Identity(system.nx(), system.nx()), sigma_z);
}

}  // namespace mtil
