#include "mtil/theory_probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "mtil/control_math.hpp"
#include "mtil/data_gen.hpp"
#include "mtil/errors.hpp"
#include "mtil/eval_metrics.hpp"

namespace mtil {

namespace {

double binomial_se(double p, long long n) {
  return n > 0 ? std::sqrt(p * (1.0 - p) / static_cast<double>(n)) : 0.0;
}

double log_det_pd(const MatrixXd& S) {
  Eigen::LLT<MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kCholeskyFailure, "log_det_pd: matrix not positive definite");
  }
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_and_se(const std::vector<double>& v) {
  MeanSe out;
  if (v.empty()) return out;
  const double n = static_cast<double>(v.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  out.mean = sum / n;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / (n - 1.0) / n);
  }
  return out;
}

}  // namespace

RegressorKind regressor_kind_from_string(const std::string& name) {
  if (name == "constant") return RegressorKind::kConstant;
  if (name == "gaussian-iid") return RegressorKind::kGaussianIid;
  if (name == "state-feedback") return RegressorKind::kStateFeedback;
  throw Error(ErrorCode::kInvalidArgument, "unknown regressor kind '" + name + "'");
}

std::string to_string(RegressorKind kind) {
  switch (kind) {
    case RegressorKind::kConstant: return "constant";
    case RegressorKind::kGaussianIid: return "gaussian-iid";
    case RegressorKind::kStateFeedback: return "state-feedback";
  }
  return "unknown";
}

ProbeReport verify_covariance_concentration(const LinearSystem& system,
                                            const ExpertTask& task, int N, int T,
                                            const std::optional<MatrixXd>& projection,
                                            int trials, const SeedTree& seeds,
                                            double max_failure_fraction) {
  if (N < 1 || T < 1 || trials < 1) {
    throw Error(ErrorCode::kInvalidArgument, "verify_covariance_concentration: bad sizes");
  }
  MatrixXd S = task.sigma_x;
  if (projection) {
    if (projection->rows() != system.nx()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "verify_covariance_concentration: projection has wrong row count");
    }
    S = projection->transpose() * task.sigma_x * *projection;
  }
  Eigen::LLT<MatrixXd> llt(symmetrize(S));
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::kCholeskyFailure,
                "verify_covariance_concentration: reference covariance not positive definite");
  }
  const MatrixXd l = llt.matrixL();

  ProbeReport rep;
  rep.name = "covariance_concentration";
  rep.trials = trials;
  rep.delta_target = max_failure_fraction;
  double worst_dev = 0.0;
  const double scale = 1.0 / (static_cast<double>(N) * T);
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    const StackedData d = stack_data(rollout_expert(system, task, T, N, stream));
    MatrixXd E = MatrixXd::Zero(system.nx(), system.nx());
    E.selfadjointView<Eigen::Lower>().rankUpdate(d.X.transpose());
    E = E.selfadjointView<Eigen::Lower>();
    if (projection) E = projection->transpose() * E * *projection;
    MatrixXd w = l.triangularView<Eigen::Lower>().solve(scale * E);
    w = l.triangularView<Eigen::Lower>().solve(w.transpose()).transpose();
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(symmetrize(w), Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    worst_dev = std::max({worst_dev, 1.0 - lo, hi - 1.0});
    if (lo < 0.9 || hi > 1.1) ++rep.failures;
  }
  rep.margin = rep.failure_rate() / max_failure_fraction;
  rep.pass = rep.failure_rate() <= max_failure_fraction;
  rep.details["N"] = N;
  rep.details["T"] = T;
  rep.details["failure_fraction"] = rep.failure_rate();
  rep.details["worst_eigen_deviation"] = worst_dev;
  return rep;
}

ProbeReport verify_hanson_wright(const MatrixXd& R, const std::vector<double>& eps_grid,
                                 int trials, const SeedTree& seeds) {
  if (R.size() == 0 || R.isZero(0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "verify_hanson_wright: R must be nonzero");
  }
  if (trials < 1 || eps_grid.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "verify_hanson_wright: empty trial or eps grid");
  }
  const double fro2 = R.squaredNorm();
  const double op = spectral_norm(R);
  const double ratio = fro2 / (op * op);
  std::vector<long long> exceed(eps_grid.size(), 0);
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    const double q = (R * stream.normal_vector(R.cols())).squaredNorm();
    for (std::size_t j = 0; j < eps_grid.size(); ++j) {
      if (q >= (1.0 + eps_grid[j]) * fro2) ++exceed[j];
    }
  }
  ProbeReport rep;
  rep.name = "hanson_wright";
  rep.trials = trials;
  rep.margin = 0.0;
  for (std::size_t j = 0; j < eps_grid.size(); ++j) {
    const double eps = eps_grid[j];
    if (!(eps > 0.0)) throw Error(ErrorCode::kInvalidArgument, "verify_hanson_wright: eps must be positive");
    const double bound = std::exp(-0.25 * std::min(eps * eps / 4.0, eps) * ratio);
    const double p_hat = static_cast<double>(exceed[j]) / trials;
    const double allowance = bound + 3.0 * binomial_se(bound, trials);
    if (p_hat > allowance) ++rep.failures;
    rep.margin = std::max(rep.margin, p_hat / allowance);
    char key[64];
    std::snprintf(key, sizeof key, "eps=%g", eps);
    rep.details[std::string(key) + ":empirical"] = p_hat;
    rep.details[std::string(key) + ":bound"] = bound;
    rep.details[std::string(key) + ":two_sided_bound"] = 2.0 * bound;
  }
  rep.pass = rep.failures == 0;
  return rep;
}

ProbeReport verify_self_normalized(const MartingaleSetup& setup, double delta,
                                   int trials, const SeedTree& seeds,
                                   RegressorKind kind) {
  if (setup.H < 1 || setup.T < 1 || setup.dim_x < 1 || setup.dim_eta < 1 || trials < 1) {
    throw Error(ErrorCode::kInvalidArgument, "verify_self_normalized: bad setup");
  }
  if (!(delta > 0.0 && delta < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "verify_self_normalized: delta outside (0, 1)");
  }
  const int d = setup.dim_x;
  const int m = setup.dim_eta;
  std::vector<MatrixXd> regs = setup.regularizers;
  if (regs.empty()) regs.assign(static_cast<std::size_t>(setup.H), MatrixXd::Identity(d, d));
  if (static_cast<int>(regs.size()) != setup.H) {
    throw Error(ErrorCode::kInvalidArgument, "verify_self_normalized: one regularizer per process");
  }
  std::vector<double> reg_logdet;
  for (const auto& v : regs) reg_logdet.push_back(log_det_pd(v));
  // State feedback x_{t+1} = 0.5 x_t + E eta_t with E the leading identity block.
  const MatrixXd e_map = MatrixXd::Identity(d, m);
  const double s2 = setup.sigma * setup.sigma;
  const double log_inv_delta = std::log(1.0 / delta);
  const double log_h_over_delta = std::log(setup.H / delta);

  ProbeReport rep;
  rep.name = "self_normalized";
  rep.trials = trials;
  rep.delta_target = delta;
  double joint_sum = 0.0;
  double union_sum = 0.0;
  double worst_ratio = 0.0;
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    double statistic = 0.0;
    double ld_total = 0.0;
    for (int h = 0; h < setup.H; ++h) {
      MatrixXd vbar = regs[static_cast<std::size_t>(h)];
      MatrixXd s = MatrixXd::Zero(d, m);
      Eigen::VectorXd x = Eigen::VectorXd::Ones(d);
      for (int t = 1; t <= setup.T; ++t) {
        if (kind == RegressorKind::kGaussianIid) x = stream.normal_vector(d);
        const Eigen::VectorXd eta = setup.sigma * stream.normal_vector(m);
        vbar.noalias() += x * x.transpose();
        s.noalias() += x * eta.transpose();
        if (kind == RegressorKind::kStateFeedback) x = 0.5 * x + e_map * eta;
      }
      Eigen::LLT<MatrixXd> llt(vbar);
      statistic += (s.transpose() * llt.solve(s)).trace();
      ld_total += 0.5 * m * (2.0 * llt.matrixLLT().diagonal().array().log().sum() -
                             reg_logdet[static_cast<std::size_t>(h)]);
    }
    const double bound = 2.0 * s2 * (ld_total + log_inv_delta);
    joint_sum += bound;
    union_sum += 2.0 * s2 * (ld_total + setup.H * log_h_over_delta);
    worst_ratio = std::max(worst_ratio, statistic / bound);
    if (statistic > bound) ++rep.failures;
  }
  const double allowance = delta + 3.0 * binomial_se(delta, trials);
  rep.margin = rep.failure_rate() / allowance;
  rep.pass = rep.failure_rate() <= allowance;
  rep.details["H"] = setup.H;
  rep.details["T"] = setup.T;
  rep.details["failure_fraction"] = rep.failure_rate();
  rep.details["allowance"] = allowance;
  rep.details["joint_bound_mean"] = joint_sum / trials;
  rep.details["union_bound_mean"] = union_sum / trials;
  rep.details["worst_statistic_to_bound"] = worst_ratio;
  rep.note = to_string(kind);
  return rep;
}

ProbeReport verify_maximal_inequality(const MatrixXd& delta_gain, const MatrixXd& sigma_x,
                                      int T, int trials, const SeedTree& seeds) {
  if (T < 1 || trials < 2) {
    throw Error(ErrorCode::kInvalidArgument, "verify_maximal_inequality: bad horizon or trials");
  }
  if (delta_gain.cols() != sigma_x.rows()) {
    throw Error(ErrorCode::kInvalidArgument, "verify_maximal_inequality: shape mismatch");
  }
  const MatrixXd m = delta_gain * covariance_factor(sigma_x);
  const double trace = (delta_gain * sigma_x * delta_gain.transpose()).trace();
  const double bound = 3.0 * (1.0 + std::log(static_cast<double>(T))) * trace;
  std::vector<double> maxima(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    double worst = 0.0;
    for (int t = 0; t < T; ++t) {
      worst = std::max(worst, (m * stream.normal_vector(m.cols())).squaredNorm());
    }
    maxima[static_cast<std::size_t>(i)] = worst;
  }
  const MeanSe est = mean_and_se(maxima);
  ProbeReport rep;
  rep.name = "maximal_inequality";
  rep.trials = trials;
  rep.failures = est.mean > bound + 3.0 * est.se ? 1 : 0;
  rep.margin = bound > 0.0 ? est.mean / bound : 0.0;
  rep.pass = rep.failures == 0;
  rep.details["T"] = T;
  rep.details["estimate"] = est.mean;
  rep.details["se"] = est.se;
  rep.details["trace"] = trace;
  rep.details["bound"] = bound;
  return rep;
}

ProbeReport verify_tracking_and_siss(const LinearSystem& system, const ExpertTask& target,
                                     const MatrixXd& K_hat, int T, double delta_prime,
                                     int trials, const SeedTree& seeds) {
  if (T < 1 || trials < 1 || !(delta_prime > 0.0 && delta_prime < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "verify_tracking_and_siss: bad arguments");
  }
  ProbeReport rep;
  rep.name = "tracking_siss";
  rep.delta_target = delta_prime;
  const MatrixXd delta = K_hat - target.K;
  const StabilityProfile prof = stability_profile(system.closed_loop(target.K));
  const double b_norm = spectral_norm(system.B());
  const double gain = prof.j_gain * b_norm;
  const double delta_norm = spectral_norm(delta);
  rep.details["J"] = prof.j_gain;
  rep.details["B_norm"] = b_norm;
  rep.details["delta_norm"] = delta_norm;
  rep.details["precondition_radius"] = 1.0 / (2.0 * gain);
  if (delta_norm > 1.0 / (2.0 * gain)) {
    rep.note = "PreconditionNotMet";
    rep.details["precondition_met"] = 0.0;
    rep.pass = false;
    return rep;
  }
  rep.details["precondition_met"] = 1.0;

  const double er = 0.5 * (delta * target.sigma_x * delta.transpose()).trace();
  const double hp_bound = 4.0 * gain * gain *
                          (1.0 + 4.0 * std::log(static_cast<double>(T) / delta_prime)) * er;
  const double slack = 1e-12;
  long long siss_violations = 0;
  long long tasil_violations = 0;
  double worst_ratio = 0.0;
  rep.trials = trials;
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    const NoiseRealization noise = sample_noise(system, target, T, stream);
    const CoupledRollout r = coupled_rollout(system, target.K, K_hat, noise, T);
    if (r.nonfinite) {
      ++siss_violations;
      ++rep.failures;
      continue;
    }
    // The learned loop is the expert loop driven by Delta[k] = (Khat - K*) xhat[k].
    double max_input = 0.0;
    double max_dev = 0.0;
    double max_dev2 = 0.0;
    for (int t = 1; t <= T; ++t) {
      max_input = std::max(max_input, (delta * r.learned.row(t - 1).transpose()).norm());
      const double dev = (r.expert.row(t) - r.learned.row(t)).norm();
      if (dev > gain * max_input * (1.0 + slack) + slack) ++siss_violations;
      max_dev = std::max(max_dev, dev);
      max_dev2 = std::max(max_dev2, dev * dev);
    }
    const double tasil = tasil_bound(delta, r.expert, T, prof.j_gain, b_norm);
    if (max_dev > tasil * (1.0 + slack) + slack) ++tasil_violations;
    if (max_dev2 > hp_bound) ++rep.failures;
    if (hp_bound > 0.0) worst_ratio = std::max(worst_ratio, max_dev2 / hp_bound);
  }
  const double allowance = delta_prime + 3.0 * binomial_se(delta_prime, trials);
  rep.margin = rep.failure_rate() / allowance;
  rep.pass = siss_violations == 0 && tasil_violations == 0 && rep.failure_rate() <= allowance;
  rep.details["excess_risk"] = er;
  rep.details["high_probability_bound"] = hp_bound;
  rep.details["violation_fraction"] = rep.failure_rate();
  rep.details["allowance"] = allowance;
  rep.details["siss_violations"] = static_cast<double>(siss_violations);
  rep.details["tasil_violations"] = static_cast<double>(tasil_violations);
  rep.details["worst_tracking_to_bound"] = worst_ratio;
  return rep;
}

ProbeReport verify_scalar_sandwich(double a, double k_star, double eps, int T,
                                   int trials, const SeedTree& seeds) {
  const double rho = a + k_star;
  if (!(rho > 0.0 && rho < 1.0 && rho + eps < 1.0 && rho + eps > -1.0)) {
    throw Error(ErrorCode::kUnstablePair, "verify_scalar_sandwich: need 0 < a + k* < 1 and |a + k* + eps| < 1");
  }
  if (T < 1 || trials < 2) {
    throw Error(ErrorCode::kInvalidArgument, "verify_scalar_sandwich: bad horizon or trials");
  }
  const double sd0 = std::sqrt(1.0 / (1.0 - rho * rho));
  const double rho_hat = rho + eps;
  std::vector<double> maxima(static_cast<std::size_t>(trials));
  for (int i = 0; i < trials; ++i) {
    RandomStream stream = seeds.child("trial", i).stream();
    double xs = sd0 * stream.normal();
    double xh = xs;
    double worst = 0.0;
    for (int t = 1; t <= T; ++t) {
      const double w = stream.normal();
      xs = rho * xs + w;
      xh = rho_hat * xh + w;
      worst = std::max(worst, (xs - xh) * (xs - xh));
    }
    maxima[static_cast<std::size_t>(i)] = worst;
  }
  const MeanSe est = mean_and_se(maxima);
  // Unhalved excess risk, matching the printed sandwich constants.
  const double er_app = eps * eps / (1.0 - rho * rho);
  const double gap2 = (1.0 - rho) * (1.0 - rho);
  const double lower = 0.5 / gap2 * er_app;
  const double upper = 12.0 * (1.0 + std::log(static_cast<double>(T))) / gap2 * er_app;
  ProbeReport rep;
  rep.name = "scalar_sandwich";
  rep.trials = trials;
  const bool below = est.mean + 3.0 * est.se < lower;
  const bool above = est.mean - 3.0 * est.se > upper;
  rep.failures = (below || above) ? 1 : 0;
  rep.margin = upper > 0.0 ? est.mean / upper : 0.0;
  rep.pass = rep.failures == 0;
  rep.details["estimate"] = est.mean;
  rep.details["se"] = est.se;
  rep.details["lower"] = lower;
  rep.details["upper"] = upper;
  rep.details["er_appendix"] = er_app;
  rep.details["er_halved"] = 0.5 * er_app;
  return rep;
}

std::vector<std::string> probe_names() {
  return {"covariance_concentration",
          "hanson_wright",
          "self_normalized_iid_h1",
          "self_normalized_iid_h4",
          "self_normalized_feedback_h1",
          "self_normalized_feedback_h4",
          "maximal_inequality_t1",
          "maximal_inequality_t10",
          "maximal_inequality_t100",
          "tracking_siss",
          "scalar_sandwich"};
}

namespace {

ExpertTask scalar_expert(const LinearSystem& sys, double k) {
  return make_expert_task(sys, MatrixXd::Constant(1, 1, k), MatrixXd::Identity(1, 1), 0.0);
}

}  // namespace

ProbeReport run_named_probe(const std::string& name, const SeedTree& seeds) {
  const SeedTree tree = seeds.child(name, 0);
  ProbeReport rep;
  if (name == "covariance_concentration") {
    const LinearSystem sys = preset_system("scalar");
    rep = verify_covariance_concentration(sys, scalar_expert(sys, -0.3), 50, 100, std::nullopt,
                                          200, tree);
  } else if (name == "hanson_wright") {
    rep = verify_hanson_wright(MatrixXd::Identity(10, 10), {0.5, 1.0, 2.0}, 100000, tree);
  } else if (name.rfind("self_normalized_", 0) == 0) {
    const bool feedback = name.find("feedback") != std::string::npos;
    MartingaleSetup setup;
    setup.H = name.back() == '4' ? 4 : 1;
    setup.T = 100;
    setup.dim_x = 2;
    setup.dim_eta = 2;
    setup.sigma = 1.0;
    rep = verify_self_normalized(
        setup, 0.05, 10000, tree,
        feedback ? RegressorKind::kStateFeedback : RegressorKind::kGaussianIid);
  } else if (name.rfind("maximal_inequality_t", 0) == 0) {
    const int T = std::stoi(name.substr(std::string("maximal_inequality_t").size()));
    MatrixXd delta = MatrixXd::Zero(1, 10);
    delta(0, 0) = 1.0;
    rep = verify_maximal_inequality(delta, MatrixXd::Identity(10, 10), T, 100000, tree);
  } else if (name == "tracking_siss") {
    const LinearSystem sys = preset_system("scalar");
    rep = verify_tracking_and_siss(sys, scalar_expert(sys, -0.3),
                                   MatrixXd::Constant(1, 1, -0.3 + 0.02), 100, 0.05, 10000,
                                   tree);
  } else if (name == "scalar_sandwich") {
    rep = verify_scalar_sandwich(0.8, -0.3, 0.05, 200, 100000, tree);
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown probe '" + name + "'");
  }
  rep.name = name;
  return rep;
}

}  // namespace mtil
