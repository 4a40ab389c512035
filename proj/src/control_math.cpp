#include "mtil/control_math.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "mtil/errors.hpp"

namespace mtil {

namespace {

constexpr int kDoublingCap = 64;
constexpr int kRiccatiCap = 1'000'000;
constexpr int kProfileCap = 10'000'000;
constexpr double kRiccatiRelTol = 1e-10;
constexpr double kLyapunovRelTol = 1e-10;

void require_square(const MatrixXd& A, const char* who) {
  if (A.rows() != A.cols()) {
    throw Error(ErrorCode::kInvalidArgument,
                std::string(who) + ": matrix must be square");
  }
}

}  // namespace

double spectral_radius(const MatrixXd& A) {
  require_square(A, "spectral_radius");
  if (A.size() == 0) return 0.0;
  if (A.rows() == 1) return std::abs(A(0, 0));
  Eigen::EigenSolver<MatrixXd> solver(A, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNotConverged,
                "spectral_radius: eigenvalue iteration failed");
  }
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_norm(const MatrixXd& M) {
  if (M.size() == 0) return 0.0;
  if (M.rows() == 1 || M.cols() == 1) return M.norm();
  // Eigenvalues of the smaller Gram matrix are cheaper than a full SVD.
  const MatrixXd gram = M.rows() < M.cols() ? MatrixXd(M * M.transpose())
                                            : MatrixXd(M.transpose() * M);
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(gram, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, solver.eigenvalues().maxCoeff()));
}

double min_eigenvalue(const MatrixXd& S) {
  require_square(S, "min_eigenvalue");
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(S, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().minCoeff();
}

double max_eigenvalue(const MatrixXd& S) {
  require_square(S, "max_eigenvalue");
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(S, Eigen::EigenvaluesOnly);
  return solver.eigenvalues().maxCoeff();
}

MatrixXd symmetrize(const MatrixXd& M) {
  return 0.5 * (M + M.transpose());
}

StabilityProfile stability_profile(const MatrixXd& A, std::optional<double> nu,
                                   double tol) {
  require_square(A, "stability_profile");
  if (!(tol > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "stability_profile: tol <= 0");
  }
  StabilityProfile out;
  out.rho = spectral_radius(A);
  if (out.rho >= 1.0) {
    throw Error(ErrorCode::kUnstableMatrix,
                "stability_profile: spectral radius " +
                    std::to_string(out.rho) + " >= 1");
  }
  out.nu = nu.value_or(0.5 * (1.0 + out.rho));
  if (!(out.nu > 0.0 && out.nu < 1.0) || out.rho >= out.nu) {
    throw Error(ErrorCode::kUnstableMatrix,
                "stability_profile: need rho < nu < 1 (rho = " +
                    std::to_string(out.rho) +
                    ", nu = " + std::to_string(out.nu) + ")");
  }

  const Eigen::Index n = A.rows();
  MatrixXd power = MatrixXd::Identity(n, n);
  double nu_pow = 1.0;
  out.j_gain = 0.0;
  out.tau = 0.0;
  for (int k = 0; k < kProfileCap; ++k) {
    const double norm_k = spectral_norm(power);
    out.j_gain += norm_k;
    out.tau = std::max(out.tau, norm_k / nu_pow);
    out.terms = k + 1;
    nu_pow *= out.nu;
    if (out.tau * nu_pow / (1.0 - out.nu) < tol) return out;
    power = power * A;
  }
  throw Error(ErrorCode::kNotConverged,
              "stability_profile: truncation cap reached");
}

MatrixXd solve_discrete_lyapunov(const MatrixXd& A, const MatrixXd& Q) {
  require_square(A, "solve_discrete_lyapunov");
  require_square(Q, "solve_discrete_lyapunov");
  if (A.rows() != Q.rows()) {
    throw Error(ErrorCode::kInvalidArgument,
                "solve_discrete_lyapunov: A and Q differ in size");
  }
  const double rho = spectral_radius(A);
  if (rho >= 1.0) {
    throw Error(ErrorCode::kUnstableMatrix,
                "solve_discrete_lyapunov: spectral radius " +
                    std::to_string(rho) + " >= 1");
  }

  // Sigma_{i+1} = Sigma_i + A_i Sigma_i A_i', A_{i+1} = A_i^2 sums 2^{i+1}
  // terms of the series sum_t A^t Q A^t'.
  MatrixXd sigma = symmetrize(Q);
  MatrixXd a_pow = A;
  bool converged = false;
  for (int i = 0; i < kDoublingCap; ++i) {
    const MatrixXd increment = a_pow * sigma * a_pow.transpose();
    sigma = symmetrize(sigma + increment);
    if (!sigma.allFinite()) break;
    if (increment.norm() <= 1e-17 * sigma.norm()) {
      converged = true;
      break;
    }
    a_pow = a_pow * a_pow;
  }
  if (!converged ||
      lyapunov_residual(A, Q, sigma) > kLyapunovRelTol) {
    throw Error(ErrorCode::kNotConverged,
                "solve_discrete_lyapunov: doubling iteration did not converge");
  }
  return sigma;
}

double lyapunov_residual(const MatrixXd& A, const MatrixXd& Q,
                         const MatrixXd& Sigma) {
  const MatrixXd r = Sigma - (A * Sigma * A.transpose() + Q);
  return r.norm() / std::max(1.0, Sigma.norm());
}

namespace {

MatrixXd riccati_map(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                     const MatrixXd& R, const MatrixXd& P) {
  const MatrixXd pa = P * A;
  const MatrixXd btpa = B.transpose() * pa;
  const MatrixXd gram = B.transpose() * P * B + R;
  return symmetrize(A.transpose() * pa -
                    btpa.transpose() * gram.ldlt().solve(btpa) + Q);
}

}  // namespace

RiccatiSolution solve_dare(const MatrixXd& A, const MatrixXd& B,
                           const MatrixXd& Q, const MatrixXd& R) {
  require_square(A, "solve_dare");
  require_square(Q, "solve_dare");
  require_square(R, "solve_dare");
  if (B.rows() != A.rows() || Q.rows() != A.rows() || R.rows() != B.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "solve_dare: dimension mismatch");
  }
  if (R.cols() > 0 && !(min_eigenvalue(symmetrize(R)) > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "solve_dare: R must be PD");
  }

  RiccatiSolution out;
  MatrixXd P = symmetrize(Q);
  bool converged = false;
  for (int it = 1; it <= kRiccatiCap; ++it) {
    MatrixXd next = riccati_map(A, B, Q, R, P);
    if (!next.allFinite()) break;
    const double step = (next - P).norm();
    P = std::move(next);
    out.iterations = it;
    if (step <= kRiccatiRelTol * std::max(1.0, P.norm())) {
      converged = true;
      break;
    }
  }
  if (!converged) {
    throw Error(ErrorCode::kNotConverged,
                "solve_dare: Riccati iteration did not converge");
  }
  out.P = P;
  const MatrixXd gram = B.transpose() * P * B + R;
  out.K = -gram.ldlt().solve(B.transpose() * P * A);
  out.rho_closed = spectral_radius(A + B * out.K);
  if (out.rho_closed >= 1.0) {
    throw Error(ErrorCode::kNotStabilizing,
                "solve_dare: closed-loop spectral radius " +
                    std::to_string(out.rho_closed) + " >= 1");
  }
  return out;
}

double dare_residual(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                     const MatrixXd& R, const MatrixXd& P) {
  return (P - riccati_map(A, B, Q, R, P)).norm() / std::max(1.0, P.norm());
}

MatrixXd pseudo_inverse(const MatrixXd& M, double rel_tol) {
  if (M.size() == 0) return MatrixXd::Zero(M.cols(), M.rows());
  Eigen::JacobiSVD<MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  const double cutoff =
      rel_tol * s(0) * static_cast<double>(std::max(M.rows(), M.cols()));
  VectorXd s_inv = VectorXd::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cutoff && s(i) > 0.0) s_inv(i) = 1.0 / s(i);
  }
  return svd.matrixV() * s_inv.asDiagonal() * svd.matrixU().transpose();
}

std::vector<double> logspace(double lo_exp, double hi_exp, int n) {
  if (n < 1) {
    throw Error(ErrorCode::kInvalidArgument, "logspace: n must be >= 1");
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == 1) {
    out[0] = std::pow(10.0, lo_exp);
    return out;
  }
  const double step = (hi_exp - lo_exp) / static_cast<double>(n - 1);
  for (int i = 0; i < n; ++i) {
    // Pin the last exponent exactly to avoid drift in lo + (n-1)*step.
    const double e = (i == n - 1) ? hi_exp : lo_exp + step * i;
    out[static_cast<std::size_t>(i)] = std::pow(10.0, e);
  }
  return out;
}

}  // namespace mtil
