#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace mtil {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Stability summary of a Schur-stable matrix A.
///
/// `j_gain` is the truncated transient gain sum_t ||A^t|| and `tau` is
/// max_k ||A^k|| / nu^k over the powers visited during truncation, so that
/// ||A^k|| <= tau * nu^k holds for every visited k.
struct StabilityProfile {
  double rho = 0.0;
  double j_gain = 1.0;
  double tau = 1.0;
  double nu = 0.5;
  int terms = 0;  // number of powers summed into j_gain
};

/// Solution of the discrete algebraic Riccati equation together with the
/// associated LQR gain K = -(B'PB + R)^{-1} B'PA.
struct RiccatiSolution {
  MatrixXd P;
  MatrixXd K;
  double rho_closed = 0.0;
  int iterations = 0;
};

/// Largest eigenvalue magnitude.
double spectral_radius(const MatrixXd& A);

/// Largest singular value.
double spectral_norm(const MatrixXd& M);

/// Smallest / largest eigenvalue of a symmetric matrix.
double min_eigenvalue(const MatrixXd& S);
double max_eigenvalue(const MatrixXd& S);

MatrixXd symmetrize(const MatrixXd& M);

/// Computes rho(A), the truncated J(A) and tau(A, nu).
///
/// Summation stops once the running tail bound tau * nu^(k+1) / (1 - nu)
/// drops below `tol`. When `nu` is absent, (1 + rho) / 2 is used.
/// Throws UnstableMatrix if rho >= 1 or rho >= nu.
StabilityProfile stability_profile(const MatrixXd& A,
                                   std::optional<double> nu = std::nullopt,
                                   double tol = 1e-10);

/// Solves Sigma = A Sigma A' + Q with the squared (doubling) iteration.
/// Throws UnstableMatrix if rho(A) >= 1, NotConverged if the doubling cap is
/// hit or the final relative residual exceeds 1e-10.
MatrixXd solve_discrete_lyapunov(const MatrixXd& A, const MatrixXd& Q);

/// ||Sigma - (A Sigma A' + Q)||_F / max(1, ||Sigma||_F).
double lyapunov_residual(const MatrixXd& A, const MatrixXd& Q,
                         const MatrixXd& Sigma);

/// Riccati value iteration started at P0 = Q. Stops when the relative step
/// falls below 1e-10 (cap 1e6 iterations). Throws NotConverged or
/// NotStabilizing.
RiccatiSolution solve_dare(const MatrixXd& A, const MatrixXd& B,
                           const MatrixXd& Q, const MatrixXd& R);

/// ||P - (A'PA - A'PB(B'PB+R)^{-1}B'PA + Q)||_F / max(1, ||P||_F).
double dare_residual(const MatrixXd& A, const MatrixXd& B, const MatrixXd& Q,
                     const MatrixXd& R, const MatrixXd& P);

/// Moore-Penrose pseudo-inverse via SVD. Singular values below
/// rel_tol * sigma_max * max(rows, cols) are treated as zero.
MatrixXd pseudo_inverse(const MatrixXd& M, double rel_tol = 1e-12);

/// n values 10^e with e evenly spaced over [lo_exp, hi_exp].
std::vector<double> logspace(double lo_exp, double hi_exp, int n);

}  // namespace mtil
