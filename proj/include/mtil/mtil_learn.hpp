#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mtil/data_gen.hpp"
#include "mtil/random.hpp"

namespace mtil {

using Eigen::MatrixXd;

/// Controller K = F * Phi with a k-dimensional representation Phi (k x n_x)
/// and task weights F (n_u x k).
struct FactoredController {
  MatrixXd F;
  MatrixXd Phi;

  MatrixXd gain() const { return F * Phi; }
};

/// Rotates Phi to orthonormal rows (thin QR of Phi') with the first nonzero
/// entry of each row positive, absorbing the change of basis into F. The
/// composed gain is unchanged.
FactoredController canonicalize(const FactoredController& fc);

struct PretrainOptions {
  int k = 4;
  int max_sweeps = 500;
  double rel_tol = 1e-10;
  int restarts = 1;  // best final objective over this many random starts
};

struct PretrainResult {
  MatrixXd phi_hat;
  std::vector<MatrixXd> f_hats;
  std::vector<double> objective_trace;  // [0] is the value at initialization
  int sweeps_used = 0;
  bool ridge_used = false;

  double final_objective() const { return objective_trace.back(); }
};

/// Exact alternating least squares on
///   sum_h || U_h - X_h Phi' F_h' ||_F^2.
/// Phi starts from the orthonormalized rows of a k x n_x Gaussian draw from
/// `stream`. Each sweep solves the joint Phi block, re-orthonormalizes Phi
/// and re-solves every F_h. Stops when the relative objective decrease falls
/// below rel_tol or after max_sweeps sweeps. Throws DegenerateRank,
/// SingularBlock.
PretrainResult pretrain_alternating(std::span<const StackedData> source,
                                    const PretrainOptions& options,
                                    RandomStream& stream);

/// Pre-training objective evaluated from residuals.
double pretrain_objective(std::span<const StackedData> source,
                          const MatrixXd& phi, std::span<const MatrixXd> f_hats);

/// Least-squares weights with flags describing how the solve was repaired.
struct LeastSquaresFit {
  MatrixXd weights;
  bool ridge = false;           // Tikhonov repair applied
  bool underdetermined = false; // fewer independent rows than unknowns
};

/// F' = (Phi X'X Phi')^{-1} Phi X'U; ridge repair when X Phi' is rank
/// deficient. Weights are n_u x k.
LeastSquaresFit finetune_target(const MatrixXd& phi_hat, const StackedData& target);

/// K' = X^+ U: ordinary least squares when X has full column rank, otherwise
/// the minimum-norm solution, flagged underdetermined. Weights are n_u x n_x.
LeastSquaresFit direct_ols(const StackedData& target);

/// Sine of the largest principal angle between the row spaces of two k x n
/// matrices. Throws RankDeficient.
double subspace_distance(const MatrixXd& phi_a, const MatrixXd& phi_b);

}  // namespace mtil
