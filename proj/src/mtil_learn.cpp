#include "mtil/mtil_learn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "mtil/errors.hpp"

namespace mtil {

namespace {

constexpr double kRidgeScale = 1e-12;
constexpr double kRankThreshold = 1e-12;
constexpr int kRefinementSteps = 2;

// Task data compressed by a thin QR of X: ||U - X W F'||^2 equals
// ||u_r - r W F'||^2 + resid, with r upper-trapezoidal (min(N, n) x n).
struct ReducedTask {
  MatrixXd r;
  MatrixXd u_r;
  MatrixXd gram;  // r' r = X' X
  double resid = 0.0;
};

ReducedTask reduce(const StackedData& d) {
  const Eigen::Index rows = d.X.rows();
  const Eigen::Index n = d.X.cols();
  const Eigen::Index keep = std::min(rows, n);
  Eigen::HouseholderQR<MatrixXd> qr(d.X);
  ReducedTask out;
  out.r = qr.matrixQR().topRows(keep).triangularView<Eigen::Upper>();
  const MatrixXd qtu = qr.householderQ().transpose() * d.U;
  out.u_r = qtu.topRows(keep);
  out.resid = qtu.bottomRows(rows - keep).squaredNorm();
  out.gram = out.r.transpose() * out.r;
  return out;
}

// Ridge-repaired solve of the symmetric PSD system `normal * x = rhs`.
MatrixXd solve_normal(const MatrixXd& normal, const MatrixXd& rhs, bool& ridge) {
  Eigen::LLT<MatrixXd> llt(normal);
  if (llt.info() == Eigen::Success && llt.rcond() > 1e-13) {
    return llt.solve(rhs);
  }
  const Eigen::Index dim = normal.rows();
  const double lambda = kRidgeScale * normal.trace() / static_cast<double>(dim);
  if (!(lambda > 0.0)) {
    // Zero normal matrix: the block is unconstrained, take the zero solution.
    if (normal.isZero(0.0)) {
      ridge = true;
      return MatrixXd::Zero(dim, rhs.cols());
    }
    throw Error(ErrorCode::kSingularBlock, "normal matrix has nonpositive trace");
  }
  Eigen::LLT<MatrixXd> repaired(normal + lambda * MatrixXd::Identity(dim, dim));
  if (repaired.info() != Eigen::Success) {
    throw Error(ErrorCode::kSingularBlock, "block solve failed after ridge repair");
  }
  ridge = true;
  return repaired.solve(rhs);
}

// min ||Y - Z B||_F over B, QR when Z has full column rank, ridge otherwise.
MatrixXd block_least_squares(const MatrixXd& Z, const MatrixXd& Y, bool& ridge) {
  if (Z.cols() == 0) return MatrixXd::Zero(0, Y.cols());
  Eigen::ColPivHouseholderQR<MatrixXd> qr(Z);
  qr.setThreshold(kRankThreshold);
  if (qr.rank() == Z.cols()) return qr.solve(Y);
  return solve_normal(Z.transpose() * Z, Z.transpose() * Y, ridge);
}

MatrixXd orthonormal_rows(const MatrixXd& m) {
  Eigen::HouseholderQR<MatrixXd> qr(m.transpose());
  return (qr.householderQ() * MatrixXd::Identity(m.cols(), m.rows())).transpose();
}

double reduced_objective(std::span<const ReducedTask> tasks, const MatrixXd& phi,
                         std::span<const MatrixXd> fs) {
  double total = 0.0;
  for (std::size_t h = 0; h < tasks.size(); ++h) {
    total += (tasks[h].u_r - tasks[h].r * phi.transpose() * fs[h].transpose())
                 .squaredNorm() +
             tasks[h].resid;
  }
  return total;
}

void f_step(std::span<const ReducedTask> tasks, const MatrixXd& phi,
            std::vector<MatrixXd>& fs, bool& ridge) {
  for (std::size_t h = 0; h < tasks.size(); ++h) {
    const MatrixXd z = tasks[h].r * phi.transpose();
    fs[h] = block_least_squares(z, tasks[h].u_r, ridge).transpose();
  }
}

// Joint least squares in W = Phi' (n x k). With vec stacking columns,
// vec(G W M) = (M' kron G) vec(W), so the normal matrix is
// sum_h (F_h' F_h) kron (X_h' X_h). Two steps of iterative refinement
// recover the accuracy lost by forming normal equations.
MatrixXd phi_step(std::span<const ReducedTask> tasks,
                  std::span<const MatrixXd> fs, const MatrixXd& phi_prev,
                  bool& ridge) {
  const Eigen::Index n = phi_prev.cols();
  const Eigen::Index k = phi_prev.rows();
  const Eigen::Index dim = n * k;
  MatrixXd normal = MatrixXd::Zero(dim, dim);
  for (std::size_t h = 0; h < tasks.size(); ++h) {
    const MatrixXd ftf = fs[h].transpose() * fs[h];
    for (Eigen::Index a = 0; a < k; ++a) {
      for (Eigen::Index b = 0; b < k; ++b) {
        if (ftf(a, b) != 0.0) {
          normal.block(a * n, b * n, n, n).noalias() += ftf(a, b) * tasks[h].gram;
        }
      }
    }
  }
  normal = 0.5 * (normal + normal.transpose());

  auto gradient = [&](const MatrixXd& w) {
    MatrixXd g = MatrixXd::Zero(n, k);
    for (std::size_t h = 0; h < tasks.size(); ++h) {
      const MatrixXd resid = tasks[h].u_r - tasks[h].r * w * fs[h].transpose();
      g.noalias() += tasks[h].r.transpose() * resid * fs[h];
    }
    return g;
  };

  Eigen::LLT<MatrixXd> llt(normal);
  bool use_ridge = !(llt.info() == Eigen::Success && llt.rcond() > 1e-13);
  MatrixXd factored = normal;
  if (use_ridge) {
    const double lambda = kRidgeScale * normal.trace() / static_cast<double>(dim);
    if (!(lambda > 0.0)) return phi_prev;  // all F_h vanish: Phi is unconstrained
    factored += lambda * MatrixXd::Identity(dim, dim);
    llt.compute(factored);
    if (llt.info() != Eigen::Success) {
      throw Error(ErrorCode::kSingularBlock,
                  "representation block singular after ridge repair");
    }
    ridge = true;
  }

  MatrixXd w = MatrixXd::Zero(n, k);
  for (int step = 0; step <= kRefinementSteps; ++step) {
    const MatrixXd g = gradient(w);
    const Eigen::VectorXd delta =
        llt.solve(Eigen::Map<const Eigen::VectorXd>(g.data(), dim));
    w += Eigen::Map<const MatrixXd>(delta.data(), n, k);
  }
  return w.transpose();
}

struct AlsRun {
  MatrixXd phi;
  std::vector<MatrixXd> fs;
  std::vector<double> trace;
  int sweeps = 0;
  bool ridge = false;
};

AlsRun run_als(std::span<const ReducedTask> tasks, MatrixXd phi,
               const PretrainOptions& opt, Eigen::Index nu) {
  AlsRun run;
  run.fs.assign(tasks.size(), MatrixXd::Zero(nu, opt.k));
  f_step(tasks, phi, run.fs, run.ridge);
  run.trace.push_back(reduced_objective(tasks, phi, run.fs));
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    phi = phi_step(tasks, run.fs, phi, run.ridge);
    phi = orthonormal_rows(phi);
    f_step(tasks, phi, run.fs, run.ridge);
    const double prev = run.trace.back();
    const double obj = reduced_objective(tasks, phi, run.fs);
    run.trace.push_back(obj);
    run.sweeps = sweep;
    if (prev - obj <= opt.rel_tol * prev) break;
  }
  run.phi = std::move(phi);
  return run;
}

}  // namespace

FactoredController canonicalize(const FactoredController& fc) {
  const Eigen::Index k = fc.Phi.rows();
  const Eigen::Index n = fc.Phi.cols();
  Eigen::HouseholderQR<MatrixXd> qr(fc.Phi.transpose());
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(n, k);
  const MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  FactoredController out{fc.F * r.transpose(), q.transpose()};
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double v = out.Phi(i, j);
      if (std::abs(v) > 1e-12) {
        if (v < 0.0) {
          out.Phi.row(i) *= -1.0;
          out.F.col(i) *= -1.0;
        }
        break;
      }
    }
  }
  return out;
}

PretrainResult pretrain_alternating(std::span<const StackedData> source,
                                    const PretrainOptions& options,
                                    RandomStream& stream) {
  if (source.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "pretrain_alternating: no source tasks");
  }
  const Eigen::Index n = source[0].X.cols();
  const Eigen::Index nu = source[0].U.cols();
  if (options.k < 1 || options.k > n) {
    throw Error(ErrorCode::kInvalidArgument,
                "pretrain_alternating: need 1 <= k <= n_x");
  }
  if (options.restarts < 1 || options.max_sweeps < 0) {
    throw Error(ErrorCode::kInvalidArgument, "pretrain_alternating: bad options");
  }

  std::vector<ReducedTask> tasks;
  MatrixXd total_gram = MatrixXd::Zero(n, n);
  for (const auto& d : source) {
    if (d.X.cols() != n || d.U.cols() != nu || d.U.rows() != d.X.rows()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "pretrain_alternating: inconsistent task shapes");
    }
    if (d.X.rows() < options.k) {
      throw Error(ErrorCode::kInvalidArgument,
                  "pretrain_alternating: a task has fewer than k rows");
    }
    tasks.push_back(reduce(d));
    total_gram += tasks.back().gram;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(total_gram, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  const double cutoff = 1e-12 * std::max(ev.maxCoeff(), 0.0);
  const auto data_rank = (ev.array() > cutoff).count();
  if (data_rank < options.k) {
    throw Error(ErrorCode::kDegenerateRank,
                "pretrain_alternating: k = " + std::to_string(options.k) +
                    " exceeds stacked data rank " + std::to_string(data_rank));
  }

  PretrainResult best;
  bool have_best = false;
  for (int restart = 0; restart < options.restarts; ++restart) {
    MatrixXd phi0 = orthonormal_rows(stream.normal_matrix(options.k, n));
    AlsRun run = run_als(tasks, std::move(phi0), options, nu);
    if (!have_best || run.trace.back() < best.objective_trace.back()) {
      FactoredController stacked{MatrixXd(static_cast<Eigen::Index>(run.fs.size()) * nu,
                                          options.k),
                                 run.phi};
      for (std::size_t h = 0; h < run.fs.size(); ++h) {
        stacked.F.middleRows(static_cast<Eigen::Index>(h) * nu, nu) = run.fs[h];
      }
      const FactoredController canon = canonicalize(stacked);
      best.phi_hat = canon.Phi;
      best.f_hats.clear();
      for (std::size_t h = 0; h < run.fs.size(); ++h) {
        best.f_hats.push_back(canon.F.middleRows(static_cast<Eigen::Index>(h) * nu, nu));
      }
      best.objective_trace = std::move(run.trace);
      best.sweeps_used = run.sweeps;
      best.ridge_used = run.ridge;
      have_best = true;
    }
  }
  return best;
}

double pretrain_objective(std::span<const StackedData> source, const MatrixXd& phi,
                          std::span<const MatrixXd> f_hats) {
  if (f_hats.size() != source.size()) {
    throw Error(ErrorCode::kInvalidArgument, "pretrain_objective: task count mismatch");
  }
  double total = 0.0;
  for (std::size_t h = 0; h < source.size(); ++h) {
    total += (source[h].U - source[h].X * phi.transpose() * f_hats[h].transpose())
                 .squaredNorm();
  }
  return total;
}

LeastSquaresFit finetune_target(const MatrixXd& phi_hat, const StackedData& target) {
  if (phi_hat.cols() != target.X.cols() || target.U.rows() != target.X.rows()) {
    throw Error(ErrorCode::kInvalidArgument, "finetune_target: shape mismatch");
  }
  LeastSquaresFit fit;
  const MatrixXd z = target.X * phi_hat.transpose();
  fit.underdetermined = z.rows() < z.cols();
  fit.weights = block_least_squares(z, target.U, fit.ridge).transpose();
  return fit;
}

LeastSquaresFit direct_ols(const StackedData& target) {
  if (target.U.rows() != target.X.rows()) {
    throw Error(ErrorCode::kInvalidArgument, "direct_ols: shape mismatch");
  }
  LeastSquaresFit fit;
  Eigen::ColPivHouseholderQR<MatrixXd> qr(target.X);
  qr.setThreshold(kRankThreshold);
  if (target.X.rows() >= target.X.cols() && qr.rank() == target.X.cols()) {
    fit.weights = qr.solve(target.U).transpose();
    return fit;
  }
  fit.underdetermined = true;
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(target.X);
  cod.setThreshold(kRankThreshold);
  fit.weights = cod.solve(target.U).transpose();
  return fit;
}

double subspace_distance(const MatrixXd& phi_a, const MatrixXd& phi_b) {
  if (phi_a.rows() != phi_b.rows() || phi_a.cols() != phi_b.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "subspace_distance: shape mismatch");
  }
  const Eigen::Index k = phi_a.rows();
  const Eigen::Index n = phi_a.cols();
  auto basis = [&](const MatrixXd& m) {
    Eigen::ColPivHouseholderQR<MatrixXd> qr(m.transpose());
    qr.setThreshold(1e-10);
    if (qr.rank() < k) {
      throw Error(ErrorCode::kRankDeficient, "subspace_distance: input not full row rank");
    }
    return MatrixXd(qr.householderQ() * MatrixXd::Identity(n, k));
  };
  const MatrixXd qa = basis(phi_a);
  const MatrixXd qb = basis(phi_b);
  const MatrixXd resid = qb - qa * (qa.transpose() * qb);
  Eigen::JacobiSVD<MatrixXd> svd(resid);
  return std::min(1.0, svd.singularValues()(0));
}

}  // namespace mtil
