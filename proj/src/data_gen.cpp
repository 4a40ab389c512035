#include "mtil/data_gen.hpp"

#include <cmath>
#include <cstdio>
#include <string>

#include <Eigen/Cholesky>

#include "mtil/control_math.hpp"
#include "mtil/errors.hpp"

namespace mtil {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Eigen::VectorXd RandomStream::normal_vector(Eigen::Index n) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
  return v;
}

Eigen::MatrixXd RandomStream::normal_matrix(Eigen::Index rows,
                                            Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
  }
  return m;
}

SeedTree SeedTree::child(std::string label, std::int64_t index) const {
  SeedTree out = *this;
  out.path.emplace_back(std::move(label), index);
  return out;
}

std::uint64_t SeedTree::seed() const {
  std::uint64_t h = splitmix64(root);
  for (const auto& [label, index] : path) {
    h = splitmix64(h ^ fnv1a(label));
    h = splitmix64(h ^ static_cast<std::uint64_t>(index));
  }
  return h;
}

RandomStream derive_stream(const SeedTree& tree, const std::string& label,
                           std::int64_t index) {
  return tree.child(label, index).stream();
}

MatrixXd covariance_factor(const MatrixXd& S) {
  if (S.rows() != S.cols()) {
    throw Error(ErrorCode::kInvalidArgument, "covariance_factor: not square");
  }
  const Eigen::Index n = S.rows();
  if (n == 0 || S.isZero(0.0)) return MatrixXd::Zero(n, n);
  const double scale = S.trace() / static_cast<double>(n);
  for (double jitter : {0.0, 1e-12, 1e-10}) {
    Eigen::LLT<MatrixXd> llt(S + jitter * scale * MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      MatrixXd L = llt.matrixL();
      if (L.allFinite()) return L;
    }
  }
  throw Error(ErrorCode::kCholeskyFailure,
              "covariance matrix is numerically indefinite");
}

TrajectoryBatch rollout_expert(const LinearSystem& system, const ExpertTask& task,
                               int T, int N, RandomStream& stream, int task_id,
                               const std::optional<VectorXd>& forced_x0) {
  if (T < 1 || N < 1) {
    throw Error(ErrorCode::kInvalidArgument, "rollout_expert: need T, N >= 1");
  }
  const double rho = spectral_radius(system.closed_loop(task.K));
  if (rho >= 1.0) {
    throw Error(ErrorCode::kUnstableClosedLoop,
                "rollout_expert: closed-loop spectral radius " + std::to_string(rho));
  }
  const MatrixXd Lx = forced_x0 ? MatrixXd() : covariance_factor(task.sigma_x);
  const MatrixXd Lw = covariance_factor(task.sigma_w);
  const Eigen::Index n = system.nx();
  const Eigen::Index m = system.nu();

  TrajectoryBatch batch;
  batch.task_id = task_id;
  batch.states.reserve(static_cast<std::size_t>(N));
  batch.inputs.reserve(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) {
    MatrixXd xs(T, n);
    MatrixXd us(T, m);
    VectorXd x = forced_x0 ? *forced_x0 : VectorXd(Lx * stream.normal_vector(n));
    for (int t = 0; t < T; ++t) {
      const VectorXd z = task.sigma_z * stream.normal_vector(m);
      const VectorXd w = Lw * stream.normal_vector(n);
      const VectorXd u = task.K * x + z;
      xs.row(t) = x.transpose();
      us.row(t) = u.transpose();
      x = system.A() * x + system.B() * u + w;
    }
    batch.states.push_back(std::move(xs));
    batch.inputs.push_back(std::move(us));
  }
  return batch;
}

StackedData stack_prefix(const TrajectoryBatch& batch, int n_traj) {
  if (n_traj < 0 || n_traj > batch.N()) {
    throw Error(ErrorCode::kInvalidArgument, "stack_prefix: bad trajectory count");
  }
  StackedData out;
  if (n_traj == 0) return out;
  const Eigen::Index T = batch.T();
  out.X.resize(n_traj * T, batch.states[0].cols());
  out.U.resize(n_traj * T, batch.inputs[0].cols());
  for (int i = 0; i < n_traj; ++i) {
    out.X.middleRows(i * T, T) = batch.states[static_cast<std::size_t>(i)];
    out.U.middleRows(i * T, T) = batch.inputs[static_cast<std::size_t>(i)];
  }
  return out;
}

StackedData stack_data(const TrajectoryBatch& batch) {
  return stack_prefix(batch, batch.N());
}

TrajectoryBatch unstack_data(const StackedData& data, int N, int task_id) {
  if (N < 1 || data.X.rows() % N != 0 || data.U.rows() != data.X.rows()) {
    throw Error(ErrorCode::kInvalidArgument,
                "unstack_data: row count is not a multiple of N");
  }
  const Eigen::Index T = data.X.rows() / N;
  TrajectoryBatch batch;
  batch.task_id = task_id;
  for (int i = 0; i < N; ++i) {
    batch.states.emplace_back(data.X.middleRows(i * T, T));
    batch.inputs.emplace_back(data.U.middleRows(i * T, T));
  }
  return batch;
}

NoiseRealization sample_noise(const LinearSystem& system, const ExpertTask& task,
                              int T, RandomStream& stream) {
  if (T < 0) throw Error(ErrorCode::kInvalidArgument, "sample_noise: T < 0");
  const MatrixXd Lx = covariance_factor(task.sigma_x);
  const MatrixXd Lw = covariance_factor(task.sigma_w);
  NoiseRealization noise;
  noise.x0 = Lx * stream.normal_vector(system.nx());
  noise.w = stream.normal_matrix(T, system.nx()) * Lw.transpose();
  noise.z = task.sigma_z * stream.normal_matrix(T, system.nu());
  return noise;
}

CoupledRollout coupled_rollout(const LinearSystem& system,
                               const MatrixXd& K_expert,
                               const MatrixXd& K_learned,
                               const NoiseRealization& noise, int T) {
  if (T < 0 || noise.w.rows() < T || noise.z.rows() < T ||
      noise.x0.size() != system.nx()) {
    throw Error(ErrorCode::kInvalidArgument,
                "coupled_rollout: noise realization does not cover horizon");
  }
  const MatrixXd a_star = system.closed_loop(K_expert);
  const MatrixXd a_hat = system.closed_loop(K_learned);
  const Eigen::Index n = system.nx();

  CoupledRollout out;
  out.expert.resize(T + 1, n);
  MatrixXd learned(T + 1, n);
  VectorXd xs = noise.x0;
  VectorXd xh = noise.x0;
  out.expert.row(0) = xs.transpose();
  learned.row(0) = xh.transpose();
  int done = T;
  for (int t = 0; t < T; ++t) {
    const VectorXd drive = system.B() * noise.z.row(t).transpose() +
                           noise.w.row(t).transpose();
    xs = a_star * xs + drive;
    out.expert.row(t + 1) = xs.transpose();
    if (!out.nonfinite) {
      xh = a_hat * xh + drive;
      if (!xh.allFinite()) {
        out.nonfinite = true;
        done = t;
      } else {
        learned.row(t + 1) = xh.transpose();
      }
    }
  }
  out.learned = learned.topRows(done + 1);
  return out;
}

void write_batch_csv(std::ostream& out, std::span<const TrajectoryBatch> batches) {
  if (batches.empty()) {
    out << "task,traj,t\n";
    return;
  }
  const Eigen::Index n = batches[0].states.empty() ? 0 : batches[0].states[0].cols();
  const Eigen::Index m = batches[0].inputs.empty() ? 0 : batches[0].inputs[0].cols();
  out << "task,traj,t";
  for (Eigen::Index j = 0; j < n; ++j) out << ",x_" << j;
  for (Eigen::Index j = 0; j < m; ++j) out << ",u_" << j;
  out << '\n';
  char buf[32];
  for (const auto& batch : batches) {
    for (int i = 0; i < batch.N(); ++i) {
      const auto& xs = batch.states[static_cast<std::size_t>(i)];
      const auto& us = batch.inputs[static_cast<std::size_t>(i)];
      for (Eigen::Index t = 0; t < xs.rows(); ++t) {
        out << batch.task_id << ',' << i << ',' << t;
        for (Eigen::Index j = 0; j < xs.cols(); ++j) {
          std::snprintf(buf, sizeof buf, "%.17g", xs(t, j));
          out << ',' << buf;
        }
        for (Eigen::Index j = 0; j < us.cols(); ++j) {
          std::snprintf(buf, sizeof buf, "%.17g", us(t, j));
          out << ',' << buf;
        }
        out << '\n';
      }
    }
  }
}

}  // namespace mtil
