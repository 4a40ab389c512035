#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mtil/lti_env.hpp"
#include "mtil/random.hpp"

namespace mtil {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// N demonstrations of length T from one expert. states[i] is T x n_x
/// (row t = x_i[t]) and inputs[i] is T x n_u.
struct TrajectoryBatch {
  int task_id = 0;
  std::vector<MatrixXd> states;
  std::vector<MatrixXd> inputs;

  int N() const { return static_cast<int>(states.size()); }
  int T() const { return states.empty() ? 0 : static_cast<int>(states[0].rows()); }
};

/// Row r = i*T + t holds x_i[t] (in X) and u_i[t] (in U).
struct StackedData {
  MatrixXd X;
  MatrixXd U;
};

/// Process randomness for one coupled evaluation: x0, w (T x n_x), z (T x n_u).
struct NoiseRealization {
  VectorXd x0;
  MatrixXd w;
  MatrixXd z;
};

/// States x[0..T] of the expert and learned closed loops under one shared
/// noise realization. `learned` is truncated (fewer rows) if it overflowed.
struct CoupledRollout {
  MatrixXd expert;
  MatrixXd learned;
  bool nonfinite = false;
};

/// Lower-triangular L with L L' = S, escalating diagonal jitter through
/// 0, 1e-12 and 1e-10 (relative to trace(S)/n). The zero matrix maps to zero.
/// Throws CholeskyFailure.
MatrixXd covariance_factor(const MatrixXd& S);

/// Samples N trajectories of length T. Per trajectory, draws are taken in the
/// order x0, then (z[t], w[t]) for t = 0..T-1. x0 ~ N(0, sigma_x) unless
/// `forced_x0` is given (then no x0 draw is consumed).
TrajectoryBatch rollout_expert(const LinearSystem& system, const ExpertTask& task,
                               int T, int N, RandomStream& stream,
                               int task_id = 0,
                               const std::optional<VectorXd>& forced_x0 = {});

StackedData stack_data(const TrajectoryBatch& batch);

/// Inverse of stack_data for a known trajectory count.
TrajectoryBatch unstack_data(const StackedData& data, int N, int task_id = 0);

/// First `n_traj` trajectories of a batch, stacked.
StackedData stack_prefix(const TrajectoryBatch& batch, int n_traj);

/// Draw order: x0, then w row-major, then z row-major.
NoiseRealization sample_noise(const LinearSystem& system, const ExpertTask& task,
                              int T, RandomStream& stream);

/// x*[t+1] = (A+BK*)x*[t] + Bz[t] + w[t] and likewise for the learned gain,
/// both from noise.x0, for t = 0..T-1.
CoupledRollout coupled_rollout(const LinearSystem& system,
                               const MatrixXd& K_expert,
                               const MatrixXd& K_learned,
                               const NoiseRealization& noise, int T);

/// CSV with columns task,traj,t,x_0..x_{n-1},u_0..u_{m-1}.
void write_batch_csv(std::ostream& out, std::span<const TrajectoryBatch> batches);

}  // namespace mtil
