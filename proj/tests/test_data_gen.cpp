#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "mtil/data_gen.hpp"
#include "mtil/errors.hpp"
#include "mtil/lti_env.hpp"
#include "mtil/random.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace mtil;

namespace {

MatrixXd scalar(double v) { return MatrixXd::Constant(1, 1, v); }

ExpertTask noiseless(const LinearSystem& sys, const MatrixXd& K) {
  ExpertTask t;
  t.K = K;
  t.sigma_w = MatrixXd::Zero(sys.nx(), sys.nx());
  t.sigma_z = 0.0;
  t.sigma_x = MatrixXd::Identity(sys.nx(), sys.nx());
  return t;
}

}  // namespace

TEST(SeedTree, SamePathSameStream) {
  const SeedTree root{42, {}};
  RandomStream a = derive_stream(root, "traj", 0);
  RandomStream b = derive_stream(root, "traj", 0);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(SeedTree, SiblingPathsDiffer) {
  const SeedTree root{42, {}};
  EXPECT_NE(derive_stream(root, "traj", 0).normal(), derive_stream(root, "traj", 1).normal());
  EXPECT_NE(root.child("a", 0).child("b", 1).seed(), root.child("b", 1).child("a", 0).seed());
}

TEST(SeedTree, StandardNormalMomentsAndIndependence) {
  const SeedTree root{7, {}};
  RandomStream a = derive_stream(root, "x", 0);
  RandomStream b = derive_stream(root, "x", 1);
  const int n = 1000000;
  double mean = 0.0, var = 0.0, cross = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = a.normal();
    const double v = b.normal();
    mean += u;
    var += u * u;
    cross += u * v;
  }
  mean /= n;
  var /= n;
  cross /= n;
  EXPECT_LT(std::abs(mean), 4.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(var, 1.0, 0.01);
  EXPECT_LT(std::abs(cross), 0.01);
}

TEST(Rollout, ZeroNoiseZeroStart) {
  const LinearSystem sys = preset_system("hong2021");
  const auto gains = synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2));
  RandomStream rng(1);
  const TrajectoryBatch b =
      rollout_expert(sys, noiseless(sys, gains[0]), 10, 3, rng, 0, VectorXd::Zero(4));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(b.states[static_cast<std::size_t>(i)].norm(), 0.0);
    EXPECT_EQ(b.inputs[static_cast<std::size_t>(i)].norm(), 0.0);
  }
}

TEST(Rollout, ZeroNoiseFollowsPowerRecurrence) {
  const LinearSystem sys = preset_system("hong2021");
  const MatrixXd K = synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2))[0];
  const VectorXd v = (VectorXd(4) << 1, -2, 0.5, 3).finished();
  RandomStream rng(2);
  const TrajectoryBatch b = rollout_expert(sys, noiseless(sys, K), 30, 1, rng, 0, v);
  const MatrixXd a_cl = sys.A() + sys.B() * K;
  VectorXd x = v;
  for (int t = 0; t < 30; ++t) {
    EXPECT_LT((b.states[0].row(t).transpose() - x).norm(), 1e-10);
    x = a_cl * x;
  }
}

TEST(Rollout, RecurrencesReplayFromStream) {
  const LinearSystem sys = preset_system("hong2021");
  const MatrixXd K = synthesize_expert_family(sys, {0.3}, MatrixXd::Identity(2, 2))[0];
  const ExpertTask task = make_expert_task(sys, K, MatrixXd::Identity(4, 4), 0.7);
  RandomStream gen(3);
  const TrajectoryBatch b = rollout_expert(sys, task, 15, 2, gen);
  // Replay the documented draw order: x0, then (z[t], w[t]) for every t.
  RandomStream replay(3);
  const MatrixXd Lx = covariance_factor(task.sigma_x);
  for (int i = 0; i < 2; ++i) {
    const MatrixXd& xs = b.states[static_cast<std::size_t>(i)];
    const MatrixXd& us = b.inputs[static_cast<std::size_t>(i)];
    EXPECT_LT((xs.row(0).transpose() - Lx * replay.normal_vector(4)).norm(), 1e-12);
    for (int t = 0; t < 15; ++t) {
      const VectorXd z = 0.7 * replay.normal_vector(2);
      const VectorXd w = replay.normal_vector(4);
      EXPECT_LT((us.row(t).transpose() - (K * xs.row(t).transpose() + z)).norm(), 1e-12);
      if (t + 1 < 15) {
        const VectorXd next = sys.A() * xs.row(t).transpose() + sys.B() * us.row(t).transpose() + w;
        EXPECT_LT((xs.row(t + 1).transpose() - next).norm(), 1e-12 * (1 + next.norm()));
      }
    }
  }
}

TEST(Rollout, SeedReplayIsBitIdentical) {
  const LinearSystem sys = preset_system("scalar");
  const ExpertTask task = make_expert_task(sys, scalar(-0.3), scalar(1.0), 0.5);
  RandomStream a(9), b(9);
  const TrajectoryBatch x = rollout_expert(sys, task, 20, 4, a);
  const TrajectoryBatch y = rollout_expert(sys, task, 20, 4, b);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(x.states[static_cast<std::size_t>(i)], y.states[static_cast<std::size_t>(i)]);
    EXPECT_EQ(x.inputs[static_cast<std::size_t>(i)], y.inputs[static_cast<std::size_t>(i)]);
  }
}

TEST(Rollout, UnstableClosedLoopThrows) {
  const LinearSystem sys = preset_system("scalar");
  ExpertTask t = noiseless(sys, scalar(0.5));
  RandomStream rng(1);
  try {
    rollout_expert(sys, t, 5, 1, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnstableClosedLoop);
  }
}

TEST(Rollout, ScalarCovarianceSandwich) {
  const LinearSystem sys = preset_system("scalar");
  const ExpertTask task = make_expert_task(sys, scalar(-0.3), scalar(1.0), 0.0);
  int failures = 0;
  for (int rep = 0; rep < 50; ++rep) {
    RandomStream rng = SeedTree{11, {}}.child("rep", rep).stream();
    const StackedData d = stack_data(rollout_expert(sys, task, 100, 50, rng));
    const double ratio = d.X.squaredNorm() / d.X.rows() / task.sigma_x(0, 0);
    if (ratio < 0.9 || ratio > 1.1) ++failures;
  }
  EXPECT_LE(failures, 5);
}

TEST(Stack, RowOrdering) {
  TrajectoryBatch b;
  b.states = {(MatrixXd(2, 1) << 1, 2).finished()};
  b.inputs = {(MatrixXd(2, 1) << 10, 20).finished()};
  StackedData d = stack_data(b);
  EXPECT_EQ(d.X, (MatrixXd(2, 1) << 1, 2).finished());
  TrajectoryBatch c;
  c.states = {MatrixXd::Constant(1, 1, 1.0), MatrixXd::Constant(1, 1, 2.0)};
  c.inputs = {MatrixXd::Constant(1, 1, 3.0), MatrixXd::Constant(1, 1, 4.0)};
  d = stack_data(c);
  EXPECT_EQ(d.X, (MatrixXd(2, 1) << 1, 2).finished());
  EXPECT_EQ(d.U, (MatrixXd(2, 1) << 3, 4).finished());
}

TEST(Stack, RoundTrip) {
  const LinearSystem sys = preset_system("hong2021");
  const ExpertTask task = make_expert_task(
      sys, synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2))[0],
      MatrixXd::Identity(4, 4), 1.0);
  RandomStream rng(4);
  const TrajectoryBatch b = rollout_expert(sys, task, 7, 3, rng, 5);
  const TrajectoryBatch r = unstack_data(stack_data(b), 3, 5);
  ASSERT_EQ(r.N(), 3);
  EXPECT_EQ(r.task_id, 5);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(r.states[static_cast<std::size_t>(i)], b.states[static_cast<std::size_t>(i)]);
    EXPECT_EQ(r.inputs[static_cast<std::size_t>(i)], b.inputs[static_cast<std::size_t>(i)]);
  }
  const StackedData p = stack_prefix(b, 2);
  EXPECT_EQ(p.X.rows(), 14);
  EXPECT_EQ(p.X, stack_data(b).X.topRows(14));
}

TEST(Noise, FixedStreamReproducible) {
  const LinearSystem sys = preset_system("hong2021");
  const ExpertTask task = make_expert_task(
      sys, synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2))[0],
      MatrixXd::Identity(4, 4), 1.0);
  RandomStream a(5), b(5);
  const NoiseRealization x = sample_noise(sys, task, 10, a);
  const NoiseRealization y = sample_noise(sys, task, 10, b);
  EXPECT_EQ(x.x0, y.x0);
  EXPECT_EQ(x.w, y.w);
  EXPECT_EQ(x.z, y.z);
  EXPECT_EQ(x.w.rows(), 10);
  EXPECT_EQ(x.z.cols(), 2);
}

TEST(Noise, ZeroProcessNoise) {
  const LinearSystem sys = preset_system("scalar");
  ExpertTask task = noiseless(sys, scalar(-0.3));
  task.sigma_z = 1.0;
  RandomStream rng(6);
  EXPECT_EQ(sample_noise(sys, task, 50, rng).w.norm(), 0.0);
}

TEST(Noise, ActuatorCovariance) {
  const LinearSystem sys = preset_system("hong2021");
  ExpertTask task = noiseless(sys, MatrixXd::Zero(2, 4));
  task.sigma_z = 1.5;
  RandomStream rng(7);
  const NoiseRealization n = sample_noise(sys, task, 100000, rng);
  const MatrixXd cov = n.z.transpose() * n.z / 100000.0;
  const MatrixXd expect = 2.25 * MatrixXd::Identity(2, 2);
  EXPECT_LE((cov - expect).norm(), 0.05 * expect.norm());
}

TEST(Coupled, EqualGainsTrackExactly) {
  const LinearSystem sys = preset_system("hong2021");
  const MatrixXd K = synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2))[0];
  const ExpertTask task = make_expert_task(sys, K, MatrixXd::Identity(4, 4), 1.0);
  RandomStream rng(8);
  const NoiseRealization n = sample_noise(sys, task, 50, rng);
  const CoupledRollout r = coupled_rollout(sys, K, K, n, 50);
  EXPECT_FALSE(r.nonfinite);
  EXPECT_EQ(r.expert, r.learned);
  EXPECT_EQ(r.expert.rows(), 51);
}

TEST(Coupled, ScalarClosedForm) {
  const LinearSystem sys = preset_system("scalar");
  const double eps = 0.05;
  NoiseRealization n{VectorXd::Ones(1), MatrixXd::Zero(40, 1), MatrixXd::Zero(40, 1)};
  const CoupledRollout r = coupled_rollout(sys, scalar(-0.3), scalar(-0.3 + eps), n, 40);
  for (int t = 0; t <= 40; ++t) {
    EXPECT_NEAR(r.expert(t, 0) - r.learned(t, 0), std::pow(0.5, t) - std::pow(0.5 + eps, t), 1e-14);
  }
}

TEST(Coupled, NoiseCancelsForEqualGains) {
  const LinearSystem sys = preset_system("scalar");
  const ExpertTask task = make_expert_task(sys, scalar(-0.3), scalar(1.0), 1.0);
  RandomStream rng(10);
  const NoiseRealization n = sample_noise(sys, task, 100, rng);
  const CoupledRollout r = coupled_rollout(sys, scalar(-0.3), scalar(-0.3), n, 100);
  EXPECT_EQ((r.expert - r.learned).norm(), 0.0);
}

TEST(Coupled, DivergenceFlaggedAndTruncated) {
  const LinearSystem sys = preset_system("scalar");
  NoiseRealization n{VectorXd::Ones(1), MatrixXd::Zero(5000, 1), MatrixXd::Zero(5000, 1)};
  const CoupledRollout r = coupled_rollout(sys, scalar(-0.3), scalar(1e3), n, 5000);
  EXPECT_TRUE(r.nonfinite);
  EXPECT_LT(r.learned.rows(), 5001);
  EXPECT_TRUE(r.learned.allFinite());
  EXPECT_EQ(r.expert.rows(), 5001);
}

TEST(CovarianceFactor, JitterAndFailure) {
  EXPECT_EQ(covariance_factor(MatrixXd::Zero(3, 3)).norm(), 0.0);
  MatrixXd psd = MatrixXd::Ones(2, 2);
  const MatrixXd L = covariance_factor(psd);
  EXPECT_LT((L * L.transpose() - psd).norm(), 1e-9);
  MatrixXd indefinite(2, 2);
  indefinite << 1, 0, 0, -1;
  try {
    covariance_factor(indefinite);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCholeskyFailure);
  }
}

TEST(BatchCsv, HeaderAndRows) {
  TrajectoryBatch b;
  b.task_id = 2;
  b.states = {(MatrixXd(2, 2) << 1, 2, 3, 4).finished()};
  b.inputs = {(MatrixXd(2, 1) << 5, 6).finished()};
  std::ostringstream os;
  write_batch_csv(os, std::span<const TrajectoryBatch>(&b, 1));
  EXPECT_EQ(os.str(), "task,traj,t,x_0,x_1,u_0\n2,0,0,1,2,5\n2,0,1,3,4,6\n");
}
