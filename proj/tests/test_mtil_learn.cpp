#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "mtil/control_math.hpp"
#include "mtil/data_gen.hpp"
#include "mtil/errors.hpp"
#include "mtil/eval_metrics.hpp"
#include "mtil/lti_env.hpp"
#include "mtil/mtil_learn.hpp"
#include "mtil/random.hpp"

using Eigen::MatrixXd;
using namespace mtil;

namespace {

TaskEnsemble lifted(int H, double sigma_z, std::uint64_t seed) {
  const TaskEnsemble raw = lqr_ensemble(preset_system("hong2021"), H, -2.0, 2.0,
                                        MatrixXd::Identity(2, 2), sigma_z);
  RandomStream rng(seed);
  return lift_ensemble(raw, sample_lift_matrix(50, 4, rng));
}

std::vector<StackedData> source_data(const TaskEnsemble& ens, int N, int T, RandomStream& rng) {
  std::vector<StackedData> out;
  for (int h = 0; h < ens.H(); ++h) {
    out.push_back(stack_data(rollout_expert(ens.system, ens.sources[static_cast<std::size_t>(h)], T, N, rng, h)));
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST(Pretrain, NoiselessRecoversRepresentation) {
  const TaskEnsemble ens = lifted(3, 0.0, 1);
  RandomStream rng(2);
  const auto src = source_data(ens, 2, 20, rng);
  PretrainOptions opt;
  RandomStream init(3);
  const PretrainResult res = pretrain_alternating(src, opt, init);
  double total = 0.0;
  for (const auto& d : src) total += d.U.squaredNorm();
  EXPECT_LE(res.final_objective(), 1e-16 * total);
  EXPECT_LE(pretrain_objective(src, res.phi_hat, res.f_hats), 1e-16 * total);
  EXPECT_LE(subspace_distance(res.phi_hat, ens.truth->phi_star), 1e-6);
}

TEST(Pretrain, ObjectiveTraceMonotoneEverySeed) {
  const TaskEnsemble ens = lifted(9, 1.0, 4);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RandomStream rng(100 + seed);
    const auto src = source_data(ens, 3, 20, rng);
    PretrainOptions opt;
    opt.max_sweeps = 60;
    RandomStream init(200 + seed);
    const PretrainResult res = pretrain_alternating(src, opt, init);
    ASSERT_GE(res.objective_trace.size(), 2u);
    for (std::size_t i = 1; i < res.objective_trace.size(); ++i) {
      EXPECT_LE(res.objective_trace[i], res.objective_trace[i - 1] * (1 + 1e-12));
    }
    EXPECT_LE(res.final_objective(), res.objective_trace.front());
    const double direct = pretrain_objective(src, res.phi_hat, res.f_hats);
    EXPECT_NEAR(direct, res.final_objective(), 1e-8 * direct);
  }
}

TEST(Pretrain, FullRankSingleTaskMatchesOls) {
  const TaskEnsemble ens = lqr_ensemble(preset_system("hong2021"), 1, -2.0, 2.0,
                                        MatrixXd::Identity(2, 2), 1.0);
  RandomStream rng(5);
  const auto src = source_data(ens, 5, 20, rng);
  RandomStream init(6);
  const PretrainResult res = pretrain_alternating(src, {4, 500, 1e-12, 1}, init);
  const MatrixXd ols = direct_ols(src[0]).weights;
  EXPECT_LT((res.f_hats[0] * res.phi_hat - ols).norm(), 1e-8);
}

TEST(Pretrain, ZeroInputsGiveZeroObjective) {
  RandomStream rng(7);
  std::vector<StackedData> src;
  for (int h = 0; h < 3; ++h) src.push_back({rng.normal_matrix(30, 6), MatrixXd::Zero(30, 2)});
  PretrainOptions opt;
  opt.k = 2;
  RandomStream init(8);
  const PretrainResult res = pretrain_alternating(src, opt, init);
  EXPECT_EQ(res.objective_trace.front(), 0.0);
  for (const auto& f : res.f_hats) EXPECT_EQ(f.norm(), 0.0);
}

TEST(Pretrain, CanonicalFormAndGaugeInvariance) {
  const TaskEnsemble ens = lifted(9, 1.0, 9);
  RandomStream rng(10);
  const auto src = source_data(ens, 2, 20, rng);
  PretrainOptions opt;
  opt.max_sweeps = 30;
  RandomStream init(11);
  const PretrainResult res = pretrain_alternating(src, opt, init);
  EXPECT_LT((res.phi_hat * res.phi_hat.transpose() - MatrixXd::Identity(4, 4)).norm(), 1e-10);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 50; ++j) {
      if (std::abs(res.phi_hat(i, j)) > 1e-12) {
        EXPECT_GT(res.phi_hat(i, j), 0.0);
        break;
      }
    }
  }
  for (const auto& f : res.f_hats) {
    const FactoredController once = canonicalize({f, res.phi_hat});
    const FactoredController twice = canonicalize(once);
    EXPECT_LT((twice.gain() - f * res.phi_hat).norm(), 1e-12 * std::max(1.0, f.norm()));
  }
  RandomStream r2(12);
  const FactoredController skewed{r2.normal_matrix(2, 4), r2.normal_matrix(4, 50)};
  EXPECT_LT((canonicalize(skewed).gain() - skewed.gain()).norm(), 1e-10 * skewed.gain().norm());
}

TEST(Pretrain, RestartsKeepBestObjective) {
  const TaskEnsemble ens = lifted(9, 1.0, 13);
  RandomStream rng(14);
  const auto src = source_data(ens, 2, 20, rng);
  PretrainOptions one;
  one.max_sweeps = 20;
  PretrainOptions four = one;
  four.restarts = 4;
  RandomStream a(15), b(15);
  const double single = pretrain_alternating(src, one, a).final_objective();
  const double best = pretrain_alternating(src, four, b).final_objective();
  EXPECT_LE(best, single);
}

TEST(Pretrain, Errors) {
  RandomStream rng(16);
  std::vector<StackedData> src = {{rng.normal_matrix(3, 6), rng.normal_matrix(3, 2)}};
  PretrainOptions opt;
  opt.k = 4;
  RandomStream init(17);
  EXPECT_THROW(pretrain_alternating(src, opt, init), Error);  // fewer rows than k
  MatrixXd low = rng.normal_matrix(40, 2) * rng.normal_matrix(2, 6);
  src = {{low, rng.normal_matrix(40, 2)}};
  try {
    pretrain_alternating(src, opt, init);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateRank);
  }
}

TEST(Finetune, NoiselessRecoversTargetWeights) {
  const TaskEnsemble ens = lifted(9, 0.0, 18);
  RandomStream rng(19);
  const StackedData d = stack_data(rollout_expert(ens.system, ens.target, 20, 1, rng));
  const LeastSquaresFit fit = finetune_target(ens.truth->phi_star, d);
  EXPECT_LT((fit.weights - ens.truth->f_stars.back()).norm(), 1e-8);
  EXPECT_FALSE(fit.ridge);
}

TEST(Finetune, ZeroInputs) {
  RandomStream rng(20);
  const StackedData d{rng.normal_matrix(30, 10), MatrixXd::Zero(30, 2)};
  EXPECT_EQ(finetune_target(rng.normal_matrix(3, 10), d).weights.norm(), 0.0);
}

TEST(Finetune, ResidualOrthogonalToRegressors) {
  RandomStream rng(21);
  const StackedData d{rng.normal_matrix(40, 10), rng.normal_matrix(40, 2)};
  const MatrixXd phi = rng.normal_matrix(3, 10);
  const MatrixXd w = finetune_target(phi, d).weights;
  const MatrixXd z = d.X * phi.transpose();
  EXPECT_LT((z.transpose() * (d.U - z * w.transpose())).norm(), 1e-8);
}

TEST(Finetune, RidgeWhenRegressorsCollinear) {
  RandomStream rng(22);
  const StackedData d{rng.normal_matrix(40, 10), rng.normal_matrix(40, 2)};
  MatrixXd phi = rng.normal_matrix(3, 10);
  phi.row(2) = phi.row(1);
  const LeastSquaresFit fit = finetune_target(phi, d);
  EXPECT_TRUE(fit.ridge);
  EXPECT_TRUE(fit.weights.allFinite());
}

TEST(Finetune, ErrorHalvesWhenSamplesQuadruple) {
  const TaskEnsemble ens = lifted(9, 1.0, 23);
  const MatrixXd& phi = ens.truth->phi_star;
  const MatrixXd& f_star = ens.truth->f_stars.back();
  auto median_err = [&](int n2) {
    std::vector<double> errs;
    for (int seed = 0; seed < 50; ++seed) {
      RandomStream rng = SeedTree{24, {}}.child("n2", n2).child("seed", seed).stream();
      const StackedData d = stack_data(rollout_expert(ens.system, ens.target, 20, n2, rng));
      errs.push_back((finetune_target(phi, d).weights - f_star).norm());
    }
    return median(errs);
  };
  const double ratio = median_err(16) / median_err(4);
  EXPECT_NEAR(ratio, 0.5, 0.15);
}

TEST(DirectOls, NoiselessFullRankRecovery) {
  const LinearSystem sys = preset_system("hong2021");
  const MatrixXd K = synthesize_expert_family(sys, {1.0}, MatrixXd::Identity(2, 2))[0];
  const ExpertTask task = make_expert_task(sys, K, MatrixXd::Identity(4, 4), 0.0);
  RandomStream rng(25);
  const StackedData d = stack_data(rollout_expert(sys, task, 20, 1, rng));
  const LeastSquaresFit fit = direct_ols(d);
  EXPECT_LT((fit.weights - K).norm(), 1e-10);
  EXPECT_FALSE(fit.underdetermined);
}

TEST(DirectOls, ZeroInputsAndOrthogonality) {
  RandomStream rng(26);
  EXPECT_EQ(direct_ols({rng.normal_matrix(20, 5), MatrixXd::Zero(20, 2)}).weights.norm(), 0.0);
  const StackedData d{rng.normal_matrix(20, 5), rng.normal_matrix(20, 2)};
  const MatrixXd w = direct_ols(d).weights;
  EXPECT_LT((d.X.transpose() * (d.U - d.X * w.transpose())).norm(), 1e-8);
  EXPECT_LT((w - finetune_target(MatrixXd::Identity(5, 5), d).weights).norm(), 1e-10);
}

TEST(DirectOls, UnderdeterminedMinimumNorm) {
  RandomStream rng(27);
  const StackedData d{rng.normal_matrix(20, 50), rng.normal_matrix(20, 2)};
  const LeastSquaresFit fit = direct_ols(d);
  EXPECT_TRUE(fit.underdetermined);
  // Interpolates the data and lies in the row space of X.
  EXPECT_LT((d.X * fit.weights.transpose() - d.U).norm(), 1e-8);
  const MatrixXd oracle = (pseudo_inverse(d.X) * d.U).transpose();
  EXPECT_LT((fit.weights - oracle).norm(), 1e-8);
}

TEST(SubspaceDistance, Examples) {
  RandomStream rng(28);
  const MatrixXd a = rng.normal_matrix(3, 8);
  EXPECT_LT(subspace_distance(a, a), 1e-12);
  const MatrixXd rotated = rng.normal_matrix(3, 3) * a;
  EXPECT_LT(subspace_distance(a, rotated), 1e-10);
  MatrixXd e12 = MatrixXd::Zero(2, 4), e34 = MatrixXd::Zero(2, 4);
  e12(0, 0) = e12(1, 1) = 1.0;
  e34(0, 2) = e34(1, 3) = 1.0;
  EXPECT_NEAR(subspace_distance(e12, e34), 1.0, 1e-12);
  MatrixXd deficient = e12;
  deficient.row(1) = deficient.row(0);
  try {
    subspace_distance(deficient, e34);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRankDeficient);
  }
}

TEST(FactoredAdvantage, MedianTrackingBeatsDirectAtTwoTrajectories) {
  std::vector<double> factored, direct;
  for (int seed = 0; seed < 20; ++seed) {
    const SeedTree tree = SeedTree{29, {}}.child("seed", seed);
    const TaskEnsemble ens = lifted(9, 1.0, tree.child("lift", 0).seed());
    RandomStream rng = tree.child("data", 0).stream();
    const auto src = source_data(ens, 10, 20, rng);
    const StackedData tgt = stack_data(rollout_expert(ens.system, ens.target, 20, 2, rng));
    RandomStream init = tree.child("als", 0).stream();
    const PretrainResult pre = pretrain_alternating(src, {}, init);
    const MatrixXd k_mt = finetune_target(pre.phi_hat, tgt).weights * pre.phi_hat;
    const MatrixXd k_dir = direct_ols(tgt).weights;
    const SeedTree eval = tree.child("eval", 0);
    factored.push_back(evaluate_controller(ens.system, ens.target, k_mt, 100, 1, eval)[0].tracking_err);
    direct.push_back(evaluate_controller(ens.system, ens.target, k_dir, 100, 1, eval)[0].tracking_err);
  }
  EXPECT_LT(median(factored), median(direct));
}
