#include "support/oracles.hpp"

#include <gtest/gtest.h>

using namespace remedi;

namespace {

const Matrix kNoRows(0, 2);
const std::vector<double> kNoTargets;

void expect_same_structure(const GbdtModel& a, const GbdtModel& b, double value_tol) {
  ASSERT_EQ(a.trees.size(), b.trees.size());
  for (std::size_t t = 0; t < a.trees.size(); ++t) {
    ASSERT_EQ(a.trees[t].nodes.size(), b.trees[t].nodes.size()) << "tree " << t;
    for (std::size_t i = 0; i < a.trees[t].nodes.size(); ++i) {
      const auto& x = a.trees[t].nodes[i];
      const auto& y = b.trees[t].nodes[i];
      EXPECT_EQ(x.feature, y.feature);
      EXPECT_EQ(x.threshold, y.threshold);
      EXPECT_EQ(x.left, y.left);
      EXPECT_NEAR(x.value, y.value, value_tol);
    }
  }
}

}  // namespace

TEST(Focal, HandValueAtZero) {
  // z = 0, y = 1, gamma 2, alpha 0.25: 0.25 * 0.5^2 * ln 2.
  EXPECT_NEAR(focal_loss(0.0, 1.0, {2.0, 0.25}), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(0.0, 1.0, {2.0, 0.25}), 0.043322, 1e-6);
}

TEST(Focal, GammaZeroReducesToWeightedLogLossGradient) {
  const FocalParams fp{0.0, 0.5};
  for (double z : {-4.0, -1.0, 0.0, 0.3, 2.5})
    for (double y : {0.0, 1.0}) {
      const auto gh = focal_grad_hess(z, y, fp);
      EXPECT_NEAR(gh.grad, 0.5 * (sigmoid(z) - y), 1e-15);
      EXPECT_NEAR(gh.hess, 0.5 * sigmoid(z) * (1.0 - sigmoid(z)), 1e-15);
    }
}

TEST(Focal, DerivativesMatchFiniteDifferences) {
  for (FocalParams fp : {FocalParams{2.0, 0.25}, FocalParams{1.0, 0.75}, FocalParams{0.5, 0.5}, FocalParams{3.0, 0.1}}) {
    const auto c = oracle::check_focal(fp);
    EXPECT_LT(c.max_grad_error, 1e-6) << "gamma " << fp.gamma;
    EXPECT_LT(c.max_hess_error, 1e-6) << "gamma " << fp.gamma;
    EXPECT_TRUE(c.floor_applied) << "gamma " << fp.gamma;
  }
}

TEST(Focal, HessianFloorOnlyWhereCurvatureIsNegative) {
  const FocalParams fp{3.0, 0.1};
  bool saw_floor = false;
  for (double y : {0.0, 1.0})
    for (double z = -30.0; z <= 30.0; z += 0.5) {
      const auto gh = focal_grad_hess(z, y, fp);
      EXPECT_GE(gh.hess, 1e-12);
      EXPECT_TRUE(std::isfinite(gh.grad));
      if (gh.hess == 1e-12) {
        saw_floor = true;
        EXPECT_LE(focal_derivatives(z, y, fp).hess, 1e-12);
      }
    }
  EXPECT_TRUE(saw_floor);
}

TEST(Gbdt, SeparableToyReachesPerfectAucInFiveTrees) {
  Matrix x(20, 2);
  std::vector<double> y(20);
  for (int i = 0; i < 20; ++i) {
    x(i, 0) = i;
    x(i, 1) = (i * 7) % 5;
    y[static_cast<std::size_t>(i)] = i >= 14 ? 1.0 : 0.0;
  }
  GbdtParams p;
  p.n_trees = 5;
  p.min_samples_leaf = 1;
  p.max_depth = 2;
  const auto m = fit_gbdt_matrix(x, y, kNoRows, kNoTargets, p);
  EXPECT_LE(m.trees.size(), 5u);
  const Vector s = m.raw_scores(x);
  EXPECT_DOUBLE_EQ(auc(y, to_std(s)), 1.0);
}

TEST(Gbdt, ZeroTreesRejected) {
  GbdtParams p;
  p.n_trees = 0;
  EXPECT_THROW(p.validate(), UsageError);
  Matrix x = Matrix::Random(10, 2);
  std::vector<double> y{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  EXPECT_THROW(fit_gbdt_matrix(x, y, kNoRows, kNoTargets, p), UsageError);
}

TEST(Gbdt, LearningRateZeroGivesPriorModel) {
  const auto d = oracle::toy_dataset(200, 3, 0.2, 4);
  GbdtParams p;
  p.learning_rate = 0.0;
  p.n_trees = 5;
  const auto m = fit_gbdt_matrix(d.features, d.labels, Matrix(0, 3), kNoTargets, p);
  const Vector s = m.raw_scores(d.features);
  EXPECT_LT((s.array() - m.base_score).abs().maxCoeff(), 1e-15);
}

TEST(Gbdt, FocalGammaZeroHalfAlphaMatchesLogLossWithScaledRegularizer) {
  // Focal(gamma 0, alpha 0.5) halves every gradient and hessian, so it grows
  // the same trees as log loss once the leaf L2 term is halved too.
  const auto d = oracle::toy_dataset(600, 4, 0.1, 5);
  const auto v = oracle::toy_dataset(200, 4, 0.1, 6);
  GbdtParams lp;
  lp.n_trees = 15;
  lp.max_depth = 3;
  lp.l2_leaf = 1.0;
  lp.early_stopping_rounds = 0;
  GbdtParams fp = lp;
  fp.objective = GbdtObjective::focal;
  fp.l2_leaf = 0.5;
  const auto a = fit_gbdt_matrix(d.features, d.labels, v.features, v.labels, lp);
  const auto b = fit_gbdt_matrix(d.features, d.labels, v.features, v.labels, fp, FocalParams{0.0, 0.5});
  expect_same_structure(a, b, 1e-12);
  EXPECT_EQ(a.base_score, b.base_score);
}

TEST(Gbdt, ClassWeightDefaultsToNegOverPos) {
  const auto d = oracle::toy_dataset(500, 3, 0.1, 7);
  GbdtParams p;
  p.n_trees = 3;
  const auto m = fit_gbdt_matrix(d.features, d.labels, Matrix(0, 3), kNoTargets, p);
  EXPECT_DOUBLE_EQ(m.scale_pos_weight, 450.0 / 50.0);
  // Weighted prior: 50 * 9 / (50 * 9 + 450) = 0.5.
  EXPECT_NEAR(m.base_score, 0.0, 1e-12);
}

TEST(Gbdt, SquaredErrorFitsConstantTarget) {
  const auto d = oracle::toy_dataset(300, 3, 0.1, 8);
  GbdtParams p;
  p.objective = GbdtObjective::squared_error;
  p.n_trees = 10;
  const std::vector<double> t(300, 0.25);
  const auto m = fit_gbdt_matrix(d.features, t, Matrix(0, 3), kNoTargets, p);
  const Vector s = m.raw_scores(d.features);
  EXPECT_LT((s.array() - 0.25).abs().maxCoeff(), 1e-12);
}

TEST(Gbdt, EarlyStoppingKeepsBestRound) {
  const auto d = oracle::toy_dataset(400, 3, 0.1, 9, 3.0);
  const auto v = oracle::toy_dataset(400, 3, 0.1, 10, 3.0);
  GbdtParams p;
  p.n_trees = 200;
  p.max_depth = 6;
  p.min_samples_leaf = 2;
  p.learning_rate = 0.5;
  p.early_stopping_rounds = 5;
  const auto m = fit_gbdt_matrix(d.features, d.labels, v.features, v.labels, p);
  EXPECT_LT(m.trees.size(), 200u);
  ASSERT_FALSE(m.valid_loss_curve.empty());
  const double best = *std::min_element(m.valid_loss_curve.begin(), m.valid_loss_curve.end());
  EXPECT_DOUBLE_EQ(m.best_valid_loss, best);
}

TEST(Gbdt, MonitorOverridesStoppingMetric) {
  const auto d = oracle::toy_dataset(400, 3, 0.1, 11);
  const auto v = oracle::toy_dataset(100, 3, 0.1, 12);
  GbdtParams p;
  p.n_trees = 50;
  p.early_stopping_rounds = 3;
  int calls = 0;
  // A monitor that never improves after the prior stops at the first rounds.
  const auto m = fit_gbdt_matrix(d.features, d.labels, v.features, v.labels, p, std::nullopt,
                                 [&](std::span<const double>) { return static_cast<double>(++calls); });
  EXPECT_EQ(m.trees.size(), 0u);
  EXPECT_GT(calls, 0);
}

TEST(Gbdt, JsonRoundTripIsExact) {
  const auto d = oracle::toy_dataset(300, 4, 0.2, 13);
  GbdtParams p;
  p.n_trees = 20;
  const auto m = fit_gbdt_matrix(d.features, d.labels, Matrix(0, 4), kNoTargets, p);
  const auto back = gbdt_from_json(nlohmann::json::parse(gbdt_to_json(m).dump()));
  EXPECT_EQ((m.raw_scores(d.features) - back.raw_scores(d.features)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gbdt, BlockedScoringMatchesRowScoring) {
  const auto d = oracle::toy_dataset(333, 4, 0.2, 14);
  GbdtParams p;
  p.n_trees = 25;
  const auto m = fit_gbdt_matrix(d.features, d.labels, Matrix(0, 4), kNoTargets, p);
  const Vector all = m.raw_scores(d.features);
  for (Index r = 0; r < d.features.rows(); ++r) EXPECT_EQ(all[r], m.raw_score(d.features.row(r).data()));
}

TEST(Gbdt, MalformedTreeLayoutRejected) {
  const auto d = oracle::toy_dataset(200, 2, 0.2, 15);
  GbdtParams p;
  p.n_trees = 2;
  p.min_samples_leaf = 5;
  auto j = gbdt_to_json(fit_gbdt_matrix(d.features, d.labels, Matrix(0, 2), kNoTargets, p));
  ASSERT_GT(j["trees"][0]["feature"].size(), 1u);
  j["trees"][0]["right"][0] = 0;
  EXPECT_THROW(gbdt_from_json(j), DataError);
}
