#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace remedi;

namespace {

std::vector<double> random_probs(std::mt19937_64& rng, std::size_t m) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> p(m);
  for (auto& v : p) v = u(rng);
  return p;
}

LearnerSpec constant_spec(const std::string& name, double value) {
  LearnerSpec s;
  s.name = name;
  s.kind = LearnerKind::constant;
  s.constant_value = value;
  return s;
}

}  // namespace

TEST(GroupStats, FiveModelExample) {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4, 0.5};
  const auto s = group_stats(p);
  EXPECT_NEAR(s.mean, 0.3, 1e-15);
  EXPECT_NEAR(s.std, std::sqrt(0.02), 1e-15);
  EXPECT_DOUBLE_EQ(s.median, 0.3);
  EXPECT_DOUBLE_EQ(s.max, 0.5);
  EXPECT_DOUBLE_EQ(s.min, 0.1);
  EXPECT_DOUBLE_EQ(s.range, 0.4);
}

TEST(GroupStats, ConstantAndTwoPointGroups) {
  const std::vector<double> c(4, 0.37);
  const auto s = group_stats(c);
  EXPECT_EQ(s.std, 0.0);
  EXPECT_EQ(s.range, 0.0);
  EXPECT_EQ(s.mean, 0.37);
  const auto t = group_stats(std::vector<double>{0.0, 1.0});
  EXPECT_DOUBLE_EQ(t.mean, 0.5);
  EXPECT_DOUBLE_EQ(t.std, 0.5);
  EXPECT_DOUBLE_EQ(t.median, 0.5);
}

TEST(GroupStats, RejectsBadGroups) {
  EXPECT_THROW(group_stats(std::vector<double>{0.5}), DataError);
  EXPECT_THROW(group_stats(std::vector<double>{0.5, 1.2}), DataError);
}

TEST(RelativeFeatures, FiveModelExample) {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4, 0.5};
  const auto r = relative_features(p);
  const std::vector<double> diff{-0.2, -0.1, 0.0, 0.1, 0.2};
  for (std::size_t j = 0; j < 5; ++j) {
    EXPECT_NEAR(r.diff_mean[j], diff[j], 1e-15);
    EXPECT_NEAR(r.norm[j], diff[j] / (std::sqrt(0.02) + 1e-8), 1e-12);
  }
  EXPECT_EQ(r.rank, (std::vector<double>{5, 4, 3, 2, 1}));
}

TEST(RelativeFeatures, TiesRankByPositionAndNormIsZero) {
  const auto r = relative_features(std::vector<double>(4, 0.6));
  EXPECT_EQ(r.rank, (std::vector<double>{1, 2, 3, 4}));
  for (double v : r.norm) EXPECT_EQ(v, 0.0);
  const auto two = relative_features(std::vector<double>{0.9, 0.1});
  EXPECT_EQ(two.rank, (std::vector<double>{1, 2}));
  EXPECT_NEAR(two.norm[0], 0.4 / (0.4 + 1e-8), 1e-12);
  EXPECT_NEAR(two.norm[1], -0.4 / (0.4 + 1e-8), 1e-12);
}

TEST(MetaFeatures, VectorLengthIsFourMPlusSix) {
  EXPECT_EQ(meta_feature_vector(std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5}).flatten().size(), 26u);
  EXPECT_EQ(meta_feature_vector(std::vector<double>{0.1, 0.2}).flatten().size(), 14u);
  EXPECT_EQ(MetaLayout{5}.size(), 26u);
}

TEST(MetaFeatures, MatchesNaiveOracleOnRandomGroups) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = 2 + static_cast<std::size_t>(t % 7);
    auto p = random_probs(rng, m);
    if (t % 10 == 0) p[1] = p[0];  // exercise ties
    const auto got = meta_feature_vector(p).flatten();
    const auto want = oracle::naive_meta_features(p, kDefaultEpsilon);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t c = 0; c < got.size(); ++c) EXPECT_NEAR(got[c], want[c], 1e-9) << "trial " << t << " col " << c;
  }
}

TEST(MetaFeatures, InvariantsHold) {
  std::mt19937_64 rng(22);
  for (int t = 0; t < 200; ++t) {
    const auto p = random_probs(rng, 5);
    const auto r = relative_features(p);
    EXPECT_NEAR(std::accumulate(r.diff_mean.begin(), r.diff_mean.end(), 0.0), 0.0, 1e-12);
    auto ranks = r.rank;
    std::sort(ranks.begin(), ranks.end());
    EXPECT_EQ(ranks, (std::vector<double>{1, 2, 3, 4, 5}));
    const auto s = group_stats(p);
    EXPECT_LE(s.min, s.median);
    EXPECT_LE(s.median, s.max);
  }
}

TEST(MetaFeatures, ColumnOrderForFiveModels) {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.4, 0.5};
  const auto f = meta_feature_vector(p).flatten();
  const MetaLayout l{5};
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(f[l.raw() + j], p[j]);
  EXPECT_NEAR(f[l.stats()], 0.3, 1e-15);
  EXPECT_NEAR(f[l.stats() + 1], std::sqrt(0.02), 1e-15);
  EXPECT_EQ(f[l.stats() + 2], 0.3);
  EXPECT_EQ(f[l.stats() + 3], 0.5);
  EXPECT_EQ(f[l.stats() + 4], 0.1);
  EXPECT_NEAR(f[l.diff_mean()], -0.2, 1e-15);
  EXPECT_EQ(f[l.rank()], 5.0);
  EXPECT_EQ(f[l.rank() + 4], 1.0);
  EXPECT_EQ(f[l.range()], 0.4);
  EXPECT_EQ(l.range(), 25u);
}

TEST(MetaFeatures, ModelPermutationPermutesPerModelColumns) {
  std::mt19937_64 rng(23);
  const auto p = random_probs(rng, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<double> q(4);
  for (std::size_t j = 0; j < 4; ++j) q[j] = p[perm[j]];
  const auto a = meta_feature_vector(p).flatten();
  const auto b = meta_feature_vector(q).flatten();
  const MetaLayout l{4};
  for (std::size_t block : {l.raw(), l.norm(), l.diff_mean(), l.rank()})
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(b[block + j], a[block + perm[j]], 1e-15);
  for (std::size_t c = l.stats(); c < l.stats() + 5; ++c) EXPECT_NEAR(a[c], b[c], 1e-15);
  EXPECT_NEAR(a[l.range()], b[l.range()], 1e-15);
}

TEST(MetaFeatures, MatrixRowsMatchVectors) {
  std::mt19937_64 rng(24);
  Matrix preds(30, 3);
  for (Index r = 0; r < 30; ++r) {
    const auto p = random_probs(rng, 3);
    for (Index j = 0; j < 3; ++j) preds(r, j) = p[static_cast<std::size_t>(j)];
  }
  const Matrix m = meta_feature_matrix(preds);
  for (Index r = 0; r < 30; ++r) {
    const std::vector<double> row{preds(r, 0), preds(r, 1), preds(r, 2)};
    const auto v = meta_feature_vector(row).flatten();
    for (Index c = 0; c < m.cols(); ++c) EXPECT_EQ(m(r, c), v[static_cast<std::size_t>(c)]);
  }
}

TEST(Oof, ConstantLearnerGivesConstantColumn) {
  const auto d = oracle::toy_dataset(40, 2, 0.25, 25);
  const auto res = oof_predictions(d, {constant_spec("c", 0.4), constant_spec("d", 0.7)}, 2, 1);
  EXPECT_TRUE((res.oof.values.col(0).array() == 0.4).all());
  EXPECT_TRUE((res.oof.values.col(1).array() == 0.7).all());
  EXPECT_EQ(res.full_models.size(), 2u);
}

TEST(Oof, FoldsAreStratifiedAndCoverEveryRow) {
  const auto d = oracle::toy_dataset(1000, 2, 0.05, 26);
  const auto f = stratified_folds(d.labels, 5, 3);
  std::vector<int> rows(5), pos(5);
  for (std::size_t i = 0; i < f.size(); ++i) {
    ASSERT_GE(f[i], 0);
    ASSERT_LT(f[i], 5);
    ++rows[static_cast<std::size_t>(f[i])];
    pos[static_cast<std::size_t>(f[i])] += static_cast<int>(d.labels[i]);
  }
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(rows[static_cast<std::size_t>(k)], 200);
    EXPECT_EQ(pos[static_cast<std::size_t>(k)], 10);
  }
  EXPECT_EQ(stratified_folds(d.labels, 5, 3), f);
}

TEST(Oof, RowLabelNeverReachesItsOwnPrediction) {
  const auto d = oracle::toy_dataset(120, 3, 0.2, 27);
  const auto c = oracle::oof_leakage(d, oracle::small_learners(), 3, 6);
  EXPECT_EQ(c.rows_flipped, 6u);
  EXPECT_EQ(c.max_change, 0.0);
}

TEST(Oof, RejectsBadFoldAssignments) {
  const auto d = oracle::toy_dataset(20, 2, 0.25, 28);
  const std::vector<LearnerSpec> specs{constant_spec("c", 0.5)};
  EXPECT_THROW(oof_predictions(d, specs, std::vector<int>(20, 0), 1), DataError);
  EXPECT_THROW(oof_predictions(d, specs, std::vector<int>(19, 0), 1), DataError);
  EXPECT_THROW(oof_predictions(d, {constant_spec("c", 0.5), constant_spec("c", 0.6)}, 2, 1), UsageError);
}

TEST(MetaDataset, EmptyAndSingleRow) {
  OofMatrix oof;
  oof.model_names = {"a", "b", "c"};
  oof.values.resize(0, 3);
  const auto e = build_meta_dataset(oof, std::vector<double>{});
  EXPECT_EQ(e.rows(), 0u);
  EXPECT_EQ(e.features.cols(), 18);

  oof.values = Matrix(1, 3);
  oof.values << 0.2, 0.4, 0.9;
  oof.ids = {"x"};
  oof.fold = {0};
  const auto one = build_meta_dataset(oof, std::vector<double>{1.0});
  ASSERT_EQ(one.rows(), 1u);
  const auto want = oracle::naive_meta_features({0.2, 0.4, 0.9}, kDefaultEpsilon);
  for (std::size_t c = 0; c < want.size(); ++c) EXPECT_NEAR(one.features(0, static_cast<Index>(c)), want[c], 1e-12);
  EXPECT_THROW(build_meta_dataset(oof, std::vector<double>{1.0, 0.0}), DataError);
}

TEST(MetaDataset, SingleModelRejected) {
  OofMatrix oof;
  oof.model_names = {"a"};
  oof.values = Matrix::Constant(2, 1, 0.5);
  oof.ids = {"1", "2"};
  oof.fold = {0, 1};
  EXPECT_THROW(build_meta_dataset(oof, std::vector<double>{0, 1}), DataError);
}

TEST(Oof, CsvRoundTripIsExact) {
  std::mt19937_64 rng(29);
  OofMatrix oof;
  oof.model_names = {"gbdt", "mlp"};
  oof.values.resize(10, 2);
  for (Index r = 0; r < 10; ++r) {
    const auto p = random_probs(rng, 2);
    oof.values(r, 0) = p[0];
    oof.values(r, 1) = p[1];
    oof.ids.push_back("id" + std::to_string(r));
    oof.fold.push_back(static_cast<int>(r % 3));
  }
  const auto path = std::filesystem::temp_directory_path() / "remedi_test_oof.csv";
  save_oof_csv(oof, path);
  const auto back = load_oof_csv(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.ids, oof.ids);
  EXPECT_EQ(back.fold, oof.fold);
  EXPECT_EQ(back.model_names, oof.model_names);
  EXPECT_EQ((back.values - oof.values).cwiseAbs().maxCoeff(), 0.0);
}
