#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace remedi;

namespace {

LabeledDataset empty_like(const LabeledDataset& d) {
  LabeledDataset e;
  e.schema = d.schema;
  e.features.resize(0, static_cast<Index>(d.cols()));
  return e;
}

/// Teacher whose base models are fitted on `d` with tiny learners.
TeacherBundle small_teacher(const LabeledDataset& d) {
  const auto specs = oracle::small_learners();
  TeacherBundle t;
  for (const auto& s : specs) t.base_models.push_back(fit_learner_with_carve(s, d, 0.2, 5));
  MetaDataset meta;
  meta.features = meta_feature_matrix(base_predictions(t.base_models, d));
  meta.labels = d.labels;
  for (const auto& s : specs) meta.model_names.push_back(s.name);
  HybridParams hp;
  hp.epochs = 3;
  hp.learning_rate = 0.01;
  t.meta = train_meta(meta, hp);
  return t;
}

GbdtParams student_params() {
  GbdtParams p;
  p.n_trees = 60;
  p.max_depth = 4;
  p.learning_rate = 0.2;
  p.min_samples_leaf = 5;
  p.early_stopping_rounds = 0;
  return p;
}

DistillDataset with_targets(const LabeledDataset& d, std::vector<double> t) { return {d, std::move(t)}; }

}  // namespace

TEST(Teacher, ConstantBaseModelsGiveConstantTeacher) {
  const auto d = oracle::toy_dataset(200, 3, 0.2, 51);
  TeacherBundle t;
  t.base_models = {make_constant_model(d.schema.names(), 0.2), make_constant_model(d.schema.names(), 0.6)};
  MetaDataset meta;
  meta.features = meta_feature_matrix(base_predictions(t.base_models, d));
  meta.labels = d.labels;
  meta.model_names = {"a", "b"};
  HybridParams hp;
  hp.epochs = 2;
  t.meta = train_meta(meta, hp);
  const Vector s = teacher_predict(t, d);
  EXPECT_LT(s.maxCoeff() - s.minCoeff(), 1e-12);
}

TEST(Teacher, PredictIsCompositionOfStages) {
  const auto d = oracle::toy_dataset(300, 3, 0.2, 52);
  const auto t = small_teacher(d);
  const auto probe = subset_rows(d, [] {
    std::vector<std::size_t> r(100);
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
  }());
  const Vector s = teacher_predict(t, probe);
  for (std::size_t i = 0; i < probe.rows(); ++i) {
    std::vector<double> p;
    for (const auto& m : t.base_models) p.push_back(predict(m, subset_rows(probe, std::vector<std::size_t>{i}))[0]);
    const double want = meta_predict(t.meta, meta_feature_vector(p, t.epsilon()));
    EXPECT_NEAR(s[static_cast<Index>(i)], want, 1e-12);
  }
  EXPECT_EQ(teacher_predict(t, empty_like(d)).size(), 0);
}

TEST(Teacher, DistillTargetsAreTeacherProbabilities) {
  const auto d = oracle::toy_dataset(200, 3, 0.2, 53);
  const auto t = small_teacher(d);
  const auto ds = build_distill_set(t, d);
  const Vector s = teacher_predict(t, d);
  ASSERT_EQ(ds.rows(), d.rows());
  for (std::size_t i = 0; i < ds.rows(); ++i) EXPECT_EQ(ds.targets[i], s[static_cast<Index>(i)]);
}

TEST(Teacher, MismatchedBundleRejected) {
  const auto d = oracle::toy_dataset(200, 3, 0.2, 54);
  auto t = small_teacher(d);
  t.base_models.pop_back();
  EXPECT_THROW(teacher_predict(t, d), DataError);
}

TEST(Teacher, SaveLoadRoundTrip) {
  const auto d = oracle::toy_dataset(200, 3, 0.2, 55);
  const auto t = small_teacher(d);
  const auto dir = std::filesystem::temp_directory_path() / "remedi_test_teacher";
  std::filesystem::remove_all(dir);
  const auto manifest = save_teacher(t, dir);
  const auto back = load_teacher(manifest);
  std::filesystem::remove_all(dir);
  EXPECT_LE((teacher_predict(t, d) - teacher_predict(back, d)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Student, ConstantTargetGivesConstantStudent) {
  const auto d = oracle::toy_dataset(300, 3, 0.2, 56);
  for (auto loss : {DistillLoss::mse, DistillLoss::kl}) {
    const auto s = distill_student(with_targets(d, std::vector<double>(d.rows(), 0.25)),
                                   with_targets(empty_like(d), {}), student_params(), loss);
    const Vector p = student_predict(s, d);
    EXPECT_NEAR(p.minCoeff(), 0.25, 1e-6) << to_string(loss);
    EXPECT_NEAR(p.maxCoeff(), 0.25, 1e-6) << to_string(loss);
  }
}

TEST(Student, OutputsClippedOnExtremeInputs) {
  const auto d = oracle::toy_dataset(300, 3, 0.2, 57);
  std::vector<double> t;
  for (std::size_t i = 0; i < d.rows(); ++i) t.push_back(d.labels[i] == 1.0 ? 1.0 : 0.0);
  const auto s = distill_student(with_targets(d, t), with_targets(empty_like(d), {}), student_params(), DistillLoss::mse);
  Matrix extreme(2, 3);
  extreme << 1e12, 1e12, 1e12, -1e12, -1e12, -1e12;
  const Vector p = student_predict_matrix(s, extreme);
  EXPECT_GE(p.minCoeff(), 0.0);
  EXPECT_LE(p.maxCoeff(), 1.0);
}

TEST(Student, SelfDistillationFitsTargets) {
  const auto d = oracle::toy_dataset(2000, 3, 0.2, 58);
  // A smooth target that a GBDT on the same features can represent.
  std::vector<double> t;
  for (std::size_t i = 0; i < d.rows(); ++i) t.push_back(sigmoid(d.features(static_cast<Index>(i), 0)));
  GbdtParams p = student_params();
  p.n_trees = 150;
  const auto s = distill_student(with_targets(d, t), with_targets(empty_like(d), {}), p, DistillLoss::mse);
  const Vector pred = student_predict(s, d);
  double mse = 0.0;
  for (std::size_t i = 0; i < d.rows(); ++i) mse += std::pow(pred[static_cast<Index>(i)] - t[i], 2);
  EXPECT_LE(mse / static_cast<double>(d.rows()), 1e-3);
}

TEST(Student, BatchMatchesPerRowAndRoundTrips) {
  const auto d = oracle::toy_dataset(300, 3, 0.2, 59);
  const auto v = oracle::toy_dataset(100, 3, 0.2, 60);
  std::vector<double> t, tv;
  for (std::size_t i = 0; i < d.rows(); ++i) t.push_back(sigmoid(d.features(static_cast<Index>(i), 1)));
  for (std::size_t i = 0; i < v.rows(); ++i) tv.push_back(sigmoid(v.features(static_cast<Index>(i), 1)));
  for (auto loss : {DistillLoss::mse, DistillLoss::kl, DistillLoss::hard_label}) {
    const auto s = distill_student(with_targets(d, t), with_targets(v, tv), student_params(), loss);
    const Vector all = student_predict(s, v);
    for (std::size_t i = 0; i < 20; ++i)
      EXPECT_EQ(all[static_cast<Index>(i)], student_predict(s, subset_rows(v, std::vector<std::size_t>{i}))[0]);
    const auto back = student_from_json(nlohmann::json::parse(student_to_json(s).dump()));
    EXPECT_LE((student_predict(back, v) - all).cwiseAbs().maxCoeff(), 1e-12) << to_string(loss);
    EXPECT_TRUE(std::isfinite(s.valid_mse_to_teacher));
  }
}

TEST(Student, EmptySetRejected) {
  const auto d = oracle::toy_dataset(10, 3, 0.2, 61);
  EXPECT_THROW(distill_student(with_targets(empty_like(d), {}), with_targets(empty_like(d), {}), student_params(),
                               DistillLoss::mse),
               DataError);
  EXPECT_THROW(parse_distill_loss("l1"), UsageError);
  EXPECT_EQ(parse_distill_loss("hard-label"), DistillLoss::hard_label);
}
