// Teacher = full-data base models + meta-model; student = one GBDT fitted to
// the teacher's probabilities.
#pragma once

#include "remedi/ensemble.hpp"
#include "remedi/meta_model.hpp"

namespace remedi {

struct TeacherBundle {
  std::vector<TrainedModel> base_models;  // in meta-feature column order
  MetaModel meta;

  const std::vector<std::string>& model_names() const { return meta.model_names; }
  double epsilon() const { return meta.epsilon; }

  void validate() const {
    require<DataError>(base_models.size() == meta.model_names.size(), "teacher has ", base_models.size(),
                       " base models but its meta-model expects ", meta.model_names.size());
    require<DataError>(base_models.size() >= 2, "teacher needs at least 2 base models");
  }
};

/// base predictions -> meta-feature vectors -> meta-model.
inline Vector teacher_predict(const TeacherBundle& t, const LabeledDataset& data) {
  t.validate();
  if (data.rows() == 0) return Vector(0);
  const Matrix preds = base_predictions(t.base_models, data);
  return meta_predict(t.meta, meta_feature_matrix(preds, t.epsilon()));
}

struct DistillDataset {
  LabeledDataset data;          // features, ids and (optionally) ground-truth labels
  std::vector<double> targets;  // teacher probabilities

  std::size_t rows() const { return targets.size(); }
};

inline DistillDataset build_distill_set(const TeacherBundle& t, const LabeledDataset& data) {
  DistillDataset d;
  d.data = data;
  d.targets = to_std(teacher_predict(t, data));
  return d;
}

inline DistillDataset subset_rows(const DistillDataset& d, std::span<const std::size_t> rows) {
  return {subset_rows(d.data, rows), take(d.targets, rows)};
}

/// Columns: id, features..., soft_target, label (empty when unlabeled).
inline void save_distill_csv(const DistillDataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << d.data.schema.id_column;
  for (const auto& c : d.data.schema.columns) out << ',' << c.name;
  out << ",soft_target," << d.data.schema.label_column << '\n';
  for (std::size_t r = 0; r < d.rows(); ++r) {
    out << d.data.ids[r];
    for (std::size_t c = 0; c < d.data.cols(); ++c) {
      out << ',';
      if (!d.data.is_missing(r, c)) out << detail::format_double(d.data.features(static_cast<Index>(r), static_cast<Index>(c)));
    }
    out << ',' << detail::format_double(d.targets[r]) << ',';
    if (d.data.has_labels()) out << (d.data.labels[r] == 1.0 ? '1' : '0');
    out << '\n';
  }
  require<DataError>(static_cast<bool>(out), "write failed for ", path.string());
}

enum class DistillLoss { mse, hard_label, kl };

inline std::string_view to_string(DistillLoss l) {
  switch (l) {
    case DistillLoss::mse: return "mse";
    case DistillLoss::hard_label: return "hard_label";
    case DistillLoss::kl: return "kl";
  }
  return "?";
}

inline DistillLoss parse_distill_loss(std::string_view s) {
  if (s == "mse") return DistillLoss::mse;
  if (s == "hard_label" || s == "hard-label") return DistillLoss::hard_label;
  if (s == "kl") return DistillLoss::kl;
  fail<UsageError>("unknown distillation loss '", s, "' (expected mse, hard_label or kl)");
}

struct StudentModel {
  std::vector<std::string> feature_names;
  DistillLoss loss = DistillLoss::mse;
  GbdtModel gbdt;
  double clip_low = 0.0;
  double clip_high = 1.0;
  double valid_mse_to_teacher = std::numeric_limits<double>::quiet_NaN();
  double valid_log_loss = std::numeric_limits<double>::quiet_NaN();  // against ground truth, when known
};

inline Vector student_predict_matrix(const StudentModel& s, const Matrix& x) {
  Vector out = s.gbdt.raw_scores(x);
  for (Index i = 0; i < out.size(); ++i) out[i] = std::clamp(s.gbdt.transform(out[i]), s.clip_low, s.clip_high);
  return out;
}

inline Vector student_predict(const StudentModel& s, const LabeledDataset& data) {
  check_schema(s.feature_names, data.schema);
  data.require_clean();
  return student_predict_matrix(s, data.features);
}

/// Fits the student. mse and kl regress the teacher targets (identity and
/// sigmoid link respectively) and early-stop on validation MSE to the teacher;
/// hard_label fits ground-truth labels and early-stops on validation log loss.
inline StudentModel distill_student(const DistillDataset& train, const DistillDataset& valid, GbdtParams params,
                                    DistillLoss loss) {
  require<DataError>(train.rows() > 0, "distillation set is empty");
  require<DataError>(train.rows() == train.data.rows() && valid.rows() == valid.data.rows(),
                     "distillation targets do not match row count");
  check_schema(train.data.schema.names(), valid.data.schema);
  train.data.require_clean();
  valid.data.require_clean();
  if (loss == DistillLoss::hard_label)
    require<DataError>(train.data.has_labels() && (valid.rows() == 0 || valid.data.has_labels()),
                       "hard_label distillation needs ground-truth labels");

  StudentModel s;
  s.feature_names = train.data.schema.names();
  s.loss = loss;
  const Link link = loss == DistillLoss::mse ? Link::identity : Link::logistic;
  auto to_prob = [link](double raw) { return std::clamp(link == Link::identity ? raw : sigmoid(raw), 0.0, 1.0); };
  auto mse_to_teacher = [&](std::span<const double> raw) {
    double acc = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const double d = to_prob(raw[i]) - valid.targets[i];
      acc += d * d;
    }
    return raw.empty() ? 0.0 : acc / static_cast<double>(raw.size());
  };

  switch (loss) {
    case DistillLoss::mse:
      params.objective = GbdtObjective::squared_error;
      s.gbdt = fit_gbdt_matrix(train.data.features, train.targets, valid.data.features, valid.targets, params,
                               std::nullopt, mse_to_teacher);
      break;
    case DistillLoss::kl:
      params.objective = GbdtObjective::soft_logloss;
      s.gbdt = fit_gbdt_matrix(train.data.features, train.targets, valid.data.features, valid.targets, params,
                               std::nullopt, mse_to_teacher);
      break;
    case DistillLoss::hard_label:
      params.objective = GbdtObjective::logloss;
      s.gbdt = fit_gbdt_matrix(train.data.features, train.data.labels, valid.data.features, valid.data.labels, params);
      break;
  }

  if (valid.rows() > 0) {
    const Vector p = student_predict_matrix(s, valid.data.features);
    const auto pv = to_std(p);
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - valid.targets[i]) * (pv[i] - valid.targets[i]);
    s.valid_mse_to_teacher = acc / static_cast<double>(pv.size());
    if (valid.data.has_labels()) s.valid_log_loss = log_loss(valid.data.labels, pv);
    Log::debug("student (", to_string(loss), "): ", s.gbdt.trees.size(), " trees, valid MSE to teacher ",
               s.valid_mse_to_teacher);
  }
  return s;
}

// --- serialization -------------------------------------------------------------------

inline nlohmann::json student_to_json(const StudentModel& s) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  return {{"format", kModelFormat},
          {"version", kModelFormatVersion},
          {"type", "student"},
          {"feature_names", s.feature_names},
          {"loss", to_string(s.loss)},
          {"clip", {s.clip_low, s.clip_high}},
          {"valid_mse_to_teacher", num(s.valid_mse_to_teacher)},
          {"valid_log_loss", num(s.valid_log_loss)},
          {"gbdt", gbdt_to_json(s.gbdt)}};
}

inline StudentModel student_from_json(const nlohmann::json& j) {
  check_container(j, "student");
  StudentModel s;
  s.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  s.loss = parse_distill_loss(j.at("loss").get<std::string>());
  const auto clip = j.at("clip").get<std::vector<double>>();
  require<DataError>(clip.size() == 2 && clip[0] <= clip[1], "student clip bounds malformed");
  s.clip_low = clip[0];
  s.clip_high = clip[1];
  if (!j.at("valid_mse_to_teacher").is_null()) s.valid_mse_to_teacher = j.at("valid_mse_to_teacher").get<double>();
  if (!j.at("valid_log_loss").is_null()) s.valid_log_loss = j.at("valid_log_loss").get<double>();
  s.gbdt = gbdt_from_json(j.at("gbdt"));
  require<DataError>(s.gbdt.n_features == s.feature_names.size(), "student GBDT expects ", s.gbdt.n_features,
                     " features, model declares ", s.feature_names.size());
  return s;
}

inline void save_student(const StudentModel& s, const std::filesystem::path& path) {
  write_json_file(student_to_json(s), path);
}

inline StudentModel load_student(const std::filesystem::path& path) {
  try {
    return student_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(path.string(), ": malformed student file: ", e.what());
  }
}

inline void save_meta_model(const MetaModel& m, const std::filesystem::path& path) {
  write_json_file(meta_model_to_json(m), path);
}

inline MetaModel load_meta_model(const std::filesystem::path& path) {
  try {
    return meta_model_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(path.string(), ": malformed meta-model file: ", e.what());
  }
}

/// Writes one file per base model, the meta-model, and a manifest
/// `teacher.json` referencing them (paths relative to `dir`). Returns the
/// manifest path.
inline std::filesystem::path save_teacher(const TeacherBundle& t, const std::filesystem::path& dir) {
  t.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t j = 0; j < t.base_models.size(); ++j) {
    const std::string file = "base_" + t.model_names()[j] + ".json";
    save_model(t.base_models[j], dir / file);
    members.push_back({{"name", t.model_names()[j]}, {"file", file}});
  }
  save_meta_model(t.meta, dir / "meta_model.json");
  const auto manifest = dir / "teacher.json";
  write_json_file({{"format", kModelFormat},
                   {"version", kModelFormatVersion},
                   {"type", "teacher"},
                   {"epsilon", t.epsilon()},
                   {"members", members},
                   {"meta_model", "meta_model.json"}},
                  manifest);
  return manifest;
}

inline TeacherBundle teacher_from_manifest(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  check_container(j, "teacher");
  TeacherBundle t;
  t.meta = load_meta_model(base_dir / j.at("meta_model").get<std::string>());
  std::vector<std::string> names;
  for (const auto& m : j.at("members")) {
    names.push_back(m.at("name").get<std::string>());
    t.base_models.push_back(load_model(base_dir / m.at("file").get<std::string>()));
  }
  require<DataError>(names == t.meta.model_names, "teacher manifest member order does not match the meta-model");
  t.validate();
  return t;
}

inline TeacherBundle load_teacher(const std::filesystem::path& manifest) {
  try {
    return teacher_from_manifest(read_json_file(manifest), manifest.parent_path());
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(manifest.string(), ": malformed teacher manifest: ", e.what());
  }
}

}  // namespace remedi
