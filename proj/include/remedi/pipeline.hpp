// End-to-end run: base learners + OOF, meta-model, distillation, evaluation,
// plus the ablation suites.
//
// Seeds: the master `seed` is added to every component seed in the config
// (learners, meta-model, fusion baselines, student). Splits, folds and
// early-stopping carves are derived from the master seed directly.
#pragma once

#include "remedi/distillation.hpp"
#include "remedi/ensemble.hpp"
#include "remedi/evaluation.hpp"
#include "remedi/meta_model.hpp"

#include <chrono>
#include <iomanip>

namespace remedi {

// --- configuration -----------------------------------------------------------------

struct DataSource {
  std::optional<SynthConfig> synthetic = SynthConfig{};
  std::string train_csv;    // used when `synthetic` is unset
  std::string holdout_csv;  // optional; otherwise the training file is split
  double train_fraction = 0.8;
};

struct StudentSettings {
  DistillLoss loss = DistillLoss::mse;
  GbdtParams gbdt = [] {
    GbdtParams p;
    p.n_trees = 120;
    p.max_depth = 6;
    p.learning_rate = 0.15;
    p.min_samples_leaf = 20;
    p.early_stopping_rounds = 20;
    return p;
  }();
  double valid_fraction = 0.15;
  int deeper_extra_depth = 2;  // "mse-deeper" ablation row
  bool export_distill_set = false;
};

struct EvalSettings {
  std::optional<std::size_t> k;  // unset: round(k_fraction * holdout rows)
  double k_fraction = 0.075;
  std::size_t pr_points = 200;
};

inline std::vector<LearnerSpec> default_learners() {
  std::vector<LearnerSpec> specs(5);
  specs[0].name = "gbdt";
  specs[0].kind = LearnerKind::gbdt;
  specs[1].name = "mlp";
  specs[1].kind = LearnerKind::mlp;
  specs[2].name = "fm";
  specs[2].kind = LearnerKind::fm;
  specs[3].name = "gbdt_focal";
  specs[3].kind = LearnerKind::gbdt_focal;
  specs[4].name = "gbdt_subset";
  specs[4].kind = LearnerKind::subset;
  specs[4].mask_prefixes = {"num_"};
  return specs;
}

struct PipelineConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "remedi_out";
  DataSource data;
  PreprocessSpec preprocess;
  std::vector<LearnerSpec> learners = default_learners();
  int k_folds = 5;
  double valid_fraction = 0.15;  // early-stopping carve for base learners
  HybridParams meta;
  FusionParams fusion;  // baselines used by the ablation suites
  StudentSettings student;
  EvalSettings evaluation;

  void validate() const {
    require(learners.size() >= 2, "at least 2 base learners are required, got ", learners.size());
    std::set<std::string> names;
    for (const auto& l : learners) {
      require(!l.name.empty(), "learner names must not be empty");
      require(names.insert(l.name).second, "duplicate learner name '", l.name, "'");
    }
    require(k_folds >= 2, "k_folds must be >= 2");
    require(valid_fraction > 0.0 && valid_fraction < 1.0, "valid_fraction must lie in (0, 1)");
    require(student.valid_fraction > 0.0 && student.valid_fraction < 1.0, "student.valid_fraction must lie in (0, 1)");
    require(data.train_fraction > 0.0 && data.train_fraction < 1.0, "data.train_fraction must lie in (0, 1)");
    require(data.synthetic.has_value() || !data.train_csv.empty(), "config needs data.synthetic or data.train_csv");
    require(!evaluation.k || *evaluation.k >= 1, "evaluation.k must be >= 1");
    require(evaluation.k_fraction > 0.0 && evaluation.k_fraction <= 1.0, "evaluation.k_fraction must lie in (0, 1]");
    require(student.deeper_extra_depth >= 0, "student.deeper_extra_depth must be nonnegative");
    preprocess.validate();
    meta.validate();
    student.gbdt.validate();
    if (data.synthetic) data.synthetic->validate();
  }

  /// Same config with master seed `s`; a synthetic source is regenerated with
  /// seed `s` as well.
  PipelineConfig with_seed(std::uint64_t s) const {
    PipelineConfig c = *this;
    c.seed = s;
    if (c.data.synthetic) c.data.synthetic->seed = s;
    return c;
  }

  std::vector<LearnerSpec> resolved_learners() const {
    std::vector<LearnerSpec> out;
    for (const auto& l : learners) out.push_back(l.reseeded(seed));
    return out;
  }
  HybridParams resolved_meta() const {
    HybridParams p = meta;
    p.seed += seed;
    return p;
  }
  FusionParams resolved_fusion() const {
    FusionParams p = fusion;
    p.seed += seed;
    p.hybrid = resolved_meta();
    return p;
  }
  GbdtParams resolved_student() const {
    GbdtParams p = student.gbdt;
    p.seed += seed;
    return p;
  }
  std::uint64_t split_seed() const { return seed; }
  std::uint64_t fold_seed() const { return seed + 1; }
  std::uint64_t carve_seed() const { return seed + 2; }
  std::uint64_t distill_seed() const { return seed + 3; }
};

inline void to_json(nlohmann::json& j, const FusionParams& p) {
  j = {{"stacking_gbdt", p.stacking_gbdt},
       {"logreg", {{"learning_rate", p.logreg.learning_rate},
                   {"epochs", p.logreg.epochs},
                   {"batch_size", p.logreg.batch_size},
                   {"l2", p.logreg.l2},
                   {"early_stopping_rounds", p.logreg.early_stopping_rounds}}},
       {"weight_iterations", p.weight_iterations},
       {"weight_restarts", p.weight_restarts},
       {"weight_max_rows", p.weight_max_rows},
       {"valid_fraction", p.valid_fraction},
       {"seed", p.seed}};
}

inline void from_json(const nlohmann::json& j, FusionParams& p) {
  if (j.contains("stacking_gbdt")) p.stacking_gbdt = j.at("stacking_gbdt").get<GbdtParams>();
  if (j.contains("logreg")) {
    const auto& l = j.at("logreg");
    p.logreg.learning_rate = l.value("learning_rate", p.logreg.learning_rate);
    p.logreg.epochs = l.value("epochs", p.logreg.epochs);
    p.logreg.batch_size = l.value("batch_size", p.logreg.batch_size);
    p.logreg.l2 = l.value("l2", p.logreg.l2);
    p.logreg.early_stopping_rounds = l.value("early_stopping_rounds", p.logreg.early_stopping_rounds);
    p.logreg.validate();
  }
  p.weight_iterations = j.value("weight_iterations", p.weight_iterations);
  p.weight_restarts = j.value("weight_restarts", p.weight_restarts);
  p.weight_max_rows = j.value("weight_max_rows", p.weight_max_rows);
  p.valid_fraction = j.value("valid_fraction", p.valid_fraction);
  p.seed = j.value("seed", p.seed);
  require(p.weight_iterations >= 0 && p.weight_restarts >= 1, "fusion weight search settings out of range");
  require(p.valid_fraction > 0.0 && p.valid_fraction < 1.0, "fusion.valid_fraction must lie in (0, 1)");
}

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  nlohmann::json data{{"train_fraction", c.data.train_fraction}};
  if (c.data.synthetic) data["synthetic"] = *c.data.synthetic;
  if (!c.data.train_csv.empty()) data["train_csv"] = c.data.train_csv;
  if (!c.data.holdout_csv.empty()) data["holdout_csv"] = c.data.holdout_csv;
  j = {{"seed", c.seed},
       {"output_dir", c.output_dir},
       {"data", data},
       {"preprocess", c.preprocess},
       {"learners", c.learners},
       {"k_folds", c.k_folds},
       {"valid_fraction", c.valid_fraction},
       {"meta", c.meta},
       {"fusion", c.fusion},
       {"student", {{"loss", to_string(c.student.loss)},
                    {"gbdt", c.student.gbdt},
                    {"valid_fraction", c.student.valid_fraction},
                    {"deeper_extra_depth", c.student.deeper_extra_depth},
                    {"export_distill_set", c.student.export_distill_set}}},
       {"evaluation", {{"k", c.evaluation.k ? nlohmann::json(*c.evaluation.k) : nlohmann::json()},
                       {"k_fraction", c.evaluation.k_fraction},
                       {"pr_points", c.evaluation.pr_points}}}};
}

inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  static const std::set<std::string> known{"seed",   "output_dir", "data",    "preprocess", "learners", "k_folds",
                                           "valid_fraction", "meta", "fusion", "student", "evaluation"};
  for (const auto& [key, _] : j.items()) require(known.count(key) > 0, "unknown config key '", key, "'");
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.train_csv = d.value("train_csv", std::string());
    c.data.holdout_csv = d.value("holdout_csv", std::string());
    c.data.train_fraction = d.value("train_fraction", c.data.train_fraction);
    if (d.contains("synthetic") && !d.at("synthetic").is_null()) c.data.synthetic = d.at("synthetic").get<SynthConfig>();
    else if (!c.data.train_csv.empty()) c.data.synthetic.reset();
  }
  if (j.contains("preprocess")) c.preprocess = j.at("preprocess").get<PreprocessSpec>();
  if (j.contains("learners")) c.learners = j.at("learners").get<std::vector<LearnerSpec>>();
  c.k_folds = j.value("k_folds", c.k_folds);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  if (j.contains("meta")) c.meta = j.at("meta").get<HybridParams>();
  if (j.contains("fusion")) c.fusion = j.at("fusion").get<FusionParams>();
  if (j.contains("student")) {
    const auto& s = j.at("student");
    if (s.contains("loss")) c.student.loss = parse_distill_loss(s.at("loss").get<std::string>());
    if (s.contains("gbdt")) c.student.gbdt = s.at("gbdt").get<GbdtParams>();
    c.student.valid_fraction = s.value("valid_fraction", c.student.valid_fraction);
    c.student.deeper_extra_depth = s.value("deeper_extra_depth", c.student.deeper_extra_depth);
    c.student.export_distill_set = s.value("export_distill_set", c.student.export_distill_set);
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    if (e.contains("k") && !e.at("k").is_null()) c.evaluation.k = e.at("k").get<std::size_t>();
    c.evaluation.k_fraction = e.value("k_fraction", c.evaluation.k_fraction);
    c.evaluation.pr_points = e.value("pr_points", c.evaluation.pr_points);
  }
  c.validate();
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  try {
    return read_json_file(path).get<PipelineConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail<UsageError>(path.string(), ": invalid config: ", e.what());
  }
}

// --- data ------------------------------------------------------------------------------

struct PreparedData {
  LabeledDataset train;    // preprocessed
  LabeledDataset holdout;  // preprocessed with the training-split preprocessor
  FittedPreprocessor preprocessor;
};

/// Raw (unprocessed) train / holdout splits for a config.
inline std::pair<LabeledDataset, LabeledDataset> load_raw_splits(const PipelineConfig& c) {
  if (c.data.synthetic) return split(generate_synthetic(*c.data.synthetic).data, c.data.train_fraction, c.split_seed());
  auto train = load_csv_auto(c.data.train_csv);
  require<DataError>(train.has_labels(), c.data.train_csv, ": training data needs a '", train.schema.label_column,
                     "' column");
  if (c.data.holdout_csv.empty()) return split(train, c.data.train_fraction, c.split_seed());
  auto holdout = load_csv(c.data.holdout_csv, train.schema);
  require<DataError>(holdout.has_labels(), c.data.holdout_csv, ": holdout data needs labels for evaluation");
  return {std::move(train), std::move(holdout)};
}

inline PreparedData prepare_data(const PipelineConfig& c) {
  auto [train_raw, holdout_raw] = load_raw_splits(c);
  auto [train, pre] = fit_apply_preprocess(train_raw, c.preprocess);
  return {std::move(train), apply_preprocess(pre, holdout_raw), std::move(pre)};
}

inline std::size_t resolve_k(const PipelineConfig& c, std::size_t n) {
  const std::size_t k = c.evaluation.k.value_or(
      static_cast<std::size_t>(std::max<long long>(1, std::llround(c.evaluation.k_fraction * static_cast<double>(n)))));
  require(k <= n, "K = ", k, " exceeds the ", n, " evaluation rows");
  return k;
}

/// Stage 1 on prepared data: OOF predictions over the training split plus
/// full-data refits.
inline OofResult run_base_stage(const PipelineConfig& c, const LabeledDataset& train) {
  const auto folds = stratified_folds(train.labels, c.k_folds, c.fold_seed());
  OofOptions opt;
  opt.valid_fraction = c.valid_fraction;
  return oof_predictions(train, c.resolved_learners(), folds, c.carve_seed(), opt);
}

/// Distillation targets over the training split and the stratified carve used
/// for student early stopping.
inline std::pair<DistillDataset, DistillDataset> distill_splits(const PipelineConfig& c, const TeacherBundle& teacher,
                                                                const LabeledDataset& train) {
  const auto full = build_distill_set(teacher, train);
  const auto carve = stratified_carve(train.labels, c.student.valid_fraction, c.distill_seed());
  return {subset_rows(full, carve.first), subset_rows(full, carve.second)};
}

// --- timing -----------------------------------------------------------------------------

/// Milliseconds per 1,000 rows of `fn` over `rows` rows: best of `reps` runs.
template <typename Fn>
double ms_per_1k_rows(Fn&& fn, std::size_t rows, int reps = 3) {
  double best = std::numeric_limits<double>::infinity();
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return rows == 0 ? 0.0 : best * 1000.0 / static_cast<double>(rows);
}

// --- run manifest ---------------------------------------------------------------------------

struct StageRecord {
  std::string status;  // "done" or "failed"
  std::map<std::string, std::string> artifacts;  // key -> path relative to output_dir
  nlohmann::json metrics = nlohmann::json::object();
  double seconds = 0.0;
  std::string error;
};

struct RunManifest {
  nlohmann::json config;
  std::string library_version{kLibraryVersion};
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, StageRecord>> stages;  // execution order

  StageRecord* find(const std::string& name) {
    for (auto& [n, r] : stages)
      if (n == name) return &r;
    return nullptr;
  }
  const StageRecord* find(const std::string& name) const { return const_cast<RunManifest*>(this)->find(name); }
  StageRecord& upsert(const std::string& name) {
    if (auto* r = find(name)) return *r;
    stages.emplace_back(name, StageRecord{});
    return stages.back().second;
  }
};

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& [name, r] : m.stages)
    stages.push_back({{"name", name},
                      {"status", r.status},
                      {"artifacts", r.artifacts},
                      {"metrics", r.metrics},
                      {"seconds", r.seconds},
                      {"error", r.error}});
  return {{"format", "remedi-run"},
          {"version", 1},
          {"library_version", m.library_version},
          {"seed", m.seed},
          {"config", m.config},
          {"stages", stages}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  require<DataError>(j.value("format", std::string()) == "remedi-run", "not a remedi run manifest");
  RunManifest m;
  m.library_version = j.at("library_version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config");
  for (const auto& s : j.at("stages")) {
    StageRecord r;
    r.status = s.at("status").get<std::string>();
    r.artifacts = s.at("artifacts").get<std::map<std::string, std::string>>();
    r.metrics = s.at("metrics");
    r.seconds = s.at("seconds").get<double>();
    r.error = s.value("error", std::string());
    m.stages.emplace_back(s.at("name").get<std::string>(), std::move(r));
  }
  return m;
}

/// Failure inside one pipeline stage; keeps the exit code of the cause.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error("stage '" + stage + "' failed: " + cause.what()), code_(cause.exit_code()) {}
  int exit_code() const noexcept override { return code_; }

 private:
  int code_;
};

struct RunOptions {
  bool resume = false;  // reuse completed stages recorded in an existing manifest with the same config
};

inline constexpr std::array<const char*, 4> kStageNames{"base_models", "meta_model", "distillation", "evaluation"};

namespace detail {

inline bool stage_reusable(const RunManifest* previous, const std::string& name, const std::filesystem::path& dir) {
  if (!previous) return false;
  const auto* r = previous->find(name);
  if (!r || r->status != "done") return false;
  for (const auto& [_, rel] : r->artifacts)
    if (!std::filesystem::exists(dir / rel)) return false;
  return true;
}

}  // namespace detail

/// Runs all four stages, writing artifacts and `manifest.json` under
/// `config.output_dir`. The manifest is rewritten after every stage, including
/// a failed one.
inline RunManifest run_pipeline(const PipelineConfig& config, const RunOptions& options = {}) {
  config.validate();
  const std::filesystem::path dir = config.output_dir;
  std::filesystem::create_directories(dir);
  const auto manifest_path = dir / "manifest.json";

  RunManifest manifest;
  manifest.config = config;
  manifest.seed = config.seed;

  std::optional<RunManifest> previous;
  if (options.resume && std::filesystem::exists(manifest_path)) {
    auto prev = manifest_from_json(read_json_file(manifest_path));
    if (prev.config == manifest.config) previous = std::move(prev);
    else Log::warn("existing manifest was produced by a different config; rerunning every stage");
  }
  bool reuse = previous.has_value();

  auto save_manifest = [&] { write_json_file(manifest_to_json(manifest), manifest_path); };
  auto run_stage = [&](const std::string& name, auto&& body) {
    StageRecord& rec = manifest.upsert(name);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      body(rec);
      rec.status = "done";
    } catch (const Error& e) {
      rec.status = "failed";
      rec.error = e.what();
      save_manifest();
      throw StageError(name, e);
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      save_manifest();
      throw StageError(name, Error(e.what()));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_manifest();
  };

  PreparedData data;
  run_stage("data", [&](StageRecord& rec) {
    data = prepare_data(config);
    write_json_file(preprocessor_to_json(data.preprocessor), dir / "preprocessor.json");
    rec.artifacts["preprocessor"] = "preprocessor.json";
    rec.metrics = {{"train_rows", data.train.rows()},
                   {"train_positives", data.train.positives()},
                   {"holdout_rows", data.holdout.rows()},
                   {"holdout_positives", data.holdout.positives()},
                   {"features", data.train.cols()}};
    Log::info("data: ", data.train.rows(), " training rows (", data.train.positives(), " positives), ",
              data.holdout.rows(), " holdout rows");
  });

  // Stage 1
  OofMatrix oof;
  std::vector<TrainedModel> base_models;
  const std::filesystem::path teacher_dir = dir / "teacher";
  reuse = reuse && detail::stage_reusable(&*previous, "base_models", dir);
  run_stage("base_models", [&](StageRecord& rec) {
    const auto names = [&] {
      std::vector<std::string> n;
      for (const auto& l : config.learners) n.push_back(l.name);
      return n;
    }();
    if (reuse) {
      rec = *previous->find("base_models");
      oof = load_oof_csv(dir / rec.artifacts.at("oof"));
      for (const auto& n : names) base_models.push_back(load_model(dir / rec.artifacts.at("base_" + n)));
      require<DataError>(oof.model_names == names && oof.rows() == data.train.rows(), "stored OOF matrix does not "
                                                                                        "match the configuration");
      Log::info("base models: reused stored artifacts");
      return;
    }
    auto result = run_base_stage(config, data.train);
    oof = std::move(result.oof);
    base_models = std::move(result.full_models);
    std::filesystem::create_directories(teacher_dir);
    save_oof_csv(oof, dir / "oof.csv");
    rec.artifacts["oof"] = "oof.csv";
    nlohmann::json oof_auc;
    for (std::size_t j = 0; j < base_models.size(); ++j) {
      const std::string file = "teacher/base_" + names[j] + ".json";
      save_model(base_models[j], dir / file);
      rec.artifacts["base_" + names[j]] = file;
      const Vector col = oof.values.col(static_cast<Index>(j));
      oof_auc[names[j]] = auc(data.train.labels, to_std(col));
    }
    rec.metrics = {{"oof_auc", oof_auc}, {"k_folds", config.k_folds}};
    Log::info("base models: ", base_models.size(), " learners fitted with ", config.k_folds, "-fold OOF");
  });

  // Stage 2
  TeacherBundle teacher;
  reuse = reuse && detail::stage_reusable(&*previous, "meta_model", dir);
  run_stage("meta_model", [&](StageRecord& rec) {
    teacher.base_models = base_models;
    if (reuse) {
      rec = *previous->find("meta_model");
      teacher.meta = load_meta_model(dir / rec.artifacts.at("meta_model"));
      Log::info("meta-model: reused stored artifact");
      return;
    }
    const auto meta_data = build_meta_dataset(oof, data.train.labels);
    teacher.meta = train_meta(meta_data, config.resolved_meta());
    const auto manifest_file = save_teacher(teacher, teacher_dir);
    rec.artifacts["meta_model"] = "teacher/meta_model.json";
    rec.artifacts["teacher"] = std::filesystem::relative(manifest_file, dir).string();
    rec.metrics = {{"meta_features", meta_data.features.cols()},
                   {"best_epoch", teacher.meta.report.best_epoch},
                   {"best_valid_loss", teacher.meta.report.best_valid_loss}};
    Log::info("meta-model: ", meta_data.features.cols(), " meta features, best epoch ", teacher.meta.report.best_epoch);
  });

  // Stage 3
  StudentModel student;
  reuse = reuse && detail::stage_reusable(&*previous, "distillation", dir);
  run_stage("distillation", [&](StageRecord& rec) {
    if (reuse) {
      rec = *previous->find("distillation");
      student = load_student(dir / rec.artifacts.at("student"));
      Log::info("distillation: reused stored student");
      return;
    }
    const auto [dtrain, dvalid] = distill_splits(config, teacher, data.train);
    if (config.student.export_distill_set) {
      DistillDataset all;
      all.data = data.train;
      all.targets = to_std(teacher_predict(teacher, data.train));
      save_distill_csv(all, dir / "distill_set.csv");
      rec.artifacts["distill_set"] = "distill_set.csv";
    }
    student = distill_student(dtrain, dvalid, config.resolved_student(), config.student.loss);
    save_student(student, dir / "student.json");
    rec.artifacts["student"] = "student.json";
    rec.metrics = {{"loss", to_string(student.loss)},
                   {"trees", student.gbdt.trees.size()},
                   {"valid_mse_to_teacher", student.valid_mse_to_teacher},
                   {"valid_log_loss", std::isfinite(student.valid_log_loss) ? nlohmann::json(student.valid_log_loss)
                                                                            : nlohmann::json()}};
    Log::info("distillation: student with ", student.gbdt.trees.size(), " trees, valid MSE to teacher ",
              student.valid_mse_to_teacher);
  });

  // Stage 4
  run_stage("evaluation", [&](StageRecord& rec) {
    const std::size_t k = resolve_k(config, data.holdout.rows());
    const auto& ids = data.holdout.ids;
    rec.metrics = nlohmann::json::object();
    auto report_for = [&](const std::string& who, const Vector& scores_v, double ms) {
      const auto scores = to_std(scores_v);
      const auto report = evaluate(data.holdout.labels, scores, k, ids, config.evaluation.pr_points);
      write_scores_csv(ids, scores, dir / ("holdout_scores_" + who + ".csv"));
      write_lead_list_csv(rank_top_k(ids, scores, k), dir / ("lead_list_" + who + ".csv"));
      write_pr_curve_csv(report, dir / ("pr_curve_" + who + ".csv"));
      auto j = report_to_json(report);
      j["ms_per_1k_rows"] = ms;
      write_json_file(j, dir / ("report_" + who + ".json"));
      for (const auto* kind : {"holdout_scores_", "lead_list_", "pr_curve_"})
        rec.artifacts[std::string(kind) + who] = std::string(kind) + who + ".csv";
      rec.artifacts["report_" + who] = "report_" + who + ".json";
      rec.metrics[who] = {{"precision_at_k", report.precision_at_k},
                          {"business_recall_at_k", report.business_recall_at_k},
                          {"auc", report.auc},
                          {"log_loss", report.log_loss},
                          {"lift_at_k", report.lift_at_k},
                          {"k", report.k},
                          {"ms_per_1k_rows", ms}};
      Log::info(who, ": precision@", report.k, " = ", report.precision_at_k, ", AUC = ", report.auc);
    };
    Vector teacher_scores, student_scores;
    const double t_ms = ms_per_1k_rows([&] { teacher_scores = teacher_predict(teacher, data.holdout); },
                                       data.holdout.rows(), 1);
    const double s_ms = ms_per_1k_rows([&] { student_scores = student_predict(student, data.holdout); },
                                       data.holdout.rows(), 1);
    report_for("teacher", teacher_scores, t_ms);
    report_for("student", student_scores, s_ms);
  });
  return manifest;
}

// --- comparison tables ------------------------------------------------------------------

struct AblationRow {
  std::string name;
  double precision_at_k = std::numeric_limits<double>::quiet_NaN();
  double business_recall_at_k = std::numeric_limits<double>::quiet_NaN();
  double auc = std::numeric_limits<double>::quiet_NaN();
  double ms_per_1k_rows = std::numeric_limits<double>::quiet_NaN();
  std::size_t models = 0;  // models evaluated per scored row
  std::string note;
};

struct ComparisonTable {
  std::string suite;
  std::size_t k = 0;
  std::vector<AblationRow> rows;

  const AblationRow& row(std::string_view name) const {
    for (const auto& r : rows)
      if (r.name == name) return r;
    fail<UsageError>("table '", suite, "' has no row '", name, "'");
  }
};

inline void write_table_csv(const ComparisonTable& t, std::ostream& out) {
  out << "suite,row,precision_at_k,business_recall_at_k,auc,ms_per_1k_rows,models,note\n";
  auto num = [](double v) { return std::isfinite(v) ? detail::format_double(v) : std::string(); };
  for (const auto& r : t.rows)
    out << t.suite << ',' << r.name << ',' << num(r.precision_at_k) << ',' << num(r.business_recall_at_k) << ','
        << num(r.auc) << ',' << num(r.ms_per_1k_rows) << ',' << r.models << ',' << r.note << '\n';
}

inline void write_table_text(const ComparisonTable& t, std::ostream& out) {
  const std::vector<std::string> head{"row", "precision@K", "bus.recall@K", "AUC", "ms/1k rows", "models"};
  std::vector<std::vector<std::string>> cells;
  auto fmt = [](double v, int prec) {
    if (!std::isfinite(v)) return std::string("-");
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << v;
    return os.str();
  };
  for (const auto& r : t.rows)
    cells.push_back({r.name, fmt(r.precision_at_k, 4), fmt(r.business_recall_at_k, 4), fmt(r.auc, 4),
                     fmt(r.ms_per_1k_rows, 3), std::to_string(r.models)});
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  out << t.suite << " (K = " << t.k << ")\n";
  auto line = [&](const std::vector<std::string>& v) {
    for (std::size_t c = 0; c < v.size(); ++c) {
      if (c == 0) out << std::left << std::setw(static_cast<int>(width[c])) << v[c];
      else out << "  " << std::right << std::setw(static_cast<int>(width[c])) << v[c];
    }
    out << '\n';
  };
  line(head);
  std::size_t total = 0;
  for (auto w : width) total += w + 2;
  out << std::string(total - 2, '-') << '\n';
  for (const auto& row : cells) line(row);
  for (const auto& r : t.rows)
    if (!r.note.empty()) out << "  " << r.name << ": " << r.note << '\n';
}

// --- ablation -------------------------------------------------------------------------------

/// Everything the suites share for one seed: data, OOF matrix, full-data base
/// models and their holdout predictions.
struct AblationContext {
  PipelineConfig config;
  PreparedData data;
  OofResult base;
  Matrix holdout_preds;          // N_holdout x M
  std::vector<double> base_ms;  // per base model, ms per 1k holdout rows
  std::size_t k = 0;
  std::optional<FusionModel> hybrid;  // cached full hybrid fusion
};

inline AblationContext prepare_ablation(const PipelineConfig& config) {
  config.validate();
  AblationContext ctx;
  ctx.config = config;
  ctx.data = prepare_data(config);
  ctx.k = resolve_k(config, ctx.data.holdout.rows());
  ctx.base = run_base_stage(config, ctx.data.train);
  const auto m = ctx.base.full_models.size();
  ctx.holdout_preds.resize(static_cast<Index>(ctx.data.holdout.rows()), static_cast<Index>(m));
  for (std::size_t j = 0; j < m; ++j) {
    Vector p;
    ctx.base_ms.push_back(ms_per_1k_rows([&] { p = predict(ctx.base.full_models[j], ctx.data.holdout); },
                                         ctx.data.holdout.rows()));
    ctx.holdout_preds.col(static_cast<Index>(j)) = p;
  }
  return ctx;
}

namespace detail {

inline AblationRow score_row(const AblationContext& ctx, std::string name, const Vector& scores, double ms,
                             std::size_t models) {
  const auto s = to_std(scores);
  const auto& y = ctx.data.holdout.labels;
  const auto& ids = ctx.data.holdout.ids;
  AblationRow r;
  r.name = std::move(name);
  r.precision_at_k = precision_at_k(y, s, ctx.k, ids);
  r.business_recall_at_k = business_recall_at_k(y, s, ctx.k, ids);
  r.auc = auc(y, s);
  r.ms_per_1k_rows = ms;
  r.models = models;
  return r;
}

inline double sum_of(const std::vector<double>& v, std::span<const std::size_t> idx) {
  double s = 0.0;
  for (auto i : idx) s += v[i];
  return s;
}

inline AblationRow fusion_row(const AblationContext& ctx, const std::string& name, const FusionModel& f,
                              std::span<const std::size_t> cols, const Matrix& holdout_preds) {
  Vector scores;
  const double ms = ms_per_1k_rows([&] { scores = fusion_predict(f, holdout_preds); }, ctx.data.holdout.rows());
  const std::size_t models = cols.size() + (f.kind == FusionKind::simple_average ? 0 : 1);
  return score_row(ctx, name, scores, sum_of(ctx.base_ms, cols) + ms, models);
}

}  // namespace detail

inline const FusionModel& ablation_hybrid(AblationContext& ctx) {
  if (!ctx.hybrid)
    ctx.hybrid = fit_fusion(FusionKind::hybrid, ctx.base.oof.values, ctx.data.train.labels, ctx.base.oof.model_names,
                            ctx.config.resolved_fusion());
  return *ctx.hybrid;
}

/// simple_average, weighted_average, stacking_gbdt, hybrid_no_split, hybrid on
/// one shared OOF matrix. Inference time includes the base models.
inline ComparisonTable fusion_suite(AblationContext& ctx) {
  ComparisonTable t{"fusion", ctx.k, {}};
  const auto fp = ctx.config.resolved_fusion();
  std::vector<std::size_t> all(ctx.base.full_models.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (auto kind : {FusionKind::simple_average, FusionKind::weighted_average, FusionKind::stacking_gbdt,
                    FusionKind::hybrid_no_split, FusionKind::hybrid}) {
    Log::info("fusion suite: ", to_string(kind));
    const FusionModel f = kind == FusionKind::hybrid
                              ? ablation_hybrid(ctx)
                              : fit_fusion(kind, ctx.base.oof.values, ctx.data.train.labels, ctx.base.oof.model_names, fp);
    t.rows.push_back(detail::fusion_row(ctx, std::string(to_string(kind)), f, all, ctx.holdout_preds));
  }
  return t;
}

/// Hybrid meta-model retrained on subsets of the base learners, selected by
/// learner kind.
inline ComparisonTable diversity_suite(AblationContext& ctx) {
  ComparisonTable t{"diversity", ctx.k, {}};
  const auto& specs = ctx.config.learners;
  auto select = [&](auto&& keep) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < specs.size(); ++j)
      if (keep(specs[j].kind)) idx.push_back(j);
    return idx;
  };
  auto is_tree = [](LearnerKind k) {
    return k == LearnerKind::gbdt || k == LearnerKind::gbdt_focal || k == LearnerKind::subset;
  };
  const std::vector<std::pair<std::string, std::vector<std::size_t>>> groups{
      {"trees-only", select(is_tree)},
      {"neural-only", select([](LearnerKind k) { return k == LearnerKind::mlp || k == LearnerKind::fm; })},
      {"no-focal", select([](LearnerKind k) { return k != LearnerKind::gbdt_focal; })},
      {"no-subset", select([](LearnerKind k) { return k != LearnerKind::subset; })},
      {"all", select([](LearnerKind) { return true; })}};
  for (const auto& [name, idx] : groups) {
    Log::info("diversity suite: ", name);
    if (idx.size() < 2) {
      AblationRow r;
      r.name = name;
      r.models = idx.size();
      r.note = "skipped: fewer than 2 base models of this kind";
      t.rows.push_back(r);
      continue;
    }
    if (idx.size() == specs.size()) {
      t.rows.push_back(detail::fusion_row(ctx, name, ablation_hybrid(ctx), idx, ctx.holdout_preds));
      continue;
    }
    const OofMatrix sub = ctx.base.oof.select(idx);
    Matrix hp(ctx.holdout_preds.rows(), static_cast<Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) hp.col(static_cast<Index>(c)) = ctx.holdout_preds.col(static_cast<Index>(idx[c]));
    const auto f = fit_fusion(FusionKind::hybrid, sub.values, ctx.data.train.labels, sub.model_names,
                              ctx.config.resolved_fusion());
    t.rows.push_back(detail::fusion_row(ctx, name, f, idx, hp));
  }
  return t;
}

/// Teacher (base models + hybrid) against students distilled with each loss.
inline ComparisonTable distill_loss_suite(AblationContext& ctx) {
  ComparisonTable t{"distill_loss", ctx.k, {}};
  TeacherBundle teacher{ctx.base.full_models, *ablation_hybrid(ctx).meta};
  Vector teacher_scores;
  const double t_ms =
      ms_per_1k_rows([&] { teacher_scores = teacher_predict(teacher, ctx.data.holdout); }, ctx.data.holdout.rows());
  t.rows.push_back(detail::score_row(ctx, "teacher-only", teacher_scores, t_ms, teacher.base_models.size() + 1));
  t.rows.back().note = "full ensemble, no size reduction";

  const auto [dtrain, dvalid] = distill_splits(ctx.config, teacher, ctx.data.train);
  const GbdtParams base = ctx.config.resolved_student();
  GbdtParams deeper = base;
  deeper.max_depth += ctx.config.student.deeper_extra_depth;
  const std::vector<std::tuple<std::string, DistillLoss, GbdtParams>> arms{{"hard_label", DistillLoss::hard_label, base},
                                                                           {"kl", DistillLoss::kl, base},
                                                                           {"mse", DistillLoss::mse, base},
                                                                           {"mse-deeper", DistillLoss::mse, deeper}};
  const double teacher_p = t.rows.front().precision_at_k;
  for (const auto& [name, loss, params] : arms) {
    Log::info("distill suite: ", name);
    const auto student = distill_student(dtrain, dvalid, params, loss);
    Vector scores;
    const double ms =
        ms_per_1k_rows([&] { scores = student_predict(student, ctx.data.holdout); }, ctx.data.holdout.rows());
    auto row = detail::score_row(ctx, name, scores, ms, 1);
    std::ostringstream note;
    note << student.gbdt.trees.size() << " trees";
    if (teacher_p > 0) note << ", " << std::fixed << std::setprecision(1) << 100.0 * row.precision_at_k / teacher_p
                            << "% of teacher precision@K";
    row.note = note.str();
    t.rows.push_back(std::move(row));
  }
  return t;
}

enum class AblationSuite { fusion, diversity, distill_loss };

inline AblationSuite parse_ablation_suite(std::string_view s) {
  if (s == "fusion") return AblationSuite::fusion;
  if (s == "diversity") return AblationSuite::diversity;
  if (s == "distill_loss" || s == "distill-loss") return AblationSuite::distill_loss;
  fail<UsageError>("unknown ablation suite '", s, "' (expected fusion, diversity or distill-loss)");
}

inline ComparisonTable run_suite(AblationContext& ctx, AblationSuite suite) {
  switch (suite) {
    case AblationSuite::fusion: return fusion_suite(ctx);
    case AblationSuite::diversity: return diversity_suite(ctx);
    case AblationSuite::distill_loss: return distill_loss_suite(ctx);
  }
  fail<UsageError>("unhandled ablation suite");
}

inline ComparisonTable run_ablation(const PipelineConfig& config, AblationSuite suite) {
  auto ctx = prepare_ablation(config);
  return run_suite(ctx, suite);
}

inline ComparisonTable run_ablation(const PipelineConfig& config, std::string_view suite) {
  return run_ablation(config, parse_ablation_suite(suite));
}

}  // namespace remedi
