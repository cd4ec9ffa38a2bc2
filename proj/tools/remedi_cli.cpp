// remedi command-line front end. Results go to stdout (JSON or CSV), logs and
// diagnostics to stderr. Exit codes: 0 ok, 2 usage, 3 data, 4 training.
#include "CLI11.hpp"
#include "remedi/pipeline.hpp"

#include <iostream>
#include <unordered_map>

namespace {

using namespace remedi;

struct Globals {
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

PipelineConfig config_or_default(const std::string& path, const Globals& g) {
  PipelineConfig c = path.empty() ? PipelineConfig{} : load_config(path);
  if (g.seed) c = c.with_seed(*g.seed);
  c.validate();
  return c;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

/// (id, value) pairs from two named columns of a CSV, in file order.
std::vector<std::pair<std::string, double>> read_id_column(const std::filesystem::path& path, const std::string& id_col,
                                                           const std::string& value_col) {
  std::ifstream in(path);
  require<DataError>(static_cast<bool>(in), "cannot open ", path.string());
  std::string line;
  require<DataError>(static_cast<bool>(std::getline(in, line)), path.string(), ": missing header row");
  std::optional<std::size_t> id_pos, value_pos;
  const auto header = detail::split_csv_line(line);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = detail::trim(header[c]);
    if (name == id_col) id_pos = c;
    if (name == value_col) value_pos = c;
  }
  require<DataError>(id_pos && value_pos, path.string(), ": needs columns '", id_col, "' and '", value_col, "'");
  std::vector<std::pair<std::string, double>> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    require<DataError>(cells.size() == header.size(), path.string(), ":", line_no, ": expected ", header.size(),
                       " fields, found ", cells.size());
    const auto v = detail::parse_double(cells[*value_pos]);
    require<DataError>(v.has_value(), path.string(), ":", line_no, ": empty '", value_col, "' value");
    out.emplace_back(std::string(detail::trim(cells[*id_pos])), *v);
  }
  return out;
}

/// Labels for `ids` looked up by id in a CSV with id and label columns.
std::vector<double> labels_for(const std::vector<std::string>& ids, const std::filesystem::path& labels_csv) {
  std::unordered_map<std::string, double> by_id;
  for (auto& [id, y] : read_id_column(labels_csv, "id", "label")) {
    require<DataError>(y == 0.0 || y == 1.0, labels_csv.string(), ": non-binary label for id '", id, "'");
    require<DataError>(by_id.emplace(id, y).second, labels_csv.string(), ": duplicate id '", id, "'");
  }
  std::vector<double> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    require<DataError>(it != by_id.end(), labels_csv.string(), ": no label for id '", id, "'");
    out.push_back(it->second);
  }
  return out;
}

void write_text(const std::string& text, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << text;
}

// --- commands --------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, out;
  std::optional<std::size_t> rows;
  std::optional<double> positive_rate, strength;
};

int cmd_gen_data(const GenDataArgs& a, const Globals& g) {
  const auto c = config_or_default(a.config, g);
  require(c.data.synthetic.has_value(), "config has no data.synthetic section");
  SynthConfig s = *c.data.synthetic;
  if (a.rows) s.n_rows = *a.rows;
  if (a.positive_rate) s.positive_rate = *a.positive_rate;
  if (a.strength) s.intent_signal_strength = *a.strength;
  s.validate();
  const auto data = generate_synthetic(s).data;
  save_csv_with_schema(data, a.out);
  Log::info("wrote ", data.rows(), " rows to ", a.out);
  print_json({{"path", a.out},
              {"schema", schema_sidecar_path(a.out).string()},
              {"rows", data.rows()},
              {"positives", data.positives()},
              {"features", data.cols()},
              {"seed", s.seed}});
  return 0;
}

struct PreprocessArgs {
  std::string config, input, out, preprocessor, save_preprocessor;
};

int cmd_preprocess(const PreprocessArgs& a, const Globals& g) {
  require(!a.preprocessor.empty() || !a.save_preprocessor.empty(),
          "give --preprocessor to apply a fitted one or --save-preprocessor to fit a new one");
  LabeledDataset out;
  FittedPreprocessor pre;
  if (!a.preprocessor.empty()) {
    pre = preprocessor_from_json(read_json_file(a.preprocessor));
    out = apply_preprocess(pre, load_csv(a.input, preprocessor_schema(pre)));
  } else {
    const auto c = config_or_default(a.config, g);
    std::tie(out, pre) = fit_apply_preprocess(load_csv_auto(a.input), c.preprocess);
    write_json_file(preprocessor_to_json(pre), a.save_preprocessor);
  }
  save_csv_with_schema(out, a.out);
  print_json({{"path", a.out}, {"rows", out.rows()}, {"features", out.cols()}});
  return 0;
}

struct TrainBaseArgs {
  std::string config, input, learner, out;
};

int cmd_train_base(const TrainBaseArgs& a, const Globals& g) {
  const auto c = config_or_default(a.config, g);
  const auto specs = c.resolved_learners();
  auto it = std::find_if(specs.begin(), specs.end(), [&](const LearnerSpec& s) { return s.name == a.learner; });
  if (it == specs.end()) {
    std::string known;
    for (const auto& s : specs) known += (known.empty() ? "" : ", ") + s.name;
    fail<UsageError>("no learner named '", a.learner, "' in the config (have: ", known, ")");
  }
  const auto data = load_csv_auto(a.input);
  require<DataError>(data.has_labels(), a.input, ": training data needs labels");
  const auto model = fit_learner_with_carve(*it, data, c.valid_fraction, c.carve_seed());
  save_model(model, a.out);
  print_json({{"path", a.out},
              {"learner", a.learner},
              {"kind", to_string(model.kind)},
              {"valid_score", std::isfinite(model.meta.valid_score) ? nlohmann::json(model.meta.valid_score)
                                                                    : nlohmann::json()},
              {"rounds_used", model.meta.rounds_used}});
  return 0;
}

struct OofArgs {
  std::string config, input, out, models_dir;
};

int cmd_oof(const OofArgs& a, const Globals& g) {
  const auto c = config_or_default(a.config, g);
  const auto data = load_csv_auto(a.input);
  require<DataError>(data.has_labels(), a.input, ": OOF predictions need labels");
  const auto result = run_base_stage(c, data);
  save_oof_csv(result.oof, a.out);
  nlohmann::json aucs;
  for (std::size_t j = 0; j < result.oof.models(); ++j) {
    const Vector col = result.oof.values.col(static_cast<Index>(j));
    aucs[result.oof.model_names[j]] = auc(data.labels, to_std(col));
  }
  nlohmann::json res{{"path", a.out}, {"rows", result.oof.rows()}, {"oof_auc", aucs}};
  if (!a.models_dir.empty()) {
    std::filesystem::create_directories(a.models_dir);
    for (std::size_t j = 0; j < result.full_models.size(); ++j) {
      const auto path = std::filesystem::path(a.models_dir) / ("base_" + result.oof.model_names[j] + ".json");
      save_model(result.full_models[j], path);
    }
    res["models_dir"] = a.models_dir;
  }
  print_json(res);
  return 0;
}

struct TrainMetaArgs {
  std::string config, oof, labels, out, teacher_dir, architecture = "hybrid";
};

int cmd_train_meta(const TrainMetaArgs& a, const Globals& g) {
  const auto c = config_or_default(a.config, g);
  require(a.architecture == "hybrid" || a.architecture == "single", "--architecture must be hybrid or single");
  const auto oof = load_oof_csv(a.oof);
  const auto labels = labels_for(oof.ids, a.labels);
  const auto meta = train_meta(build_meta_dataset(oof, labels), c.resolved_meta(), a.architecture == "hybrid");
  save_meta_model(meta, a.out);
  nlohmann::json res{{"path", a.out},
                     {"architecture", a.architecture},
                     {"best_epoch", meta.report.best_epoch},
                     {"best_valid_loss", meta.report.best_valid_loss}};
  if (!a.teacher_dir.empty()) {
    TeacherBundle t;
    t.meta = meta;
    for (const auto& name : oof.model_names)
      t.base_models.push_back(load_model(std::filesystem::path(a.teacher_dir) / ("base_" + name + ".json")));
    res["teacher"] = save_teacher(t, a.teacher_dir).string();
  }
  print_json(res);
  return 0;
}

struct DistillArgs {
  std::string config, teacher, input, out, loss, export_targets;
};

int cmd_distill(const DistillArgs& a, const Globals& g) {
  auto c = config_or_default(a.config, g);
  if (!a.loss.empty()) c.student.loss = parse_distill_loss(a.loss);
  const auto teacher = load_teacher(a.teacher);
  const auto data = load_csv_auto(a.input);
  if (!a.export_targets.empty()) save_distill_csv(build_distill_set(teacher, data), a.export_targets);
  const auto [train, valid] = distill_splits(c, teacher, data);
  const auto student = distill_student(train, valid, c.resolved_student(), c.student.loss);
  save_student(student, a.out);
  print_json({{"path", a.out},
              {"loss", to_string(student.loss)},
              {"trees", student.gbdt.trees.size()},
              {"valid_mse_to_teacher", student.valid_mse_to_teacher}});
  return 0;
}

struct PredictArgs {
  std::string model, input, out, preprocessor;
};

int cmd_predict(const PredictArgs& a, const Globals&) {
  const auto j = read_json_file(a.model);
  require<DataError>(j.is_object() && j.value("format", std::string()) == kModelFormat, a.model,
                     ": not a remedi model file");
  const std::string type = j.value("type", std::string());

  LabeledDataset data;
  if (!a.preprocessor.empty()) {
    const auto pre = preprocessor_from_json(read_json_file(a.preprocessor));
    data = apply_preprocess(pre, load_csv(a.input, preprocessor_schema(pre)));
  } else {
    data = load_csv_auto(a.input);
  }

  Vector scores;
  try {
    if (type == "base_learner") scores = predict(model_from_json(j), data);
    else if (type == "student") scores = student_predict(student_from_json(j), data);
    else if (type == "teacher") scores = teacher_predict(teacher_from_manifest(j, std::filesystem::path(a.model).parent_path()), data);
    else fail<UsageError>(a.model, ": a '", type, "' model cannot score feature rows (use a base learner, teacher or student)");
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(a.model, ": malformed model file: ", e.what());
  }
  const auto s = to_std(scores);
  write_scores_csv(data.ids, s, a.out);
  print_json({{"path", a.out}, {"model_type", type}, {"rows", s.size()}});
  return 0;
}

struct EvaluateArgs {
  std::string scores, labels, out, pr_curve, lead_list;
  std::size_t k = 0;
  std::size_t pr_points = 200;
};

int cmd_evaluate(const EvaluateArgs& a, const Globals&) {
  std::vector<std::string> ids;
  std::vector<double> scores;
  for (auto& [id, s] : read_id_column(a.scores, "id", "score")) {
    ids.push_back(std::move(id));
    scores.push_back(s);
  }
  const auto labels = labels_for(ids, a.labels);
  require(a.k <= ids.size(), "--k ", a.k, " exceeds the ", ids.size(), " scored rows");
  const auto report = evaluate(labels, scores, a.k, ids, a.pr_points);
  const auto j = report_to_json(report);
  if (!a.out.empty()) write_json_file(j, a.out);
  if (!a.pr_curve.empty()) write_pr_curve_csv(report, a.pr_curve);
  if (!a.lead_list.empty()) write_lead_list_csv(rank_top_k(ids, scores, a.k), a.lead_list);
  print_json(j);
  return 0;
}

struct AblateArgs {
  std::string config, suite, out_dir;
};

int cmd_ablate(const AblateArgs& a, const Globals& g) {
  const auto suite = parse_ablation_suite(a.suite);
  const auto c = config_or_default(a.config, g);
  const auto table = run_ablation(c, suite);
  std::ostringstream csv, text;
  write_table_csv(table, csv);
  write_table_text(table, text);
  if (!a.out_dir.empty()) {
    std::filesystem::create_directories(a.out_dir);
    write_text(csv.str(), std::filesystem::path(a.out_dir) / ("ablation_" + table.suite + ".csv"));
    write_text(text.str(), std::filesystem::path(a.out_dir) / ("ablation_" + table.suite + ".txt"));
  }
  if (!g.quiet) std::cerr << text.str();
  std::cout << csv.str();
  return 0;
}

struct PipelineArgs {
  std::string config, out_dir;
  bool resume = false;
};

int cmd_pipeline(const PipelineArgs& a, const Globals& g) {
  auto c = config_or_default(a.config, g);
  if (!a.out_dir.empty()) c.output_dir = a.out_dir;
  const auto manifest = run_pipeline(c, {a.resume});
  nlohmann::json res{{"output_dir", c.output_dir}, {"manifest", (std::filesystem::path(c.output_dir) / "manifest.json").string()}};
  if (const auto* ev = manifest.find("evaluation")) res["evaluation"] = ev->metrics;
  print_json(res);
  return 0;
}

struct DriftArgs {
  std::string reference, current;
};

int cmd_drift(const DriftArgs& a, const Globals&) {
  const auto ref = load_csv_auto(a.reference);
  const auto cur = load_csv(a.current, ref.schema);
  std::cout << "feature,psi\n";
  for (const auto& d : psi_drift(ref, cur)) std::cout << d.feature << ',' << detail::format_double(d.psi) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"remedi: ensemble fusion and distillation for extreme-imbalance ranking"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_flag("--quiet", g.quiet, "Only print warnings and errors to stderr");
  app.fallthrough();

  GenDataArgs gen;
  auto* s_gen = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV plus a schema sidecar");
  s_gen->add_option("--config", gen.config, "Pipeline config (JSON)");
  s_gen->add_option("--out", gen.out, "Output CSV")->required();
  s_gen->add_option("--rows", gen.rows, "Override data.synthetic.n_rows")->check(CLI::PositiveNumber);
  s_gen->add_option("--positive-rate", gen.positive_rate, "Override data.synthetic.positive_rate");
  s_gen->add_option("--signal-strength", gen.strength, "Override data.synthetic.intent_signal_strength");

  PreprocessArgs pre;
  auto* s_pre = app.add_subcommand("preprocess", "Impute, cap and scale a CSV");
  s_pre->add_option("--config", pre.config, "Pipeline config (JSON)");
  s_pre->add_option("--input", pre.input, "Raw CSV")->required();
  s_pre->add_option("--out", pre.out, "Preprocessed CSV")->required();
  auto* o_apply = s_pre->add_option("--preprocessor", pre.preprocessor, "Apply this fitted preprocessor");
  s_pre->add_option("--save-preprocessor", pre.save_preprocessor, "Fit on the input and save here")->excludes(o_apply);

  TrainBaseArgs tb;
  auto* s_tb = app.add_subcommand("train-base", "Fit one configured base learner");
  s_tb->add_option("--config", tb.config, "Pipeline config (JSON)");
  s_tb->add_option("--input", tb.input, "Preprocessed training CSV")->required();
  s_tb->add_option("--learner", tb.learner, "Learner name from the config")->required();
  s_tb->add_option("--out", tb.out, "Model file")->required();

  OofArgs oof;
  auto* s_oof = app.add_subcommand("oof", "Out-of-fold predictions for every configured learner");
  s_oof->add_option("--config", oof.config, "Pipeline config (JSON)");
  s_oof->add_option("--input", oof.input, "Preprocessed training CSV")->required();
  s_oof->add_option("--out", oof.out, "OOF CSV")->required();
  s_oof->add_option("--models-dir", oof.models_dir, "Also save full-data refits here");

  TrainMetaArgs tm;
  auto* s_tm = app.add_subcommand("train-meta", "Fit the meta-model on an OOF matrix");
  s_tm->add_option("--config", tm.config, "Pipeline config (JSON)");
  s_tm->add_option("--oof", tm.oof, "OOF CSV")->required();
  s_tm->add_option("--labels", tm.labels, "CSV with id and label columns")->required();
  s_tm->add_option("--out", tm.out, "Meta-model file")->required();
  s_tm->add_option("--teacher-dir", tm.teacher_dir, "Directory of base_<name>.json refits; writes teacher.json there");
  s_tm->add_option("--architecture", tm.architecture, "hybrid or single");

  DistillArgs ds;
  auto* s_ds = app.add_subcommand("distill", "Distill a teacher into a single GBDT student");
  s_ds->add_option("--config", ds.config, "Pipeline config (JSON)");
  s_ds->add_option("--teacher", ds.teacher, "teacher.json manifest")->required();
  s_ds->add_option("--input", ds.input, "Preprocessed training CSV")->required();
  s_ds->add_option("--out", ds.out, "Student file")->required();
  s_ds->add_option("--loss", ds.loss, "mse, kl or hard_label (default from config)");
  s_ds->add_option("--export-targets", ds.export_targets, "Write features plus teacher targets as CSV");

  PredictArgs pr;
  auto* s_pr = app.add_subcommand("predict", "Score rows with a base learner, teacher or student; writes id,score");
  s_pr->add_option("--model", pr.model, "Model file or teacher.json")->required();
  s_pr->add_option("--input", pr.input, "CSV to score")->required();
  s_pr->add_option("--out", pr.out, "Output id,score CSV")->required();
  s_pr->add_option("--preprocessor", pr.preprocessor, "Preprocess raw input with this fitted preprocessor");

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "Ranked-list metrics for an id,score file");
  s_ev->add_option("--scores", ev.scores, "CSV with id and score columns")->required();
  s_ev->add_option("--labels", ev.labels, "CSV with id and label columns")->required();
  s_ev->add_option("--k", ev.k, "Lead-list size")->required()->check(CLI::PositiveNumber);
  s_ev->add_option("--out", ev.out, "Report JSON");
  s_ev->add_option("--pr-curve", ev.pr_curve, "PR curve CSV");
  s_ev->add_option("--lead-list", ev.lead_list, "Top-K lead list CSV");
  s_ev->add_option("--pr-points", ev.pr_points, "PR curve resolution")->check(CLI::PositiveNumber);

  AblateArgs ab;
  auto* s_ab = app.add_subcommand("ablate", "Run an ablation suite; prints the comparison table as CSV");
  s_ab->add_option("--suite", ab.suite, "fusion, diversity or distill-loss")->required();
  s_ab->add_option("--config", ab.config, "Pipeline config (JSON)");
  s_ab->add_option("--out-dir", ab.out_dir, "Also write CSV and text tables here");

  PipelineArgs pl;
  auto* s_pl = app.add_subcommand("pipeline", "Run all stages and write artifacts");
  s_pl->add_option("--config", pl.config, "Pipeline config (JSON)");
  s_pl->add_option("--out-dir", pl.out_dir, "Artifact directory (overrides output_dir)");
  s_pl->add_flag("--resume", pl.resume, "Reuse completed stages from an earlier run with the same config");

  DriftArgs dr;
  auto* s_dr = app.add_subcommand("drift", "Per-feature population stability index; prints feature,psi");
  s_dr->add_option("--reference", dr.reference, "Reference CSV")->required();
  s_dr->add_option("--current", dr.current, "Current CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (g.quiet) Log::level() = LogLevel::warning;

  try {
    if (s_gen->parsed()) return cmd_gen_data(gen, g);
    if (s_pre->parsed()) return cmd_preprocess(pre, g);
    if (s_tb->parsed()) return cmd_train_base(tb, g);
    if (s_oof->parsed()) return cmd_oof(oof, g);
    if (s_tm->parsed()) return cmd_train_meta(tm, g);
    if (s_ds->parsed()) return cmd_distill(ds, g);
    if (s_pr->parsed()) return cmd_predict(pr, g);
    if (s_ev->parsed()) return cmd_evaluate(ev, g);
    if (s_ab->parsed()) return cmd_ablate(ab, g);
    if (s_pl->parsed()) return cmd_pipeline(pl, g);
    if (s_dr->parsed()) return cmd_drift(dr, g);
  } catch (const Error& e) {
    std::cerr << "remedi: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "remedi: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
