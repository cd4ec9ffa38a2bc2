// Acceptance runner: one PASS/FAIL line per criterion on stdout, details and
// comparison tables on stderr. Exit status 0 only if every criterion passes.
#include "support/oracles.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace remedi;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

double median(std::vector<double> v) { return median_of(std::move(v)); }

std::string list(const std::vector<double>& v, int digits = 4) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(v[i], digits);
  return out + "]";
}

// --- 1 ------------------------------------------------------------------------------

Outcome meta_feature_oracle() {
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::array<std::size_t, 4> sizes{2, 3, 5, 8};
  double max_err = 0.0, max_diff_sum = 0.0;
  bool lengths_ok = true, ranks_ok = true;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t m = sizes[static_cast<std::size_t>(t) % sizes.size()];
    std::vector<double> p(m);
    for (auto& v : p) v = u(rng);
    if (t % 7 == 0) p[m - 1] = p[0];
    const auto v = meta_feature_vector(p);
    const auto got = v.flatten();
    const auto want = oracle::naive_meta_features(p, kDefaultEpsilon);
    lengths_ok = lengths_ok && got.size() == 4 * m + 6 && want.size() == got.size();
    for (std::size_t c = 0; c < std::min(got.size(), want.size()); ++c)
      max_err = std::max(max_err, std::abs(got[c] - want[c]));
    max_diff_sum = std::max(max_diff_sum, std::abs(std::accumulate(v.diff_mean.begin(), v.diff_mean.end(), 0.0)));
    auto ranks = v.rank;
    std::sort(ranks.begin(), ranks.end());
    for (std::size_t j = 0; j < m; ++j) ranks_ok = ranks_ok && ranks[j] == static_cast<double>(j + 1);
  }
  const bool pass = max_err <= 1e-12 && lengths_ok && max_diff_sum <= 1e-9 && ranks_ok;
  return {pass, "1000 inputs, max |lib - naive| " + sci(max_err) + ", max |sum diff_mean| " + sci(max_diff_sum) +
                    (lengths_ok ? ", lengths 4M+6" : ", LENGTH MISMATCH") + (ranks_ok ? ", ranks permutations" : ", BAD RANKS")};
}

// --- 2 ------------------------------------------------------------------------------

Outcome gradient_checks() {
  double focal = 0.0;
  bool floor_ok = true;
  for (FocalParams fp : {FocalParams{2.0, 0.25}, FocalParams{1.0, 0.5}, FocalParams{0.5, 0.75}, FocalParams{3.0, 0.1}}) {
    const auto c = oracle::check_focal(fp);
    focal = std::max({focal, c.max_grad_error, c.max_hess_error});
    floor_ok = floor_ok && c.floor_applied;
  }
  std::mt19937_64 rng(1002);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(5, 6);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  const std::vector<double> y{1, 0, 0, 1, 0}, w{2.0, 1.0, 0.5, 3.0, 1.0};
  const auto mlp = oracle::check_network_gradients(MlpNet::make(6, {8, 4}, rng), x, y, w, 1e-3);

  Matrix p(5, 3);
  for (Index i = 0; i < p.size(); ++i) p.data()[i] = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  HybridParams hp;
  hp.raw_branch_hidden = {4};
  hp.rel_branch_hidden = {6};
  hp.fusion_hidden = {3};
  const auto hybrid =
      oracle::check_network_gradients(HybridNet::make(MetaLayout{3}, hp, rng), meta_feature_matrix(p), y, w, 1e-3);
  const bool pass = focal <= 1e-6 && floor_ok && mlp.max_rel_error <= 1e-4 && hybrid.max_rel_error <= 1e-4;
  return {pass, "focal gradient and exact hessian max abs " + sci(focal) +
                    (floor_ok ? ", boosting hessian = max(exact, 1e-12)" : ", FLOOR MISMATCH") + "; MLP max rel " + sci(mlp.max_rel_error) + " over " +
                    std::to_string(mlp.checked) + " params; hybrid max rel " + sci(hybrid.max_rel_error) + " over " +
                    std::to_string(hybrid.checked) + " params"};
}

// --- 3 ------------------------------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(1003);
  auto instance = [&](std::size_t n, int grid, std::vector<double>& y, std::vector<double>& s,
                      std::vector<std::string>& ids) {
    std::uniform_int_distribution<int> g(0, grid);
    std::bernoulli_distribution pos(0.3);
    y.clear();
    s.clear();
    ids = default_ids(n);
    for (std::size_t i = 0; i < n; ++i) {
      y.push_back(pos(rng) ? 1.0 : 0.0);
      s.push_back(static_cast<double>(g(rng)) / grid);
    }
    y[0] = 1.0;
    y[1] = 0.0;
  };
  std::vector<double> y, s;
  std::vector<std::string> ids;
  double auc_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    instance(10 + static_cast<std::size_t>(t) * 9 / 5, t % 2 ? 7 : 100000, y, s, ids);
    auc_err = std::max(auc_err, std::abs(auc(y, s) - oracle::brute_auc(y, s)));
  }
  bool prec_ok = true, pr_ok = true, br_ok = true;
  std::size_t checks = 0;
  for (int t = 0; t < 200; ++t) {
    instance(2 + static_cast<std::size_t>(t) % 19, 4, y, s, ids);
    for (std::size_t k = 1; k <= y.size(); ++k) {
      prec_ok = prec_ok && precision_at_k(y, s, k, ids) == oracle::brute_precision_at_k(y, s, ids, k);
      br_ok = br_ok && business_recall_at_k(y, s, k, ids) == 3.0 * recall_at_k(y, s, k, ids);
      ++checks;
    }
    const auto got = pr_curve(y, s, 1000);
    const auto want = oracle::brute_pr_curve(y, s);
    pr_ok = pr_ok && got.size() == want.size();
    for (std::size_t i = 0; pr_ok && i < got.size(); ++i)
      pr_ok = got[i].recall == want[i].recall && got[i].precision == want[i].precision &&
              got[i].threshold == want[i].threshold;
  }
  const bool pass = auc_err <= 1e-12 && prec_ok && pr_ok && br_ok;
  return {pass, "AUC max err " + sci(auc_err) + " on 50 instances; precision@K " + (prec_ok ? "exact" : "MISMATCH") +
                    " and business recall = 3x recall " + (br_ok ? "exact" : "MISMATCH") + " over " +
                    std::to_string(checks) + " (instance, K); PR curve " + (pr_ok ? "exact" : "MISMATCH") +
                    " on 200 instances"};
}

// --- 4-7: multi-seed benchmark ---------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  ComparisonTable fusion, diversity, distill;
};

SeedResult run_seed(const PipelineConfig& base, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  auto ctx = prepare_ablation(base.with_seed(seed));
  SeedResult r;
  r.seed = seed;
  r.fusion = fusion_suite(ctx);
  r.diversity = diversity_suite(ctx);
  r.distill = distill_loss_suite(ctx);
  for (const auto* t : {&r.fusion, &r.diversity, &r.distill}) {
    std::cerr << "seed " << seed << " suite " << t->suite << '\n';
    write_table_text(*t, std::cerr);
    std::cerr << '\n';
  }
  std::cerr << "seed " << seed << " took "
            << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1) << " s\n\n";
  return r;
}

std::vector<double> column(const std::vector<SeedResult>& rs, const ComparisonTable SeedResult::*table,
                           const std::string& row, double AblationRow::*field) {
  std::vector<double> out;
  for (const auto& r : rs) out.push_back((r.*table).row(row).*field);
  return out;
}

Outcome fusion_trend(const std::vector<SeedResult>& rs) {
  const auto avg = column(rs, &SeedResult::fusion, "simple_average", &AblationRow::auc);
  const auto stk = column(rs, &SeedResult::fusion, "stacking_gbdt", &AblationRow::auc);
  const auto hyb = column(rs, &SeedResult::fusion, "hybrid", &AblationRow::auc);
  const double ma = median(avg), ms = median(stk), mh = median(hyb);
  const bool pass = ma <= ms && ms <= mh && mh - ma >= 0.005;
  return {pass, "median AUC simple_average " + fmt(ma) + ", stacking_gbdt " + fmt(ms) + ", hybrid " + fmt(mh) +
                    "; hybrid - simple_average " + fmt(mh - ma) + " (need >= 0.005); per seed hybrid " + list(hyb) +
                    ", simple_average " + list(avg)};
}

Outcome diversity_trend(const std::vector<SeedResult>& rs) {
  const auto all = column(rs, &SeedResult::diversity, "all", &AblationRow::auc);
  const auto trees = column(rs, &SeedResult::diversity, "trees-only", &AblationRow::auc);
  const bool pass = median(all) >= median(trees);
  return {pass, "median AUC all five " + fmt(median(all)) + ", trees-only " + fmt(median(trees)) + "; per seed all " +
                    list(all) + ", trees-only " + list(trees)};
}

Outcome distill_fidelity(const std::vector<SeedResult>& rs) {
  const auto teacher = column(rs, &SeedResult::distill, "teacher-only", &AblationRow::precision_at_k);
  const auto mse = column(rs, &SeedResult::distill, "mse", &AblationRow::precision_at_k);
  const auto hard = column(rs, &SeedResult::distill, "hard_label", &AblationRow::precision_at_k);
  std::vector<double> retention;
  for (std::size_t i = 0; i < rs.size(); ++i) retention.push_back(teacher[i] > 0 ? mse[i] / teacher[i] : 0.0);
  const bool pass = median(retention) >= 0.9 && median(mse) >= median(hard);
  return {pass, "K = " + std::to_string(rs.front().distill.k) + "; median retention " + fmt(100 * median(retention), 1) +
                    "% (per seed " + list(retention, 3) + "); median P@K mse " + fmt(median(mse)) + " vs hard_label " +
                    fmt(median(hard)) + ", teacher " + fmt(median(teacher))};
}

Outcome speedup(const std::vector<SeedResult>& rs) {
  const auto teacher = column(rs, &SeedResult::distill, "teacher-only", &AblationRow::ms_per_1k_rows);
  const auto student = column(rs, &SeedResult::distill, "mse", &AblationRow::ms_per_1k_rows);
  std::vector<double> ratio;
  for (std::size_t i = 0; i < rs.size(); ++i) ratio.push_back(student[i] > 0 ? teacher[i] / student[i] : 0.0);
  const bool pass = median(student) * 3.0 <= median(teacher);
  return {pass, "median ms per 1k rows: teacher " + fmt(median(teacher), 3) + ", student " + fmt(median(student), 3) +
                    "; speedup per seed " + list(ratio, 2) + " (need >= 3)"};
}

// --- 8 ------------------------------------------------------------------------------

Outcome leakage() {
  SynthConfig cfg;
  cfg.n_rows = 200;
  cfg.n_features = 12;
  cfg.noise_features = 3;
  cfg.positive_rate = 0.15;
  cfg.seed = 1008;
  auto [data, _] = fit_apply_preprocess(generate_synthetic(cfg).data);
  const auto c = oracle::oof_leakage(data, default_learners(), 5, data.rows());
  return {c.max_change <= 1e-12 && c.rows_flipped == 200,
          std::to_string(c.rows_flipped) + " single-label flips, 5 learners, 5 fixed folds; max change of the flipped "
                                           "row's OOF predictions " + sci(c.max_change)};
}

// --- 9 ------------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> read_scores(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<double> out;
  while (std::getline(in, line)) out.push_back(std::stod(line.substr(line.find(',') + 1)));
  return out;
}

double max_abs(const Vector& a, const Vector& b) { return a.size() == 0 ? 0.0 : (a - b).cwiseAbs().maxCoeff(); }

Outcome determinism_and_round_trip(const PipelineConfig& base, const fs::path& scratch) {
  auto cfg = base.with_seed(109);
  cfg.data.synthetic->n_rows = 20000;
  cfg.data.synthetic->positive_rate = 0.02;
  const auto a = scratch / "run_a", b = scratch / "run_b";
  fs::remove_all(a);
  fs::remove_all(b);
  cfg.output_dir = a.string();
  run_pipeline(cfg);
  cfg.output_dir = b.string();
  run_pipeline(cfg);
  const auto leads_a = slurp(a / "lead_list_student.csv");
  const bool same_leads = !leads_a.empty() && leads_a == slurp(b / "lead_list_student.csv");

  // Pipeline artifacts reloaded from disk against the scores written at run time.
  const auto data = prepare_data(cfg);
  double worst = 0.0;
  std::size_t reloaded = 0;
  auto check = [&](const Vector& got, const std::vector<double>& want) {
    worst = std::max(worst, want.size() == static_cast<std::size_t>(got.size())
                                ? max_abs(got, Eigen::Map<const Vector>(want.data(), static_cast<Index>(want.size())))
                                : 1.0);
    ++reloaded;
  };
  check(teacher_predict(load_teacher(a / "teacher" / "teacher.json"), data.holdout),
        read_scores(a / "holdout_scores_teacher.csv"));
  check(student_predict(load_student(a / "student.json"), data.holdout), read_scores(a / "holdout_scores_student.csv"));

  // Every model type fitted in memory, saved, reloaded.
  const auto& train = data.train;
  const auto& hold = data.holdout;
  auto base_models = run_base_stage(cfg, train);
  for (std::size_t j = 0; j < base_models.full_models.size(); ++j) {
    const auto path = scratch / ("model_" + std::to_string(j) + ".json");
    save_model(base_models.full_models[j], path);
    check(predict(load_model(path), hold), to_std(predict(base_models.full_models[j], hold)));
  }
  const auto meta_data = build_meta_dataset(base_models.oof, train.labels);
  const Matrix hold_meta = meta_feature_matrix(base_predictions(base_models.full_models, hold));
  for (bool split : {true, false}) {
    const auto m = train_meta(meta_data, cfg.resolved_meta(), split);
    save_meta_model(m, scratch / "meta.json");
    check(meta_predict(load_meta_model(scratch / "meta.json"), hold_meta), to_std(meta_predict(m, hold_meta)));
  }
  const Matrix hold_preds = base_predictions(base_models.full_models, hold);
  for (auto kind : {FusionKind::simple_average, FusionKind::weighted_average, FusionKind::stacking_logreg,
                    FusionKind::stacking_gbdt, FusionKind::hybrid, FusionKind::hybrid_no_split}) {
    const auto f = fit_fusion(kind, base_models.oof.values, train.labels, base_models.oof.model_names,
                              cfg.resolved_fusion());
    write_json_file(fusion_to_json(f), scratch / "fusion.json");
    check(fusion_predict(fusion_from_json(read_json_file(scratch / "fusion.json")), hold_preds),
          to_std(fusion_predict(f, hold_preds)));
  }
  TeacherBundle teacher{base_models.full_models, train_meta(meta_data, cfg.resolved_meta())};
  const auto [dtrain, dvalid] = distill_splits(cfg, teacher, train);
  for (auto loss : {DistillLoss::mse, DistillLoss::kl, DistillLoss::hard_label}) {
    const auto s = distill_student(dtrain, dvalid, cfg.resolved_student(), loss);
    save_student(s, scratch / "student.json");
    check(student_predict(load_student(scratch / "student.json"), hold), to_std(student_predict(s, hold)));
  }
  const bool pass = same_leads && worst <= 1e-12;
  return {pass, std::string("two pipeline runs (seed 109, 20k rows): student lead list ") +
                    (same_leads ? "identical" : "DIFFERENT") + "; " + std::to_string(reloaded) +
                    " reloaded models, max |reloaded - original| " + sci(worst)};
}

// --- 10 -----------------------------------------------------------------------------

Outcome no_signal(const PipelineConfig& base) {
  auto cfg = base.with_seed(110);
  cfg.data.synthetic->intent_signal_strength = 0.0;
  cfg.data.synthetic->positive_rate = 0.02;
  auto ctx = prepare_ablation(cfg);
  std::vector<std::pair<std::string, double>> aucs;
  for (std::size_t j = 0; j < ctx.base.full_models.size(); ++j) {
    const Vector col = ctx.holdout_preds.col(static_cast<Index>(j));
    aucs.emplace_back(ctx.base.oof.model_names[j], auc(ctx.data.holdout.labels, to_std(col)));
  }
  aucs.emplace_back("hybrid", auc(ctx.data.holdout.labels, to_std(fusion_predict(ablation_hybrid(ctx), ctx.holdout_preds))));
  bool pass = true;
  std::string detail = std::to_string(ctx.data.holdout.rows()) + " holdout rows, " +
                       std::to_string(ctx.data.holdout.positives()) + " positives; AUC";
  for (const auto& [name, a] : aucs) {
    pass = pass && a >= 0.45 && a <= 0.55;
    detail += " " + name + " " + fmt(a);
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<std::uint64_t> seeds{101, 102, 103, 104, 105};
  std::string config_path, scratch_dir = (fs::temp_directory_path() / "remedi_acceptance").string();
  std::size_t rows = 0;
  std::vector<int> only;
  app.add_option("--seeds", seeds, "Benchmark seeds for criteria 4-7")->expected(1, -1);
  app.add_option("--config", config_path, "Base pipeline config (JSON); defaults to the built-in benchmark");
  app.add_option("--rows", rows, "Override the synthetic row count for criteria 4-7 and 10");
  app.add_option("--only", only, "Run only these criteria")->expected(1, -1);
  app.add_option("--scratch", scratch_dir, "Scratch directory");
  CLI11_PARSE(app, argc, argv);

  Log::level() = LogLevel::warning;
  PipelineConfig base = config_path.empty() ? PipelineConfig{} : load_config(config_path);
  if (rows > 0) base.data.synthetic->n_rows = rows;
  const fs::path scratch = scratch_dir;
  fs::create_directories(scratch);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::vector<std::pair<int, Outcome>> results;
  auto report = [&](int c, Outcome o) {
    std::cout << "CRITERION " << c << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail << std::endl;
    results.emplace_back(c, std::move(o));
  };
  auto guarded = [&](int c, auto&& fn) {
    if (!wanted(c)) return;
    try {
      report(c, fn());
    } catch (const std::exception& e) {
      report(c, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, meta_feature_oracle);
  guarded(2, gradient_checks);
  guarded(3, metric_oracles);
  if (wanted(4) || wanted(5) || wanted(6) || wanted(7)) {
    std::vector<SeedResult> rs;
    std::string error;
    try {
      for (auto s : seeds) rs.push_back(run_seed(base, s));
    } catch (const std::exception& e) {
      error = e.what();
    }
    auto bench = [&](int c, Outcome (*fn)(const std::vector<SeedResult>&)) {
      if (!wanted(c)) return;
      if (!error.empty()) return report(c, {false, "error: " + error});
      report(c, fn(rs));
    };
    bench(4, fusion_trend);
    bench(5, diversity_trend);
    bench(6, distill_fidelity);
    bench(7, speedup);
  }
  guarded(8, leakage);
  guarded(9, [&] { return determinism_and_round_trip(base, scratch); });
  guarded(10, [&] { return no_signal(base); });

  fs::remove_all(scratch);
  const auto passed = std::count_if(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == static_cast<long>(results.size()) ? 0 : 1;
}
