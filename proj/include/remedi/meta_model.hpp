// Fusion of base-model predictions.
//
// The hybrid meta-model routes the M raw predictions through one ReLU branch
// and the remaining 3M+6 relative features through another; the two branch
// outputs are concatenated and mapped to a logit by a third stack:
//   h_raw = MLP_raw(x_raw), h_rel = MLP_rel(x_rel),
//   p = sigmoid(MLP_out([h_raw, h_rel])).
// Inputs are standardized with statistics of the meta training rows.
#pragma once

#include "remedi/ensemble.hpp"
#include "remedi/evaluation.hpp"
#include "remedi/gbdt.hpp"
#include "remedi/nn.hpp"

namespace remedi {

struct HybridParams {
  std::vector<int> raw_branch_hidden{16};
  std::vector<int> rel_branch_hidden{32};
  std::vector<int> fusion_hidden{16};
  double learning_rate = 1e-3;
  int epochs = 30;
  int batch_size = 512;
  double l2 = 1e-2;
  std::optional<double> class_weight_pos = 20.0;  // unset: N_neg / N_pos
  int early_stopping_rounds = 8;
  double valid_fraction = 0.2;
  std::uint64_t seed = 1;

  void validate() const {
    require(!raw_branch_hidden.empty() && !rel_branch_hidden.empty(), "branch layer lists must not be empty");
    for (const auto* v : {&raw_branch_hidden, &rel_branch_hidden, &fusion_hidden})
      for (int h : *v) require(h >= 1, "meta-model layer sizes must be >= 1");
    require(valid_fraction > 0.0 && valid_fraction < 1.0, "valid_fraction must lie in (0, 1)");
    train_config().validate();
  }
  NnTrainConfig train_config() const {
    return {learning_rate, epochs, batch_size, l2, class_weight_pos, early_stopping_rounds, seed};
  }
};

/// Two input branches joined by a fusion stack. Columns of the input matrix
/// are routed by `raw_index` / `rel_index`.
struct HybridNet {
  DenseStack raw;
  DenseStack rel;
  DenseStack out;
  std::vector<std::size_t> raw_index;
  std::vector<std::size_t> rel_index;

  struct Tape {
    DenseStack::Tape raw, rel, out;
  };

  static HybridNet make(const MetaLayout& layout, const HybridParams& p, std::mt19937_64& rng) {
    HybridNet n;
    n.raw_index = layout.raw_indices();
    n.rel_index = layout.relative_indices();
    n.raw = DenseStack::make(static_cast<Index>(n.raw_index.size()), p.raw_branch_hidden, true, rng);
    n.rel = DenseStack::make(static_cast<Index>(n.rel_index.size()), p.rel_branch_hidden, true, rng);
    std::vector<int> sizes = p.fusion_hidden;
    sizes.push_back(1);
    n.out = DenseStack::make(n.raw.out_size() + n.rel.out_size(), sizes, false, rng);
    return n;
  }

  Index in_size() const { return static_cast<Index>(raw_index.size() + rel_index.size()); }

  Vector forward(const Matrix& x, Tape* tape) const {
    const Matrix h_raw = raw.forward(take_cols(x, raw_index), tape ? &tape->raw : nullptr);
    const Matrix h_rel = rel.forward(take_cols(x, rel_index), tape ? &tape->rel : nullptr);
    Matrix fused(x.rows(), h_raw.cols() + h_rel.cols());
    fused << h_raw, h_rel;
    return out.forward(fused, tape ? &tape->out : nullptr).col(0);
  }

  std::vector<Matrix> backward(const Matrix&, const Tape& tape, const Vector& dlogits) const {
    std::vector<Matrix> g_raw, g_rel, g_out;
    const Matrix d_fused = out.backward(tape.out, Matrix(dlogits), g_out);
    raw.backward(tape.raw, d_fused.leftCols(raw.out_size()), g_raw);
    rel.backward(tape.rel, d_fused.rightCols(rel.out_size()), g_rel);
    std::vector<Matrix> grads;
    for (auto* g : {&g_raw, &g_rel, &g_out})
      for (auto& m : *g) grads.push_back(std::move(m));
    return grads;
  }

  std::vector<Param> parameters() {
    std::vector<Param> p;
    raw.collect(p);
    rel.collect(p);
    out.collect(p);
    return p;
  }

 private:
  static Matrix take_cols(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out(x.rows(), static_cast<Index>(idx.size()));
    for (std::size_t c = 0; c < idx.size(); ++c) out.col(static_cast<Index>(c)) = x.col(static_cast<Index>(idx[c]));
    return out;
  }
};

/// Trained meta-model over flattened meta-feature vectors. `net` is a
/// `HybridNet` for the split architecture or a single `MlpNet` over all
/// 4M+6 features.
struct MetaModel {
  std::vector<std::string> model_names;
  double epsilon = kDefaultEpsilon;
  Standardizer standardizer;
  std::variant<HybridNet, MlpNet> net;
  HybridParams params;
  NnFitReport report;

  bool split() const { return std::holds_alternative<HybridNet>(net); }
  MetaLayout layout() const { return {model_names.size()}; }
};

namespace detail {

inline std::pair<SplitIndices, std::vector<double>> meta_carve(const MetaDataset& meta, double fraction,
                                                               std::uint64_t seed) {
  require<DataError>(meta.rows() > 0, "meta dataset is empty");
  require<DataError>(meta.labels.size() == meta.rows(), "meta label count mismatch");
  const auto pos = std::count(meta.labels.begin(), meta.labels.end(), 1.0);
  require<DataError>(pos > 0 && static_cast<std::size_t>(pos) < meta.rows(),
                     "meta dataset must contain both classes");
  return {stratified_carve(meta.labels, fraction, seed), meta.labels};
}

}  // namespace detail

/// Fits the meta-model, early-stopping on a stratified `valid_fraction` slice.
/// `split = false` gives the single-network variant: one ReLU stack with
/// rel_branch_hidden followed by fusion_hidden.
inline MetaModel train_meta(const MetaDataset& meta, const HybridParams& params, bool split = true) {
  params.validate();
  const MetaLayout layout = MetaLayout::from_size(static_cast<std::size_t>(meta.features.cols()));
  require<DataError>(layout.models == meta.model_names.size(), "meta dataset has ", meta.model_names.size(),
                     " model names for ", layout.models, " models");
  const auto [carve, labels] = detail::meta_carve(meta, params.valid_fraction, params.seed);
  MetaModel m;
  m.model_names = meta.model_names;
  m.params = params;
  const Matrix train_x = take_rows(meta.features, carve.first);
  m.standardizer = Standardizer::fit(train_x);
  const Matrix x = m.standardizer.apply(train_x);
  const Matrix vx = m.standardizer.apply(take_rows(meta.features, carve.second));
  const auto y = take(labels, carve.first);
  const auto vy = take(labels, carve.second);
  std::mt19937_64 rng(params.seed);
  if (split) {
    HybridNet net = HybridNet::make(layout, params, rng);
    m.report = fit_network(net, x, y, vx, vy, params.train_config());
    m.net = std::move(net);
  } else {
    std::vector<int> hidden = params.rel_branch_hidden;
    hidden.insert(hidden.end(), params.fusion_hidden.begin(), params.fusion_hidden.end());
    MlpNet net = MlpNet::make(static_cast<Index>(layout.size()), hidden, rng);
    m.report = fit_network(net, x, y, vx, vy, params.train_config());
    m.net = std::move(net);
  }
  return m;
}

/// Probabilities for rows of a flattened meta-feature matrix.
inline Vector meta_predict(const MetaModel& m, const Matrix& meta_features) {
  require<DataError>(static_cast<std::size_t>(meta_features.cols()) == m.layout().size(), "meta-model expects ",
                     m.layout().size(), " meta features, got ", meta_features.cols());
  const Matrix x = m.standardizer.apply(meta_features);
  return std::visit([&](const auto& net) { return predict_proba(net, x); }, m.net);
}

inline double meta_predict(const MetaModel& m, const MetaFeatureVector& v) {
  const auto flat = v.flatten();
  Matrix row(1, static_cast<Index>(flat.size()));
  std::copy(flat.begin(), flat.end(), row.data());
  return meta_predict(m, row)[0];
}

// --- fusion strategies -----------------------------------------------------------------

enum class FusionKind { simple_average, weighted_average, stacking_logreg, stacking_gbdt, hybrid, hybrid_no_split };

inline std::string_view to_string(FusionKind k) {
  switch (k) {
    case FusionKind::simple_average: return "simple_average";
    case FusionKind::weighted_average: return "weighted_average";
    case FusionKind::stacking_logreg: return "stacking_logreg";
    case FusionKind::stacking_gbdt: return "stacking_gbdt";
    case FusionKind::hybrid: return "hybrid";
    case FusionKind::hybrid_no_split: return "hybrid_no_split";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(std::string_view s) {
  for (auto k : {FusionKind::simple_average, FusionKind::weighted_average, FusionKind::stacking_logreg,
                 FusionKind::stacking_gbdt, FusionKind::hybrid, FusionKind::hybrid_no_split})
    if (to_string(k) == s) return k;
  fail<UsageError>("unknown fusion strategy '", s, "'");
}

/// Settings for every strategy; each kind reads only its own part.
struct FusionParams {
  HybridParams hybrid;
  GbdtParams stacking_gbdt = [] {
    GbdtParams p;
    p.n_trees = 200;
    p.max_depth = 3;
    p.learning_rate = 0.05;
    p.min_samples_leaf = 50;
    p.scale_pos_weight = 20.0;
    p.early_stopping_rounds = 20;
    return p;
  }();
  NnTrainConfig logreg{0.01, 30, 512, 1e-4, std::nullopt, 5, 1};
  int weight_iterations = 200;
  int weight_restarts = 2;
  std::size_t weight_max_rows = 30000;
  double valid_fraction = 0.2;  // early-stopping slice for the stacking strategies
  std::uint64_t seed = 1;
};

/// A fitted fusion strategy applied to N x M base predictions.
struct FusionModel {
  FusionKind kind = FusionKind::simple_average;
  std::vector<std::string> model_names;
  std::vector<double> weights;  // weighted_average
  Standardizer standardizer;    // stacking_logreg
  std::optional<MlpNet> logreg;
  std::optional<GbdtModel> gbdt;
  std::optional<MetaModel> meta;  // hybrid, hybrid_no_split
};

namespace detail {

/// All positives plus an evenly seeded sample of negatives, at most `max_rows`.
inline std::vector<std::size_t> auc_sample(std::span<const double> labels, std::size_t max_rows, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1.0 ? pos : neg).push_back(i);
  if (labels.size() <= max_rows) {
    std::vector<std::size_t> all(labels.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  const std::size_t n_neg = max_rows > pos.size() ? max_rows - pos.size() : std::size_t{1};
  std::mt19937_64 rng(seed);
  std::shuffle(neg.begin(), neg.end(), rng);
  neg.resize(std::min(neg.size(), n_neg));
  pos.insert(pos.end(), neg.begin(), neg.end());
  std::sort(pos.begin(), pos.end());
  return pos;
}

/// Coordinate ascent on AUC over the probability simplex. Each iteration moves
/// a step of mass onto (or off) one coordinate; the step halves after a full
/// sweep without improvement. Restart 0 starts uniform, later restarts from a
/// seeded Dirichlet(1) draw.
inline std::vector<double> fit_simplex_weights(const Matrix& preds, std::span<const double> labels,
                                               const FusionParams& fp) {
  const auto m = static_cast<std::size_t>(preds.cols());
  const auto rows = auc_sample(labels, fp.weight_max_rows, fp.seed);
  const Matrix p = take_rows(preds, rows);
  const auto y = take(std::vector<double>(labels.begin(), labels.end()), rows);
  auto score = [&](const std::vector<double>& w) {
    const Vector s = p * Eigen::Map<const Vector>(w.data(), static_cast<Index>(m));
    return auc(y, {s.data(), static_cast<std::size_t>(s.size())});
  };

  std::mt19937_64 rng(fp.seed);
  std::vector<double> best_w(m, 1.0 / static_cast<double>(m));
  double best_auc = -1.0;
  for (int r = 0; r < std::max(1, fp.weight_restarts); ++r) {
    std::vector<double> w(m, 1.0 / static_cast<double>(m));
    if (r > 0) {
      std::exponential_distribution<double> ex(1.0);
      double sum = 0.0;
      for (auto& v : w) sum += (v = ex(rng));
      for (auto& v : w) v /= sum;
    }
    double cur = score(w);
    double step = 0.25;
    int stale = 0;
    for (int it = 0; it < fp.weight_iterations && step > 1e-4; ++it) {
      const std::size_t j = static_cast<std::size_t>(it) % m;
      bool improved = false;
      for (double dir : {+1.0, -1.0}) {
        std::vector<double> cand = w;
        cand[j] = std::clamp(cand[j] + dir * step, 0.0, 1.0);
        double sum = 0.0;
        for (double v : cand) sum += v;
        if (sum <= 0.0) continue;
        for (auto& v : cand) v /= sum;
        const double a = score(cand);
        if (a > cur + 1e-12) {
          cur = a;
          w = std::move(cand);
          improved = true;
          break;
        }
      }
      stale = improved ? 0 : stale + 1;
      if (stale >= static_cast<int>(m)) {
        step *= 0.5;
        stale = 0;
      }
    }
    if (cur > best_auc) {
      best_auc = cur;
      best_w = w;
    }
  }
  return best_w;
}

}  // namespace detail

/// Fits `kind` on base predictions `preds` (N x M, typically OOF) and labels.
inline FusionModel fit_fusion(FusionKind kind, const Matrix& preds, std::span<const double> labels,
                              const std::vector<std::string>& model_names, const FusionParams& fp = {}) {
  const auto m = static_cast<std::size_t>(preds.cols());
  require<DataError>(model_names.size() == m, "fusion: ", model_names.size(), " names for ", m, " prediction columns");
  require<DataError>(m >= 1, "fusion needs at least one prediction column");
  require<UsageError>(m >= 2 || kind == FusionKind::simple_average, "strategy '", to_string(kind),
                      "' needs at least 2 base models; only simple_average accepts one");
  FusionModel f;
  f.kind = kind;
  f.model_names = model_names;
  if (kind == FusionKind::simple_average) return f;

  require<DataError>(labels.size() == static_cast<std::size_t>(preds.rows()), "fusion label count mismatch");
  switch (kind) {
    case FusionKind::simple_average: break;
    case FusionKind::weighted_average: f.weights = detail::fit_simplex_weights(preds, labels, fp); break;
    case FusionKind::stacking_logreg:
    case FusionKind::stacking_gbdt: {
      const auto carve = stratified_carve(labels, fp.valid_fraction, fp.seed);
      const std::vector<double> y_all(labels.begin(), labels.end());
      const Matrix x = take_rows(preds, carve.first);
      const Matrix vx = take_rows(preds, carve.second);
      const auto y = take(y_all, carve.first);
      const auto vy = take(y_all, carve.second);
      if (kind == FusionKind::stacking_gbdt) {
        GbdtParams p = fp.stacking_gbdt;
        p.objective = GbdtObjective::logloss;
        p.seed = fp.seed;
        f.gbdt = fit_gbdt_matrix(x, y, vx, vy, p);
      } else {
        f.standardizer = Standardizer::fit(x);
        std::mt19937_64 rng(fp.seed);
        MlpNet net = MlpNet::make(static_cast<Index>(m), {}, rng);
        NnTrainConfig cfg = fp.logreg;
        cfg.seed = fp.seed;
        fit_network(net, f.standardizer.apply(x), y, f.standardizer.apply(vx), vy, cfg);
        f.logreg = std::move(net);
      }
      break;
    }
    case FusionKind::hybrid:
    case FusionKind::hybrid_no_split: {
      MetaDataset meta;
      meta.features = meta_feature_matrix(preds);
      meta.labels.assign(labels.begin(), labels.end());
      meta.model_names = model_names;
      f.meta = train_meta(meta, fp.hybrid, kind == FusionKind::hybrid);
      break;
    }
  }
  return f;
}

inline Vector fusion_predict(const FusionModel& f, const Matrix& preds) {
  require<DataError>(static_cast<std::size_t>(preds.cols()) == f.model_names.size(), "fusion expects ",
                     f.model_names.size(), " prediction columns, got ", preds.cols());
  Vector out;
  switch (f.kind) {
    case FusionKind::simple_average: out = preds.rowwise().mean(); break;
    case FusionKind::weighted_average:
      out = preds * Eigen::Map<const Vector>(f.weights.data(), static_cast<Index>(f.weights.size()));
      break;
    case FusionKind::stacking_logreg: out = predict_proba(*f.logreg, f.standardizer.apply(preds)); break;
    case FusionKind::stacking_gbdt: {
      out = f.gbdt->raw_scores(preds);
      for (Index r = 0; r < out.size(); ++r) out[r] = f.gbdt->transform(out[r]);
      break;
    }
    case FusionKind::hybrid:
    case FusionKind::hybrid_no_split: out = meta_predict(*f.meta, meta_feature_matrix(preds, f.meta->epsilon)); break;
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

/// Weights of a fitted weighted_average over the given (fixed) models.
inline FusionModel make_weighted_average(std::vector<std::string> model_names, std::vector<double> weights) {
  require(model_names.size() == weights.size(), "one weight per model required");
  double sum = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "weights must be nonnegative");
    sum += w;
  }
  require(std::abs(sum - 1.0) < 1e-9, "weights must sum to 1");
  FusionModel f;
  f.kind = FusionKind::weighted_average;
  f.model_names = std::move(model_names);
  f.weights = std::move(weights);
  return f;
}

// --- serialization -------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const HybridParams& p) {
  j = {{"raw_branch_hidden", p.raw_branch_hidden},
       {"rel_branch_hidden", p.rel_branch_hidden},
       {"fusion_hidden", p.fusion_hidden},
       {"learning_rate", p.learning_rate},
       {"epochs", p.epochs},
       {"batch_size", p.batch_size},
       {"l2", p.l2},
       {"early_stopping_rounds", p.early_stopping_rounds},
       {"valid_fraction", p.valid_fraction},
       {"seed", p.seed}};
  j["class_weight_pos"] = p.class_weight_pos ? nlohmann::json(*p.class_weight_pos) : nlohmann::json();
}

inline void from_json(const nlohmann::json& j, HybridParams& p) {
  p.raw_branch_hidden = j.value("raw_branch_hidden", p.raw_branch_hidden);
  p.rel_branch_hidden = j.value("rel_branch_hidden", p.rel_branch_hidden);
  p.fusion_hidden = j.value("fusion_hidden", p.fusion_hidden);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.l2 = j.value("l2", p.l2);
  p.early_stopping_rounds = j.value("early_stopping_rounds", p.early_stopping_rounds);
  p.valid_fraction = j.value("valid_fraction", p.valid_fraction);
  p.seed = j.value("seed", p.seed);
  if (j.contains("class_weight_pos")) {
    if (j.at("class_weight_pos").is_null()) p.class_weight_pos.reset();
    else p.class_weight_pos = j.at("class_weight_pos").get<double>();
  }
  p.validate();
}

inline nlohmann::json meta_model_to_json(const MetaModel& m) {
  nlohmann::json net;
  if (const auto* h = std::get_if<HybridNet>(&m.net)) {
    net = {{"architecture", "hybrid"},
           {"raw_index", h->raw_index},
           {"rel_index", h->rel_index},
           {"raw", stack_to_json(h->raw)},
           {"rel", stack_to_json(h->rel)},
           {"out", stack_to_json(h->out)}};
  } else {
    net = {{"architecture", "single"}, {"stack", stack_to_json(std::get<MlpNet>(m.net).stack)}};
  }
  return {{"format", kModelFormat},
          {"version", kModelFormatVersion},
          {"type", "meta_model"},
          {"model_names", m.model_names},
          {"epsilon", m.epsilon},
          {"standardizer", standardizer_to_json(m.standardizer)},
          {"params", m.params},
          {"best_epoch", m.report.best_epoch},
          {"net", net}};
}

inline MetaModel meta_model_from_json(const nlohmann::json& j) {
  check_container(j, "meta_model");
  MetaModel m;
  m.model_names = j.at("model_names").get<std::vector<std::string>>();
  m.epsilon = j.at("epsilon").get<double>();
  m.standardizer = standardizer_from_json(j.at("standardizer"));
  m.params = j.at("params").get<HybridParams>();
  m.report.best_epoch = j.value("best_epoch", 0);
  const auto& net = j.at("net");
  const auto size = m.layout().size();
  require<DataError>(static_cast<std::size_t>(m.standardizer.mean.size()) == size, "meta-model standardizer has ",
                     m.standardizer.mean.size(), " columns, expected ", size);
  if (net.at("architecture").get<std::string>() == "hybrid") {
    HybridNet h;
    h.raw_index = net.at("raw_index").get<std::vector<std::size_t>>();
    h.rel_index = net.at("rel_index").get<std::vector<std::size_t>>();
    h.raw = stack_from_json(net.at("raw"));
    h.rel = stack_from_json(net.at("rel"));
    h.out = stack_from_json(net.at("out"));
    std::vector<std::size_t> all = h.raw_index;
    all.insert(all.end(), h.rel_index.begin(), h.rel_index.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i)
      require<DataError>(all[i] == i && all.size() == size, "meta-model branch split does not cover the input");
    m.net = std::move(h);
  } else {
    MlpNet s{stack_from_json(net.at("stack"))};
    require<DataError>(static_cast<std::size_t>(s.in_size()) == size, "meta-model input size mismatch");
    m.net = std::move(s);
  }
  return m;
}

inline nlohmann::json fusion_to_json(const FusionModel& f) {
  nlohmann::json j{{"format", kModelFormat},
                   {"version", kModelFormatVersion},
                   {"type", "fusion"},
                   {"strategy", to_string(f.kind)},
                   {"model_names", f.model_names}};
  if (!f.weights.empty()) j["weights"] = f.weights;
  if (f.logreg) {
    j["standardizer"] = standardizer_to_json(f.standardizer);
    j["logreg"] = stack_to_json(f.logreg->stack);
  }
  if (f.gbdt) j["gbdt"] = gbdt_to_json(*f.gbdt);
  if (f.meta) j["meta"] = meta_model_to_json(*f.meta);
  return j;
}

inline FusionModel fusion_from_json(const nlohmann::json& j) {
  check_container(j, "fusion");
  FusionModel f;
  f.kind = parse_fusion_kind(j.at("strategy").get<std::string>());
  f.model_names = j.at("model_names").get<std::vector<std::string>>();
  if (j.contains("weights")) f.weights = j.at("weights").get<std::vector<double>>();
  if (j.contains("logreg")) {
    f.standardizer = standardizer_from_json(j.at("standardizer"));
    f.logreg = MlpNet{stack_from_json(j.at("logreg"))};
  }
  if (j.contains("gbdt")) f.gbdt = gbdt_from_json(j.at("gbdt"));
  if (j.contains("meta")) f.meta = meta_model_from_json(j.at("meta"));
  return f;
}

}  // namespace remedi
