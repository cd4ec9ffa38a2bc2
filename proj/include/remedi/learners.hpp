// Base learners: log-loss GBDT, focal-loss GBDT, MLP, factorization machine
// (optionally with a deep head) and a feature-subset GBDT specialist, behind
// one immutable `TrainedModel` type with a versioned JSON container.
#pragma once

#include "remedi/dataset.hpp"
#include "remedi/gbdt.hpp"
#include "remedi/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <variant>

namespace remedi {

enum class LearnerKind { gbdt, gbdt_focal, mlp, fm, subset, constant };

inline std::string_view to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::gbdt: return "gbdt";
    case LearnerKind::gbdt_focal: return "gbdt_focal";
    case LearnerKind::mlp: return "mlp";
    case LearnerKind::fm: return "fm";
    case LearnerKind::subset: return "subset";
    case LearnerKind::constant: return "constant";
  }
  return "gbdt";
}

inline LearnerKind parse_learner_kind(std::string_view s) {
  if (s == "gbdt") return LearnerKind::gbdt;
  if (s == "gbdt_focal") return LearnerKind::gbdt_focal;
  if (s == "mlp") return LearnerKind::mlp;
  if (s == "fm") return LearnerKind::fm;
  if (s == "subset") return LearnerKind::subset;
  if (s == "constant") return LearnerKind::constant;
  fail<UsageError>("unknown learner kind '", s, "'");
}

struct MlpParams {
  std::vector<int> hidden_sizes{64, 32, 16};
  double learning_rate = 1e-3;
  int epochs = 12;
  int batch_size = 256;
  double l2 = 1e-5;
  std::optional<double> class_weight_pos;
  int early_stopping_rounds = 3;
  std::uint64_t seed = 1;

  void validate() const {
    for (int h : hidden_sizes) require(h >= 1, "MLP hidden sizes must be >= 1");
    train_config().validate();
  }
  NnTrainConfig train_config() const {
    return {learning_rate, epochs, batch_size, l2, class_weight_pos, early_stopping_rounds, seed};
  }
};

struct FmParams {
  int k = 8;
  std::vector<int> deep_hidden_sizes{32};  // empty: plain FM
  double learning_rate = 2e-3;
  int epochs = 12;
  int batch_size = 256;
  double l2 = 1e-5;
  std::optional<double> class_weight_pos;
  int early_stopping_rounds = 3;
  std::uint64_t seed = 1;

  void validate() const {
    require(k >= 1, "FM embedding dimension k must be >= 1");
    for (int h : deep_hidden_sizes) require(h >= 1, "FM deep hidden sizes must be >= 1");
    train_config().validate();
  }
  NnTrainConfig train_config() const {
    return {learning_rate, epochs, batch_size, l2, class_weight_pos, early_stopping_rounds, seed};
  }
};

struct TrainingMeta {
  nlohmann::json params;
  double valid_score = std::numeric_limits<double>::quiet_NaN();  // validation log loss
  int rounds_used = 0;  // trees or epochs kept
};

/// Fitted base learner. Immutable after fit; `predict` is pure.
struct TrainedModel {
  LearnerKind kind = LearnerKind::gbdt;
  std::vector<std::string> feature_names;  // schema of the data it was fitted on
  std::vector<std::size_t> mask;  // subset models: indices into feature_names
  std::variant<GbdtModel, MlpNet, FmNet, double> body;
  TrainingMeta meta;

  bool is_tree() const { return std::holds_alternative<GbdtModel>(body); }
  const GbdtModel& gbdt() const {
    require<UsageError>(is_tree(), "model of kind '", to_string(kind), "' is not tree-based");
    return std::get<GbdtModel>(body);
  }
  /// Names of the columns the inner model consumes, in its column order.
  std::vector<std::string> input_names() const {
    if (mask.empty()) return feature_names;
    std::vector<std::string> out;
    for (auto i : mask) out.push_back(feature_names[i]);
    return out;
  }
};

// --- schema checks -------------------------------------------------------------

inline void check_schema(const std::vector<std::string>& expected, const ColumnSchema& actual) {
  const auto got = actual.names();
  if (got == expected) return;
  std::vector<std::string> problems;
  std::set<std::string> exp_set(expected.begin(), expected.end()), got_set(got.begin(), got.end());
  for (const auto& e : expected)
    if (!got_set.count(e)) problems.push_back("missing '" + e + "'");
  for (const auto& g : got)
    if (!exp_set.count(g)) problems.push_back("unexpected '" + g + "'");
  if (problems.empty()) {
    for (std::size_t i = 0; i < expected.size(); ++i)
      if (expected[i] != got[i]) problems.push_back("position " + std::to_string(i) + " is '" + got[i] +
                                                    "', expected '" + expected[i] + "'");
  }
  std::string msg = "feature schema mismatch:";
  for (const auto& p : problems) msg += " " + p + ";";
  fail<DataError>(msg);
}

namespace detail {

inline Matrix project_columns(const Matrix& x, std::span<const std::size_t> cols) {
  Matrix out(x.rows(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = x.col(static_cast<Index>(cols[c]));
  return out;
}

inline void require_trainable(const LabeledDataset& train, const char* what) {
  require<DataError>(train.has_labels(), what, ": training data has no labels");
  train.require_clean();
  const auto pos = train.positives();
  require<DataError>(pos > 0 && pos < train.rows(), what, ": training data must contain both classes (", pos,
                     " positives of ", train.rows(), ")");
}

inline void require_compatible(const LabeledDataset& train, const LabeledDataset& valid) {
  if (valid.rows() == 0) return;
  check_schema(train.schema.names(), valid.schema);
  require<DataError>(valid.has_labels(), "validation data has no labels");
  valid.require_clean();
}

}  // namespace detail

// --- fitting -------------------------------------------------------------------

inline TrainedModel fit_gbdt(const LabeledDataset& train, const LabeledDataset& valid, GbdtParams params,
                             std::optional<FocalParams> focal = std::nullopt) {
  detail::require_trainable(train, "fit_gbdt");
  detail::require_compatible(train, valid);
  if (focal) params.objective = GbdtObjective::focal;
  require(params.objective == GbdtObjective::logloss || params.objective == GbdtObjective::focal,
          "base GBDT learners use the logloss or focal objective");
  TrainedModel m;
  m.kind = focal ? LearnerKind::gbdt_focal : LearnerKind::gbdt;
  m.feature_names = train.schema.names();
  auto model = fit_gbdt_matrix(train.features, train.labels, valid.features, valid.labels, params, focal);
  m.meta.params = params;
  if (focal) m.meta.params["focal"] = *focal;
  m.meta.valid_score = model.best_valid_loss;
  m.meta.rounds_used = static_cast<int>(model.trees.size());
  m.body = std::move(model);
  return m;
}

/// GBDT on the columns named in `mask`; predict applies the same projection.
inline TrainedModel fit_subset(const LabeledDataset& train, const LabeledDataset& valid,
                               const std::vector<std::string>& mask, const GbdtParams& inner,
                               std::optional<FocalParams> focal = std::nullopt) {
  require(!mask.empty(), "feature subset mask is empty");
  std::vector<std::size_t> cols;
  for (const auto& name : mask) {
    const auto idx = train.schema.find(name);
    require(idx.has_value(), "feature subset references unknown column '", name, "'");
    require(std::find(cols.begin(), cols.end(), *idx) == cols.end(), "feature subset lists '", name, "' twice");
    cols.push_back(*idx);
  }
  detail::require_trainable(train, "fit_subset");
  detail::require_compatible(train, valid);
  GbdtParams params = inner;
  if (focal) params.objective = GbdtObjective::focal;
  const Matrix xt = detail::project_columns(train.features, cols);
  const Matrix xv = detail::project_columns(valid.features, cols);
  TrainedModel m;
  m.kind = LearnerKind::subset;
  m.feature_names = train.schema.names();
  m.mask = cols;
  auto model = fit_gbdt_matrix(xt, train.labels, xv, valid.labels, params, focal);
  m.meta.params = params;
  m.meta.params["mask"] = mask;
  m.meta.valid_score = model.best_valid_loss;
  m.meta.rounds_used = static_cast<int>(model.trees.size());
  m.body = std::move(model);
  return m;
}

inline TrainedModel fit_mlp(const LabeledDataset& train, const LabeledDataset& valid, const MlpParams& params) {
  params.validate();
  detail::require_trainable(train, "fit_mlp");
  detail::require_compatible(train, valid);
  std::mt19937_64 rng(params.seed);
  MlpNet net = MlpNet::make(train.features.cols(), params.hidden_sizes, rng);
  const auto report = fit_network(net, train.features, train.labels, valid.features, valid.labels, params.train_config());
  TrainedModel m;
  m.kind = LearnerKind::mlp;
  m.feature_names = train.schema.names();
  m.meta.params = {{"hidden_sizes", params.hidden_sizes}, {"learning_rate", params.learning_rate},
                   {"epochs", params.epochs}, {"batch_size", params.batch_size}, {"l2", params.l2},
                   {"class_weight_pos", report.class_weight_pos},
                   {"early_stopping_rounds", params.early_stopping_rounds}, {"seed", params.seed}};
  m.meta.valid_score = report.best_valid_loss;
  m.meta.rounds_used = report.best_epoch;
  m.body = std::move(net);
  return m;
}

inline TrainedModel fit_fm(const LabeledDataset& train, const LabeledDataset& valid, const FmParams& params) {
  params.validate();
  detail::require_trainable(train, "fit_fm");
  detail::require_compatible(train, valid);
  std::mt19937_64 rng(params.seed);
  FmNet net = FmNet::make(train.features.cols(), params.k, params.deep_hidden_sizes, rng);
  const auto report = fit_network(net, train.features, train.labels, valid.features, valid.labels, params.train_config());
  TrainedModel m;
  m.kind = LearnerKind::fm;
  m.feature_names = train.schema.names();
  m.meta.params = {{"k", params.k}, {"deep_hidden_sizes", params.deep_hidden_sizes},
                   {"learning_rate", params.learning_rate}, {"epochs", params.epochs},
                   {"batch_size", params.batch_size}, {"l2", params.l2},
                   {"class_weight_pos", report.class_weight_pos},
                   {"early_stopping_rounds", params.early_stopping_rounds}, {"seed", params.seed}};
  m.meta.valid_score = report.best_valid_loss;
  m.meta.rounds_used = report.best_epoch;
  m.body = std::move(net);
  return m;
}

/// Prior-only model emitting a fixed probability.
inline TrainedModel make_constant_model(std::vector<std::string> feature_names, double probability) {
  require(probability >= 0.0 && probability <= 1.0, "constant probability must lie in [0, 1]");
  TrainedModel m;
  m.kind = LearnerKind::constant;
  m.feature_names = std::move(feature_names);
  m.meta.params = {{"value", probability}};
  m.body = probability;
  return m;
}

// --- prediction ------------------------------------------------------------------

/// Probabilities in [0, 1] for every row of `x`, whose columns follow the
/// model's training schema.
inline Vector predict_matrix(const TrainedModel& model, const Matrix& x) {
  require<DataError>(static_cast<std::size_t>(x.cols()) == model.feature_names.size(), "model expects ",
                     model.feature_names.size(), " features, got ", x.cols());
  if (x.rows() == 0) return Vector(0);
  require<DataError>(x.allFinite(), "prediction inputs contain non-finite values");
  const Matrix projected = model.mask.empty() ? Matrix() : detail::project_columns(x, model.mask);
  const Matrix& input = model.mask.empty() ? x : projected;
  return std::visit(
      [&](const auto& body) -> Vector {
        using T = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<T, GbdtModel>) {
          Vector raw = body.raw_scores(input);
          for (Index i = 0; i < raw.size(); ++i) raw[i] = std::clamp(body.transform(raw[i]), 0.0, 1.0);
          return raw;
        } else if constexpr (std::is_same_v<T, double>) {
          return Vector::Constant(input.rows(), body);
        } else {
          return predict_proba(body, input);
        }
      },
      model.body);
}

inline Vector predict(const TrainedModel& model, const LabeledDataset& data) {
  check_schema(model.feature_names, data.schema);
  if (data.rows() == 0) return Vector(0);
  data.require_clean();
  return predict_matrix(model, data.features);
}

// --- learner configurations --------------------------------------------------------

/// One entry of the base-learner list: which family to fit and with what settings.
struct LearnerSpec {
  std::string name;
  LearnerKind kind = LearnerKind::gbdt;
  GbdtParams gbdt;
  FocalParams focal;
  MlpParams mlp;
  FmParams fm;
  std::vector<std::string> mask;           // subset: explicit column names
  std::vector<std::string> mask_prefixes;  // subset: columns whose name starts with any prefix
  double constant_value = 0.5;

  /// Column names selected by `mask` / `mask_prefixes` against a schema.
  std::vector<std::string> resolve_mask(const ColumnSchema& schema) const {
    std::vector<std::string> out = mask;
    for (const auto& c : schema.columns)
      for (const auto& p : mask_prefixes)
        if (c.name.rfind(p, 0) == 0 && std::find(out.begin(), out.end(), c.name) == out.end()) {
          out.push_back(c.name);
          break;
        }
    return out;
  }

  /// Same spec with every seed shifted by `offset`.
  LearnerSpec reseeded(std::uint64_t offset) const {
    LearnerSpec s = *this;
    s.gbdt.seed += offset;
    s.mlp.seed += offset;
    s.fm.seed += offset;
    return s;
  }
};

inline TrainedModel fit_learner(const LearnerSpec& spec, const LabeledDataset& train, const LabeledDataset& valid) {
  switch (spec.kind) {
    case LearnerKind::gbdt: {
      GbdtParams p = spec.gbdt;
      p.objective = GbdtObjective::logloss;
      return fit_gbdt(train, valid, p);
    }
    case LearnerKind::gbdt_focal: return fit_gbdt(train, valid, spec.gbdt, spec.focal);
    case LearnerKind::mlp: return fit_mlp(train, valid, spec.mlp);
    case LearnerKind::fm: return fit_fm(train, valid, spec.fm);
    case LearnerKind::subset: {
      GbdtParams p = spec.gbdt;
      p.objective = GbdtObjective::logloss;
      return fit_subset(train, valid, spec.resolve_mask(train.schema), p);
    }
    case LearnerKind::constant: return make_constant_model(train.schema.names(), spec.constant_value);
  }
  fail<UsageError>("unhandled learner kind");
}

/// Fits `spec` on `train`, carving a stratified `valid_fraction` of it for early
/// stopping.
inline TrainedModel fit_learner_with_carve(const LearnerSpec& spec, const LabeledDataset& train,
                                           double valid_fraction, std::uint64_t seed) {
  require<DataError>(train.has_labels(), "training data has no labels");
  const auto carve = stratified_carve(train.labels, valid_fraction, seed);
  return fit_learner(spec, subset_rows(train, carve.first), subset_rows(train, carve.second));
}

// --- JSON --------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const MlpParams& p) {
  j = {{"hidden_sizes", p.hidden_sizes}, {"learning_rate", p.learning_rate}, {"epochs", p.epochs},
       {"batch_size", p.batch_size}, {"l2", p.l2}, {"early_stopping_rounds", p.early_stopping_rounds},
       {"seed", p.seed}};
  if (p.class_weight_pos) j["class_weight_pos"] = *p.class_weight_pos;
}

inline void from_json(const nlohmann::json& j, MlpParams& p) {
  p.hidden_sizes = j.value("hidden_sizes", p.hidden_sizes);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.l2 = j.value("l2", p.l2);
  p.early_stopping_rounds = j.value("early_stopping_rounds", p.early_stopping_rounds);
  p.seed = j.value("seed", p.seed);
  if (j.contains("class_weight_pos") && !j.at("class_weight_pos").is_null())
    p.class_weight_pos = j.at("class_weight_pos").get<double>();
}

inline void to_json(nlohmann::json& j, const FmParams& p) {
  j = {{"k", p.k}, {"deep_hidden_sizes", p.deep_hidden_sizes}, {"learning_rate", p.learning_rate},
       {"epochs", p.epochs}, {"batch_size", p.batch_size}, {"l2", p.l2},
       {"early_stopping_rounds", p.early_stopping_rounds}, {"seed", p.seed}};
  if (p.class_weight_pos) j["class_weight_pos"] = *p.class_weight_pos;
}

inline void from_json(const nlohmann::json& j, FmParams& p) {
  p.k = j.value("k", p.k);
  p.deep_hidden_sizes = j.value("deep_hidden_sizes", p.deep_hidden_sizes);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.epochs = j.value("epochs", p.epochs);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.l2 = j.value("l2", p.l2);
  p.early_stopping_rounds = j.value("early_stopping_rounds", p.early_stopping_rounds);
  p.seed = j.value("seed", p.seed);
  if (j.contains("class_weight_pos") && !j.at("class_weight_pos").is_null())
    p.class_weight_pos = j.at("class_weight_pos").get<double>();
}

inline void to_json(nlohmann::json& j, const LearnerSpec& s) {
  j = {{"name", s.name}, {"kind", to_string(s.kind)}};
  switch (s.kind) {
    case LearnerKind::gbdt: j["gbdt"] = s.gbdt; break;
    case LearnerKind::gbdt_focal: j["gbdt"] = s.gbdt; j["focal"] = s.focal; break;
    case LearnerKind::mlp: j["mlp"] = s.mlp; break;
    case LearnerKind::fm: j["fm"] = s.fm; break;
    case LearnerKind::subset:
      j["gbdt"] = s.gbdt;
      j["mask"] = s.mask;
      j["mask_prefixes"] = s.mask_prefixes;
      break;
    case LearnerKind::constant: j["value"] = s.constant_value; break;
  }
}

inline void from_json(const nlohmann::json& j, LearnerSpec& s) {
  s.kind = parse_learner_kind(j.at("kind").get<std::string>());
  s.name = j.value("name", std::string(to_string(s.kind)));
  if (j.contains("gbdt")) s.gbdt = j.at("gbdt").get<GbdtParams>();
  if (j.contains("focal")) s.focal = j.at("focal").get<FocalParams>();
  if (j.contains("mlp")) s.mlp = j.at("mlp").get<MlpParams>();
  if (j.contains("fm")) s.fm = j.at("fm").get<FmParams>();
  s.mask = j.value("mask", s.mask);
  s.mask_prefixes = j.value("mask_prefixes", s.mask_prefixes);
  s.constant_value = j.value("value", s.constant_value);
  if (s.kind == LearnerKind::subset)
    require(!s.mask.empty() || !s.mask_prefixes.empty(), "subset learner '", s.name, "' needs a mask");
}

inline constexpr std::string_view kModelFormat = "remedi-model";
inline constexpr int kModelFormatVersion = 1;

/// Versioned container: {"format", "version", "type": "base_learner", "kind",
/// "feature_names", "mask", "meta", "body"}.
inline nlohmann::json model_to_json(const TrainedModel& m) {
  nlohmann::json body = std::visit(
      [](const auto& b) -> nlohmann::json {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, GbdtModel>) return gbdt_to_json(b);
        else if constexpr (std::is_same_v<T, MlpNet>) return {{"stack", stack_to_json(b.stack)}};
        else if constexpr (std::is_same_v<T, FmNet>) {
          nlohmann::json j{{"w0", matrix_to_json(b.w0)}, {"w", matrix_to_json(b.w)}, {"v", matrix_to_json(b.v)}};
          if (b.deep) j["deep"] = stack_to_json(*b.deep);
          return j;
        } else return {{"value", b}};
      },
      m.body);
  return {{"format", kModelFormat},
          {"version", kModelFormatVersion},
          {"type", "base_learner"},
          {"kind", to_string(m.kind)},
          {"feature_names", m.feature_names},
          {"mask", m.mask},
          {"meta", {{"params", m.meta.params},
                    {"valid_score", std::isfinite(m.meta.valid_score) ? nlohmann::json(m.meta.valid_score) : nlohmann::json()},
                    {"rounds_used", m.meta.rounds_used}}},
          {"body", body}};
}

inline void check_container(const nlohmann::json& j, std::string_view type) {
  require<DataError>(j.is_object() && j.value("format", std::string()) == kModelFormat, "not a remedi model file");
  const int version = j.value("version", 0);
  require<DataError>(version == kModelFormatVersion, "unsupported model format version ", version);
  require<DataError>(j.value("type", std::string()) == type, "expected a '", type, "' model, found '",
                     j.value("type", std::string()), "'");
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
  check_container(j, "base_learner");
  TrainedModel m;
  m.kind = parse_learner_kind(j.at("kind").get<std::string>());
  m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
  m.mask = j.at("mask").get<std::vector<std::size_t>>();
  for (auto i : m.mask) require<DataError>(i < m.feature_names.size(), "model mask index out of range");
  const auto& meta = j.at("meta");
  m.meta.params = meta.at("params");
  if (!meta.at("valid_score").is_null()) m.meta.valid_score = meta.at("valid_score").get<double>();
  m.meta.rounds_used = meta.at("rounds_used").get<int>();
  const auto& b = j.at("body");
  const std::size_t inputs = m.mask.empty() ? m.feature_names.size() : m.mask.size();
  switch (m.kind) {
    case LearnerKind::gbdt:
    case LearnerKind::gbdt_focal:
    case LearnerKind::subset: {
      auto g = gbdt_from_json(b);
      require<DataError>(g.n_features == inputs, "GBDT body expects ", g.n_features, " inputs, model declares ", inputs);
      m.body = std::move(g);
      break;
    }
    case LearnerKind::mlp: {
      MlpNet net{stack_from_json(b.at("stack"))};
      require<DataError>(static_cast<std::size_t>(net.in_size()) == inputs, "MLP input size mismatch");
      m.body = std::move(net);
      break;
    }
    case LearnerKind::fm: {
      FmNet net;
      net.w0 = matrix_from_json(b.at("w0"));
      net.w = matrix_from_json(b.at("w"));
      net.v = matrix_from_json(b.at("v"));
      if (b.contains("deep")) net.deep = stack_from_json(b.at("deep"));
      require<DataError>(static_cast<std::size_t>(net.w.rows()) == inputs && net.v.rows() == net.w.rows(),
                         "FM input size mismatch");
      m.body = std::move(net);
      break;
    }
    case LearnerKind::constant: m.body = b.at("value").get<double>(); break;
  }
  return m;
}

inline void write_json_file(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << j.dump() << '\n';
  require<DataError>(static_cast<bool>(out), "write failed for ", path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<DataError>(static_cast<bool>(in), "cannot open ", path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(path.string(), ": invalid JSON: ", e.what());
  }
}

inline void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  write_json_file(model_to_json(m), path);
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  try {
    return model_from_json(read_json_file(path));
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(path.string(), ": malformed model file: ", e.what());
  }
}

}  // namespace remedi
