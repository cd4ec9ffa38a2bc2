// Tabular datasets: synthetic extreme-imbalance generator, CSV I/O,
// preprocessing (impute / cap / scale) and random splitting.
#pragma once

#include "remedi/common.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <unordered_map>

namespace remedi {

enum class ColumnKind { numeric, count, binary };

inline std::string_view to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::numeric: return "numeric";
    case ColumnKind::count: return "count";
    case ColumnKind::binary: return "binary";
  }
  return "numeric";
}

inline ColumnKind parse_column_kind(std::string_view s) {
  if (s == "numeric") return ColumnKind::numeric;
  if (s == "count") return ColumnKind::count;
  if (s == "binary") return ColumnKind::binary;
  fail<UsageError>("unknown column kind '", s, "'");
}

struct Column {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  bool operator==(const Column&) const = default;
};

struct ColumnSchema {
  std::vector<Column> columns;  // feature columns, in matrix order
  std::string label_column = "label";
  std::string id_column = "id";

  std::size_t size() const { return columns.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(columns.size());
    for (const auto& c : columns) out.push_back(c.name);
    return out;
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i].name == name) return i;
    return std::nullopt;
  }

  void validate() const {
    require<DataError>(!columns.empty(), "schema needs at least one feature column");
    std::set<std::string> seen;
    for (const auto& c : columns) {
      require<DataError>(!c.name.empty(), "empty column name in schema");
      require<DataError>(c.name != label_column, "label column '", label_column, "' listed as a feature");
      require<DataError>(c.name != id_column, "id column '", id_column, "' listed as a feature");
      require<DataError>(seen.insert(c.name).second, "duplicate column name '", c.name, "'");
    }
  }

  bool operator==(const ColumnSchema&) const = default;
};

/// Feature matrix with row ids, an optional 0/1 label vector and a per-cell
/// missing mask (empty mask = nothing missing).
struct LabeledDataset {
  std::vector<std::string> ids;
  Matrix features;
  std::vector<double> labels;  // empty when unlabeled
  std::vector<std::uint8_t> missing;  // row-major N*d, or empty
  ColumnSchema schema;

  std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(features.cols()); }
  bool has_labels() const { return !labels.empty(); }
  bool has_missing() const {
    return std::any_of(missing.begin(), missing.end(), [](std::uint8_t m) { return m != 0; });
  }
  bool is_missing(std::size_t r, std::size_t c) const {
    return !missing.empty() && missing[r * cols() + c] != 0;
  }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1.0));
  }

  void validate() const {
    schema.validate();
    require<DataError>(ids.size() == rows(), "id count ", ids.size(), " != row count ", rows());
    require<DataError>(cols() == schema.size(), "matrix has ", cols(), " columns, schema ", schema.size());
    require<DataError>(labels.empty() || labels.size() == rows(), "label count ", labels.size(), " != row count ", rows());
    require<DataError>(missing.empty() || missing.size() == rows() * cols(), "missing mask has wrong size");
    for (double y : labels) require<DataError>(y == 0.0 || y == 1.0, "non-binary label ", y);
  }

  /// Throws unless every cell is present and finite.
  void require_clean() const {
    require<DataError>(!has_missing(), "dataset still contains missing cells; preprocess it first");
    require<DataError>(features.allFinite(), "dataset contains non-finite feature values");
  }
};

inline LabeledDataset subset_rows(const LabeledDataset& d, std::span<const std::size_t> rows) {
  LabeledDataset out;
  out.schema = d.schema;
  out.ids = take(d.ids, rows);
  out.features = take_rows(d.features, rows);
  if (d.has_labels()) out.labels = take(d.labels, rows);
  if (!d.missing.empty()) {
    const std::size_t c = d.cols();
    out.missing.resize(rows.size() * c);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy_n(d.missing.begin() + static_cast<std::ptrdiff_t>(rows[r] * c), c,
                  out.missing.begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  return out;
}

// --- synthetic generation --------------------------------------------------

struct SynthConfig {
  std::size_t n_rows = 200000;
  std::size_t n_features = 40;
  double positive_rate = 0.005;
  double intent_signal_strength = 1.0;
  std::size_t noise_features = 10;
  std::uint64_t seed = 7;

  void validate() const {
    require(n_rows > 0, "n_rows must be positive");
    require(n_features > 0, "n_features must be positive");
    require(positive_rate > 0.0 && positive_rate < 0.5, "positive_rate must lie in (0, 0.5), got ", positive_rate);
    require(static_cast<double>(n_rows) * positive_rate >= 10.0,
            "n_rows * positive_rate = ", static_cast<double>(n_rows) * positive_rate,
            " < 10: too few positives to learn");
    require(intent_signal_strength >= 0.0 && std::isfinite(intent_signal_strength),
            "intent_signal_strength must be nonnegative");
    require(noise_features < n_features, "noise_features (", noise_features, ") must be < n_features (", n_features, ")");
  }
};

/// Parameters of the latent-intent generator. Row features depend on a latent
/// z ~ N(0,1); the label is Bernoulli(sigmoid(label_slope*z + label_intercept)).
struct GenerativeModel {
  struct Feature {
    ColumnKind kind;
    double intercept;
    double loading;  // 0 for noise features
  };
  std::vector<Feature> features;
  double label_slope = 0.0;
  double label_intercept = 0.0;

  /// Log-likelihood of one observed feature given z.
  static double feature_log_lik(const Feature& f, double x, double z) {
    const double eta = f.intercept + f.loading * z;
    switch (f.kind) {
      case ColumnKind::numeric: return -0.5 * (x - eta) * (x - eta);
      case ColumnKind::count: return x * eta - std::exp(eta);
      case ColumnKind::binary: return x > 0.5 ? -softplus(-eta) : -softplus(eta);
    }
    return 0.0;
  }

  /// Bayes-optimal P(y = 1 | x), by quadrature over the latent intent.
  double posterior_positive(std::span<const double> row) const {
    constexpr int kGrid = 241;
    constexpr double kLo = -6.0, kHi = 6.0;
    std::array<double, kGrid> logw{};
    double best = -std::numeric_limits<double>::infinity();
    for (int g = 0; g < kGrid; ++g) {
      const double z = kLo + (kHi - kLo) * g / (kGrid - 1);
      double lw = -0.5 * z * z;
      for (std::size_t j = 0; j < features.size(); ++j)
        if (features[j].loading != 0.0) lw += feature_log_lik(features[j], row[j], z);
      logw[static_cast<std::size_t>(g)] = lw;
      best = std::max(best, lw);
    }
    double num = 0.0, den = 0.0;
    for (int g = 0; g < kGrid; ++g) {
      const double z = kLo + (kHi - kLo) * g / (kGrid - 1);
      const double w = std::exp(logw[static_cast<std::size_t>(g)] - best);
      num += w * sigmoid(label_slope * z + label_intercept);
      den += w;
    }
    return num / den;
  }
};

struct SyntheticData {
  LabeledDataset data;
  GenerativeModel truth;
  std::vector<double> latent;
};

/// Column layout: informative features cycle count, numeric, count, binary;
/// the last `noise_features` columns carry no intent signal.
inline SyntheticData generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.n_rows;
  const std::size_t d = cfg.n_features;
  const std::size_t n_inf = d - cfg.noise_features;

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xffffffffu),
                    static_cast<std::uint32_t>(cfg.seed >> 32), 0x5eedu};
  std::array<std::uint64_t, 4> seeds{};
  {
    std::array<std::uint32_t, 8> raw{};
    seq.generate(raw.begin(), raw.end());
    for (std::size_t i = 0; i < 4; ++i) seeds[i] = (std::uint64_t{raw[2 * i]} << 32) | raw[2 * i + 1];
  }
  std::mt19937_64 param_rng(seeds[0]), latent_rng(seeds[1]), feature_rng(seeds[2]), label_rng(seeds[3]);

  SyntheticData out;
  GenerativeModel& gm = out.truth;
  gm.label_slope = 2.5;
  constexpr std::array<ColumnKind, 4> kCycle{ColumnKind::count, ColumnKind::numeric, ColumnKind::count,
                                             ColumnKind::binary};
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ColumnSchema schema;
  for (std::size_t j = 0; j < d; ++j) {
    const bool informative = j < n_inf;
    const ColumnKind kind = kCycle[j % kCycle.size()];
    GenerativeModel::Feature f{kind, 0.0, 0.0};
    const double strength = 0.08 + 0.22 * unif(param_rng);
    switch (kind) {
      case ColumnKind::count: f.intercept = -0.5 + 1.5 * unif(param_rng); break;
      case ColumnKind::numeric: f.intercept = 0.0; break;
      case ColumnKind::binary: f.intercept = -1.5 + unif(param_rng); break;
    }
    if (informative) f.loading = cfg.intent_signal_strength * strength;
    gm.features.push_back(f);
    char name[32];
    const char* prefix = !informative ? "noise" : kind == ColumnKind::count ? "cnt" : kind == ColumnKind::numeric ? "num" : "flag";
    std::snprintf(name, sizeof name, "%s_%02zu", prefix, j);
    schema.columns.push_back({name, kind});
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  out.latent.resize(n);
  for (auto& z : out.latent) z = normal(latent_rng);

  // Calibrate the intercept so the expected positive rate matches the config.
  double lo = -60.0, hi = 60.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double mean = 0.0;
    for (double z : out.latent) mean += sigmoid(gm.label_slope * z + mid);
    mean /= static_cast<double>(n);
    (mean > cfg.positive_rate ? hi : lo) = mid;
  }
  gm.label_intercept = 0.5 * (lo + hi);

  LabeledDataset& data = out.data;
  data.schema = std::move(schema);
  data.features.resize(static_cast<Index>(n), static_cast<Index>(d));
  data.ids.resize(n);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    data.ids[i] = std::to_string(i);
    const double z = out.latent[i];
    for (std::size_t j = 0; j < d; ++j) {
      const auto& f = gm.features[j];
      const double eta = f.intercept + f.loading * z;
      double x = 0.0;
      switch (f.kind) {
        case ColumnKind::numeric: x = eta + normal(feature_rng); break;
        case ColumnKind::count: x = static_cast<double>(std::poisson_distribution<int>(std::exp(eta))(feature_rng)); break;
        case ColumnKind::binary: x = unif(feature_rng) < sigmoid(eta) ? 1.0 : 0.0; break;
      }
      data.features(static_cast<Index>(i), static_cast<Index>(j)) = x;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    data.labels[i] = unif(label_rng) < sigmoid(gm.label_slope * out.latent[i] + gm.label_intercept) ? 1.0 : 0.0;
  return out;
}

// --- CSV -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    // from_chars rejects a leading '+'; accept it for hand-written files.
    if (s.front() == '+') return parse_double(s.substr(1));
    throw DataError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Builds a schema from a CSV header: every column other than the id/label is a
/// numeric feature.
inline ColumnSchema infer_csv_schema(const std::filesystem::path& path, std::string id_column = "id",
                                     std::string label_column = "label") {
  std::ifstream in(path);
  require<DataError>(static_cast<bool>(in), "cannot open ", path.string());
  std::string header;
  require<DataError>(static_cast<bool>(std::getline(in, header)), path.string(), ": missing header row");
  ColumnSchema schema;
  schema.id_column = std::move(id_column);
  schema.label_column = std::move(label_column);
  for (auto tok : detail::split_csv_line(header)) {
    const std::string name(detail::trim(tok));
    if (name == schema.id_column || name == schema.label_column) continue;
    schema.columns.push_back({name, ColumnKind::numeric});
  }
  schema.validate();
  return schema;
}

/// Reads a CSV with a header row. Feature columns come out in schema order;
/// empty cells are marked missing.
inline LabeledDataset load_csv(const std::filesystem::path& path, const ColumnSchema& schema) {
  schema.validate();
  std::ifstream in(path);
  require<DataError>(static_cast<bool>(in), "cannot open ", path.string());
  std::string line;
  require<DataError>(static_cast<bool>(std::getline(in, line)), path.string(), ": missing header row");

  const auto header = detail::split_csv_line(line);
  std::optional<std::size_t> id_pos, label_pos;
  std::vector<std::optional<std::size_t>> feature_src(schema.size());
  std::set<std::string> header_seen;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name(detail::trim(header[c]));
    require<DataError>(header_seen.insert(name).second, path.string(), ": duplicate header column '", name, "'");
    if (name == schema.id_column) {
      id_pos = c;
    } else if (name == schema.label_column) {
      label_pos = c;
    } else if (auto f = schema.find(name)) {
      feature_src[*f] = c;
    } else {
      fail(path.string(), ": unknown column '", name, "'");
    }
  }
  require<DataError>(id_pos.has_value(), path.string(), ": header lacks id column '", schema.id_column, "'");
  for (std::size_t f = 0; f < schema.size(); ++f)
    require<DataError>(feature_src[f].has_value(), path.string(), ": header lacks feature column '",
                       schema.columns[f].name, "'");

  std::vector<std::string> ids;
  std::vector<double> values;
  std::vector<std::uint8_t> missing;
  std::vector<double> labels;
  const std::size_t d = schema.size();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    require<DataError>(cells.size() == header.size(), path.string(), ":", line_no, ": expected ", header.size(),
                       " fields, found ", cells.size());
    ids.emplace_back(detail::trim(cells[*id_pos]));
    for (std::size_t f = 0; f < d; ++f) {
      std::optional<double> v;
      try {
        v = detail::parse_double(cells[*feature_src[f]]);
      } catch (const DataError& e) {
        fail(path.string(), ":", line_no, ": column '", schema.columns[f].name, "': ", e.what());
      }
      values.push_back(v.value_or(0.0));
      missing.push_back(v ? 0 : 1);
    }
    if (label_pos) {
      const auto cell = detail::trim(cells[*label_pos]);
      require<DataError>(cell == "0" || cell == "1", path.string(), ":", line_no, ": label must be 0 or 1, got '",
                         std::string(cell), "'");
      labels.push_back(cell == "1" ? 1.0 : 0.0);
    }
  }

  LabeledDataset out;
  out.schema = schema;
  out.ids = std::move(ids);
  const std::size_t n = out.ids.size();
  out.features = Matrix(static_cast<Index>(n), static_cast<Index>(d));
  std::copy(values.begin(), values.end(), out.features.data());
  out.labels = std::move(labels);
  if (std::any_of(missing.begin(), missing.end(), [](auto m) { return m != 0; })) out.missing = std::move(missing);
  return out;
}

/// Writes `id, features..., [label]`; doubles use 17 significant digits so a
/// reload reproduces every value exactly.
inline void save_csv(const LabeledDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << data.schema.id_column;
  for (const auto& c : data.schema.columns) out << ',' << c.name;
  if (data.has_labels()) out << ',' << data.schema.label_column;
  out << '\n';
  for (std::size_t r = 0; r < data.rows(); ++r) {
    out << data.ids[r];
    for (std::size_t c = 0; c < data.cols(); ++c) {
      out << ',';
      if (!data.is_missing(r, c)) out << detail::format_double(data.features(static_cast<Index>(r), static_cast<Index>(c)));
    }
    if (data.has_labels()) out << ',' << (data.labels[r] == 1.0 ? '1' : '0');
    out << '\n';
  }
  require<DataError>(static_cast<bool>(out), "write failed for ", path.string());
}

// --- preprocessing ---------------------------------------------------------

struct PreprocessSpec {
  double cap_low = 1.0;    // percentile, nearest-rank
  double cap_high = 99.0;
  std::vector<ColumnKind> scale_kinds{ColumnKind::numeric, ColumnKind::count};

  bool scales(ColumnKind k) const {
    return std::find(scale_kinds.begin(), scale_kinds.end(), k) != scale_kinds.end();
  }
  void validate() const {
    require(cap_low >= 0.0 && cap_high <= 100.0 && cap_low <= cap_high,
            "cap percentiles must satisfy 0 <= low <= high <= 100");
  }
};

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value (p = 0 gives the minimum).
inline double nearest_rank_percentile(std::vector<double> sorted_or_not, double p) {
  require<DataError>(!sorted_or_not.empty(), "percentile of empty sequence");
  std::sort(sorted_or_not.begin(), sorted_or_not.end());
  const auto n = static_cast<double>(sorted_or_not.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, sorted_or_not.size());
  return sorted_or_not[rank - 1];
}

struct FittedPreprocessor {
  struct ColumnTransform {
    std::string name;
    ColumnKind kind = ColumnKind::numeric;
    double impute = 0.0;
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
    bool log1p = false;
    bool scale = false;
    double mean = 0.0;
    double stddev = 1.0;
  };
  std::vector<ColumnTransform> columns;

  LabeledDataset apply(const LabeledDataset& data) const {
    require<DataError>(data.cols() == columns.size(), "preprocessor expects ", columns.size(), " columns, data has ",
                       data.cols());
    for (std::size_t c = 0; c < columns.size(); ++c)
      require<DataError>(data.schema.columns[c].name == columns[c].name, "column ", c, " is '",
                         data.schema.columns[c].name, "', preprocessor expects '", columns[c].name, "'");
    LabeledDataset out = data;
    out.missing.clear();
    for (std::size_t r = 0; r < data.rows(); ++r) {
      for (std::size_t c = 0; c < columns.size(); ++c) {
        const auto& t = columns[c];
        double x = data.is_missing(r, c) ? t.impute : data.features(static_cast<Index>(r), static_cast<Index>(c));
        require<DataError>(std::isfinite(x), "non-finite value in column '", t.name, "' row ", data.ids[r]);
        x = std::clamp(x, t.lower, t.upper);
        if (t.log1p) x = std::log1p(std::max(x, 0.0));
        if (t.scale) x = (x - t.mean) / t.stddev;
        out.features(static_cast<Index>(r), static_cast<Index>(c)) = x;
      }
    }
    return out;
  }
};

/// Fits imputation / capping / scaling on `train` and returns the transformed
/// training set alongside the fitted preprocessor.
inline std::pair<LabeledDataset, FittedPreprocessor> fit_apply_preprocess(const LabeledDataset& train,
                                                                          const PreprocessSpec& spec = {}) {
  spec.validate();
  require<DataError>(train.rows() >= 2, "preprocessing needs at least 2 training rows");
  FittedPreprocessor pre;
  const std::size_t n = train.rows();
  for (std::size_t c = 0; c < train.cols(); ++c) {
    FittedPreprocessor::ColumnTransform t;
    t.name = train.schema.columns[c].name;
    t.kind = train.schema.columns[c].kind;
    std::vector<double> present;
    present.reserve(n);
    for (std::size_t r = 0; r < n; ++r)
      if (!train.is_missing(r, c)) present.push_back(train.features(static_cast<Index>(r), static_cast<Index>(c)));
    if (present.empty()) {
      Log::warn("column '", t.name, "' is entirely missing; imputing 0");
      t.impute = 0.0;
    } else {
      t.impute = median_of(present);
    }
    std::vector<double> col(n);
    for (std::size_t r = 0; r < n; ++r)
      col[r] = train.is_missing(r, c) ? t.impute : train.features(static_cast<Index>(r), static_cast<Index>(c));
    t.lower = nearest_rank_percentile(col, spec.cap_low);
    t.upper = nearest_rank_percentile(col, spec.cap_high);
    if (spec.scales(t.kind)) {
      t.log1p = t.kind == ColumnKind::count;
      t.scale = true;
      double sum = 0.0;
      for (double& x : col) {
        x = std::clamp(x, t.lower, t.upper);
        if (t.log1p) x = std::log1p(std::max(x, 0.0));
        sum += x;
      }
      t.mean = sum / static_cast<double>(n);
      double ss = 0.0;
      for (double x : col) ss += (x - t.mean) * (x - t.mean);
      t.stddev = std::sqrt(ss / static_cast<double>(n));
      if (!(t.stddev > 1e-12)) {
        Log::warn("column '", t.name, "' is constant on the training split; scaling by 1");
        t.stddev = 1.0;
      }
    }
    pre.columns.push_back(std::move(t));
  }
  return {pre.apply(train), std::move(pre)};
}

inline LabeledDataset apply_preprocess(const FittedPreprocessor& pre, const LabeledDataset& data) {
  return pre.apply(data);
}

// --- splitting -------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> first;
  std::vector<std::size_t> second;
};

/// Random partition: `fraction` of rows go to `first`. Each side keeps the
/// original row order.
inline SplitIndices split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction < 1.0, "split fraction must lie in (0, 1), got ", fraction);
  const auto n_first = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  require<DataError>(n_first > 0 && n_first < n, "split of ", n, " rows at fraction ", fraction,
                     " leaves one side empty");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitIndices out;
  out.first.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_first));
  out.second.assign(order.begin() + static_cast<std::ptrdiff_t>(n_first), order.end());
  std::sort(out.first.begin(), out.first.end());
  std::sort(out.second.begin(), out.second.end());
  return out;
}

inline std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& data, double fraction,
                                                       std::uint64_t seed) {
  const auto idx = split_indices(data.rows(), fraction, seed);
  return {subset_rows(data, idx.first), subset_rows(data, idx.second)};
}

/// Stratified hold-out carve used for early stopping: roughly `fraction` of each
/// class goes to `second`, at least one row of each class stays on each side when
/// the class has two or more rows.
inline SplitIndices stratified_carve(std::span<const double> labels, double fraction, std::uint64_t seed) {
  SplitIndices out;
  std::mt19937_64 rng(seed);
  for (double cls : {0.0, 1.0}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    auto n_hold = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    if (members.size() >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, members.size() - 1);
    else n_hold = 0;
    out.second.insert(out.second.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_hold));
    out.first.insert(out.first.end(), members.begin() + static_cast<std::ptrdiff_t>(n_hold), members.end());
  }
  std::sort(out.first.begin(), out.first.end());
  std::sort(out.second.begin(), out.second.end());
  return out;
}

// --- JSON --------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_rows", c.n_rows},
       {"n_features", c.n_features},
       {"positive_rate", c.positive_rate},
       {"intent_signal_strength", c.intent_signal_strength},
       {"noise_features", c.noise_features},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.n_rows = j.value("n_rows", c.n_rows);
  c.n_features = j.value("n_features", c.n_features);
  c.positive_rate = j.value("positive_rate", c.positive_rate);
  c.intent_signal_strength = j.value("intent_signal_strength", c.intent_signal_strength);
  c.noise_features = j.value("noise_features", c.noise_features);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

inline void to_json(nlohmann::json& j, const PreprocessSpec& p) {
  std::vector<std::string> kinds;
  for (auto k : p.scale_kinds) kinds.emplace_back(to_string(k));
  j = {{"cap_low", p.cap_low}, {"cap_high", p.cap_high}, {"scale_kinds", kinds}};
}

inline void from_json(const nlohmann::json& j, PreprocessSpec& p) {
  p.cap_low = j.value("cap_low", p.cap_low);
  p.cap_high = j.value("cap_high", p.cap_high);
  if (j.contains("scale_kinds")) {
    p.scale_kinds.clear();
    for (const auto& k : j.at("scale_kinds")) p.scale_kinds.push_back(parse_column_kind(k.get<std::string>()));
  }
  p.validate();
}

inline nlohmann::json preprocessor_to_json(const FittedPreprocessor& pre) {
  auto bound = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); };
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& t : pre.columns)
    cols.push_back({{"name", t.name},
                    {"kind", to_string(t.kind)},
                    {"impute", t.impute},
                    {"lower", bound(t.lower)},
                    {"upper", bound(t.upper)},
                    {"log1p", t.log1p},
                    {"scale", t.scale},
                    {"mean", t.mean},
                    {"stddev", t.stddev}});
  return {{"format", "remedi-preprocessor"}, {"version", 1}, {"columns", cols}};
}

inline FittedPreprocessor preprocessor_from_json(const nlohmann::json& j) {
  require<DataError>(j.value("format", std::string()) == "remedi-preprocessor" && j.value("version", 0) == 1,
                     "not a remedi preprocessor file (or unsupported version)");
  FittedPreprocessor pre;
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (const auto& c : j.at("columns")) {
    FittedPreprocessor::ColumnTransform t;
    t.name = c.at("name").get<std::string>();
    t.kind = parse_column_kind(c.at("kind").get<std::string>());
    t.impute = c.at("impute").get<double>();
    t.lower = c.at("lower").is_null() ? -inf : c.at("lower").get<double>();
    t.upper = c.at("upper").is_null() ? inf : c.at("upper").get<double>();
    t.log1p = c.at("log1p").get<bool>();
    t.scale = c.at("scale").get<bool>();
    t.mean = c.at("mean").get<double>();
    t.stddev = c.at("stddev").get<double>();
    require<DataError>(t.stddev > 0.0, "preprocessor column '", t.name, "' has nonpositive stddev");
    pre.columns.push_back(std::move(t));
  }
  return pre;
}

/// Schema a preprocessor was fitted on (kinds and names, default id/label columns).
inline ColumnSchema preprocessor_schema(const FittedPreprocessor& pre) {
  ColumnSchema s;
  for (const auto& t : pre.columns) s.columns.push_back({t.name, t.kind});
  return s;
}


// --- schema sidecar --------------------------------------------------------

inline nlohmann::json schema_to_json(const ColumnSchema& s) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : s.columns) cols.push_back({{"name", c.name}, {"kind", to_string(c.kind)}});
  return {{"id_column", s.id_column}, {"label_column", s.label_column}, {"columns", cols}};
}

inline ColumnSchema schema_from_json(const nlohmann::json& j) {
  ColumnSchema s;
  s.id_column = j.value("id_column", s.id_column);
  s.label_column = j.value("label_column", s.label_column);
  for (const auto& c : j.at("columns"))
    s.columns.push_back({c.at("name").get<std::string>(), parse_column_kind(c.at("kind").get<std::string>())});
  s.validate();
  return s;
}

/// `data.csv` -> `data.csv.schema.json`.
inline std::filesystem::path schema_sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".schema.json");
}

inline void save_csv_with_schema(const LabeledDataset& data, const std::filesystem::path& path) {
  save_csv(data, path);
  std::ofstream out(schema_sidecar_path(path));
  require<DataError>(static_cast<bool>(out), "cannot write ", schema_sidecar_path(path).string());
  out << schema_to_json(data.schema).dump(1) << '\n';
}

/// Loads a CSV using its schema sidecar when one exists; otherwise every
/// feature column is numeric.
inline LabeledDataset load_csv_auto(const std::filesystem::path& path) {
  const auto sidecar = schema_sidecar_path(path);
  if (!std::filesystem::exists(sidecar)) return load_csv(path, infer_csv_schema(path));
  std::ifstream in(sidecar);
  try {
    return load_csv(path, schema_from_json(nlohmann::json::parse(in)));
  } catch (const nlohmann::json::exception& e) {
    fail<DataError>(sidecar.string(), ": malformed schema file: ", e.what());
  }
}

}  // namespace remedi
