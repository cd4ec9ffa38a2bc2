// Out-of-fold base predictions and group-relative meta-features.
//
// For one sample with base predictions p_1..p_M the meta-feature vector is
//   raw(M) | mean, std, median, max, min | norm(M) | diff_mean(M) | rank(M) | range
// with std the population form, norm_j = (p_j - mean) / (std + eps),
// diff_mean_j = p_j - mean and rank 1 = highest prediction (ties: lower model
// index first). Length 4M + 6.
#pragma once

#include "remedi/dataset.hpp"
#include "remedi/learners.hpp"

#include <numeric>

namespace remedi {

inline constexpr double kDefaultEpsilon = 1e-8;

struct GroupStats {
  double mean = 0.0;
  double std = 0.0;
  double median = 0.0;
  double max = 0.0;
  double min = 0.0;
  double range = 0.0;
};

namespace detail {

inline void require_group(std::span<const double> p) {
  require<DataError>(p.size() >= 2, "group statistics need at least 2 model predictions, got ", p.size());
  for (double v : p) require<DataError>(v >= 0.0 && v <= 1.0, "model prediction outside [0, 1]: ", v);
}

}  // namespace detail

inline GroupStats group_stats(std::span<const double> p) {
  detail::require_group(p);
  GroupStats s;
  const auto m = static_cast<double>(p.size());
  s.mean = std::accumulate(p.begin(), p.end(), 0.0) / m;
  double ss = 0.0;
  for (double v : p) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / m);
  s.median = median_of({p.begin(), p.end()});
  const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
  s.min = *lo;
  s.max = *hi;
  s.range = s.max - s.min;
  return s;
}

struct RelativeFeatures {
  std::vector<double> norm;
  std::vector<double> diff_mean;
  std::vector<double> rank;  // 1 = highest
};

inline RelativeFeatures relative_features(std::span<const double> p, double epsilon = kDefaultEpsilon) {
  require(epsilon > 0.0, "epsilon must be positive");
  const GroupStats s = group_stats(p);
  const std::size_t m = p.size();
  RelativeFeatures r;
  r.norm.resize(m);
  r.diff_mean.resize(m);
  r.rank.resize(m);
  for (std::size_t j = 0; j < m; ++j) {
    r.diff_mean[j] = p[j] - s.mean;
    r.norm[j] = r.diff_mean[j] / (s.std + epsilon);
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  for (std::size_t pos = 0; pos < m; ++pos) r.rank[order[pos]] = static_cast<double>(pos + 1);
  return r;
}

/// Offsets of each block inside a flattened meta-feature vector.
struct MetaLayout {
  std::size_t models = 0;

  std::size_t size() const { return 4 * models + 6; }
  std::size_t raw() const { return 0; }
  std::size_t stats() const { return models; }  // mean, std, median, max, min
  std::size_t norm() const { return models + 5; }
  std::size_t diff_mean() const { return 2 * models + 5; }
  std::size_t rank() const { return 3 * models + 5; }
  std::size_t range() const { return 4 * models + 5; }

  std::vector<std::size_t> raw_indices() const {
    std::vector<std::size_t> out(models);
    std::iota(out.begin(), out.end(), raw());
    return out;
  }
  /// Everything except the raw block.
  std::vector<std::size_t> relative_indices() const {
    std::vector<std::size_t> out(size() - models);
    std::iota(out.begin(), out.end(), models);
    return out;
  }

  static MetaLayout from_size(std::size_t n) {
    require<DataError>(n >= 14 && (n - 6) % 4 == 0, "meta-feature length ", n, " is not 4M+6 with M >= 2");
    return {(n - 6) / 4};
  }
};

struct MetaFeatureVector {
  std::vector<double> raw;
  GroupStats stats;
  std::vector<double> norm;
  std::vector<double> diff_mean;
  std::vector<double> rank;

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(4 * raw.size() + 6);
    out.insert(out.end(), raw.begin(), raw.end());
    out.insert(out.end(), {stats.mean, stats.std, stats.median, stats.max, stats.min});
    out.insert(out.end(), norm.begin(), norm.end());
    out.insert(out.end(), diff_mean.begin(), diff_mean.end());
    out.insert(out.end(), rank.begin(), rank.end());
    out.push_back(stats.range);
    return out;
  }
};

inline MetaFeatureVector meta_feature_vector(std::span<const double> p, double epsilon = kDefaultEpsilon) {
  MetaFeatureVector v;
  v.raw.assign(p.begin(), p.end());
  v.stats = group_stats(p);
  auto rel = relative_features(p, epsilon);
  v.norm = std::move(rel.norm);
  v.diff_mean = std::move(rel.diff_mean);
  v.rank = std::move(rel.rank);
  return v;
}

/// Row-wise meta features of an N x M prediction matrix: N x (4M+6).
inline Matrix meta_feature_matrix(const Matrix& predictions, double epsilon = kDefaultEpsilon) {
  const auto m = static_cast<std::size_t>(predictions.cols());
  require<DataError>(m >= 2, "meta features need at least 2 base models, got ", m);
  const MetaLayout layout{m};
  Matrix out(predictions.rows(), static_cast<Index>(layout.size()));
  std::vector<double> row(m);
  for (Index r = 0; r < predictions.rows(); ++r) {
    for (std::size_t j = 0; j < m; ++j) row[j] = predictions(r, static_cast<Index>(j));
    const auto flat = meta_feature_vector(row, epsilon).flatten();
    for (std::size_t c = 0; c < flat.size(); ++c) out(r, static_cast<Index>(c)) = flat[c];
  }
  return out;
}

// --- out-of-fold predictions --------------------------------------------------------

struct OofMatrix {
  std::vector<std::string> ids;
  Matrix values;  // N x M
  std::vector<std::string> model_names;
  std::vector<int> fold;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t models() const { return static_cast<std::size_t>(values.cols()); }

  /// Columns `cols` only, in the given order.
  OofMatrix select(std::span<const std::size_t> cols) const {
    OofMatrix out;
    out.ids = ids;
    out.fold = fold;
    out.values.resize(values.rows(), static_cast<Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) {
      out.values.col(static_cast<Index>(c)) = values.col(static_cast<Index>(cols[c]));
      out.model_names.push_back(model_names[cols[c]]);
    }
    return out;
  }
};

/// Stratified, seed-deterministic fold ids in [0, k): each class is shuffled
/// and dealt round-robin.
inline std::vector<int> stratified_folds(std::span<const double> labels, int k, std::uint64_t seed) {
  require(k >= 2, "k_folds must be >= 2, got ", k);
  require<DataError>(labels.size() >= static_cast<std::size_t>(k), "cannot split ", labels.size(), " rows into ", k,
                     " folds");
  std::vector<int> fold(labels.size(), 0);
  std::mt19937_64 rng(seed);
  for (double cls : {1.0, 0.0}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t t = 0; t < members.size(); ++t) fold[members[t]] = static_cast<int>(t % static_cast<std::size_t>(k));
  }
  std::vector<std::size_t> pos_per_fold(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1.0) ++pos_per_fold[static_cast<std::size_t>(fold[i])];
  for (int f = 0; f < k; ++f)
    require<DataError>(pos_per_fold[static_cast<std::size_t>(f)] > 0, "fold ", f, " of ", k,
                       " has no positive rows; use fewer folds");
  return fold;
}

struct OofOptions {
  double valid_fraction = 0.15;  // early-stopping carve inside each training portion
  bool refit_full = true;
};

struct OofResult {
  OofMatrix oof;
  std::vector<TrainedModel> full_models;  // one per spec, fitted on all rows
};

/// OOF predictions with an explicit fold assignment: the model predicting fold f
/// is fitted (and early-stopped) on rows of the other folds only.
inline OofResult oof_predictions(const LabeledDataset& data, const std::vector<LearnerSpec>& specs,
                                 const std::vector<int>& fold, std::uint64_t seed, const OofOptions& opt = {}) {
  require<DataError>(data.has_labels(), "OOF generation needs labels");
  require<DataError>(fold.size() == data.rows(), "fold assignment length ", fold.size(), " != rows ", data.rows());
  require(!specs.empty(), "no learner specs given");
  const int k = fold.empty() ? 0 : *std::max_element(fold.begin(), fold.end()) + 1;
  require<DataError>(k >= 2, "fold assignment needs at least 2 folds");

  OofResult out;
  out.oof.ids = data.ids;
  out.oof.fold = fold;
  out.oof.values = Matrix::Zero(static_cast<Index>(data.rows()), static_cast<Index>(specs.size()));
  for (const auto& s : specs) out.oof.model_names.push_back(s.name);
  {
    std::set<std::string> names(out.oof.model_names.begin(), out.oof.model_names.end());
    require(names.size() == specs.size(), "learner names must be unique");
  }

  for (int f = 0; f < k; ++f) {
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < fold.size(); ++i) (fold[i] == f ? test_rows : train_rows).push_back(i);
    if (test_rows.empty()) continue;
    const auto train = subset_rows(data, train_rows);
    const auto test = subset_rows(data, test_rows);
    for (std::size_t j = 0; j < specs.size(); ++j) {
      Log::debug("OOF fold ", f + 1, "/", k, " model ", specs[j].name);
      const auto model = fit_learner_with_carve(specs[j], train, opt.valid_fraction,
                                                seed + 7919 * static_cast<std::uint64_t>(f + 1) + j);
      const Vector p = predict(model, test);
      for (std::size_t t = 0; t < test_rows.size(); ++t)
        out.oof.values(static_cast<Index>(test_rows[t]), static_cast<Index>(j)) = p[static_cast<Index>(t)];
    }
  }
  if (opt.refit_full) {
    for (std::size_t j = 0; j < specs.size(); ++j) {
      Log::debug("full refit model ", specs[j].name);
      out.full_models.push_back(fit_learner_with_carve(specs[j], data, opt.valid_fraction, seed + j));
    }
  }
  return out;
}

inline OofResult oof_predictions(const LabeledDataset& data, const std::vector<LearnerSpec>& specs, int k_folds,
                                 std::uint64_t seed, const OofOptions& opt = {}) {
  require<DataError>(data.has_labels(), "OOF generation needs labels");
  return oof_predictions(data, specs, stratified_folds(data.labels, k_folds, seed), seed, opt);
}

/// N x M base predictions of already-fitted models.
inline Matrix base_predictions(const std::vector<TrainedModel>& models, const LabeledDataset& data) {
  Matrix out(static_cast<Index>(data.rows()), static_cast<Index>(models.size()));
  for (std::size_t j = 0; j < models.size(); ++j) out.col(static_cast<Index>(j)) = predict(models[j], data);
  return out;
}

// --- meta dataset -------------------------------------------------------------------

struct MetaDataset {
  Matrix features;  // N x (4M+6)
  std::vector<double> labels;
  std::vector<std::string> model_names;
  std::vector<std::string> ids;

  std::size_t rows() const { return static_cast<std::size_t>(features.rows()); }
  MetaLayout layout() const { return {model_names.size()}; }
};

inline MetaDataset build_meta_dataset(const OofMatrix& oof, std::span<const double> labels,
                                      double epsilon = kDefaultEpsilon) {
  require<DataError>(labels.size() == oof.rows(), "label count ", labels.size(), " != OOF rows ", oof.rows());
  require<DataError>(oof.models() >= 2 || oof.rows() == 0, "meta dataset needs at least 2 base models");
  MetaDataset out;
  out.model_names = oof.model_names;
  out.ids = oof.ids;
  out.labels.assign(labels.begin(), labels.end());
  const MetaLayout layout{oof.models()};
  out.features = oof.rows() == 0 ? Matrix(0, static_cast<Index>(layout.size())) : meta_feature_matrix(oof.values, epsilon);
  return out;
}

// --- OOF CSV --------------------------------------------------------------------------

/// Columns: id, fold, one column per model.
inline void save_oof_csv(const OofMatrix& oof, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << "id,fold";
  for (const auto& n : oof.model_names) out << ',' << n;
  out << '\n';
  for (std::size_t r = 0; r < oof.rows(); ++r) {
    out << oof.ids[r] << ',' << oof.fold[r];
    for (std::size_t j = 0; j < oof.models(); ++j)
      out << ',' << detail::format_double(oof.values(static_cast<Index>(r), static_cast<Index>(j)));
    out << '\n';
  }
  require<DataError>(static_cast<bool>(out), "write failed for ", path.string());
}

inline OofMatrix load_oof_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require<DataError>(static_cast<bool>(in), "cannot open ", path.string());
  std::string line;
  require<DataError>(static_cast<bool>(std::getline(in, line)), path.string(), ": missing header row");
  const auto header = detail::split_csv_line(line);
  require<DataError>(header.size() >= 3 && detail::trim(header[0]) == "id" && detail::trim(header[1]) == "fold",
                     path.string(), ": OOF header must start with id,fold and list at least one model");
  OofMatrix oof;
  for (std::size_t c = 2; c < header.size(); ++c) oof.model_names.emplace_back(detail::trim(header[c]));
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    require<DataError>(cells.size() == header.size(), path.string(), ":", line_no, ": expected ", header.size(),
                       " fields, found ", cells.size());
    oof.ids.emplace_back(detail::trim(cells[0]));
    const auto fold = detail::parse_double(cells[1]);
    require<DataError>(fold.has_value(), path.string(), ":", line_no, ": missing fold");
    oof.fold.push_back(static_cast<int>(*fold));
    for (std::size_t c = 2; c < cells.size(); ++c) {
      const auto v = detail::parse_double(cells[c]);
      require<DataError>(v.has_value() && *v >= 0.0 && *v <= 1.0, path.string(), ":", line_no,
                         ": OOF value must be a probability");
      values.push_back(*v);
    }
  }
  oof.values.resize(static_cast<Index>(oof.ids.size()), static_cast<Index>(oof.model_names.size()));
  std::copy(values.begin(), values.end(), oof.values.data());
  return oof;
}

}  // namespace remedi
