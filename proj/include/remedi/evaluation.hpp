// Ranking metrics and reports: top-K lead lists, Precision@K, business
// recall@K, AUC, log loss, lift, PR curve, score histogram, split-gain feature
// importance and PSI drift.
#pragma once

#include "remedi/dataset.hpp"
#include "remedi/learners.hpp"

#include <nlohmann/json.hpp>

#include <numeric>

namespace remedi {

/// Id order used for every tie-break: numeric ids compare numerically, other
/// ids lexicographically, and numeric ids sort before non-numeric ones.
inline bool id_less(const std::string& a, const std::string& b) {
  auto numeric = [](const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
  };
  const bool na = numeric(a), nb = numeric(b);
  if (na && nb) {
    auto strip = [](const std::string& s) {
      const auto p = s.find_first_not_of('0');
      return p == std::string::npos ? std::string_view("0") : std::string_view(s).substr(p);
    };
    const auto sa = strip(a), sb = strip(b);
    if (sa.size() != sb.size()) return sa.size() < sb.size();
    if (sa != sb) return sa < sb;
    return a < b;
  }
  if (na != nb) return na;
  return a < b;
}

/// Row indices by descending score, ties by ascending id.
inline std::vector<std::size_t> ranking_order(const std::vector<std::string>& ids, std::span<const double> scores) {
  require<DataError>(ids.size() == scores.size(), "ids (", ids.size(), ") and scores (", scores.size(),
                     ") differ in length");
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return id_less(ids[a], ids[b]);
  });
  return order;
}

inline std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return ids;
}

struct LeadList {
  std::vector<std::string> ids;
  std::vector<double> scores;
  std::size_t k = 0;
};

inline LeadList rank_top_k(const std::vector<std::string>& ids, std::span<const double> scores, std::size_t k) {
  require(k >= 1, "K must be >= 1");
  if (k > ids.size()) {
    Log::warn("K = ", k, " exceeds the ", ids.size(), " available rows; returning all of them");
    k = ids.size();
  }
  const auto order = ranking_order(ids, scores);
  LeadList out;
  out.k = k;
  for (std::size_t i = 0; i < k; ++i) {
    out.ids.push_back(ids[order[i]]);
    out.scores.push_back(scores[order[i]]);
  }
  return out;
}

inline void check_labels(std::span<const double> labels, std::span<const double> scores) {
  require<DataError>(labels.size() == scores.size(), "labels (", labels.size(), ") and scores (", scores.size(),
                     ") differ in length");
  for (double y : labels) require<DataError>(y == 0.0 || y == 1.0, "labels must be 0 or 1, got ", y);
}

/// Positives among the top-K rows (ties by ascending id), K clamped to N.
inline std::size_t hits_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                             const std::vector<std::string>& ids) {
  check_labels(labels, scores);
  require(k >= 1, "K must be >= 1");
  const auto order = ranking_order(ids, scores);
  k = std::min(k, order.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < k; ++i) hits += labels[order[i]] == 1.0 ? 1 : 0;
  return hits;
}

inline double precision_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                             const std::vector<std::string>& ids) {
  require(k >= 1, "K must be >= 1");
  if (k > labels.size()) {
    Log::warn("K = ", k, " exceeds the ", labels.size(), " available rows; using K = N");
    k = labels.size();
  }
  return static_cast<double>(hits_at_k(labels, scores, k, ids)) / static_cast<double>(k);
}

inline double precision_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k) {
  return precision_at_k(labels, scores, k, default_ids(labels.size()));
}

/// Standard recall at K: top-K positives over all positives.
inline double recall_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                          const std::vector<std::string>& ids) {
  const double total = std::accumulate(labels.begin(), labels.end(), 0.0);
  require<DataError>(total > 0, "recall needs at least one positive label");
  return static_cast<double>(hits_at_k(labels, scores, k, ids)) / total;
}

/// Top-K positives over one third of all positives (the label window spans
/// three months; the denominator is the monthly average). May exceed 1.
/// Computed as 3 * recall so the identity holds bit for bit.
inline double business_recall_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                                   const std::vector<std::string>& ids) {
  const double total = std::accumulate(labels.begin(), labels.end(), 0.0);
  require<DataError>(total > 0, "business recall needs at least one positive label");
  return 3.0 * recall_at_k(labels, scores, k, ids);
}

inline double business_recall_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k) {
  return business_recall_at_k(labels, scores, k, default_ids(labels.size()));
}

/// Mann-Whitney AUC; tied (positive, negative) pairs count one half.
inline double auc(std::span<const double> labels, std::span<const double> scores) {
  check_labels(labels, scores);
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] == 1.0) {
        rank_sum += avg_rank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  require<DataError>(n_pos > 0 && n_neg > 0, "AUC needs both classes (", n_pos, " positives, ", n_neg, " negatives)");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

inline double log_loss(std::span<const double> labels, std::span<const double> scores, double clip = 1e-15) {
  check_labels(labels, scores);
  if (labels.empty()) return 0.0;
  return weighted_log_loss(labels, scores, {}, clip);
}

/// Precision@K divided by the overall positive rate.
inline double lift_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                        const std::vector<std::string>& ids) {
  const double total = std::accumulate(labels.begin(), labels.end(), 0.0);
  require<DataError>(total > 0, "lift needs at least one positive label");
  const double base_rate = total / static_cast<double>(labels.size());
  return precision_at_k(labels, scores, k, ids) / base_rate;
}

inline double lift_at_k(std::span<const double> labels, std::span<const double> scores, std::size_t k) {
  return lift_at_k(labels, scores, k, default_ids(labels.size()));
}

struct PrPoint {
  double recall;
  double precision;
  double threshold;
};

/// Precision/recall at every distinct score threshold (descending), thinned to
/// at most `n_points` evenly spaced points; the last point is always kept.
inline std::vector<PrPoint> pr_curve(std::span<const double> labels, std::span<const double> scores,
                                     std::size_t n_points = 200) {
  check_labels(labels, scores);
  const double total = std::accumulate(labels.begin(), labels.end(), 0.0);
  require<DataError>(total > 0 && total < static_cast<double>(labels.size()), "PR curve needs both classes");
  require(n_points >= 2, "PR curve needs at least 2 points");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<PrPoint> full;
  double tp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) tp += labels[order[i++]];
    full.push_back({tp / total, tp / static_cast<double>(i), thr});
  }
  if (full.size() <= n_points) return full;
  std::vector<PrPoint> out;
  for (std::size_t p = 0; p < n_points; ++p) {
    const auto idx = static_cast<std::size_t>(std::llround(static_cast<double>(p) * static_cast<double>(full.size() - 1) /
                                                           static_cast<double>(n_points - 1)));
    out.push_back(full[idx]);
  }
  return out;
}

struct ScoreDistribution {
  std::vector<double> bin_edges;  // 51 edges over [0, 1]
  std::vector<std::size_t> counts;  // 50 bins; the last bin includes 1.0
  double cutoff_score = 0.0;  // K-th largest score
  double cutoff_percentile = 0.0;  // fraction of scores strictly below the cutoff
};

inline ScoreDistribution score_distribution(std::span<const double> scores, std::size_t k) {
  require<DataError>(!scores.empty(), "score distribution of an empty score vector");
  require(k >= 1, "K must be >= 1");
  constexpr std::size_t kBins = 50;
  ScoreDistribution out;
  for (std::size_t b = 0; b <= kBins; ++b) out.bin_edges.push_back(static_cast<double>(b) / kBins);
  out.counts.assign(kBins, 0);
  for (double s : scores) {
    const double c = std::clamp(s, 0.0, 1.0);
    const auto b = std::min(kBins - 1, static_cast<std::size_t>(c * kBins));
    ++out.counts[b];
  }
  k = std::min(k, scores.size());
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  out.cutoff_score = sorted[k - 1];
  const auto below = std::count_if(scores.begin(), scores.end(), [&](double s) { return s < out.cutoff_score; });
  out.cutoff_percentile = static_cast<double>(below) / static_cast<double>(scores.size());
  return out;
}

struct EvalReport {
  double precision_at_k = 0.0;
  double business_recall_at_k = 0.0;
  double auc = 0.0;
  double log_loss = 0.0;
  double lift_at_k = 0.0;
  std::size_t k = 0;
  std::size_t n = 0;
  std::size_t n_positives = 0;
  std::vector<PrPoint> pr_curve;
  ScoreDistribution score_histogram;
};

inline EvalReport evaluate(std::span<const double> labels, std::span<const double> scores, std::size_t k,
                           const std::vector<std::string>& ids, std::size_t pr_points = 200) {
  check_labels(labels, scores);
  EvalReport r;
  r.n = labels.size();
  r.k = std::min(k, r.n);
  r.n_positives = static_cast<std::size_t>(std::accumulate(labels.begin(), labels.end(), 0.0));
  r.precision_at_k = precision_at_k(labels, scores, r.k, ids);
  r.business_recall_at_k = business_recall_at_k(labels, scores, r.k, ids);
  r.auc = auc(labels, scores);
  r.log_loss = log_loss(labels, scores);
  r.lift_at_k = lift_at_k(labels, scores, r.k, ids);
  r.pr_curve = pr_curve(labels, scores, pr_points);
  r.score_histogram = score_distribution(scores, r.k);
  return r;
}

inline EvalReport evaluate(std::span<const double> labels, std::span<const double> scores, std::size_t k) {
  return evaluate(labels, scores, k, default_ids(labels.size()));
}

/// Keys: precision_at_k, business_recall_at_k, auc, log_loss, lift_at_k, k, n,
/// n_positives, cutoff_score, cutoff_percentile, score_histogram{bin_edges,
/// counts}, pr_curve[{recall, precision, threshold}].
inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json pr = nlohmann::json::array();
  for (const auto& p : r.pr_curve) pr.push_back({{"recall", p.recall}, {"precision", p.precision}, {"threshold", p.threshold}});
  return {{"precision_at_k", r.precision_at_k},
          {"business_recall_at_k", r.business_recall_at_k},
          {"auc", r.auc},
          {"log_loss", r.log_loss},
          {"lift_at_k", r.lift_at_k},
          {"k", r.k},
          {"n", r.n},
          {"n_positives", r.n_positives},
          {"cutoff_score", r.score_histogram.cutoff_score},
          {"cutoff_percentile", r.score_histogram.cutoff_percentile},
          {"score_histogram", {{"bin_edges", r.score_histogram.bin_edges}, {"counts", r.score_histogram.counts}}},
          {"pr_curve", pr}};
}

inline void write_pr_curve_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << "recall,precision,threshold\n";
  for (const auto& p : r.pr_curve)
    out << detail::format_double(p.recall) << ',' << detail::format_double(p.precision) << ','
        << detail::format_double(p.threshold) << '\n';
}

inline void write_lead_list_csv(const LeadList& leads, const std::filesystem::path& path) {
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << "rank,id,score\n";
  for (std::size_t i = 0; i < leads.ids.size(); ++i)
    out << (i + 1) << ',' << leads.ids[i] << ',' << detail::format_double(leads.scores[i]) << '\n';
}

/// Writes `id,score` rows.
inline void write_scores_csv(const std::vector<std::string>& ids, std::span<const double> scores,
                             const std::filesystem::path& path) {
  require<DataError>(ids.size() == scores.size(), "ids and scores differ in length");
  std::ofstream out(path);
  require<DataError>(static_cast<bool>(out), "cannot write ", path.string());
  out << "id,score\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << ',' << detail::format_double(scores[i]) << '\n';
}

// --- feature importance ------------------------------------------------------------

struct FeatureImportance {
  std::string feature;
  double gain_percent;
};

/// Total split gain per feature of a tree model, normalized to sum to 100,
/// descending (ties by name).
inline std::vector<FeatureImportance> feature_importance(const GbdtModel& model,
                                                         const std::vector<std::string>& input_names) {
  require<DataError>(input_names.size() == model.n_features, "feature name count mismatch");
  const auto gains = model.split_gains();
  const double total = std::accumulate(gains.begin(), gains.end(), 0.0);
  std::vector<FeatureImportance> out;
  for (std::size_t f = 0; f < gains.size(); ++f)
    out.push_back({input_names[f], total > 0 ? 100.0 * gains[f] / total : 0.0});
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.gain_percent != b.gain_percent) return a.gain_percent > b.gain_percent;
    return a.feature < b.feature;
  });
  return out;
}

inline std::vector<FeatureImportance> feature_importance(const TrainedModel& model) {
  require<UsageError>(model.is_tree(), "feature importance needs a tree-based model, got '", to_string(model.kind), "'");
  return feature_importance(model.gbdt(), model.input_names());
}

// --- drift -------------------------------------------------------------------------

struct FeatureDrift {
  std::string feature;
  double psi;
};

inline constexpr double kPsiFloor = 1e-6;

/// Population stability index per feature: 10 quantile bins fitted on the
/// reference, proportions floored at 1e-6.
inline std::vector<FeatureDrift> psi_drift(const LabeledDataset& reference, const LabeledDataset& current) {
  check_schema(reference.schema.names(), current.schema);
  require<DataError>(reference.rows() >= 100 && current.rows() >= 100, "PSI needs at least 100 rows per dataset (got ",
                     reference.rows(), " and ", current.rows(), ")");
  constexpr int kBins = 10;
  std::vector<FeatureDrift> out;
  for (std::size_t c = 0; c < reference.cols(); ++c) {
    std::vector<double> ref;
    for (std::size_t r = 0; r < reference.rows(); ++r)
      if (!reference.is_missing(r, c)) ref.push_back(reference.features(static_cast<Index>(r), static_cast<Index>(c)));
    std::vector<double> cur;
    for (std::size_t r = 0; r < current.rows(); ++r)
      if (!current.is_missing(r, c)) cur.push_back(current.features(static_cast<Index>(r), static_cast<Index>(c)));
    const auto& name = reference.schema.columns[c].name;
    require<DataError>(!ref.empty() && !cur.empty(), "column '", name, "' has no observed values");
    std::sort(ref.begin(), ref.end());
    std::vector<double> edges;  // interior cut points; bin b holds values in (edges[b-1], edges[b]]
    for (int b = 1; b < kBins; ++b) {
      const double e = nearest_rank_percentile(ref, 100.0 * b / kBins);
      if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    auto proportions = [&](const std::vector<double>& v) {
      std::vector<double> p(edges.size() + 1, 0.0);
      for (double x : v) p[static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), x) - edges.begin())] += 1;
      for (double& q : p) q = std::max(q / static_cast<double>(v.size()), kPsiFloor);
      return p;
    };
    const auto pr = proportions(ref), pc = proportions(cur);
    double psi = 0.0;
    for (std::size_t b = 0; b < pr.size(); ++b) psi += (pc[b] - pr[b]) * std::log(pc[b] / pr[b]);
    out.push_back({name, psi});
  }
  return out;
}

}  // namespace remedi
