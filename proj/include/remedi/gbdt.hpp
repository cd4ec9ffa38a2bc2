// Histogram gradient-boosted decision trees with Newton leaf values.
//
// Objectives: weighted log loss, alpha-balanced focal loss, squared error
// (identity link, used for distillation) and cross-entropy against soft
// targets. Every tree is fitted to per-sample gradient/hessian pairs of the
// current raw scores; leaf value = -sum(g) / (sum(h) + lambda).
#pragma once

#include "remedi/common.hpp"

#include <nlohmann/json.hpp>

#include <functional>

#include <numeric>
#include <optional>

namespace remedi {

enum class GbdtObjective { logloss, focal, squared_error, soft_logloss };

inline std::string_view to_string(GbdtObjective o) {
  switch (o) {
    case GbdtObjective::logloss: return "logloss";
    case GbdtObjective::focal: return "focal";
    case GbdtObjective::squared_error: return "squared_error";
    case GbdtObjective::soft_logloss: return "soft_logloss";
  }
  return "logloss";
}

inline GbdtObjective parse_gbdt_objective(std::string_view s) {
  if (s == "logloss") return GbdtObjective::logloss;
  if (s == "focal") return GbdtObjective::focal;
  if (s == "squared_error" || s == "mse") return GbdtObjective::squared_error;
  if (s == "soft_logloss" || s == "kl") return GbdtObjective::soft_logloss;
  fail<UsageError>("unknown GBDT objective '", s, "'");
}

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;

  void validate() const {
    require(gamma >= 0.0 && std::isfinite(gamma), "focal gamma must be nonnegative");
    require(alpha > 0.0 && alpha < 1.0, "focal alpha must lie in (0, 1)");
  }
};

struct GbdtParams {
  int n_trees = 300;
  int max_depth = 5;
  // 0 is accepted and yields the prior-only model.
  double learning_rate = 0.1;
  int min_samples_leaf = 20;
  int n_bins = 64;
  std::optional<double> scale_pos_weight;  // unset: N_neg / N_pos of the training split
  double l2_leaf = 1.0;
  double min_split_gain = 1e-12;
  int early_stopping_rounds = 30;
  GbdtObjective objective = GbdtObjective::logloss;
  std::uint64_t seed = 1;

  void validate() const {
    require(n_trees >= 1, "n_trees must be >= 1, got ", n_trees);
    require(max_depth >= 1, "max_depth must be >= 1, got ", max_depth);
    require(learning_rate >= 0.0 && learning_rate <= 1.0, "learning_rate must lie in [0, 1], got ", learning_rate);
    require(min_samples_leaf >= 1, "min_samples_leaf must be >= 1");
    require(n_bins >= 2 && n_bins <= 256, "n_bins must lie in [2, 256]");
    require(l2_leaf >= 0.0, "l2_leaf must be nonnegative");
    require(!scale_pos_weight || *scale_pos_weight > 0.0, "scale_pos_weight must be positive");
    require(early_stopping_rounds >= 0, "early_stopping_rounds must be nonnegative");
  }
};

// --- focal loss --------------------------------------------------------------

struct GradHess {
  double grad;
  double hess;
};

inline constexpr double kHessianFloor = 1e-12;

/// Focal loss at raw score z:
///   L = -alpha*y*(1-p)^gamma*log(p) - (1-alpha)*(1-y)*p^gamma*log(1-p),  p = sigmoid(z).
inline double focal_loss(double z, double y, const FocalParams& fp) {
  const double p = sigmoid(z);
  const double log_p = -softplus(-z);
  const double log_q = -softplus(z);
  return -fp.alpha * y * std::pow(1.0 - p, fp.gamma) * log_p -
         (1.0 - fp.alpha) * (1.0 - y) * std::pow(p, fp.gamma) * log_q;
}

/// Exact first and second derivative of `focal_loss` with respect to z. The
/// second derivative turns negative in parts of the tails.
inline GradHess focal_derivatives(double z, double y, const FocalParams& fp) {
  const double p = sigmoid(z);
  const double q = sigmoid(-z);
  const double log_p = -softplus(-z);
  const double log_q = -softplus(z);
  const double g = fp.gamma;
  double grad = 0.0;
  double hess = 0.0;
  if (y > 0.0) {
    const double qg = std::pow(q, g);
    const double inner = g * p * log_p - q;
    grad += y * fp.alpha * qg * inner;
    hess += y * fp.alpha * p * qg * (-g * inner + q * (g * log_p + g + 1.0));
  }
  if (y < 1.0) {
    const double pg = std::pow(p, g);
    const double inner = p - g * q * log_q;
    grad += (1.0 - y) * (1.0 - fp.alpha) * pg * inner;
    hess += (1.0 - y) * (1.0 - fp.alpha) * q * pg * (g * inner + p * (1.0 + g * log_q + g));
  }
  return {grad, hess};
}

/// Boosting gradient and hessian: `focal_derivatives` with the hessian
/// floored at 1e-12.
inline GradHess focal_grad_hess(double z, double y, const FocalParams& fp) {
  const auto d = focal_derivatives(z, y, fp);
  return {d.grad, std::max(d.hess, kHessianFloor)};
}

// --- trees -------------------------------------------------------------------

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // rows with x <= threshold go left
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf output, already scaled by the learning rate
  double gain = 0.0;
};

/// Children of a split are stored next to each other (right = left + 1), so
/// traversal needs no branch on the comparison.
struct Tree {
  std::vector<TreeNode> nodes;

  double predict(const double* row) const {
    const TreeNode* n = nodes.data();
    int i = 0;
    while (n[i].feature >= 0) i = n[i].left + static_cast<int>(row[n[i].feature] > n[i].threshold);
    return n[i].value;
  }
};

enum class Link { logistic, identity };

struct GbdtModel {
  Link link = Link::logistic;
  double base_score = 0.0;
  std::size_t n_features = 0;
  std::vector<Tree> trees;
  GbdtParams params;
  std::optional<FocalParams> focal;
  double scale_pos_weight = 1.0;
  double best_valid_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> train_loss_curve;  // training loss after each round (index 0 = prior)
  std::vector<double> valid_loss_curve;

  double raw_score(const double* row) const {
    double s = base_score;
    for (const auto& t : trees) s += t.predict(row);
    return s;
  }

  double transform(double raw) const { return link == Link::logistic ? sigmoid(raw) : raw; }

  /// Raw scores for every row of `x` (columns must match `n_features`).
  /// Rows are processed in blocks with the tree loop outside, which keeps each
  /// tree hot in cache. Within a block, kLanes rows walk a tree together for a
  /// fixed number of steps (leaves loop to themselves), so their loads overlap.
  /// Per-row sums run in tree order, matching `raw_score` bit for bit.
  Vector raw_scores(const Matrix& x) const {
    require<DataError>(static_cast<std::size_t>(x.cols()) == n_features, "GBDT expects ", n_features,
                       " features, got ", x.cols());
    Vector out = Vector::Constant(x.rows(), base_score);
    if (x.rows() == 0 || trees.empty()) return out;

    struct Flat {
      double threshold;
      std::int32_t feature;
      std::int32_t next;
    };
    std::vector<Flat> flat;
    std::vector<double> value;
    std::vector<std::size_t> start, depth;
    for (const auto& t : trees) {
      start.push_back(flat.size());
      std::size_t max_depth = 0;
      std::vector<std::pair<int, std::size_t>> stack{{0, 0}};
      while (!stack.empty()) {
        const auto [i, d] = stack.back();
        stack.pop_back();
        const auto& n = t.nodes[static_cast<std::size_t>(i)];
        if (n.feature < 0) max_depth = std::max(max_depth, d);
        else stack.insert(stack.end(), {{n.left, d + 1}, {n.right, d + 1}});
      }
      depth.push_back(max_depth);
      for (std::size_t i = 0; i < t.nodes.size(); ++i) {
        const auto& n = t.nodes[i];
        if (n.feature < 0) flat.push_back({std::numeric_limits<double>::infinity(), 0, static_cast<std::int32_t>(i)});
        else flat.push_back({n.threshold, n.feature, n.left});
        value.push_back(n.value);
      }
    }

    constexpr Index kBlock = 64;
    constexpr Index kLanes = 8;
    for (Index r0 = 0; r0 < x.rows(); r0 += kBlock) {
      const Index r1 = std::min(x.rows(), r0 + kBlock);
      for (std::size_t t = 0; t < trees.size(); ++t) {
        const Flat* f = flat.data() + start[t];
        const double* v = value.data() + start[t];
        Index r = r0;
        for (; r + kLanes <= r1; r += kLanes) {
          std::int32_t idx[kLanes] = {};
          const double* rows[kLanes];
          for (Index k = 0; k < kLanes; ++k) rows[k] = x.row(r + k).data();
          for (std::size_t s = 0; s < depth[t]; ++s)
            for (Index k = 0; k < kLanes; ++k) {
              const Flat& n = f[idx[k]];
              idx[k] = n.next + static_cast<std::int32_t>(rows[k][n.feature] > n.threshold);
            }
          for (Index k = 0; k < kLanes; ++k) out[r + k] += v[idx[k]];
        }
        for (; r < r1; ++r) out[r] += trees[t].predict(x.row(r).data());
      }
    }
    return out;
  }

  /// Total split gain per input column.
  std::vector<double> split_gains() const {
    std::vector<double> g(n_features, 0.0);
    for (const auto& t : trees)
      for (const auto& n : t.nodes)
        if (n.feature >= 0) g[static_cast<std::size_t>(n.feature)] += n.gain;
    return g;
  }
};

namespace detail {

/// Quantile bin boundaries per feature; value x falls in the first bin whose
/// upper threshold is >= x.
struct FeatureBins {
  std::vector<std::vector<double>> thresholds;  // per feature, strictly increasing
  std::vector<std::uint8_t> codes;  // column-major: feature * n_rows + row
  std::size_t n_rows = 0;

  static FeatureBins build(const Matrix& x, int n_bins) {
    FeatureBins fb;
    fb.n_rows = static_cast<std::size_t>(x.rows());
    const std::size_t d = static_cast<std::size_t>(x.cols());
    fb.thresholds.resize(d);
    fb.codes.resize(d * fb.n_rows);
    std::vector<double> col(fb.n_rows);
    for (std::size_t f = 0; f < d; ++f) {
      for (std::size_t r = 0; r < fb.n_rows; ++r) col[r] = x(static_cast<Index>(r), static_cast<Index>(f));
      std::sort(col.begin(), col.end());
      std::vector<double> distinct;
      std::vector<std::size_t> upto;  // count of values <= distinct[k]
      for (std::size_t r = 0; r < col.size(); ++r) {
        if (distinct.empty() || col[r] != distinct.back()) {
          distinct.push_back(col[r]);
          upto.push_back(r + 1);
        } else {
          upto.back() = r + 1;
        }
      }
      auto& thr = fb.thresholds[f];
      if (distinct.size() <= static_cast<std::size_t>(n_bins)) {
        for (std::size_t k = 0; k + 1 < distinct.size(); ++k) thr.push_back(0.5 * (distinct[k] + distinct[k + 1]));
      } else {
        // Cut after the distinct value where the cumulative count crosses each quantile.
        std::size_t k = 0;
        for (int b = 1; b < n_bins; ++b) {
          const double target = static_cast<double>(fb.n_rows) * b / n_bins;
          while (k + 1 < distinct.size() && static_cast<double>(upto[k]) < target) ++k;
          if (k + 1 >= distinct.size()) break;
          const double t = 0.5 * (distinct[k] + distinct[k + 1]);
          if (thr.empty() || t > thr.back()) thr.push_back(t);
        }
      }
      for (std::size_t r = 0; r < fb.n_rows; ++r) {
        const double v = x(static_cast<Index>(r), static_cast<Index>(f));
        fb.codes[f * fb.n_rows + r] =
            static_cast<std::uint8_t>(std::lower_bound(thr.begin(), thr.end(), v) - thr.begin());
      }
    }
    return fb;
  }
};

struct HistBin {
  double g = 0.0;
  double h = 0.0;
  std::size_t n = 0;
};

class TreeBuilder {
 public:
  TreeBuilder(const FeatureBins& bins, const GbdtParams& params, std::span<const double> grad,
              std::span<const double> hess)
      : bins_(bins), params_(params), grad_(grad), hess_(hess), n_features_(bins.thresholds.size()) {
    stride_ = static_cast<std::size_t>(params.n_bins);
  }

  /// Grows one tree; `leaf_of` receives the leaf node index for every row.
  Tree grow(std::vector<std::size_t>& rows, std::vector<int>& leaf_of) {
    tree_.nodes.clear();
    leaf_of_ = &leaf_of;
    rows_ = &rows;
    std::vector<HistBin> hist(n_features_ * stride_);
    build_hist(0, rows.size(), hist);
    HistBin total;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      total.g += grad_[rows[i]];
      total.h += hess_[rows[i]];
    }
    total.n = rows.size();
    tree_.nodes.emplace_back();
    split_node(0, 0, rows.size(), 0, total, hist);
    return std::move(tree_);
  }

 private:
  struct Candidate {
    double gain = 0.0;
    int feature = -1;
    int bin = -1;
    HistBin left;
  };

  void build_hist(std::size_t begin, std::size_t end, std::vector<HistBin>& hist) const {
    std::fill(hist.begin(), hist.end(), HistBin{});
    const auto& rows = *rows_;
    for (std::size_t f = 0; f < n_features_; ++f) {
      const std::uint8_t* codes = bins_.codes.data() + f * bins_.n_rows;
      HistBin* hf = hist.data() + f * stride_;
      for (std::size_t i = begin; i < end; ++i) {
        const std::size_t r = rows[i];
        HistBin& b = hf[codes[r]];
        b.g += grad_[r];
        b.h += hess_[r];
        ++b.n;
      }
    }
  }

  double score(const HistBin& b) const { return b.g * b.g / (b.h + params_.l2_leaf); }

  Candidate best_split(const std::vector<HistBin>& hist, const HistBin& total) const {
    Candidate best;
    const double parent = score(total);
    const auto min_leaf = static_cast<std::size_t>(params_.min_samples_leaf);
    for (std::size_t f = 0; f < n_features_; ++f) {
      const std::size_t n_thr = bins_.thresholds[f].size();
      HistBin left;
      const HistBin* hf = hist.data() + f * stride_;
      for (std::size_t b = 0; b < n_thr; ++b) {
        left.g += hf[b].g;
        left.h += hf[b].h;
        left.n += hf[b].n;
        if (left.n < min_leaf) continue;
        if (total.n - left.n < min_leaf) break;
        const HistBin right{total.g - left.g, total.h - left.h, total.n - left.n};
        const double gain = score(left) + score(right) - parent;
        if (gain > best.gain) {
          best.gain = gain;
          best.feature = static_cast<int>(f);
          best.bin = static_cast<int>(b);
          best.left = left;
        }
      }
    }
    return best;
  }

  double leaf_value(const HistBin& b) const {
    if (b.h <= 0.0) return 0.0;
    return -b.g / (b.h + params_.l2_leaf) * params_.learning_rate;
  }

  void make_leaf(int node, std::size_t begin, std::size_t end, const HistBin& total) {
    tree_.nodes[static_cast<std::size_t>(node)].value = leaf_value(total);
    for (std::size_t i = begin; i < end; ++i) (*leaf_of_)[(*rows_)[i]] = node;
  }

  void split_node(int node, std::size_t begin, std::size_t end, int depth, const HistBin& total,
                  std::vector<HistBin>& hist) {
    if (depth >= params_.max_depth || total.n < 2 * static_cast<std::size_t>(params_.min_samples_leaf)) {
      make_leaf(node, begin, end, total);
      return;
    }
    const Candidate c = best_split(hist, total);
    if (c.feature < 0 || !(c.gain > params_.min_split_gain)) {
      make_leaf(node, begin, end, total);
      return;
    }
    auto& rows = *rows_;
    const std::uint8_t* codes = bins_.codes.data() + static_cast<std::size_t>(c.feature) * bins_.n_rows;
    const auto mid_it = std::stable_partition(rows.begin() + static_cast<std::ptrdiff_t>(begin),
                                              rows.begin() + static_cast<std::ptrdiff_t>(end),
                                              [&](std::size_t r) { return codes[r] <= c.bin; });
    const auto mid = static_cast<std::size_t>(mid_it - rows.begin());
    const HistBin right{total.g - c.left.g, total.h - c.left.h, total.n - c.left.n};

    const int left_id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    const int right_id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    auto& n = tree_.nodes[static_cast<std::size_t>(node)];
    n.feature = c.feature;
    n.threshold = bins_.thresholds[static_cast<std::size_t>(c.feature)][static_cast<std::size_t>(c.bin)];
    n.left = left_id;
    n.right = right_id;
    n.gain = c.gain;

    if (depth + 1 >= params_.max_depth) {
      make_leaf(left_id, begin, mid, c.left);
      make_leaf(right_id, mid, end, right);
      return;
    }
    // Histogram subtraction: scan the smaller child, derive the larger one.
    std::vector<HistBin> small(hist.size());
    const bool left_small = (mid - begin) <= (end - mid);
    if (left_small) build_hist(begin, mid, small);
    else build_hist(mid, end, small);
    for (std::size_t i = 0; i < hist.size(); ++i) {
      hist[i].g -= small[i].g;
      hist[i].h -= small[i].h;
      hist[i].n -= small[i].n;
    }
    std::vector<HistBin>& left_hist = left_small ? small : hist;
    std::vector<HistBin>& right_hist = left_small ? hist : small;
    split_node(left_id, begin, mid, depth + 1, c.left, left_hist);
    split_node(right_id, mid, end, depth + 1, right, right_hist);
  }

  const FeatureBins& bins_;
  const GbdtParams& params_;
  std::span<const double> grad_;
  std::span<const double> hess_;
  std::size_t n_features_;
  std::size_t stride_;
  Tree tree_;
  std::vector<int>* leaf_of_ = nullptr;
  std::vector<std::size_t>* rows_ = nullptr;
};

struct ObjectiveEval {
  GbdtObjective objective;
  std::optional<FocalParams> focal;

  GradHess grad_hess(double raw, double target) const {
    switch (objective) {
      case GbdtObjective::logloss:
      case GbdtObjective::soft_logloss: {
        const double p = sigmoid(raw);
        return {p - target, std::max(p * (1.0 - p), kHessianFloor)};
      }
      case GbdtObjective::focal: return focal_grad_hess(raw, target, *focal);
      case GbdtObjective::squared_error: return {2.0 * (raw - target), 2.0};
    }
    return {0.0, 1.0};
  }

  double loss(double raw, double target) const {
    switch (objective) {
      case GbdtObjective::logloss:
      case GbdtObjective::soft_logloss:
        return target * softplus(-raw) + (1.0 - target) * softplus(raw);
      case GbdtObjective::focal: return focal_loss(raw, target, *focal);
      case GbdtObjective::squared_error: return (raw - target) * (raw - target);
    }
    return 0.0;
  }

  /// Early-stopping metric: weighted log loss for classifiers, mean loss otherwise.
  double monitor(double raw, double target) const {
    if (objective == GbdtObjective::focal) return target * softplus(-raw) + (1.0 - target) * softplus(raw);
    return loss(raw, target);
  }
};

inline double weighted_mean(std::span<const double> values, std::span<const double> w) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    num += w[i] * values[i];
    den += w[i];
  }
  return den > 0 ? num / den : 0.0;
}

}  // namespace detail

/// Early-stopping metric over the current validation raw scores.
using ValidMonitor = std::function<double(std::span<const double> valid_raw)>;

/// Fits a boosted ensemble on clean features `x` with targets in [0, 1]
/// (0/1 labels for the classification objectives). `valid_x` may be empty, in
/// which case every tree is kept. `monitor`, when set, replaces the objective's
/// own validation loss for early stopping.
inline GbdtModel fit_gbdt_matrix(const Matrix& x, std::span<const double> targets, const Matrix& valid_x,
                                 std::span<const double> valid_targets, const GbdtParams& params,
                                 std::optional<FocalParams> focal = std::nullopt, const ValidMonitor& monitor = {}) {
  params.validate();
  const std::size_t n = static_cast<std::size_t>(x.rows());
  require<DataError>(n > 0, "GBDT training set is empty");
  require<DataError>(targets.size() == n, "GBDT target count mismatch");
  require<DataError>(x.allFinite(), "GBDT training features contain non-finite values");
  require<DataError>(valid_targets.size() == static_cast<std::size_t>(valid_x.rows()), "GBDT validation size mismatch");
  const GbdtObjective obj = params.objective;
  if (obj == GbdtObjective::focal) {
    require(focal.has_value(), "focal objective needs focal parameters");
    focal->validate();
  }
  for (double t : targets) require<DataError>(t >= 0.0 && t <= 1.0, "GBDT target outside [0, 1]: ", t);

  const bool classifier = obj == GbdtObjective::logloss || obj == GbdtObjective::focal;
  GbdtModel model;
  model.params = params;
  model.focal = obj == GbdtObjective::focal ? focal : std::nullopt;
  model.n_features = static_cast<std::size_t>(x.cols());
  model.link = obj == GbdtObjective::squared_error ? Link::identity : Link::logistic;

  std::vector<double> weight(n, 1.0);
  if (classifier) {
    const auto n_pos = static_cast<std::size_t>(std::count(targets.begin(), targets.end(), 1.0));
    for (double t : targets) require<DataError>(t == 0.0 || t == 1.0, "classification targets must be 0/1, got ", t);
    require<DataError>(n_pos > 0 && n_pos < n, "GBDT training set must contain both classes (", n_pos, " positives of ",
                       n, ")");
    model.scale_pos_weight = params.scale_pos_weight.value_or(static_cast<double>(n - n_pos) / static_cast<double>(n_pos));
    for (std::size_t i = 0; i < n; ++i)
      if (targets[i] == 1.0) weight[i] = model.scale_pos_weight;
  }
  const double prior = detail::weighted_mean(targets, weight);
  model.base_score = model.link == Link::identity ? prior : logit(prior);

  const detail::ObjectiveEval eval{obj, model.focal};
  const auto valid_n = static_cast<std::size_t>(valid_x.rows());
  std::vector<double> valid_weight(valid_n, 1.0);
  if (classifier)
    for (std::size_t i = 0; i < valid_n; ++i)
      if (valid_targets[i] == 1.0) valid_weight[i] = model.scale_pos_weight;

  const auto bins = detail::FeatureBins::build(x, params.n_bins);
  std::vector<double> raw(n, model.base_score), valid_raw(valid_n, model.base_score);
  std::vector<double> grad(n), hess(n), losses(n), valid_losses(valid_n);
  std::vector<std::size_t> rows(n);
  std::vector<int> leaf_of(n, 0);

  auto train_loss = [&] {
    for (std::size_t i = 0; i < n; ++i) losses[i] = eval.loss(raw[i], targets[i]);
    return detail::weighted_mean(losses, weight);
  };
  auto valid_loss = [&] {
    if (monitor) return monitor(valid_raw);
    for (std::size_t i = 0; i < valid_n; ++i) valid_losses[i] = eval.monitor(valid_raw[i], valid_targets[i]);
    return detail::weighted_mean(valid_losses, valid_weight);
  };

  model.train_loss_curve.push_back(train_loss());
  double best = valid_n > 0 ? valid_loss() : std::numeric_limits<double>::infinity();
  if (valid_n > 0) model.valid_loss_curve.push_back(best);
  std::size_t best_trees = 0;
  int since_best = 0;

  for (int round = 0; round < params.n_trees; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto gh = eval.grad_hess(raw[i], targets[i]);
      grad[i] = weight[i] * gh.grad;
      hess[i] = weight[i] * gh.hess;
    }
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    detail::TreeBuilder builder(bins, params, grad, hess);
    Tree tree = builder.grow(rows, leaf_of);
    for (std::size_t i = 0; i < n; ++i) raw[i] += tree.nodes[static_cast<std::size_t>(leaf_of[i])].value;
    for (std::size_t i = 0; i < valid_n; ++i) valid_raw[i] += tree.predict(valid_x.row(static_cast<Index>(i)).data());
    const bool is_stump = tree.nodes.size() == 1;
    model.trees.push_back(std::move(tree));
    model.train_loss_curve.push_back(train_loss());
    if (valid_n == 0) {
      best_trees = model.trees.size();
      continue;
    }
    const double vl = valid_loss();
    model.valid_loss_curve.push_back(vl);
    if (!std::isfinite(vl)) fail<TrainingError>("GBDT validation loss became non-finite at round ", round);
    if (vl < best - 1e-12) {
      best = vl;
      best_trees = model.trees.size();
      since_best = 0;
    } else if (params.early_stopping_rounds > 0 && ++since_best >= params.early_stopping_rounds) {
      break;
    }
    // A root-only tree with zero value changes nothing; later rounds would repeat it.
    if (is_stump && model.trees.back().nodes[0].value == 0.0) break;
  }
  if (valid_n > 0) {
    model.trees.resize(best_trees);
    model.train_loss_curve.resize(best_trees + 1);
    model.best_valid_loss = best;
  }
  return model;
}

// --- serialization -----------------------------------------------------------

inline void to_json(nlohmann::json& j, const GbdtParams& p) {
  j = nlohmann::json{{"n_trees", p.n_trees},
                     {"max_depth", p.max_depth},
                     {"learning_rate", p.learning_rate},
                     {"min_samples_leaf", p.min_samples_leaf},
                     {"n_bins", p.n_bins},
                     {"l2_leaf", p.l2_leaf},
                     {"min_split_gain", p.min_split_gain},
                     {"early_stopping_rounds", p.early_stopping_rounds},
                     {"objective", to_string(p.objective)},
                     {"seed", p.seed}};
  if (p.scale_pos_weight) j["scale_pos_weight"] = *p.scale_pos_weight;
}

inline void from_json(const nlohmann::json& j, GbdtParams& p) {
  p.n_trees = j.value("n_trees", p.n_trees);
  p.max_depth = j.value("max_depth", p.max_depth);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.min_samples_leaf = j.value("min_samples_leaf", p.min_samples_leaf);
  p.n_bins = j.value("n_bins", p.n_bins);
  p.l2_leaf = j.value("l2_leaf", p.l2_leaf);
  p.min_split_gain = j.value("min_split_gain", p.min_split_gain);
  p.early_stopping_rounds = j.value("early_stopping_rounds", p.early_stopping_rounds);
  if (j.contains("objective")) p.objective = parse_gbdt_objective(j.at("objective").get<std::string>());
  p.seed = j.value("seed", p.seed);
  if (j.contains("scale_pos_weight") && !j.at("scale_pos_weight").is_null())
    p.scale_pos_weight = j.at("scale_pos_weight").get<double>();
}

inline void to_json(nlohmann::json& j, const FocalParams& p) { j = {{"gamma", p.gamma}, {"alpha", p.alpha}}; }
inline void from_json(const nlohmann::json& j, FocalParams& p) {
  p.gamma = j.value("gamma", p.gamma);
  p.alpha = j.value("alpha", p.alpha);
}

inline nlohmann::json gbdt_to_json(const GbdtModel& m) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : m.trees) {
    nlohmann::json feat = nlohmann::json::array(), thr = nlohmann::json::array(), left = nlohmann::json::array(),
                   right = nlohmann::json::array(), val = nlohmann::json::array(), gain = nlohmann::json::array();
    for (const auto& n : t.nodes) {
      feat.push_back(n.feature);
      thr.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      val.push_back(n.value);
      gain.push_back(n.gain);
    }
    trees.push_back({{"feature", feat}, {"threshold", thr}, {"left", left}, {"right", right}, {"value", val},
                     {"gain", gain}});
  }
  nlohmann::json j{{"link", m.link == Link::logistic ? "logistic" : "identity"},
                   {"base_score", m.base_score},
                   {"n_features", m.n_features},
                   {"params", m.params},
                   {"scale_pos_weight", m.scale_pos_weight},
                   {"trees", trees}};
  if (m.focal) j["focal"] = *m.focal;
  if (std::isfinite(m.best_valid_loss)) j["best_valid_loss"] = m.best_valid_loss;
  return j;
}

inline GbdtModel gbdt_from_json(const nlohmann::json& j) {
  GbdtModel m;
  m.link = j.at("link").get<std::string>() == "identity" ? Link::identity : Link::logistic;
  m.base_score = j.at("base_score").get<double>();
  m.n_features = j.at("n_features").get<std::size_t>();
  m.params = j.at("params").get<GbdtParams>();
  m.scale_pos_weight = j.value("scale_pos_weight", 1.0);
  if (j.contains("focal")) m.focal = j.at("focal").get<FocalParams>();
  if (j.contains("best_valid_loss")) m.best_valid_loss = j.at("best_valid_loss").get<double>();
  for (const auto& jt : j.at("trees")) {
    Tree t;
    const auto& feat = jt.at("feature");
    t.nodes.resize(feat.size());
    for (std::size_t i = 0; i < feat.size(); ++i) {
      auto& n = t.nodes[i];
      n.feature = feat[i].get<int>();
      n.threshold = jt.at("threshold")[i].get<double>();
      n.left = jt.at("left")[i].get<int>();
      n.right = jt.at("right")[i].get<int>();
      n.value = jt.at("value")[i].get<double>();
      n.gain = jt.at("gain")[i].get<double>();
      require<DataError>(n.feature < static_cast<int>(m.n_features), "tree node references feature ", n.feature);
      if (n.feature >= 0)
        require<DataError>(n.left > static_cast<int>(i) && n.right == n.left + 1 &&
                               static_cast<std::size_t>(n.right) < feat.size(),
                           "tree node has invalid children");
    }
    require<DataError>(!t.nodes.empty(), "empty tree in model file");
    m.trees.push_back(std::move(t));
  }
  return m;
}

}  // namespace remedi
