// Independent reference implementations used by the unit tests and the
// acceptance runner.
#pragma once

#include "remedi/pipeline.hpp"

#include <random>

namespace remedi::oracle {

/// Meta-feature vector computed directly from the definitions, without the
/// library's helpers: raw, mean, std, median, max, min, norm, diff_mean,
/// rank, range.
inline std::vector<double> naive_meta_features(const std::vector<double>& p, double eps) {
  const std::size_t m = p.size();
  double mean = 0.0;
  for (double v : p) mean += v;
  mean /= static_cast<double>(m);
  double var = 0.0;
  for (double v : p) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(m));
  std::vector<double> s = p;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      if (s[j] < s[i]) std::swap(s[i], s[j]);
  const double median = m % 2 == 1 ? s[m / 2] : 0.5 * (s[m / 2 - 1] + s[m / 2]);
  const double mx = s.back(), mn = s.front();

  std::vector<double> out(p);
  for (double v : {mean, sd, median, mx, mn}) out.push_back(v);
  for (double v : p) out.push_back((v - mean) / (sd + eps));
  for (double v : p) out.push_back(v - mean);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t above = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (p[j] > p[i] || (p[j] == p[i] && j < i)) ++above;
    out.push_back(static_cast<double>(above + 1));
  }
  out.push_back(mx - mn);
  return out;
}

/// Pairwise AUC: fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
inline double brute_auc(const std::vector<double>& y, const std::vector<double>& s) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 1.0) continue;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[j] != 0.0) continue;
      pairs += 1.0;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return good / pairs;
}

/// Row i is in the top K iff fewer than K rows outrank it (higher score, or
/// equal score and smaller id).
inline std::vector<bool> brute_top_k(const std::vector<std::string>& ids, const std::vector<double>& s, std::size_t k) {
  std::vector<bool> in(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::size_t above = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] > s[i] || (s[j] == s[i] && id_less(ids[j], ids[i]))) ++above;
    in[i] = above < k;
  }
  return in;
}

inline double brute_precision_at_k(const std::vector<double>& y, const std::vector<double>& s,
                                   const std::vector<std::string>& ids, std::size_t k) {
  const auto top = brute_top_k(ids, s, k);
  double hits = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    if (top[i]) hits += y[i];
  return hits / static_cast<double>(k);
}

/// (recall, precision, threshold) at every distinct score, high to low.
inline std::vector<PrPoint> brute_pr_curve(const std::vector<double>& y, const std::vector<double>& s) {
  std::vector<double> thr(s);
  std::sort(thr.begin(), thr.end(), std::greater<>());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  double total = 0.0;
  for (double v : y) total += v;
  std::vector<PrPoint> out;
  for (double t : thr) {
    double tp = 0.0, pred = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        pred += 1.0;
        tp += y[i];
      }
    out.push_back({tp / total, tp / pred, t});
  }
  return out;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Central-difference check of `batch_loss_and_grad` for every parameter of
/// `net`. Relative error is |a - n| / max(|a|, |n|, floor).
template <typename Net>
GradCheck check_network_gradients(Net net, const Matrix& x, const std::vector<double>& y,
                                  const std::vector<double>& w, double l2, double h = 1e-6, double floor = 1e-6) {
  const auto analytic = batch_loss_and_grad(net, x, y, w, l2).second;
  auto params = net.parameters();
  GradCheck out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& value = *params[p].value;
    for (Index i = 0; i < value.size(); ++i) {
      const double orig = value.data()[i];
      value.data()[i] = orig + h;
      const double lp = batch_loss_and_grad(net, x, y, w, l2).first;
      value.data()[i] = orig - h;
      const double lm = batch_loss_and_grad(net, x, y, w, l2).first;
      value.data()[i] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[p].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      ++out.checked;
    }
  }
  return out;
}

struct FocalCheck {
  double max_grad_error = 0.0;  // absolute
  double max_hess_error = 0.0;  // absolute, exact second derivative
  bool floor_applied = true;    // boosting hessian == max(exact, 1e-12) everywhere
};

/// Focal gradient against central differences of the loss, and the exact
/// second derivative against central differences of the gradient, over z in
/// [-6, 6].
inline FocalCheck check_focal(const FocalParams& fp, double h = 1e-5) {
  FocalCheck out;
  for (double y : {0.0, 1.0})
    for (double z = -6.0; z <= 6.0 + 1e-9; z += 0.25) {
      const auto d = focal_derivatives(z, y, fp);
      const double g = (focal_loss(z + h, y, fp) - focal_loss(z - h, y, fp)) / (2.0 * h);
      const double hs = (focal_derivatives(z + h, y, fp).grad - focal_derivatives(z - h, y, fp).grad) / (2.0 * h);
      out.max_grad_error = std::max(out.max_grad_error, std::abs(d.grad - g));
      out.max_hess_error = std::max(out.max_hess_error, std::abs(d.hess - hs));
      const auto boost = focal_grad_hess(z, y, fp);
      out.floor_applied = out.floor_applied && boost.grad == d.grad && boost.hess == std::max(d.hess, 1e-12);
    }
  return out;
}

/// Small dense dataset: `d` numeric features, label = 1 iff a noisy linear
/// score exceeds its `1 - pos_rate` quantile.
inline LabeledDataset toy_dataset(std::size_t n, std::size_t d, double pos_rate, std::uint64_t seed,
                                  double noise = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset data;
  for (std::size_t c = 0; c < d; ++c) data.schema.columns.push_back({"x" + std::to_string(c), ColumnKind::numeric});
  data.features.resize(static_cast<Index>(n), static_cast<Index>(d));
  std::vector<double> score(n);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = normal(rng);
      data.features(static_cast<Index>(r), static_cast<Index>(c)) = v;
      s += v / static_cast<double>(c + 1);
    }
    score[r] = s + noise * normal(rng);
    data.ids.push_back(std::to_string(r));
  }
  std::vector<double> sorted(score);
  std::sort(sorted.begin(), sorted.end());
  const double cut = sorted[static_cast<std::size_t>((1.0 - pos_rate) * static_cast<double>(n))];
  for (double s : score) data.labels.push_back(s >= cut ? 1.0 : 0.0);
  return data;
}

/// Base learner specs sized for tiny datasets.
inline std::vector<LearnerSpec> small_learners() {
  auto specs = default_learners();
  for (auto& s : specs) {
    s.gbdt.n_trees = 20;
    s.gbdt.max_depth = 3;
    s.gbdt.min_samples_leaf = 5;
    s.gbdt.early_stopping_rounds = 5;
    s.mlp.hidden_sizes = {8};
    s.mlp.epochs = 5;
    s.mlp.batch_size = 32;
    s.fm.k = 3;
    s.fm.deep_hidden_sizes = {4};
    s.fm.epochs = 5;
    s.fm.batch_size = 32;
  }
  specs[4].mask_prefixes.clear();
  specs[4].mask = {"x0", "x1"};
  return specs;
}

/// Round-robin folds by row index: row i goes to fold i mod k.
inline std::vector<int> fixed_folds(std::size_t n, int k) {
  std::vector<int> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = static_cast<int>(i % static_cast<std::size_t>(k));
  return f;
}

struct LeakageCheck {
  double max_change = 0.0;  // over every flipped row and every model column
  std::size_t rows_flipped = 0;
};

/// Flips each of the first `rows` labels in turn, recomputes the OOF matrix
/// with the same folds and seed, and records how far the flipped row's OOF
/// predictions move.
inline LeakageCheck oof_leakage(const LabeledDataset& data, const std::vector<LearnerSpec>& specs, int k,
                                std::size_t rows, std::uint64_t seed = 3) {
  const auto folds = fixed_folds(data.rows(), k);
  OofOptions opt;
  opt.refit_full = false;
  const Matrix base = oof_predictions(data, specs, folds, seed, opt).oof.values;
  LeakageCheck out;
  for (std::size_t i = 0; i < std::min(rows, data.rows()); ++i) {
    LabeledDataset flipped = data;
    flipped.labels[i] = 1.0 - flipped.labels[i];
    const Matrix again = oof_predictions(flipped, specs, folds, seed, opt).oof.values;
    out.max_change = std::max(out.max_change, (again.row(static_cast<Index>(i)) - base.row(static_cast<Index>(i))).cwiseAbs().maxCoeff());
    ++out.rows_flipped;
  }
  return out;
}

}  // namespace remedi::oracle
