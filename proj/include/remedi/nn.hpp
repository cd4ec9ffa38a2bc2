// Small dense-network toolkit: ReLU stacks with manual backprop, Adam, and a
// mini-batch trainer for weighted binary cross-entropy with early stopping.
//
// A trainable network type `Net` provides
//   struct Tape;                                     // forward cache
//   Vector forward(const Matrix& x, Tape* tape) const; // logits
//   std::vector<Matrix> backward(const Matrix& x, const Tape&, const Vector& dlogits) const;
//   std::vector<Param> parameters();                 // same order as backward's gradients
#pragma once

#include "remedi/common.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <numeric>
#include <optional>
#include <random>

namespace remedi {

struct Param {
  Matrix* value;
  bool decay;  // subject to L2
};

/// Fully connected layers; hidden layers use ReLU, the last layer is linear
/// unless `relu_last` is set.
struct DenseStack {
  std::vector<Matrix> weights;  // in x out
  std::vector<Matrix> biases;   // 1 x out
  bool relu_last = false;

  struct Tape {
    std::vector<Matrix> inputs;  // input to each layer
    std::vector<Matrix> pre;     // pre-activation of each layer
  };

  static DenseStack make(Index in, const std::vector<int>& sizes, bool relu_last, std::mt19937_64& rng) {
    DenseStack s;
    s.relu_last = relu_last;
    Index fan_in = in;
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      require(sizes[l] >= 1, "layer sizes must be >= 1");
      const bool is_relu = l + 1 < sizes.size() || relu_last;
      const double scale = std::sqrt((is_relu ? 2.0 : 1.0) / static_cast<double>(std::max<Index>(fan_in, 1)));
      std::normal_distribution<double> dist(0.0, scale);
      Matrix w(fan_in, sizes[l]);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
      s.weights.push_back(std::move(w));
      s.biases.push_back(Matrix::Zero(1, sizes[l]));
      fan_in = sizes[l];
    }
    return s;
  }

  std::size_t depth() const { return weights.size(); }
  Index in_size() const { return weights.empty() ? 0 : weights.front().rows(); }
  Index out_size() const { return weights.empty() ? 0 : weights.back().cols(); }
  bool relu_at(std::size_t l) const { return l + 1 < depth() || relu_last; }

  Matrix forward(const Matrix& x, Tape* tape) const {
    Matrix h = x;
    if (tape) {
      tape->inputs.clear();
      tape->pre.clear();
    }
    for (std::size_t l = 0; l < depth(); ++l) {
      Matrix z = h * weights[l];
      z.rowwise() += biases[l].row(0);
      if (tape) {
        tape->inputs.push_back(std::move(h));
        tape->pre.push_back(z);
      }
      h = relu_at(l) ? Matrix(z.cwiseMax(0.0)) : std::move(z);
    }
    return h;
  }

  /// Appends weight/bias gradients (layer order) to `grads` and returns dL/dx.
  Matrix backward(const Tape& tape, Matrix d_out, std::vector<Matrix>& grads) const {
    std::vector<Matrix> gw(depth()), gb(depth());
    for (std::size_t l = depth(); l-- > 0;) {
      if (relu_at(l)) d_out = d_out.cwiseProduct((tape.pre[l].array() > 0.0).cast<double>().matrix());
      gw[l] = tape.inputs[l].transpose() * d_out;
      gb[l] = d_out.colwise().sum();
      d_out = d_out * weights[l].transpose();
    }
    for (std::size_t l = 0; l < depth(); ++l) {
      grads.push_back(std::move(gw[l]));
      grads.push_back(std::move(gb[l]));
    }
    return d_out;
  }

  void collect(std::vector<Param>& out) {
    for (std::size_t l = 0; l < depth(); ++l) {
      out.push_back({&weights[l], true});
      out.push_back({&biases[l], false});
    }
  }
};

/// Column-wise affine standardization fitted on training inputs.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    s.scale.resize(x.cols());
    for (Index c = 0; c < x.cols(); ++c) {
      const double var = (x.col(c).array() - s.mean[c]).square().mean();
      s.scale[c] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  static Standardizer identity(Index cols) { return {Vector::Zero(cols), Vector::Ones(cols)}; }

  Matrix apply(const Matrix& x) const {
    require<DataError>(x.cols() == mean.size(), "standardizer expects ", mean.size(), " columns, got ", x.cols());
    Matrix out = x;
    out.rowwise() -= mean.transpose();
    out.array().rowwise() /= scale.transpose().array();
    return out;
  }
};

// --- concrete networks -------------------------------------------------------

/// Feed-forward classifier: ReLU hidden layers and a single logit output. With
/// no hidden layers it is logistic regression.
struct MlpNet {
  DenseStack stack;

  using Tape = DenseStack::Tape;

  static MlpNet make(Index in, const std::vector<int>& hidden, std::mt19937_64& rng) {
    std::vector<int> sizes = hidden;
    sizes.push_back(1);
    return {DenseStack::make(in, sizes, false, rng)};
  }

  Index in_size() const { return stack.in_size(); }

  Vector forward(const Matrix& x, Tape* tape) const { return stack.forward(x, tape).col(0); }

  std::vector<Matrix> backward(const Matrix&, const Tape& tape, const Vector& dlogits) const {
    std::vector<Matrix> grads;
    stack.backward(tape, Matrix(dlogits), grads);
    return grads;
  }

  std::vector<Param> parameters() {
    std::vector<Param> p;
    stack.collect(p);
    return p;
  }
};

/// Factorization machine with an optional deep head over the field embeddings
/// (e_{i,f} = v_{i,f} * x_i); the two logits are summed before the sigmoid.
struct FmNet {
  Matrix w0;  // 1 x 1
  Matrix w;   // d x 1
  Matrix v;   // d x k
  std::optional<DenseStack> deep;

  struct Tape {
    Matrix sums;  // x * v, B x k
    Matrix embed;  // B x (d*k) when deep
    DenseStack::Tape deep_tape;
  };

  static FmNet make(Index d, int k, const std::vector<int>& deep_hidden, std::mt19937_64& rng) {
    require(k >= 1, "embedding dimension k must be >= 1");
    FmNet n;
    n.w0 = Matrix::Zero(1, 1);
    n.w = Matrix::Zero(d, 1);
    std::normal_distribution<double> dist(0.0, 0.1 / std::sqrt(static_cast<double>(k)));
    n.v.resize(d, k);
    for (Index i = 0; i < n.v.size(); ++i) n.v.data()[i] = dist(rng);
    if (!deep_hidden.empty()) {
      std::vector<int> sizes = deep_hidden;
      sizes.push_back(1);
      n.deep = DenseStack::make(d * k, sizes, false, rng);
    }
    return n;
  }

  Index in_size() const { return w.rows(); }
  Index k() const { return v.cols(); }

  Matrix embeddings(const Matrix& x) const {
    const Index d = w.rows(), kk = k();
    Matrix e(x.rows(), d * kk);
    for (Index b = 0; b < x.rows(); ++b)
      for (Index i = 0; i < d; ++i)
        for (Index f = 0; f < kk; ++f) e(b, i * kk + f) = v(i, f) * x(b, i);
    return e;
  }

  /// Second-order term sum_{i<j} <v_i, v_j> x_i x_j via the O(kd) identity.
  Vector pairwise(const Matrix& x, const Matrix& sums) const {
    const Matrix sq = x.array().square().matrix() * v.array().square().matrix();
    return 0.5 * (sums.array().square() - sq.array()).rowwise().sum().matrix();
  }

  Vector forward(const Matrix& x, Tape* tape) const {
    require<DataError>(x.cols() == w.rows(), "FM expects ", w.rows(), " features, got ", x.cols());
    Matrix sums = x * v;
    Vector out = (x * w).col(0) + pairwise(x, sums);
    out.array() += w0(0, 0);
    if (deep) {
      Matrix e = embeddings(x);
      out += deep->forward(e, tape ? &tape->deep_tape : nullptr).col(0);
      if (tape) tape->embed = std::move(e);
    }
    if (tape) tape->sums = std::move(sums);
    return out;
  }

  std::vector<Matrix> backward(const Matrix& x, const Tape& tape, const Vector& dl) const {
    std::vector<Matrix> grads;
    grads.push_back(Matrix::Constant(1, 1, dl.sum()));
    grads.push_back(x.transpose() * dl);
    Matrix gv = x.transpose() * (tape.sums.array().colwise() * dl.array()).matrix();
    const Vector xsq = x.array().square().matrix().transpose() * dl;
    gv -= (v.array().colwise() * xsq.array()).matrix();
    std::vector<Matrix> deep_grads;
    if (deep) {
      const Matrix de = deep->backward(tape.deep_tape, Matrix(dl), deep_grads);
      const Index d = w.rows(), kk = k();
      for (Index b = 0; b < x.rows(); ++b)
        for (Index i = 0; i < d; ++i) {
          const double xi = x(b, i);
          if (xi == 0.0) continue;
          for (Index f = 0; f < kk; ++f) gv(i, f) += de(b, i * kk + f) * xi;
        }
    }
    grads.push_back(std::move(gv));
    for (auto& g : deep_grads) grads.push_back(std::move(g));
    return grads;
  }

  std::vector<Param> parameters() {
    std::vector<Param> p{{&w0, false}, {&w, true}, {&v, true}};
    if (deep) deep->collect(p);
    return p;
  }
};

// --- training ---------------------------------------------------------------

struct NnTrainConfig {
  double learning_rate = 1e-3;
  int epochs = 20;
  int batch_size = 256;
  double l2 = 1e-5;
  std::optional<double> class_weight_pos;  // unset: N_neg / N_pos
  int early_stopping_rounds = 3;
  std::uint64_t seed = 1;

  void validate() const {
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(epochs >= 0, "epochs must be nonnegative");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(l2 >= 0.0, "l2 must be nonnegative");
    require(!class_weight_pos || *class_weight_pos > 0.0, "class_weight_pos must be positive");
    require(early_stopping_rounds >= 0, "early_stopping_rounds must be nonnegative");
  }
};

struct NnFitReport {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_valid_loss = std::numeric_limits<double>::quiet_NaN();
  double class_weight_pos = 1.0;
};

inline double class_balance_weight(std::span<const double> labels) {
  const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1.0));
  const double neg = static_cast<double>(labels.size()) - pos;
  require<DataError>(pos > 0 && neg > 0, "training labels must contain both classes (", pos, " positives, ", neg,
                     " negatives)");
  return neg / pos;
}

inline std::vector<double> class_weights(std::span<const double> labels, double pos_weight) {
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = labels[i] == 1.0 ? pos_weight : 1.0;
  return w;
}

/// Weighted mean BCE over the batch plus 0.5*l2*||W||^2, and its gradient in
/// `parameters()` order.
template <typename Net>
std::pair<double, std::vector<Matrix>> batch_loss_and_grad(Net& net, const Matrix& x, std::span<const double> y,
                                                           std::span<const double> w, double l2) {
  typename Net::Tape tape;
  const Vector z = net.forward(x, &tape);
  double wsum = 0.0;
  for (double wi : w) wsum += wi;
  Vector dl(z.size());
  double loss = 0.0;
  for (Index i = 0; i < z.size(); ++i) {
    const auto ui = static_cast<std::size_t>(i);
    loss += w[ui] * (y[ui] * softplus(-z[i]) + (1.0 - y[ui]) * softplus(z[i]));
    dl[i] = w[ui] * (sigmoid(z[i]) - y[ui]) / wsum;
  }
  loss /= wsum;
  auto grads = net.backward(x, tape, dl);
  auto params = net.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p].decay || l2 == 0.0) continue;
    loss += 0.5 * l2 * params[p].value->squaredNorm();
    grads[p] += l2 * *params[p].value;
  }
  return {loss, std::move(grads)};
}

/// Sigmoid outputs, computed in row chunks to bound intermediate memory.
template <typename Net>
Vector predict_proba(const Net& net, const Matrix& x) {
  constexpr Index kChunk = 2048;
  Vector out(x.rows());
  for (Index r0 = 0; r0 < x.rows(); r0 += kChunk) {
    const Index n = std::min(kChunk, x.rows() - r0);
    out.segment(r0, n) = net.forward(x.middleRows(r0, n), nullptr);
  }
  for (Index i = 0; i < out.size(); ++i) out[i] = sigmoid(out[i]);
  return out;
}

/// Adam on mini-batches; keeps the parameters of the best validation epoch.
/// Validation is skipped (and every epoch kept) when `valid_x` has no rows.
template <typename Net>
NnFitReport fit_network(Net& net, const Matrix& x, std::span<const double> y, const Matrix& valid_x,
                        std::span<const double> valid_y, const NnTrainConfig& cfg) {
  cfg.validate();
  require<DataError>(static_cast<std::size_t>(x.rows()) == y.size(), "training label count mismatch");
  require<DataError>(static_cast<std::size_t>(valid_x.rows()) == valid_y.size(), "validation label count mismatch");
  require<DataError>(x.allFinite(), "training inputs contain non-finite values");
  NnFitReport report;
  report.class_weight_pos = cfg.class_weight_pos.value_or(class_balance_weight(y));
  const auto w = class_weights(y, report.class_weight_pos);
  const auto vw = class_weights(valid_y, report.class_weight_pos);

  auto params = net.parameters();
  std::vector<Matrix> m1, m2;
  for (auto& p : params) {
    m1.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
    m2.push_back(Matrix::Zero(p.value->rows(), p.value->cols()));
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long step = 0;

  auto snapshot = [&] {
    std::vector<Matrix> s;
    for (auto& p : params) s.push_back(*p.value);
    return s;
  };
  auto valid_loss = [&] {
    const Vector pv = predict_proba(net, valid_x);
    return weighted_log_loss(valid_y, {pv.data(), static_cast<std::size_t>(pv.size())}, vw);
  };

  const bool validate = valid_x.rows() > 0;
  std::vector<Matrix> best_params = snapshot();
  double best = validate ? valid_loss() : std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(static_cast<std::size_t>(x.rows()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::vector<double> y_all(y.begin(), y.end());

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = take_rows(x, idx);
      const auto yb = take(y_all, idx);
      const auto wb = take(w, idx);
      auto [loss, grads] = batch_loss_and_grad(net, xb, yb, wb, cfg.l2);
      if (!std::isfinite(loss)) fail<TrainingError>("non-finite training loss at epoch ", epoch);
      epoch_loss += loss * static_cast<double>(end - start);
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        m1[p] = kBeta1 * m1[p] + (1.0 - kBeta1) * grads[p];
        m2[p] = kBeta2 * m2[p] + (1.0 - kBeta2) * grads[p].cwiseAbs2();
        params[p].value->array() -=
            cfg.learning_rate * (m1[p].array() / c1) / ((m2[p].array() / c2).sqrt() + kEps);
      }
    }
    report.epochs_run = epoch;
    if (!std::isfinite(epoch_loss)) fail<TrainingError>("non-finite training loss at epoch ", epoch);
    if (!validate) {
      report.best_epoch = epoch;
      continue;
    }
    const double vl = valid_loss();
    if (!std::isfinite(vl)) fail<TrainingError>("non-finite validation loss at epoch ", epoch);
    if (vl < best - 1e-12) {
      best = vl;
      best_params = snapshot();
      report.best_epoch = epoch;
      since_best = 0;
    } else if (cfg.early_stopping_rounds > 0 && ++since_best >= cfg.early_stopping_rounds) {
      break;
    }
  }
  if (validate) {
    for (std::size_t p = 0; p < params.size(); ++p) *params[p].value = best_params[p];
    report.best_valid_loss = best;
  }
  return report;
}

// --- serialization -----------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Index>();
  const auto cols = j.at("cols").get<Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require<DataError>(static_cast<Index>(data.size()) == rows * cols, "matrix payload has wrong length");
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

inline nlohmann::json stack_to_json(const DenseStack& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < s.depth(); ++l)
    layers.push_back({{"weight", matrix_to_json(s.weights[l])}, {"bias", matrix_to_json(s.biases[l])}});
  return {{"relu_last", s.relu_last}, {"layers", layers}};
}

inline DenseStack stack_from_json(const nlohmann::json& j) {
  DenseStack s;
  s.relu_last = j.at("relu_last").get<bool>();
  for (const auto& l : j.at("layers")) {
    s.weights.push_back(matrix_from_json(l.at("weight")));
    s.biases.push_back(matrix_from_json(l.at("bias")));
    const auto& w = s.weights.back();
    const auto& b = s.biases.back();
    require<DataError>(b.rows() == 1 && b.cols() == w.cols(), "layer bias shape mismatch");
    if (s.depth() > 1) require<DataError>(s.weights[s.depth() - 2].cols() == w.rows(), "layer shapes do not chain");
  }
  return s;
}

inline nlohmann::json standardizer_to_json(const Standardizer& s) {
  return {{"mean", to_std(s.mean)}, {"scale", to_std(s.scale)}};
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("scale").get<std::vector<double>>();
  require<DataError>(m.size() == s.size(), "standardizer shape mismatch");
  return {to_eigen(m), to_eigen(s)};
}

}  // namespace remedi
