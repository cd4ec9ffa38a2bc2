// Shared numeric types, error hierarchy and logging for the remedi library.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <mutex>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace remedi {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr int kLibraryVersionMajor = 1;
inline constexpr int kLibraryVersionMinor = 0;
inline constexpr std::string_view kLibraryVersion = "1.0.0";

/// Base of every error raised by the library. `exit_code()` maps onto the CLI
/// contract: 2 usage, 3 data, 4 training.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Invalid parameters or flags.
class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Malformed, inconsistent or insufficient input data.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Numerical failure while fitting a model.
class TrainingError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  os.precision(17);
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename E = DataError, typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw E(detail::concat(std::forward<Args>(args)...));
}

template <typename E = UsageError, typename... Args>
void require(bool condition, Args&&... args) {
  if (!condition) throw E(detail::concat(std::forward<Args>(args)...));
}

// --- logging ---------------------------------------------------------------

enum class LogLevel { debug = 0, info = 1, warning = 2, error = 3, silent = 4 };

class Log {
 public:
  static LogLevel& level() {
    static LogLevel lvl = LogLevel::info;
    return lvl;
  }

  /// Every warning emitted since the last `clear_warnings()`; tests inspect this.
  static std::vector<std::string>& warnings() {
    static std::vector<std::string> w;
    return w;
  }
  static void clear_warnings() {
    std::lock_guard lock(mutex());
    warnings().clear();
  }

  template <typename... Args>
  static void info(Args&&... args) {
    write(LogLevel::info, "info", detail::concat(std::forward<Args>(args)...));
  }
  template <typename... Args>
  static void debug(Args&&... args) {
    write(LogLevel::debug, "debug", detail::concat(std::forward<Args>(args)...));
  }
  template <typename... Args>
  static void warn(Args&&... args) {
    std::string msg = detail::concat(std::forward<Args>(args)...);
    {
      std::lock_guard lock(mutex());
      warnings().push_back(msg);
    }
    write(LogLevel::warning, "warning", msg);
  }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  static void write(LogLevel lvl, std::string_view tag, const std::string& msg) {
    if (lvl < level()) return;
    std::lock_guard lock(mutex());
    std::cerr << "[remedi " << tag << "] " << msg << '\n';
  }
};

// --- numerics --------------------------------------------------------------

inline double sigmoid(double z) {
  if (z >= 0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double logit(double p) {
  p = std::clamp(p, 1e-15, 1.0 - 1e-15);
  return std::log(p / (1.0 - p));
}

/// Median of a copy; the midpoint of the two central order statistics for even sizes.
inline double median_of(std::vector<double> v) {
  require<DataError>(!v.empty(), "median of empty sequence");
  const std::size_t n = v.size();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

/// Weighted binary log loss of probabilities, with clipping. Weights may be empty.
inline double weighted_log_loss(std::span<const double> labels, std::span<const double> probs,
                                std::span<const double> weights = {}, double clip = 1e-15) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double p = std::clamp(probs[i], clip, 1.0 - clip);
    const double w = weights.empty() ? 1.0 : weights[i];
    num += -w * (labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p));
    den += w;
  }
  return den > 0 ? num / den : 0.0;
}

/// Gathers a subset of rows.
inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Index>(r)) = m.row(static_cast<Index>(rows[r]));
  return out;
}

template <typename T>
std::vector<T> take(const std::vector<T>& v, std::span<const std::size_t> rows) {
  std::vector<T> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v[r]);
  return out;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector to_eigen(std::span<const double> v) {
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i];
  return out;
}

}  // namespace remedi
