#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"

namespace bilevel_reweight {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kDefaultSupportTol = 1e-8;

/// A point of the probability simplex. Construction validates the entries and
/// renormalizes, so the sum is one to rounding after every operation that
/// produces a new value.
class SimplexWeights {
 public:
  SimplexWeights() = default;

  /// Accepts any finite nonnegative vector with positive mass and normalizes it.
  explicit SimplexWeights(VectorXd values) : values_(std::move(values)) {
    require(values_.size() > 0, ErrorKind::kInvalidArgument, "simplex weights need n >= 1");
    double total = 0.0;
    for (Index i = 0; i < values_.size(); ++i) {
      const double v = values_[i];
      require(std::isfinite(v), ErrorKind::kInvalidArgument, "non-finite weight at index " + std::to_string(i));
      require(v >= 0.0, ErrorKind::kInvalidArgument, "negative weight at index " + std::to_string(i));
      total += v;
    }
    require(total > 0.0, ErrorKind::kInvalidArgument, "weights have zero total mass");
    values_ /= total;
  }

  static SimplexWeights uniform(Index n) { return SimplexWeights(VectorXd::Constant(n, 1.0)); }

  static SimplexWeights one_hot(Index n, Index i) {
    require(i >= 0 && i < n, ErrorKind::kInvalidArgument, "one-hot index out of range");
    VectorXd v = VectorXd::Zero(n);
    v[i] = 1.0;
    return SimplexWeights(std::move(v));
  }

  /// Softmax of dual (log-weight) coordinates; -inf entries map to exact zeros.
  static SimplexWeights from_log(const VectorXd& log_weights) {
    const double top = log_weights.maxCoeff();
    require(std::isfinite(top), ErrorKind::kNumericOverflow, "log-weights have no finite maximum");
    // Scalar exp: the vectorized one maps -inf to a denormal instead of 0.
    return SimplexWeights(log_weights.unaryExpr([top](double u) { return std::exp(u - top); }).eval());
  }

  const VectorXd& values() const { return values_; }
  Index size() const { return values_.size(); }
  double operator[](Index i) const { return values_[i]; }

 private:
  VectorXd values_;
};

/// A direction in the tangent space of the simplex (entries sum to zero).
class TangentVector {
 public:
  TangentVector() = default;

  explicit TangentVector(VectorXd values, double tol = 1e-12) : values_(std::move(values)) {
    const double scale = 1.0 + values_.cwiseAbs().sum();
    require(std::abs(values_.sum()) <= tol * scale, ErrorKind::kInvalidArgument,
            "tangent vector entries must sum to zero");
  }

  const VectorXd& values() const { return values_; }
  Index size() const { return values_.size(); }

 private:
  VectorXd values_;
};

/// Entropic mirror-descent update w * exp(-eta * phi), renormalized.
///
/// The exponent is shifted by its minimum over the support, which leaves the
/// normalized result unchanged and keeps every factor in (0, 1]. Coordinates
/// that are exactly zero stay zero.
inline SimplexWeights mirror_step(const SimplexWeights& w, const VectorXd& phi, double eta) {
  require(eta > 0.0 && std::isfinite(eta), ErrorKind::kInvalidArgument, "mirror step size must be positive");
  require(phi.size() == w.size(), ErrorKind::kInvalidArgument, "field and weights differ in size");
  const VectorXd& values = w.values();
  double shift = std::numeric_limits<double>::infinity();
  for (Index i = 0; i < values.size(); ++i) {
    if (values[i] > 0.0) {
      const double s = eta * phi[i];
      require(std::isfinite(s), ErrorKind::kNumericOverflow,
              "non-finite exponent at index " + std::to_string(i) + "; rescale eta");
      shift = std::min(shift, s);
    }
  }
  VectorXd next = VectorXd::Zero(values.size());
  double total = 0.0;
  for (Index i = 0; i < values.size(); ++i) {
    if (values[i] > 0.0) {
      next[i] = values[i] * std::exp(-(eta * phi[i] - shift));
      total += next[i];
    }
  }
  require(std::isfinite(total) && total > 0.0, ErrorKind::kNumericOverflow,
          "mirror step lost all mass; rescale eta");
  return SimplexWeights(std::move(next));
}

/// P(w) = diag(w) - w w^T.
inline MatrixXd preconditioner(const SimplexWeights& w) {
  const VectorXd& v = w.values();
  MatrixXd p = -v * v.transpose();
  p.diagonal() += v;
  return p;
}

/// P(w) x without forming the matrix: w * (x - <w, x>).
inline VectorXd apply_preconditioner(const SimplexWeights& w, const VectorXd& x) {
  const VectorXd& v = w.values();
  return v.cwiseProduct((x.array() - v.dot(x)).matrix());
}

inline double entropy(const SimplexWeights& w) {
  double h = 0.0;
  for (Index i = 0; i < w.size(); ++i) {
    const double v = w[i];
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(h, 0.0);
}

inline std::vector<Index> support(const SimplexWeights& w, double tol = kDefaultSupportTol) {
  require(tol > 0.0, ErrorKind::kInvalidArgument, "support tolerance must be positive");
  std::vector<Index> indices;
  for (Index i = 0; i < w.size(); ++i)
    if (w[i] > tol) indices.push_back(i);
  return indices;
}

inline TangentVector project_tangent(const VectorXd& v) {
  require(v.allFinite(), ErrorKind::kInvalidArgument, "cannot project a non-finite vector");
  VectorXd centered = v.array() - v.mean();
  return TangentVector(std::move(centered), 1e-10);
}

}  // namespace bilevel_reweight
