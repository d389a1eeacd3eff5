#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <vector>

#include <Eigen/Core>

#include "dataset.hpp"
#include "error.hpp"
#include "simplex.hpp"

namespace bilevel_reweight {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A per-sample loss l(theta; x) = fit(theta; x) + (mu / 2) ||theta||^2.
///
/// Models only implement the data-fit term, batched over a dataset; the
/// regularizer and the weighting are added by the free functions below. The
/// test loss uses the same fit term with its own `outer_mu`.
template <class M>
concept LossModel = requires(const M& m, const Dataset& data, const VectorXd& v, Index i) {
  { m.mu } -> std::convertible_to<double>;
  { m.outer_mu } -> std::convertible_to<double>;
  { m.num_params(data) } -> std::convertible_to<Index>;
  { m.fit_losses(data, v) } -> std::convertible_to<VectorXd>;
  { m.weighted_fit_grad(data, v, v) } -> std::convertible_to<VectorXd>;
  { m.fit_grad_dot(data, v, v) } -> std::convertible_to<VectorXd>;
  { m.fit_grad_matrix(data, v) } -> std::convertible_to<MatrixXd>;
  { m.weighted_fit_hess_apply(data, v, v, v) } -> std::convertible_to<VectorXd>;
  { m.weighted_fit_hessian(data, v, v) } -> std::convertible_to<MatrixXd>;
  { m.sample_fit_hess_apply(data, v, i, v) } -> std::convertible_to<VectorXd>;
  { m.curvature_majorant_apply(data, v, v) } -> std::convertible_to<VectorXd>;
};

/// fit(theta; d, y) = 0.5 (<d, theta> - y)^2.
struct RidgeLeastSquares {
  double mu = 0.0;
  double outer_mu = 0.0;

  static constexpr bool kQuadratic = true;

  Index num_params(const Dataset& data) const { return data.dim(); }

  VectorXd residuals(const Dataset& data, const VectorXd& theta) const {
    return data.features * theta - data.targets;
  }

  VectorXd fit_losses(const Dataset& data, const VectorXd& theta) const {
    return 0.5 * residuals(data, theta).array().square().matrix();
  }

  VectorXd weighted_fit_grad(const Dataset& data, const VectorXd& theta, const VectorXd& weights) const {
    return data.features.transpose() * weights.cwiseProduct(residuals(data, theta));
  }

  VectorXd fit_grad_dot(const Dataset& data, const VectorXd& theta, const VectorXd& v) const {
    return residuals(data, theta).cwiseProduct(data.features * v);
  }

  MatrixXd fit_grad_matrix(const Dataset& data, const VectorXd& theta) const {
    return residuals(data, theta).asDiagonal() * data.features;
  }

  VectorXd weighted_fit_hess_apply(const Dataset& data, const VectorXd&, const VectorXd& weights,
                                   const VectorXd& v) const {
    return data.features.transpose() * weights.cwiseProduct(data.features * v);
  }

  MatrixXd weighted_fit_hessian(const Dataset& data, const VectorXd&, const VectorXd& weights) const {
    return data.features.transpose() * weights.asDiagonal() * data.features;
  }

  VectorXd sample_fit_hess_apply(const Dataset& data, const VectorXd&, Index i, const VectorXd& v) const {
    const auto row = data.features.row(i);
    return row.transpose() * row.dot(v);
  }

  VectorXd curvature_majorant_apply(const Dataset& data, const VectorXd& weights, const VectorXd& v) const {
    return weighted_fit_hess_apply(data, v, weights, v);
  }
};

/// Multinomial cross-entropy on logits Theta x, with Theta the C x d
/// row-major reshape of theta. No intercept; append a constant feature to the
/// data if one is wanted.
struct RegularizedMultinomialLogistic {
  double mu = 1e-2;
  double outer_mu = 0.0;

  static constexpr bool kQuadratic = false;

  Index num_params(const Dataset& data) const { return data.num_classes * data.dim(); }

  Eigen::Map<const RowMatrixXd> weights_view(const Dataset& data, const VectorXd& theta) const {
    require(theta.size() == num_params(data), ErrorKind::kInvalidArgument, "parameter size mismatch");
    return Eigen::Map<const RowMatrixXd>(theta.data(), data.num_classes, data.dim());
  }

  MatrixXd logits(const Dataset& data, const VectorXd& theta) const {
    return data.features * weights_view(data, theta).transpose();
  }

  MatrixXd probabilities(const Dataset& data, const VectorXd& theta) const {
    MatrixXd z = logits(data, theta);
    for (Index i = 0; i < z.rows(); ++i) {
      const double top = z.row(i).maxCoeff();
      z.row(i) = (z.row(i).array() - top).exp();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  }

  /// P - Y, one row per sample.
  MatrixXd logit_residuals(const Dataset& data, const VectorXd& theta) const {
    MatrixXd r = probabilities(data, theta);
    for (Index i = 0; i < r.rows(); ++i) r(i, data.label(i)) -= 1.0;
    return r;
  }

  VectorXd fit_losses(const Dataset& data, const VectorXd& theta) const {
    const MatrixXd z = logits(data, theta);
    VectorXd out(z.rows());
    for (Index i = 0; i < z.rows(); ++i) {
      const double top = z.row(i).maxCoeff();
      const double lse = top + std::log((z.row(i).array() - top).exp().sum());
      out[i] = lse - z(i, data.label(i));
    }
    return out;
  }

  static VectorXd flatten(const MatrixXd& block) {
    const RowMatrixXd row_major = block;
    return Eigen::Map<const VectorXd>(row_major.data(), row_major.size());
  }

  VectorXd weighted_fit_grad(const Dataset& data, const VectorXd& theta, const VectorXd& weights) const {
    const MatrixXd r = logit_residuals(data, theta);
    return flatten(r.transpose() * weights.asDiagonal() * data.features);
  }

  VectorXd fit_grad_dot(const Dataset& data, const VectorXd& theta, const VectorXd& v) const {
    const MatrixXd r = logit_residuals(data, theta);
    const MatrixXd xv = data.features * weights_view(data, v).transpose();
    return r.cwiseProduct(xv).rowwise().sum();
  }

  MatrixXd fit_grad_matrix(const Dataset& data, const VectorXd& theta) const {
    const MatrixXd r = logit_residuals(data, theta);
    const Index c = data.num_classes;
    const Index d = data.dim();
    MatrixXd out(data.size(), c * d);
    for (Index i = 0; i < data.size(); ++i)
      for (Index k = 0; k < c; ++k) out.row(i).segment(k * d, d) = r(i, k) * data.features.row(i);
    return out;
  }

  /// Rows of (diag(p_i) - p_i p_i^T) z_i for every sample.
  static MatrixXd softmax_jacobian_rows(const MatrixXd& p, const MatrixXd& z) {
    const MatrixXd pz = p.cwiseProduct(z);
    const VectorXd mean = pz.rowwise().sum();
    return pz - p.cwiseProduct(mean.replicate(1, p.cols()));
  }

  VectorXd weighted_fit_hess_apply(const Dataset& data, const VectorXd& theta, const VectorXd& weights,
                                   const VectorXd& v) const {
    const MatrixXd p = probabilities(data, theta);
    const MatrixXd z = data.features * weights_view(data, v).transpose();
    const MatrixXd s = softmax_jacobian_rows(p, z);
    return flatten(s.transpose() * weights.asDiagonal() * data.features);
  }

  MatrixXd weighted_fit_hessian(const Dataset& data, const VectorXd& theta, const VectorXd& weights) const {
    const MatrixXd p = probabilities(data, theta);
    const Index c = data.num_classes;
    const Index d = data.dim();
    MatrixXd h = MatrixXd::Zero(c * d, c * d);
    for (Index a = 0; a < c; ++a) {
      for (Index b = a; b < c; ++b) {
        VectorXd coeff = p.col(a).cwiseProduct(a == b ? (1.0 - p.col(b).array()).matrix() : (-p.col(b)).eval());
        coeff = coeff.cwiseProduct(weights);
        const MatrixXd block = data.features.transpose() * coeff.asDiagonal() * data.features;
        h.block(a * d, b * d, d, d) = block;
        if (a != b) h.block(b * d, a * d, d, d) = block.transpose();
      }
    }
    return h;
  }

  VectorXd sample_fit_hess_apply(const Dataset& data, const VectorXd& theta, Index i, const VectorXd& v) const {
    const Dataset one = subset(data, std::array<Index, 1>{i});
    return weighted_fit_hess_apply(one, theta, VectorXd::Ones(1), v);
  }

  /// 0.5 * (sum_i w_i x_i x_i^T) acting on every class block; dominates the
  /// fit Hessian everywhere because the softmax Jacobian is bounded by I / 2.
  VectorXd curvature_majorant_apply(const Dataset& data, const VectorXd& weights, const VectorXd& v) const {
    const auto view = weights_view(data, v);
    const MatrixXd xv = data.features * view.transpose();
    return flatten(0.5 * (xv.transpose() * weights.asDiagonal() * data.features));
  }

  std::vector<Index> predict(const Dataset& data, const VectorXd& theta) const {
    const MatrixXd z = logits(data, theta);
    std::vector<Index> labels(static_cast<std::size_t>(z.rows()));
    for (Index i = 0; i < z.rows(); ++i) z.row(i).maxCoeff(&labels[static_cast<std::size_t>(i)]);
    return labels;
  }
};

inline double accuracy(const RegularizedMultinomialLogistic& model, const Dataset& data, const VectorXd& theta) {
  const auto labels = model.predict(data, theta);
  Index hits = 0;
  for (Index i = 0; i < data.size(); ++i) hits += labels[static_cast<std::size_t>(i)] == data.label(i);
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

template <LossModel M>
double strong_convexity(const M& model) {
  return model.mu;
}

// --- inner objective G(theta, w) = sum_i w_i l(theta; x_i) ---------------------------------

template <LossModel M>
double inner_loss(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& weights) {
  return weights.dot(model.fit_losses(data, theta)) + 0.5 * model.mu * weights.sum() * theta.squaredNorm();
}

template <LossModel M>
double inner_loss(const M& model, const Dataset& data, const VectorXd& theta, const SimplexWeights& w) {
  return inner_loss(model, data, theta, w.values());
}

template <LossModel M>
VectorXd inner_grad(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& weights) {
  return model.weighted_fit_grad(data, theta, weights) + model.mu * weights.sum() * theta;
}

template <LossModel M>
VectorXd inner_grad(const M& model, const Dataset& data, const VectorXd& theta, const SimplexWeights& w) {
  return inner_grad(model, data, theta, w.values());
}

template <LossModel M>
VectorXd inner_hess_apply(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& weights,
                          const VectorXd& v) {
  return model.weighted_fit_hess_apply(data, theta, weights, v) + model.mu * weights.sum() * v;
}

template <LossModel M>
VectorXd inner_hess_apply(const M& model, const Dataset& data, const VectorXd& theta, const SimplexWeights& w,
                          const VectorXd& v) {
  return inner_hess_apply(model, data, theta, w.values(), v);
}

template <LossModel M>
MatrixXd inner_hessian(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& weights) {
  MatrixXd h = model.weighted_fit_hessian(data, theta, weights);
  h.diagonal().array() += model.mu * weights.sum();
  return h;
}

template <LossModel M>
MatrixXd inner_hessian(const M& model, const Dataset& data, const VectorXd& theta, const SimplexWeights& w) {
  return inner_hessian(model, data, theta, w.values());
}

/// Hessian of the single-sample loss l(theta; x_i) applied to v.
template <LossModel M>
VectorXd sample_hess_apply(const M& model, const Dataset& data, const VectorXd& theta, Index i, const VectorXd& v) {
  return model.sample_fit_hess_apply(data, theta, i, v) + model.mu * v;
}

/// Gamma: row i is the gradient of l(theta; x_i). Its transpose is the mixed
/// derivative of G with respect to theta and w.
template <LossModel M>
MatrixXd gradient_matrix(const M& model, const Dataset& data, const VectorXd& theta) {
  MatrixXd gamma = model.fit_grad_matrix(data, theta);
  if (model.mu != 0.0) gamma.rowwise() += model.mu * theta.transpose();
  return gamma;
}

/// Gamma v without forming Gamma.
template <LossModel M>
VectorXd gradient_dot(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& v) {
  VectorXd out = model.fit_grad_dot(data, theta, v);
  if (model.mu != 0.0) out.array() += model.mu * theta.dot(v);
  return out;
}

// --- outer objective F(theta) = (1/m) sum_j l'(theta; x'_j) --------------------------------

template <LossModel M>
double outer_loss(const M& model, const Dataset& test, const VectorXd& theta) {
  return model.fit_losses(test, theta).mean() + 0.5 * model.outer_mu * theta.squaredNorm();
}

template <LossModel M>
VectorXd outer_grad(const M& model, const Dataset& test, const VectorXd& theta) {
  const VectorXd uniform = VectorXd::Constant(test.size(), 1.0 / static_cast<double>(test.size()));
  return model.weighted_fit_grad(test, theta, uniform) + model.outer_mu * theta;
}

}  // namespace bilevel_reweight
