#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "error.hpp"
#include "inner_solve.hpp"
#include "linear_solve.hpp"
#include "loss_models.hpp"
#include "simplex.hpp"

namespace bilevel_reweight {

/// Solves H v = rhs with H the inner Hessian at (theta, w).
template <LossModel M>
VectorXd solve_inner_system(const M& model, const Dataset& data, const VectorXd& theta, const VectorXd& weights,
                            const VectorXd& rhs, const HypergradConfig& cfg = {}) {
  cfg.validate();
  return solve_spd([&] { return inner_hessian(model, data, theta, weights); },
                   [&](const VectorXd& v) { return inner_hess_apply(model, data, theta, weights, v); }, rhs, cfg);
}

template <LossModel M>
VectorXd solve_inner_system(const M& model, const Dataset& data, const VectorXd& theta, const SimplexWeights& w,
                            const VectorXd& rhs, const HypergradConfig& cfg = {}) {
  return solve_inner_system(model, data, theta, w.values(), rhs, cfg);
}

/// Psi(theta, w)_i = -<grad l(theta; x_i), H(theta, w)^{-1} grad F(theta)>.
/// Negative entries mark samples whose gradient aligns with the test
/// gradient in the H^{-1} metric; mirror descent raises their weight.
template <LossModel M>
VectorXd hypergrad(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta,
                   const VectorXd& weights, const HypergradConfig& cfg = {}) {
  const VectorXd outer = outer_grad(model, test, theta);
  const VectorXd v = solve_inner_system(model, train, theta, weights, outer, cfg);
  return -gradient_dot(model, train, theta, v);
}

template <LossModel M>
VectorXd hypergrad(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta,
                   const SimplexWeights& w, const HypergradConfig& cfg = {}) {
  return hypergrad(model, train, test, theta, w.values(), cfg);
}

/// The hypergradient field with the parameters frozen at theta0:
/// phi(w) = -Gamma g(w), g(w) = (sum_j w_j A_j)^{-1} b, where A_j are the
/// per-sample Hessians at theta0 and b = grad F(theta0).
///
/// The field is defined on the whole positive orthant (not only the simplex)
/// so that its Jacobian in w is well defined.
class FrozenField {
 public:
  using HessianFn = std::function<MatrixXd(const VectorXd& weights)>;
  using HessApplyFn = std::function<VectorXd(const VectorXd& weights, const VectorXd& v)>;
  using SampleHessApplyFn = std::function<VectorXd(Index sample, const VectorXd& v)>;

  FrozenField(MatrixXd gamma, VectorXd outer_gradient, HessianFn hessian, HessApplyFn hess_apply,
              SampleHessApplyFn sample_hess_apply, HypergradConfig cfg = {})
      : gamma_(std::make_shared<const MatrixXd>(std::move(gamma))),
        outer_gradient_(std::move(outer_gradient)),
        hessian_(std::move(hessian)),
        hess_apply_(std::move(hess_apply)),
        sample_hess_apply_(std::move(sample_hess_apply)),
        cfg_(cfg) {
    require(gamma_->cols() == outer_gradient_.size(), ErrorKind::kInvalidArgument,
            "gradient matrix and outer gradient disagree on p");
    cfg_.validate();
  }

  Index num_samples() const { return gamma_->rows(); }
  Index num_params() const { return gamma_->cols(); }
  const MatrixXd& gamma() const { return *gamma_; }
  const VectorXd& outer_gradient() const { return outer_gradient_; }

  MatrixXd hessian(const VectorXd& weights) const {
    if (hessian_) return hessian_(weights);
    MatrixXd h(num_params(), num_params());
    for (Index k = 0; k < num_params(); ++k) h.col(k) = hess_apply_(weights, VectorXd::Unit(num_params(), k));
    return h;
  }

  VectorXd hess_apply(const VectorXd& weights, const VectorXd& v) const {
    if (hess_apply_) return hess_apply_(weights, v);
    return hessian_(weights) * v;
  }

  VectorXd sample_hess_apply(Index sample, const VectorXd& v) const { return sample_hess_apply_(sample, v); }

  VectorXd g(const VectorXd& weights) const {
    require(weights.size() == num_samples(), ErrorKind::kInvalidArgument, "weights size mismatch");
    return solve_spd(hessian_ ? std::function<MatrixXd()>([&] { return hessian_(weights); })
                              : std::function<MatrixXd()>(),
                     hess_apply_ ? std::function<VectorXd(const VectorXd&)>(
                                       [&](const VectorXd& v) { return hess_apply_(weights, v); })
                                 : std::function<VectorXd(const VectorXd&)>(),
                     outer_gradient_, cfg_);
  }

  VectorXd operator()(const VectorXd& weights) const { return -(*gamma_ * g(weights)); }
  VectorXd operator()(const SimplexWeights& w) const { return (*this)(w.values()); }

  /// J_ij = d phi_i / d w_j = <Gamma_i, H^{-1} A_j g>.
  MatrixXd jacobian(const VectorXd& weights) const {
    require(static_cast<bool>(sample_hess_apply_), ErrorKind::kPreconditionViolation,
            "analytic Jacobian needs per-sample Hessian actions");
    const VectorXd gw = g(weights);
    MatrixXd curvature(num_params(), num_samples());
    for (Index j = 0; j < num_samples(); ++j) curvature.col(j) = sample_hess_apply_(j, gw);
    MatrixXd solved(num_params(), num_samples());
    const MatrixXd h = hessian(weights);
    Eigen::LLT<MatrixXd> llt(h);
    require(llt.info() == Eigen::Success, ErrorKind::kAssumptionViolation,
            "frozen Hessian is not positive definite");
    solved = llt.solve(curvature);
    return *gamma_ * solved;
  }

 private:
  std::shared_ptr<const MatrixXd> gamma_;
  VectorXd outer_gradient_;
  HessianFn hessian_;
  HessApplyFn hess_apply_;
  SampleHessApplyFn sample_hess_apply_;
  HypergradConfig cfg_;
};

/// Freezes the parameters of a loss-model problem at theta0. The closure keeps
/// its own copy of the training set.
template <LossModel M>
FrozenField frozen_field(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta0,
                         const HypergradConfig& cfg = {}) {
  auto data = std::make_shared<const Dataset>(train);
  const VectorXd theta = theta0;
  const bool explicit_hessian = cfg.use_direct(model.num_params(train));
  FrozenField::HessianFn hessian;
  if (explicit_hessian) {
    hessian = [model, data, theta](const VectorXd& weights) { return inner_hessian(model, *data, theta, weights); };
  }
  FrozenField::HessApplyFn apply = [model, data, theta](const VectorXd& weights, const VectorXd& v) {
    return inner_hess_apply(model, *data, theta, weights, v);
  };
  FrozenField::SampleHessApplyFn sample = [model, data, theta](Index j, const VectorXd& v) {
    return sample_hess_apply(model, *data, theta, j, v);
  };
  return FrozenField(gradient_matrix(model, train, theta0), outer_grad(model, test, theta0), std::move(hessian),
                     std::move(apply), std::move(sample), cfg);
}

/// Exact minimizer of the weighted ridge objective:
/// (sum_i w_i d_i d_i^T + mu (sum_i w_i) I)^{-1} sum_i w_i y_i d_i.
inline VectorXd closed_form_inner_quadratic(const Dataset& data, const VectorXd& weights, double mu) {
  require(weights.size() == data.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
  MatrixXd h = data.features.transpose() * weights.asDiagonal() * data.features;
  h.diagonal().array() += mu * weights.sum();
  const VectorXd rhs = data.features.transpose() * weights.cwiseProduct(data.targets);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(h);
  const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  const double bottom = eig.eigenvalues().minCoeff();
  require(bottom > 1e-12 * std::max(top, 1.0), ErrorKind::kSingularDesign,
          "weighted design is singular (support too small for the parameter dimension?)");
  Eigen::LLT<MatrixXd> llt(h);
  VectorXd theta = llt.solve(rhs);
  // One residual correction brings the gradient down to rounding level.
  theta += llt.solve(rhs - h * theta);
  return theta;
}

inline VectorXd closed_form_inner_quadratic(const Dataset& data, const SimplexWeights& w, double mu) {
  return closed_form_inner_quadratic(data, w.values(), mu);
}

/// theta*(w) to oracle precision: closed form for ridge, tight iterative solve
/// otherwise.
template <LossModel M>
VectorXd inner_minimizer(const M& model, const Dataset& train, const VectorXd& weights,
                         const VectorXd* warm_start = nullptr, double tol = 1e-11) {
  if constexpr (std::is_same_v<M, RidgeLeastSquares>) {
    (void)warm_start;
    (void)tol;
    return closed_form_inner_quadratic(train, weights, model.mu);
  } else {
    const VectorXd start = warm_start ? *warm_start : VectorXd::Zero(model.num_params(train));
    return solve_inner(model, train, weights, start, InnerSolveOptions{tol});
  }
}

/// h(w) = F(theta*(w)).
template <LossModel M>
double value_function(const M& model, const Dataset& train, const Dataset& test, const VectorXd& weights) {
  return outer_loss(model, test, inner_minimizer(model, train, weights));
}

template <LossModel M>
double value_function(const M& model, const Dataset& train, const Dataset& test, const SimplexWeights& w) {
  return value_function(model, train, test, w.values());
}

inline double default_fd_step(const SimplexWeights& w) { return 1e-5 * (1.0 + w.values().cwiseAbs().maxCoeff()); }

/// Central difference of h along a tangent direction; the oracle for the
/// hypergradient. eps <= 0 selects the default step.
template <LossModel M>
double value_function_fd(const M& model, const Dataset& train, const Dataset& test, const SimplexWeights& w,
                         const TangentVector& direction, double eps = 0.0) {
  require(direction.size() == w.size(), ErrorKind::kInvalidArgument, "direction size mismatch");
  if (direction.values().isZero(0.0)) return 0.0;
  if (eps <= 0.0) eps = default_fd_step(w);
  const VectorXd plus = w.values() + eps * direction.values();
  const VectorXd minus = w.values() - eps * direction.values();
  require(plus.minCoeff() >= 0.0 && minus.minCoeff() >= 0.0, ErrorKind::kStepTooLarge,
          "finite-difference step leaves the simplex");
  return (value_function(model, train, test, plus) - value_function(model, train, test, minus)) / (2.0 * eps);
}

}  // namespace bilevel_reweight
