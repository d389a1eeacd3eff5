#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include <Eigen/Core>

#include "error.hpp"
#include "linear_solve.hpp"
#include "loss_models.hpp"
#include "simplex.hpp"

namespace bilevel_reweight {

template <class M>
inline constexpr bool is_quadratic_model_v = requires { M::kQuadratic; } && M::kQuadratic;

/// Largest eigenvalue of a symmetric PSD operator by power iteration from a
/// fixed start vector (deterministic).
inline double power_iteration(const std::function<VectorXd(const VectorXd&)>& apply, Index dim,
                              int iterations = 100) {
  VectorXd v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  v.normalize();
  double lambda = 0.0;
  for (int it = 0; it < iterations; ++it) {
    VectorXd next = apply(v);
    const double norm = next.norm();
    if (norm == 0.0) return 0.0;
    lambda = v.dot(next);
    v = next / norm;
  }
  return std::max(lambda, 0.0);
}

struct InnerSolveOptions {
  double tol = 1e-10;
  std::int64_t max_iter = 1'000'000;
};

/// Minimizes G(., w) starting at theta0 until ||grad G|| <= tol.
///
/// Quadratic models take exact Newton steps (one suffices up to rounding).
/// Other models run gradient descent with step 1/L, where L bounds the
/// Hessian everywhere: the model's curvature majorant plus mu, estimated by
/// power iteration. Strong convexity then gives ||theta - theta*|| <= tol / mu.
template <LossModel M>
VectorXd solve_inner(const M& model, const Dataset& data, const VectorXd& weights, const VectorXd& theta0,
                     const InnerSolveOptions& options = {}) {
  require(options.tol > 0.0, ErrorKind::kInvalidArgument, "inner tolerance must be positive");
  VectorXd theta = theta0;
  VectorXd grad = inner_grad(model, data, theta, weights);
  if (grad.norm() <= options.tol) return theta;

  if constexpr (is_quadratic_model_v<M>) {
    const MatrixXd h = inner_hessian(model, data, theta, weights);
    Eigen::LLT<MatrixXd> llt(h);
    require(llt.info() == Eigen::Success, ErrorKind::kAssumptionViolation,
            "weighted inner Hessian of the quadratic model is not positive definite");
    for (int refine = 0; refine < 5; ++refine) {
      theta -= llt.solve(grad);
      grad = inner_grad(model, data, theta, weights);
      if (grad.norm() <= options.tol) return theta;
    }
    fail(ErrorKind::kNoConvergence, "Newton refinement stalled above the inner tolerance (ill-conditioned design)");
  } else {
    const double mass = weights.sum();
    const double lipschitz =
        1.05 * power_iteration([&](const VectorXd& v) { return model.curvature_majorant_apply(data, weights, v); },
                               theta.size()) +
        model.mu * mass;
    require(lipschitz > 0.0, ErrorKind::kAssumptionViolation, "inner objective has no curvature");
    const double step = 1.0 / lipschitz;
    for (std::int64_t it = 0; it < options.max_iter; ++it) {
      theta -= step * grad;
      grad = inner_grad(model, data, theta, weights);
      if (grad.norm() <= options.tol) return theta;
      require(grad.allFinite(), ErrorKind::kNumericOverflow, "inner gradient descent diverged");
    }
    fail(ErrorKind::kNoConvergence,
         "inner gradient descent exceeded " + std::to_string(options.max_iter) + " iterations");
  }
}

template <LossModel M>
VectorXd solve_inner(const M& model, const Dataset& data, const SimplexWeights& w, const VectorXd& theta0,
                     double tol) {
  return solve_inner(model, data, w.values(), theta0, InnerSolveOptions{tol});
}

}  // namespace bilevel_reweight
