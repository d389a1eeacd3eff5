#pragma once

#include <cmath>
#include <functional>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "error.hpp"

namespace bilevel_reweight {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class LinearSolver { kAuto, kDirect, kConjugateGradient };

struct HypergradConfig {
  LinearSolver linear_solver = LinearSolver::kAuto;
  double cg_tol = 1e-10;
  /// 0 means 10 * p.
  Index cg_max_iter = 0;
  /// kAuto solves directly when p <= direct_threshold.
  Index direct_threshold = 64;

  void validate() const {
    require(cg_tol > 0.0 && cg_tol <= 1e-2, ErrorKind::kInvalidArgument, "cg_tol must lie in (0, 1e-2]");
    require(cg_max_iter >= 0, ErrorKind::kInvalidArgument, "cg_max_iter must be nonnegative");
    require(direct_threshold >= 1, ErrorKind::kInvalidArgument, "direct_threshold must be positive");
  }

  bool use_direct(Index p) const {
    switch (linear_solver) {
      case LinearSolver::kDirect: return true;
      case LinearSolver::kConjugateGradient: return false;
      case LinearSolver::kAuto: return p <= direct_threshold;
    }
    return true;
  }
};

/// Cholesky solve; a failed factorization means the matrix is not positive
/// definite, which breaks the strong-convexity assumption the solver relies on.
inline VectorXd solve_spd_direct(const MatrixXd& h, const VectorXd& rhs) {
  require(h.rows() == rhs.size(), ErrorKind::kInvalidArgument, "system size mismatch");
  if (rhs.isZero(0.0)) return VectorXd::Zero(rhs.size());
  Eigen::LLT<MatrixXd> llt(h);
  require(llt.info() == Eigen::Success, ErrorKind::kAssumptionViolation,
          "inner Hessian is not positive definite (factorization failed)");
  VectorXd x = llt.solve(rhs);
  require(x.allFinite(), ErrorKind::kAssumptionViolation, "inner Hessian solve produced non-finite values");
  return x;
}

/// Conjugate gradient on an operator; stops when ||H x - rhs|| <= tol ||rhs||.
inline VectorXd solve_spd_cg(const std::function<VectorXd(const VectorXd&)>& apply, const VectorXd& rhs,
                             double tol, Index max_iter) {
  VectorXd x = VectorXd::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return x;
  VectorXd r = rhs;
  VectorXd p = r;
  double rr = r.squaredNorm();
  for (Index it = 0; it < max_iter; ++it) {
    const VectorXd hp = apply(p);
    const double curvature = p.dot(hp);
    require(curvature > 0.0 && std::isfinite(curvature), ErrorKind::kAssumptionViolation,
            "non-positive curvature met in conjugate gradient");
    const double step = rr / curvature;
    x += step * p;
    r -= step * hp;
    const double rr_next = r.squaredNorm();
    if (std::sqrt(rr_next) <= tol * rhs_norm) return x;
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  fail(ErrorKind::kNoConvergence, "conjugate gradient did not reach tolerance in " + std::to_string(max_iter) +
                                      " iterations");
}

/// Dispatches between the explicit matrix and the operator form per `cfg`.
inline VectorXd solve_spd(const std::function<MatrixXd()>& explicit_matrix,
                          const std::function<VectorXd(const VectorXd&)>& apply, const VectorXd& rhs,
                          const HypergradConfig& cfg) {
  const Index p = rhs.size();
  if ((cfg.use_direct(p) && explicit_matrix) || !apply) return solve_spd_direct(explicit_matrix(), rhs);
  const Index max_iter = cfg.cg_max_iter > 0 ? cfg.cg_max_iter : 10 * p;
  return solve_spd_cg(apply, rhs, cfg.cg_tol, max_iter);
}

}  // namespace bilevel_reweight
