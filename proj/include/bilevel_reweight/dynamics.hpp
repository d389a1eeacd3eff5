#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <concepts>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <unsupported/Eigen/MatrixFunctions>

#include "dataset.hpp"
#include "error.hpp"
#include "hypergradient.hpp"
#include "loss_models.hpp"
#include "simplex.hpp"
#include "trace.hpp"

namespace bilevel_reweight {

/// Anything that maps a weight vector (positive orthant) to an n-vector field.
template <class F>
concept WeightField = requires(const F& f, const VectorXd& w) {
  { f(w) } -> std::convertible_to<VectorXd>;
};

template <class F>
concept HasAnalyticJacobian = WeightField<F> && requires(const F& f, const VectorXd& w) {
  { f.jacobian(w) } -> std::convertible_to<MatrixXd>;
};

template <class F>
concept HasGradientMatrix = requires(const F& f) {
  { f.gamma() } -> std::convertible_to<MatrixXd>;
};

/// phi(w) = phi for all w.
struct ConstantField {
  VectorXd phi;

  VectorXd operator()(const VectorXd& w) const {
    require(w.size() == phi.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
    return phi;
  }
  MatrixXd jacobian(const VectorXd& w) const { return MatrixXd::Zero(w.size(), w.size()); }
};

/// phi(w) = A w. A skew-symmetric A gives closed replicator orbits.
struct LinearField {
  MatrixXd a;

  VectorXd operator()(const VectorXd& w) const {
    require(w.size() == a.cols(), ErrorKind::kInvalidArgument, "weights size mismatch");
    return a * w;
  }
  MatrixXd jacobian(const VectorXd&) const { return a; }
};

struct FlowConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double dt = 1e-3;
  double t_max = 10.0;
  double stationarity_tol = 1e-8;
  Index oscillation_window = 50;
  /// Steps between logged records; 0 logs only the endpoints.
  std::int64_t record_every = 0;
  double support_tol = kDefaultSupportTol;

  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0 && std::isfinite(alpha) && std::isfinite(beta),
            ErrorKind::kInvalidArgument, "flow speeds must be finite and nonnegative");
    require(dt > 0.0 && t_max > 0.0 && dt < t_max, ErrorKind::kInvalidArgument, "need 0 < dt < t_max");
    require(stationarity_tol > 0.0, ErrorKind::kInvalidArgument, "stationarity_tol must be positive");
    require(oscillation_window >= 1, ErrorKind::kInvalidArgument, "oscillation_window must be positive");
    require(record_every >= 0, ErrorKind::kInvalidArgument, "record_every must be nonnegative");
    require(support_tol > 0.0, ErrorKind::kInvalidArgument, "support_tol must be positive");
  }

  std::int64_t num_steps() const { return static_cast<std::int64_t>(std::ceil(t_max / dt - 1e-9)); }
};

/// Log-weights; exact zeros become -inf and stay there under the flow.
inline VectorXd dual_coordinates(const SimplexWeights& w) {
  VectorXd u(w.size());
  for (Index i = 0; i < w.size(); ++i)
    u[i] = w[i] > 0.0 ? std::log(w[i]) : -std::numeric_limits<double>::infinity();
  return u;
}

inline void renormalize_dual(VectorXd& u) {
  const double top = u.maxCoeff();
  require(std::isfinite(top), ErrorKind::kNumericOverflow, "dual coordinates lost their finite maximum");
  u.array() -= top;
}

/// One RK4 step of u' = -beta * phi(softmax u).
template <WeightField Field>
void mirror_rk4_step(const Field& field, VectorXd& u, double beta, double h) {
  auto rate = [&](const VectorXd& x) -> VectorXd {
    return -beta * VectorXd(field(SimplexWeights::from_log(x).values()));
  };
  const VectorXd k1 = rate(u);
  const VectorXd k2 = rate(u + 0.5 * h * k1);
  const VectorXd k3 = rate(u + 0.5 * h * k2);
  const VectorXd k4 = rate(u + h * k3);
  u += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  renormalize_dual(u);
}

/// Integrates w' = -beta P(w) phi(w) through its dual form u' = -beta phi(w),
/// w = softmax(u), with fixed-step RK4.
template <WeightField Field>
FlowTrace integrate_mirror_flow(const Field& field, const SimplexWeights& w0, const FlowConfig& cfg) {
  cfg.validate();
  VectorXd u = dual_coordinates(w0);
  renormalize_dual(u);
  const std::int64_t steps = cfg.num_steps();
  FlowTrace trace;
  trace.push(weight_record(0, 0.0, w0, cfg.support_tol));
  double t = 0.0;
  for (std::int64_t k = 1; k <= steps; ++k) {
    const double h = std::min(cfg.dt, cfg.t_max - t);
    mirror_rk4_step(field, u, cfg.beta, h);
    t = k == steps ? cfg.t_max : t + h;
    if (should_record(k, steps, cfg.record_every))
      trace.push(weight_record(k, t, SimplexWeights::from_log(u), cfg.support_tol));
  }
  return trace;
}

/// w0 * exp(-t phi), normalized.
inline SimplexWeights constant_field_solution(const SimplexWeights& w0, const VectorXd& phi, double t) {
  require(t >= 0.0 && std::isfinite(t), ErrorKind::kInvalidArgument, "time must be finite and nonnegative");
  require(phi.size() == w0.size(), ErrorKind::kInvalidArgument, "field and weights differ in size");
  if (t == 0.0) return w0;
  return mirror_step(w0, phi, t);
}

/// The field w -> Psi(theta*(w), w), i.e. the gradient of the value function.
template <LossModel M>
auto exact_hypergradient_field(const M& model, const Dataset& train, const Dataset& test,
                               const HypergradConfig& cfg = {}) {
  auto tr = std::make_shared<const Dataset>(train);
  auto te = std::make_shared<const Dataset>(test);
  return [model, tr, te, cfg](const VectorXd& w) -> VectorXd {
    const VectorXd theta = inner_minimizer(model, *tr, w);
    return hypergrad(model, *tr, *te, theta, w, cfg);
  };
}

/// Integrates theta' = -alpha grad G(theta, w), w' = -beta P(w) Psi(theta, w)
/// with RK4, the weights carried in dual coordinates.
template <LossModel M>
FlowTrace integrate_joint_flow(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta0,
                               const SimplexWeights& w0, const FlowConfig& cfg,
                               const std::optional<VectorXd>& theta_ref = std::nullopt,
                               const HypergradConfig& hcfg = {}) {
  cfg.validate();
  require(cfg.alpha > 0.0 || cfg.beta > 0.0, ErrorKind::kInvalidArgument, "alpha and beta cannot both be zero");
  require(w0.size() == train.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
  const Index p = theta0.size();
  VectorXd theta = theta0;
  VectorXd u = dual_coordinates(w0);
  renormalize_dual(u);

  auto rate = [&](const VectorXd& th, const VectorXd& du, VectorXd& dtheta, VectorXd& ddual) {
    const VectorXd w = SimplexWeights::from_log(du).values();
    dtheta = cfg.alpha > 0.0 ? VectorXd(-cfg.alpha * inner_grad(model, train, th, w)) : VectorXd::Zero(p);
    ddual = cfg.beta > 0.0 ? VectorXd(-cfg.beta * hypergrad(model, train, test, th, w, hcfg))
                           : VectorXd::Zero(du.size());
  };
  auto record = [&](std::int64_t k, double t) {
    const SimplexWeights w = SimplexWeights::from_log(u);
    TraceRecord r = weight_record(k, t, w, cfg.support_tol);
    r.theta = theta;
    r.inner_loss = inner_loss(model, train, theta, w);
    r.outer_loss = outer_loss(model, test, theta);
    if (theta_ref) r.theta_err = (theta - *theta_ref).norm();
    return r;
  };

  const std::int64_t steps = cfg.num_steps();
  FlowTrace trace;
  trace.push(record(0, 0.0));
  double t = 0.0;
  VectorXd a1, a2, a3, a4, b1, b2, b3, b4;
  for (std::int64_t k = 1; k <= steps; ++k) {
    const double h = std::min(cfg.dt, cfg.t_max - t);
    rate(theta, u, a1, b1);
    rate(theta + 0.5 * h * a1, u + 0.5 * h * b1, a2, b2);
    rate(theta + 0.5 * h * a2, u + 0.5 * h * b2, a3, b3);
    rate(theta + h * a3, u + h * b3, a4, b4);
    theta += (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
    u += (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    renormalize_dual(u);
    require(theta.allFinite(), ErrorKind::kNumericOverflow, "joint flow diverged; reduce dt");
    t = k == steps ? cfg.t_max : t + h;
    if (should_record(k, steps, cfg.record_every)) trace.push(record(k, t));
  }
  return trace;
}

/// Certificate for membership of an l x p matrix in I_l^p.
struct MembershipResult {
  bool member = false;
  enum class Witness { kNone, kOnesInRange, kNullSpace } witness = Witness::kNone;
  /// Z x = 1 least-squares solution, or a null vector when witness is kNullSpace.
  VectorXd x;
  /// ||Z x - 1|| / sqrt(l) for the least-squares x.
  double ls_residual = 0.0;
  /// sigma_min / sigma_max; zero when p > l.
  double min_singular = 0.0;
};

inline std::string to_string(MembershipResult::Witness w) {
  switch (w) {
    case MembershipResult::Witness::kNone: return "none";
    case MembershipResult::Witness::kOnesInRange: return "ones-in-range";
    case MembershipResult::Witness::kNullSpace: return "null-space";
  }
  return "unknown";
}

inline constexpr double kDefaultMembershipTol = 1e-6;

/// 1 in range(Z) or a nontrivial null space, both read off a full SVD.
inline MembershipResult membership_I(const MatrixXd& z, double tol = kDefaultMembershipTol) {
  require(z.rows() >= 1 && z.cols() >= 1, ErrorKind::kInvalidArgument, "membership needs l, p >= 1");
  require(tol > 0.0, ErrorKind::kInvalidArgument, "membership tolerance must be positive");
  require(z.allFinite(), ErrorKind::kInvalidArgument, "membership matrix must be finite");
  const Index l = z.rows();
  const Index p = z.cols();
  Eigen::JacobiSVD<MatrixXd> svd(z, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const VectorXd ones = VectorXd::Ones(l);
  MembershipResult out;
  const VectorXd x = svd.solve(ones);
  out.ls_residual = (z * x - ones).norm() / std::sqrt(static_cast<double>(l));
  const VectorXd& sv = svd.singularValues();
  const double top = sv.size() > 0 ? sv[0] : 0.0;
  if (p > l || top == 0.0) {
    out.min_singular = 0.0;
  } else {
    out.min_singular = sv[sv.size() - 1] / top;
  }
  if (out.ls_residual <= tol) {
    out.member = true;
    out.witness = MembershipResult::Witness::kOnesInRange;
    out.x = x;
  } else if (out.min_singular <= tol) {
    out.member = true;
    out.witness = MembershipResult::Witness::kNullSpace;
    out.x = svd.matrixV().col(p - 1);
  } else {
    out.x = x;
  }
  return out;
}

/// Checks Gamma restricted to the support of w against I_l^p.
inline MembershipResult sparsity_certificate(const SimplexWeights& w, const MatrixXd& gamma,
                                             double tol = kDefaultMembershipTol,
                                             double support_tol = kDefaultSupportTol) {
  require(gamma.rows() == w.size(), ErrorKind::kInvalidArgument, "gradient matrix rows must match n");
  const auto supp = support(w, support_tol);
  require(!supp.empty(), ErrorKind::kPreconditionViolation, "weights have empty support");
  MatrixXd z(static_cast<Index>(supp.size()), gamma.cols());
  for (std::size_t r = 0; r < supp.size(); ++r) z.row(static_cast<Index>(r)) = gamma.row(supp[r]);
  return membership_I(z, tol);
}

struct StationaryReport {
  SimplexWeights w;
  VectorXd phi;
  bool is_stationary = false;
  std::vector<Index> support;
  /// (max - min of phi over the support) / (1 + ||phi||_inf).
  double proportionality_residual = 0.0;
  /// phi_i - <w, phi> for i outside the support, in index order.
  VectorXd offsupport_margin;
  std::vector<std::complex<double>> tangent_eigenvalues;
  bool is_stable = false;
  std::optional<bool> in_I_lp;
  std::optional<MembershipResult> certificate;
};

template <WeightField Field>
StationaryReport is_stationary(const SimplexWeights& w, const Field& field, double tol,
                               double support_tol = kDefaultSupportTol) {
  require(tol > 0.0, ErrorKind::kInvalidArgument, "stationarity tolerance must be positive");
  StationaryReport report;
  report.w = w;
  report.phi = field(w.values());
  require(report.phi.size() == w.size(), ErrorKind::kInvalidArgument, "field returned the wrong size");
  report.support = support(w, support_tol);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (Index i : report.support) {
    lo = std::min(lo, report.phi[i]);
    hi = std::max(hi, report.phi[i]);
  }
  const double scale = 1.0 + report.phi.cwiseAbs().maxCoeff();
  report.proportionality_residual = report.support.empty() ? 0.0 : (hi - lo) / scale;
  report.is_stationary = report.proportionality_residual <= tol;
  const double mean = w.values().dot(report.phi);
  report.offsupport_margin.resize(w.size() - static_cast<Index>(report.support.size()));
  Index next = 0;
  std::size_t cursor = 0;
  for (Index i = 0; i < w.size(); ++i) {
    if (cursor < report.support.size() && report.support[cursor] == i) {
      ++cursor;
      continue;
    }
    report.offsupport_margin[next++] = report.phi[i] - mean;
  }
  return report;
}

enum class JacobianMode { kAuto, kAnalytic, kFiniteDifference };

inline constexpr double kJacobianFdStep = 1e-6;

/// J = D phi(w). kAuto uses the analytic form when the field provides one.
template <WeightField Field>
MatrixXd jacobian_field(const Field& field, const VectorXd& w, JacobianMode mode = JacobianMode::kAuto) {
  if constexpr (HasAnalyticJacobian<Field>) {
    if (mode != JacobianMode::kFiniteDifference) return field.jacobian(w);
  } else {
    require(mode != JacobianMode::kAnalytic, ErrorKind::kPreconditionViolation,
            "analytic Jacobian needs a frozen-field closure");
  }
  const Index n = w.size();
  MatrixXd jac(n, n);
  for (Index j = 0; j < n; ++j) {
    VectorXd plus = w;
    VectorXd minus = w;
    plus[j] += kJacobianFdStep;
    minus[j] -= kJacobianFdStep;
    jac.col(j) = (VectorXd(field(plus)) - VectorXd(field(minus))) / (2.0 * kJacobianFdStep);
  }
  return jac;
}

/// D Phi(w) for Phi(w) = P(w) phi(w):
/// diag(phi) + diag(w) J - <w, phi> I - w (phi^T + w^T J).
inline MatrixXd mirror_field_jacobian(const VectorXd& w, const VectorXd& phi, const MatrixXd& jac) {
  const Index n = w.size();
  MatrixXd d = w.asDiagonal() * jac;
  d.diagonal() += phi;
  d.diagonal().array() -= w.dot(phi);
  d -= w * (phi.transpose() + w.transpose() * jac);
  (void)n;
  return d;
}

/// Restricts the support block of D Phi to the tangent space in the basis
/// e_k - e_last: R_ik = M_ik - M_i,last for i, k below the last index.
inline MatrixXd reduced_tangent_matrix(const MatrixXd& block) {
  const Index l = block.rows();
  if (l <= 1) return MatrixXd(0, 0);
  MatrixXd r(l - 1, l - 1);
  for (Index i = 0; i < l - 1; ++i)
    for (Index k = 0; k < l - 1; ++k) r(i, k) = block(i, k) - block(i, l - 1);
  return r;
}

/// Stationarity, off-support margins, tangent spectrum and (when the field
/// carries a gradient matrix) the sparsity certificate.
template <WeightField Field>
StationaryReport stability_check(const SimplexWeights& w, const Field& field, double tol,
                                 JacobianMode mode = JacobianMode::kAuto,
                                 double support_tol = kDefaultSupportTol) {
  StationaryReport report = is_stationary(w, field, tol, support_tol);
  require(report.is_stationary, ErrorKind::kPreconditionViolation,
          "stability_check needs a stationary point (residual " + std::to_string(report.proportionality_residual) +
              ")");
  const MatrixXd jac = jacobian_field(field, w.values(), mode);
  const MatrixXd full = mirror_field_jacobian(w.values(), report.phi, jac);
  const auto l = static_cast<Index>(report.support.size());
  MatrixXd block(l, l);
  for (Index a = 0; a < l; ++a)
    for (Index b = 0; b < l; ++b) block(a, b) = full(report.support[a], report.support[b]);
  const MatrixXd reduced = reduced_tangent_matrix(block);
  bool stable = report.offsupport_margin.size() == 0 || report.offsupport_margin.minCoeff() > tol;
  if (reduced.size() > 0) {
    Eigen::EigenSolver<MatrixXd> eig(reduced, false);
    require(eig.info() == Eigen::Success, ErrorKind::kNoConvergence, "tangent eigenvalue solve failed");
    for (Index i = 0; i < reduced.rows(); ++i) {
      const std::complex<double> ev = eig.eigenvalues()[i];
      report.tangent_eigenvalues.push_back(ev);
      stable = stable && ev.real() > tol;
    }
    std::sort(report.tangent_eigenvalues.begin(), report.tangent_eigenvalues.end(),
              [](const auto& a, const auto& b) { return a.real() != b.real() ? a.real() < b.real() : a.imag() < b.imag(); });
  }
  report.is_stable = stable;
  if constexpr (HasGradientMatrix<Field>) {
    report.certificate = sparsity_certificate(w, MatrixXd(field.gamma()), kDefaultMembershipTol, support_tol);
    report.in_I_lp = report.certificate->member;
  }
  return report;
}

/// First-order prediction w* + exp(-D Phi(w*) t) delta around a stable
/// stationary point.
template <WeightField Field>
SimplexWeights linearized_trajectory(const SimplexWeights& w_star, const TangentVector& delta, const Field& field,
                                     double t, double tol = 1e-8, JacobianMode mode = JacobianMode::kAuto) {
  require(delta.size() == w_star.size(), ErrorKind::kInvalidArgument, "perturbation size mismatch");
  require(t >= 0.0, ErrorKind::kInvalidArgument, "time must be nonnegative");
  require((w_star.values() + delta.values()).minCoeff() >= 0.0, ErrorKind::kPreconditionViolation,
          "w* + delta leaves the simplex");
  const StationaryReport report = stability_check(w_star, field, tol, mode);
  require(report.is_stable, ErrorKind::kPreconditionViolation, "linearization requires a stable stationary point");
  if (delta.values().isZero(0.0)) return w_star;
  const MatrixXd jac = jacobian_field(field, w_star.values(), mode);
  const MatrixXd d = mirror_field_jacobian(w_star.values(), report.phi, jac);
  const MatrixXd propagator = (-t * d).exp();
  VectorXd pred = w_star.values() + propagator * delta.values();
  for (Index i = 0; i < pred.size(); ++i) {
    require(pred[i] >= -1e-12, ErrorKind::kPreconditionViolation,
            "linear prediction leaves the simplex; shrink delta");
    pred[i] = std::max(pred[i], 0.0);
  }
  return SimplexWeights(std::move(pred));
}

struct OmegaLimit {
  SimplexWeights w;
  bool converged = false;
  bool oscillating = false;
  double t = 0.0;
  /// Infinity-norm change over the last checkpoint interval.
  double last_change = std::numeric_limits<double>::infinity();
  Index checkpoints = 0;
  FlowTrace trace;
};

inline constexpr Index kOmegaCheckpoints = 500;
inline constexpr double kRevisitRadius = 1e-4;
inline constexpr double kExcursionRadius = 1e-3;

namespace detail {

/// Sup-norm distance from x to the chord [a, b] (Euclidean projection).
inline double segment_distance(const VectorXd& x, const VectorXd& a, const VectorXd& b) {
  const VectorXd ab = b - a;
  const double len2 = ab.squaredNorm();
  const double s = len2 > 0.0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (x - a - s * ab).cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Integrates the mirror flow of a field from w0 until it settles.
///
/// Checkpoints are spaced t_max / 500 apart. The run converges when the
/// change between checkpoints is at most stationarity_tol and the state passes
/// is_stationary at the same tolerance. It is flagged as oscillating when a
/// checkpoint lands within 1e-4 of the chord between two checkpoints at least
/// `oscillation_window` earlier, after leaving that point by more than 1e-3,
/// and the change norm has not decreased over the window. Neither outcome
/// raises.
template <WeightField Field>
OmegaLimit omega_limit(const Field& field, const SimplexWeights& w0, const FlowConfig& cfg) {
  cfg.validate();
  OmegaLimit out;
  out.w = w0;
  out.trace.push(weight_record(0, 0.0, w0, cfg.support_tol));
  if (is_stationary(w0, field, cfg.stationarity_tol, cfg.support_tol).is_stationary) {
    out.converged = true;
    out.last_change = 0.0;
    return out;
  }
  const double spacing = cfg.t_max / static_cast<double>(kOmegaCheckpoints);
  const auto sub_steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(spacing / cfg.dt - 1e-9)));
  const double h = spacing / static_cast<double>(sub_steps);
  VectorXd u = dual_coordinates(w0);
  renormalize_dual(u);
  std::vector<VectorXd> states{w0.values()};
  std::vector<double> changes{std::numeric_limits<double>::infinity()};
  const Index window = cfg.oscillation_window;
  for (Index c = 1; c <= kOmegaCheckpoints; ++c) {
    for (std::int64_t s = 0; s < sub_steps; ++s) mirror_rk4_step(field, u, cfg.beta, h);
    const SimplexWeights w = SimplexWeights::from_log(u);
    const double change = (w.values() - states.back()).cwiseAbs().maxCoeff();
    states.push_back(w.values());
    changes.push_back(change);
    out.w = w;
    out.t = spacing * static_cast<double>(c);
    out.last_change = change;
    out.checkpoints = c;
    out.trace.push(weight_record(c, out.t, w, cfg.support_tol));
    if (change <= cfg.stationarity_tol &&
        is_stationary(w, field, cfg.stationarity_tol, cfg.support_tol).is_stationary) {
      out.converged = true;
      return out;
    }
    if (c >= window && changes[static_cast<std::size_t>(c)] >= changes[static_cast<std::size_t>(c - window)]) {
      for (Index j = c - window - 1; j >= 0; --j) {
        const VectorXd& old = states[static_cast<std::size_t>(j)];
        if (detail::segment_distance(w.values(), old, states[static_cast<std::size_t>(j + 1)]) > kRevisitRadius)
          continue;
        double excursion = 0.0;
        for (Index m = j + 1; m < c; ++m)
          excursion = std::max(excursion, (states[static_cast<std::size_t>(m)] - old).cwiseAbs().maxCoeff());
        if (excursion > kExcursionRadius) {
          out.oscillating = true;
          return out;
        }
      }
    }
  }
  return out;
}

/// Reference for the fast-weight regime: theta' = -grad G(theta, Omega(theta, w0))
/// on slow time [0, t_end], with Omega recomputed every `refresh` time units
/// and held constant in between. RK4 with step dt.
template <LossModel M>
FlowTrace sparse_regime_reference(const M& model, const Dataset& train, const Dataset& test,
                                  const VectorXd& theta0, const SimplexWeights& w0, double t_end, double refresh,
                                  double dt, const FlowConfig& omega_cfg, const HypergradConfig& hcfg = {}) {
  require(t_end > 0.0 && refresh > 0.0 && dt > 0.0 && dt <= refresh, ErrorKind::kInvalidArgument,
          "need t_end, refresh > 0 and 0 < dt <= refresh");
  VectorXd theta = theta0;
  FlowTrace trace;
  std::int64_t k = 0;
  double t = 0.0;
  Index unconverged = 0;
  auto record = [&](const SimplexWeights& w) {
    TraceRecord r = weight_record(k, t, w, omega_cfg.support_tol);
    r.theta = theta;
    r.inner_loss = inner_loss(model, train, theta, w);
    r.outer_loss = outer_loss(model, test, theta);
    trace.push(std::move(r));
  };
  while (t < t_end - 1e-12) {
    const OmegaLimit omega = omega_limit(frozen_field(model, train, test, theta, hcfg), w0, omega_cfg);
    if (!omega.converged) ++unconverged;
    const VectorXd w = omega.w.values();
    if (k == 0) record(omega.w);
    const double stop = std::min(t + refresh, t_end);
    while (t < stop - 1e-12) {
      const double h = std::min(dt, stop - t);
      auto rate = [&](const VectorXd& th) -> VectorXd { return -inner_grad(model, train, th, w); };
      const VectorXd a1 = rate(theta);
      const VectorXd a2 = rate(theta + 0.5 * h * a1);
      const VectorXd a3 = rate(theta + 0.5 * h * a2);
      const VectorXd a4 = rate(theta + h * a3);
      theta += (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
      t += h;
      ++k;
    }
    record(omega.w);
  }
  if (unconverged > 0) trace.message = std::to_string(unconverged) + " omega refreshes did not converge";
  return trace;
}

}  // namespace bilevel_reweight
