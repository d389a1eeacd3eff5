#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "dataset.hpp"
#include "error.hpp"
#include "hypergradient.hpp"
#include "inner_solve.hpp"
#include "loss_models.hpp"
#include "simplex.hpp"
#include "trace.hpp"

namespace bilevel_reweight {

struct SolverConfig {
  /// Outer (weight) step.
  double eta = 1.0;
  /// Inner (parameter) step.
  double rho = 0.1;
  /// SOBA linear-system step; 0 means rho.
  double rho_v = 0.0;
  std::int64_t iterations = 1000;
  /// Exact-bilevel inner tolerance; 0 means 1e-10 * (1 + |G|).
  double inner_tol = 0.0;
  std::int64_t record_every = 1;
  /// Keep the full weight vector in every record.
  bool record_weights = true;
  /// Softmax variant: also log ||theta - theta*(w)|| with a cold re-solve.
  bool track_inner_error = false;
  double support_tol = kDefaultSupportTol;
  HypergradConfig hypergrad;

  void validate() const {
    auto ok = [](double x) { return std::isfinite(x) && x >= 0.0; };
    require(ok(eta) && ok(rho) && ok(rho_v), ErrorKind::kInvalidArgument, "step sizes must be finite and >= 0");
    require(iterations >= 0, ErrorKind::kInvalidArgument, "iterations must be nonnegative");
    require(ok(inner_tol), ErrorKind::kInvalidArgument, "inner_tol must be finite and >= 0");
    require(record_every >= 0, ErrorKind::kInvalidArgument, "record_every must be nonnegative");
    require(support_tol > 0.0, ErrorKind::kInvalidArgument, "support_tol must be positive");
    hypergrad.validate();
  }

  double linear_step() const { return rho_v > 0.0 ? rho_v : rho; }
};

namespace detail {

template <LossModel M>
TraceRecord solver_record(const M& model, const Dataset& train, const Dataset& test, std::int64_t k,
                          const VectorXd& theta, const SimplexWeights& w, const SolverConfig& cfg,
                          const std::optional<VectorXd>& theta_ref) {
  TraceRecord r = weight_record(k, static_cast<double>(k), w, cfg.support_tol);
  if (!cfg.record_weights) r.w.resize(0);
  r.theta = theta;
  r.inner_loss = inner_loss(model, train, theta, w);
  r.outer_loss = outer_loss(model, test, theta);
  if (theta_ref) r.theta_err = (theta - *theta_ref).norm();
  return r;
}

inline SimplexWeights outer_step(const SimplexWeights& w, const VectorXd& psi, double eta) {
  if (eta == 0.0) return w;
  return mirror_step(w, psi, eta);
}

/// Runs `body(k)` for k = 0..iterations and converts overflow into a trace status.
template <class Body>
void run_guarded(FlowTrace& trace, std::int64_t iterations, Body&& body) {
  try {
    for (std::int64_t k = 0; k <= iterations; ++k) body(k);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumericOverflow) throw;
    trace.status = TraceStatus::kNumericOverflow;
    trace.message = e.what();
  }
}

inline void check_finite(const VectorXd& v, const char* what) {
  require(v.allFinite(), ErrorKind::kNumericOverflow, std::string(what) + " became non-finite");
}

}  // namespace detail

/// Exact bilevel: solve the inner problem, take a mirror step along Psi.
/// Record k holds w^k and theta*(w^k).
template <LossModel M>
FlowTrace exact_bilevel(const M& model, const Dataset& train, const Dataset& test, const SimplexWeights& w0,
                        const SolverConfig& cfg, const std::optional<VectorXd>& theta_ref = std::nullopt) {
  cfg.validate();
  require(w0.size() == train.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
  FlowTrace trace;
  SimplexWeights w = w0;
  VectorXd theta = VectorXd::Zero(model.num_params(train));
  detail::run_guarded(trace, cfg.iterations, [&](std::int64_t k) {
    if constexpr (is_quadratic_model_v<M>) {
      theta = inner_minimizer(model, train, w.values());
    } else {
      const double tol =
          cfg.inner_tol > 0.0 ? cfg.inner_tol : 1e-10 * (1.0 + std::abs(inner_loss(model, train, theta, w)));
      theta = solve_inner(model, train, w.values(), theta, InnerSolveOptions{tol});
    }
    if (should_record(k, cfg.iterations, cfg.record_every))
      trace.push(detail::solver_record(model, train, test, k, theta, w, cfg, theta_ref));
    if (k == cfg.iterations) return;
    const VectorXd psi = hypergrad(model, train, test, theta, w, cfg.hypergrad);
    w = detail::outer_step(w, psi, cfg.eta);
  });
  return trace;
}

/// Warm-started bilevel. Per iteration, in this order: Psi from (theta^k, w^k),
/// theta^{k+1} = theta^k - rho grad G(theta^k, w^k), w^{k+1} = mirror step.
/// Overflow stops the run and leaves a partial trace.
template <LossModel M>
FlowTrace warm_started(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta0,
                       const SimplexWeights& w0, const SolverConfig& cfg,
                       const std::optional<VectorXd>& theta_ref = std::nullopt) {
  cfg.validate();
  require(w0.size() == train.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
  require(theta0.size() == model.num_params(train), ErrorKind::kInvalidArgument, "theta0 size mismatch");
  FlowTrace trace;
  SimplexWeights w = w0;
  VectorXd theta = theta0;
  detail::run_guarded(trace, cfg.iterations, [&](std::int64_t k) {
    if (should_record(k, cfg.iterations, cfg.record_every))
      trace.push(detail::solver_record(model, train, test, k, theta, w, cfg, theta_ref));
    if (k == cfg.iterations) return;
    const VectorXd psi = cfg.eta > 0.0 ? hypergrad(model, train, test, theta, w, cfg.hypergrad)
                                       : VectorXd::Zero(train.size());
    theta -= cfg.rho * inner_grad(model, train, theta, w);
    detail::check_finite(theta, "theta");
    w = detail::outer_step(w, psi, cfg.eta);
  });
  return trace;
}

/// Deterministic full-batch SOBA-style scheme. v tracks H^{-1} grad F through
/// Hessian-vector products; all three updates read (theta^k, w^k, v^k).
template <LossModel M>
FlowTrace soba(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta0,
               const SimplexWeights& w0, const VectorXd& v0, const SolverConfig& cfg,
               const std::optional<VectorXd>& theta_ref = std::nullopt) {
  cfg.validate();
  require(w0.size() == train.size(), ErrorKind::kInvalidArgument, "weights size mismatch");
  require(theta0.size() == model.num_params(train) && v0.size() == theta0.size(), ErrorKind::kInvalidArgument,
          "theta0 / v0 size mismatch");
  FlowTrace trace;
  SimplexWeights w = w0;
  VectorXd theta = theta0;
  VectorXd v = v0;
  const double rho_v = cfg.linear_step();
  detail::run_guarded(trace, cfg.iterations, [&](std::int64_t k) {
    if (should_record(k, cfg.iterations, cfg.record_every))
      trace.push(detail::solver_record(model, train, test, k, theta, w, cfg, theta_ref));
    if (k == cfg.iterations) return;
    const VectorXd psi = -gradient_dot(model, train, theta, v);
    const VectorXd residual = inner_hess_apply(model, train, theta, w, v) - outer_grad(model, test, theta);
    const VectorXd grad = inner_grad(model, train, theta, w);
    v -= rho_v * residual;
    theta -= cfg.rho * grad;
    detail::check_finite(v, "v");
    detail::check_finite(theta, "theta");
    w = detail::outer_step(w, psi, cfg.eta);
  });
  return trace;
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// w_i = sigmoid(lambda_i) / sum_j sigmoid(lambda_j).
inline SimplexWeights softmax_weights(const VectorXd& lambda) {
  require(lambda.allFinite(), ErrorKind::kNumericOverflow, "lambda became non-finite");
  return SimplexWeights(lambda.unaryExpr([](double x) { return sigmoid(x); }).eval());
}

/// d h / d lambda_j = sigmoid'(lambda_j) / S * (Psi_j - <w, Psi>).
inline VectorXd softmax_chain_rule(const VectorXd& lambda, const VectorXd& psi) {
  const VectorXd s = lambda.unaryExpr([](double x) { return sigmoid(x); });
  const double total = s.sum();
  const VectorXd w = s / total;
  const VectorXd ds = s.cwiseProduct((1.0 - s.array()).matrix());
  return ds.cwiseProduct((psi.array() - w.dot(psi)).matrix()) / total;
}

/// Sigmoid-normalized reparameterization: plain gradient steps on theta and
/// lambda, no mirror step. Psi is read at (theta^k, w(lambda^k)).
template <LossModel M>
FlowTrace softmax_reparam(const M& model, const Dataset& train, const Dataset& test, const VectorXd& theta0,
                          const VectorXd& lambda0, const SolverConfig& cfg,
                          const std::optional<VectorXd>& theta_ref = std::nullopt) {
  cfg.validate();
  require(lambda0.size() == train.size(), ErrorKind::kInvalidArgument, "lambda size mismatch");
  require(theta0.size() == model.num_params(train), ErrorKind::kInvalidArgument, "theta0 size mismatch");
  FlowTrace trace;
  VectorXd lambda = lambda0;
  VectorXd theta = theta0;
  detail::run_guarded(trace, cfg.iterations, [&](std::int64_t k) {
    const SimplexWeights w = softmax_weights(lambda);
    if (should_record(k, cfg.iterations, cfg.record_every)) {
      TraceRecord r = detail::solver_record(model, train, test, k, theta, w, cfg, theta_ref);
      if (cfg.track_inner_error) {
        const VectorXd cold = inner_minimizer(model, train, w.values(), nullptr, 1e-8);
        r.inner_theta_err = (theta - cold).norm();
      }
      trace.push(std::move(r));
    }
    if (k == cfg.iterations) return;
    const VectorXd psi = hypergrad(model, train, test, theta, w, cfg.hypergrad);
    theta -= cfg.rho * inner_grad(model, train, theta, w);
    detail::check_finite(theta, "theta");
    lambda -= cfg.eta * softmax_chain_rule(lambda, psi);
  });
  return trace;
}

}  // namespace bilevel_reweight
