// Acceptance harness: one PASS/FAIL line per criterion. Runtime budgets are
// part of each criterion. Pass criterion ids as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "bilevel_reweight/bilevel_reweight.hpp"

using namespace bilevel_reweight;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

std::string sci(double x) { return fmt("%.3g", x); }

// Every weight vector produced by the harness goes through here.
struct SimplexAudit {
  long checked = 0;
  long violations = 0;

  void check(const VectorXd& w) {
    if (w.size() == 0) return;
    ++checked;
    if (!(w.minCoeff() >= 0.0) || !(std::abs(w.sum() - 1.0) <= 1e-9)) ++violations;
  }
  void check(const FlowTrace& trace) {
    for (const auto& r : trace.records) check(r.w);
  }
};

SimplexAudit audit;

Dataset random_regression(std::uint64_t seed, Index n, Index d) {
  CounterRng rng(seed, 70);
  Dataset data;
  data.features = rng.normal_matrix(n, d);
  data.targets = data.features * rng.normal_vector(d) + 0.3 * rng.normal_vector(n);
  return data;
}

Dataset random_classification(std::uint64_t seed, Index n, Index d, Index c) {
  CounterRng rng(seed, 71);
  Dataset data;
  data.kind = TaskKind::kClassification;
  data.num_classes = c;
  data.features = rng.normal_matrix(n, d);
  data.targets.resize(n);
  for (Index i = 0; i < n; ++i) data.targets[i] = static_cast<double>(rng.below(static_cast<std::uint64_t>(c)));
  return data;
}

SimplexWeights interior_weights(CounterRng& rng, Index n) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.uniform(0.2, 1.0);
  return SimplexWeights(v);
}

// Uniform on the simplex (normalized exponentials).
SimplexWeights random_simplex(CounterRng& rng, Index n) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
  return SimplexWeights(v);
}

TangentVector random_direction(CounterRng& rng, Index n) {
  const VectorXd v = rng.normal_vector(n);
  return project_tangent(v / v.norm());
}

// --- 1 ---------------------------------------------------------------------------------------

Outcome hypergradient_fd() {
  CounterRng rng(1001);
  const RidgeLeastSquares model{0.1};
  double worst = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    const Dataset train = random_regression(2000 + inst, 20, 3);
    const Dataset test = random_regression(3000 + inst, 30, 3);
    const auto w = interior_weights(rng, 20);
    const VectorXd theta = inner_minimizer(model, train, w.values());
    if (inner_grad(model, train, theta, w).norm() > 1e-10) return {false, "inner solve not at the minimizer"};
    const VectorXd psi = hypergrad(model, train, test, theta, w);
    for (int k = 0; k < 20; ++k) {
      const auto dir = random_direction(rng, 20);
      const double fd = value_function_fd(model, train, test, w, dir);
      worst = std::max(worst, std::abs(psi.dot(dir.values()) - fd) / std::abs(fd));
    }
  }
  return {worst <= 1e-5, "max relative error " + sci(worst) + " over 400 directions (<= 1e-5)"};
}

// --- 2 ---------------------------------------------------------------------------------------

Outcome constant_field() {
  const SimplexWeights w0((VectorXd(6) << 0.05, 0.3, 0.1, 0.2, 0.15, 0.2).finished());
  // Tied minimum on {1, 4}; the rest sits at least 2 above it.
  const VectorXd phi = (VectorXd(6) << 2.5, -1.0, 1.0, 3.0, -1.0, 1.2).finished();
  FlowConfig cfg;
  cfg.dt = 1e-3;
  cfg.t_max = 10.0;
  cfg.record_every = 1;
  const FlowTrace trace = integrate_mirror_flow(ConstantField{phi}, w0, cfg);
  audit.check(trace);
  double err = 0.0;
  for (const auto& r : trace.records)
    err = std::max(err, (r.w - constant_field_solution(w0, phi, r.t).values()).cwiseAbs().maxCoeff());
  const VectorXd w = trace.back().w;
  const double off = 1.0 - w[1] - w[4];
  const double ratio_err = std::abs(w[1] / w[4] - w0[1] / w0[4]);
  const bool ok = err <= 1e-4 && off <= 1e-6 && ratio_err <= 1e-9;
  return {ok, "sup error " + sci(err) + " (<= 1e-4); mass off argmin at t=10 " + sci(off) +
                  "; ratio drift " + sci(ratio_err)};
}

// --- 3 ---------------------------------------------------------------------------------------

Outcome membership_dichotomy() {
  CounterRng rng(1003);
  int wrong_verdict = 0;
  int margin_short = 0;
  double worst_in = 0.0;
  double least_res = 1e300;
  double least_sv = 1e300;
  std::string shortfalls;
  for (Index p : {1, 2, 3, 5, 8}) {
    for (Index l = 1; l <= p + 3; ++l) {
      const bool inside = l <= p;
      if (!inside && l != p + 1 && l != p + 3) continue;
      for (int trial = 0; trial < 100; ++trial) {
        const auto m = membership_I(rng.normal_matrix(l, p));
        wrong_verdict += m.member != inside;
        if (inside) {
          worst_in = std::max(worst_in, m.ls_residual);
          margin_short += m.ls_residual > 1e-8;
          continue;
        }
        least_res = std::min(least_res, m.ls_residual);
        least_sv = std::min(least_sv, m.min_singular);
        if (m.ls_residual < 1e-3 || m.min_singular < 1e-3) {
          ++margin_short;
          shortfalls += " " + std::to_string(l) + "x" + std::to_string(p) + "(residual " + sci(m.ls_residual) + ")";
        }
      }
    }
  }
  return {wrong_verdict == 0 && margin_short == 0,
          std::to_string(wrong_verdict) + " wrong verdicts, " + std::to_string(margin_short) +
              " draws short of the margins; max member residual " + sci(worst_in) + "; min non-member residual " +
              sci(least_res) + ", min normalized singular value " + sci(least_sv) +
              (shortfalls.empty() ? "" : "; short:" + shortfalls)};
}

// --- 4 ---------------------------------------------------------------------------------------

Outcome sparse_supports() {
  FlowConfig cfg;
  cfg.dt = 0.01;
  cfg.t_max = 1000.0;
  int converged = 0;
  int flagged = 0;
  int too_big = 0;
  Index largest = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto field = gen_random_frozen_field(RandomFieldSpec{50, 5, 0.1, seed});
    const auto om = omega_limit(field, SimplexWeights::uniform(50), cfg);
    audit.check(om.trace);
    audit.check(om.w.values());
    if (!om.converged) {
      ++flagged;
      continue;
    }
    ++converged;
    const auto s = static_cast<Index>(support(om.w, 1e-6).size());
    largest = std::max(largest, s);
    too_big += s > 5;
  }
  return {too_big == 0 && converged > 0, std::to_string(converged) + " converged, largest support " +
                                             std::to_string(largest) + " (<= 5); " + std::to_string(flagged) +
                                             " not converged (flagged, not counted)"};
}

// --- 5 ---------------------------------------------------------------------------------------

Outcome fast_theta_regime() {
  const auto mix = gen_mixture(MixtureSpec{});
  const RidgeLeastSquares model{1e-3};
  const auto w0 = SimplexWeights::uniform(500);
  const double horizon = 1.0;
  const std::int64_t grid = 100;
  FlowConfig ref;
  ref.dt = horizon / 2000.0;
  ref.t_max = horizon;
  ref.record_every = 2000 / grid;
  const FlowTrace star = integrate_mirror_flow(exact_hypergradient_field(model, mix.train, mix.test), w0, ref);
  audit.check(star);
  std::vector<double> gaps;
  for (double beta : {1e-1, 1e-2, 1e-3}) {
    FlowConfig fc;
    fc.alpha = 1.0;
    fc.beta = beta;
    fc.t_max = horizon / beta;
    const auto steps = static_cast<std::int64_t>(std::ceil(fc.t_max / 0.05 / grid)) * grid;
    fc.dt = fc.t_max / static_cast<double>(steps);
    fc.record_every = steps / grid;
    const FlowTrace jt = integrate_joint_flow(model, mix.train, mix.test, VectorXd::Zero(2), w0, fc);
    audit.check(jt);
    double gap = 0.0;
    for (std::size_t j = 0; j < star.records.size(); ++j) gap = std::max(gap, (jt.records[j].w - star.records[j].w).norm());
    gaps.push_back(gap);
  }
  const bool ok = gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] <= 1e-2;
  return {ok, "gaps " + sci(gaps[0]) + ", " + sci(gaps[1]) + ", " + sci(gaps[2]) +
                  " for beta 1e-1, 1e-2, 1e-3 (strictly decreasing, last <= 1e-2)"};
}

// --- 6 ---------------------------------------------------------------------------------------

Outcome fast_w_regime() {
  const auto mix = gen_mixture(MixtureSpec{});
  const RidgeLeastSquares model{1e-3};
  const auto w0 = SimplexWeights::uniform(500);
  const VectorXd theta0 = VectorXd::Zero(2);
  const double horizon = 0.05;
  const double refresh = 0.005;
  FlowConfig omega_cfg;
  omega_cfg.dt = 0.01;
  omega_cfg.t_max = 2500.0;
  const FlowTrace ref =
      sparse_regime_reference(model, mix.train, mix.test, theta0, w0, horizon, refresh, refresh, omega_cfg);
  audit.check(ref);
  const auto grid = static_cast<std::int64_t>(ref.records.size()) - 1;
  std::vector<double> gaps;
  for (double alpha : {1e-1, 1e-2, 1e-3}) {
    FlowConfig fc;
    fc.alpha = alpha;
    fc.beta = 1.0;
    fc.t_max = horizon / alpha;
    const auto steps = static_cast<std::int64_t>(std::ceil(fc.t_max / 0.01 / static_cast<double>(grid))) * grid;
    fc.dt = fc.t_max / static_cast<double>(steps);
    fc.record_every = steps / grid;
    const FlowTrace jt = integrate_joint_flow(model, mix.train, mix.test, theta0, w0, fc);
    audit.check(jt);
    double gap = 0.0;
    for (std::size_t j = 0; j < ref.records.size(); ++j)
      gap = std::max(gap, (jt.records[j].theta - ref.records[j].theta).norm());
    gaps.push_back(gap);
  }
  // Limiting weights: Omega at the end of the reference parameter path.
  FlowConfig final_cfg = omega_cfg;
  final_cfg.t_max = 5000.0;
  const auto om = omega_limit(frozen_field(model, mix.train, mix.test, ref.back().theta), w0, final_cfg);
  audit.check(om.w.values());
  const auto supp = static_cast<Index>(support(om.w, 1e-6).size());
  const bool ok = gaps[0] > gaps[1] && gaps[1] > gaps[2] && om.converged && supp <= 2;
  return {ok, "gaps " + sci(gaps[0]) + ", " + sci(gaps[1]) + ", " + sci(gaps[2]) +
                  " for alpha 1e-1, 1e-2, 1e-3 (decreasing); limiting weights " +
                  (om.converged ? "converged" : "not converged") + " with support " + std::to_string(supp) +
                  " (<= p = 2)" + (ref.message.empty() ? "" : "; " + ref.message)};
}

// --- 7 ---------------------------------------------------------------------------------------

Outcome fig2_reproduction() {
  const auto mix = gen_mixture(MixtureSpec{});
  const RidgeLeastSquares model{1e-3};
  const auto w0 = SimplexWeights::uniform(500);
  VectorXd clean(500);
  for (Index i = 0; i < 500; ++i) clean[i] = mix.cluster[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;
  const double oracle = (inner_minimizer(model, mix.train, clean) - mix.theta_hat).norm();

  SolverConfig exact_cfg;
  exact_cfg.eta = 0.03;
  exact_cfg.iterations = 10000;
  exact_cfg.record_every = 1000;
  const FlowTrace exact = exact_bilevel(model, mix.train, mix.test, w0, exact_cfg, mix.theta_hat);
  audit.check(exact);
  const VectorXd we = exact.back().w;
  const double wrong = 1.0 - we.dot(clean);
  const double exact_err = *exact.back().theta_err;

  SolverConfig warm_cfg;
  warm_cfg.rho = 1e-3;
  warm_cfg.eta = 1.0;
  warm_cfg.iterations = 2000;
  warm_cfg.record_every = 100;
  const FlowTrace warm = warm_started(model, mix.train, mix.test, VectorXd::Zero(2), w0, warm_cfg, mix.theta_hat);
  audit.check(warm);
  const double warm_h = warm.back().entropy;
  const double warm_err = *warm.back().theta_err;
  const double limit_h = 0.2 * std::log(500.0);

  const bool a = wrong <= 0.05 && exact_err <= 3.0 * oracle;
  const bool b = warm.status == TraceStatus::kCompleted && warm_h < limit_h && warm_err >= 2.0 * exact_err;
  return {a && b, "(a) wrong-cluster mass " + sci(wrong) + " (<= 0.05), error " + sci(exact_err) + " vs 3x oracle " +
                      sci(3.0 * oracle) + "; (b) warm entropy " + sci(warm_h) + " (< " + sci(limit_h) + "), error " +
                      sci(warm_err) + " (>= " + sci(2.0 * exact_err) + ")"};
}

// --- 8 ---------------------------------------------------------------------------------------

Outcome fig6_trend() {
  const auto cd = gen_corrupted(CorruptionSpec{});
  const RegularizedMultinomialLogistic model;
  const Index n = cd.train.size();
  const Index np = model.num_params(cd.train);
  std::vector<Index> clean;
  for (Index i = 0; i < n; ++i)
    if (cd.clean_mask[static_cast<std::size_t>(i)]) clean.push_back(i);
  const Dataset sub = subset(cd.train, clean);
  const double oracle = accuracy(model, cd.val, inner_minimizer(model, sub, SimplexWeights::uniform(sub.size()).values()));
  const double log_n = std::log(static_cast<double>(n));
  const double band_h = 0.5 * (1.0 - 0.9) * log_n;

  const std::vector<double> ratios{1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5};
  std::vector<double> acc, ent;
  std::vector<bool> good;
  std::string table;
  for (double r : ratios) {
    SolverConfig cfg;
    cfg.eta = std::min(r * 1e-2, 1.0);
    cfg.rho = cfg.eta / r;
    cfg.iterations = 12000;
    cfg.record_every = 2000;
    const FlowTrace tr = soba(model, cd.train, cd.test, VectorXd::Zero(np), SimplexWeights::uniform(n),
                              VectorXd::Zero(np), cfg);
    audit.check(tr);
    acc.push_back(accuracy(model, cd.val, tr.back().theta));
    ent.push_back(tr.back().entropy);
    good.push_back(tr.status == TraceStatus::kCompleted && acc.back() >= 0.9 * oracle && ent.back() >= band_h);
    table += (table.empty() ? "" : " ") + fmt("%.0e:", r) + fmt("%.3f/", acc.back()) + fmt("%.2f", ent.back());
  }
  // Longest contiguous qualifying band.
  std::size_t best_lo = 0, best_len = 0;
  for (std::size_t i = 0; i < good.size();) {
    if (!good[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < good.size() && good[j]) ++j;
    if (j - i > best_len) best_lo = i, best_len = j - i;
    i = j;
  }
  double band_min_acc = 1.0;
  for (std::size_t i = best_lo; i < best_lo + best_len; ++i) band_min_acc = std::min(band_min_acc, acc[i]);
  const bool collapse = ent.back() <= 0.1 * log_n && best_len > 0 && acc.back() < band_min_acc;
  const std::string band = best_len == 0 ? "none"
                                         : fmt("%.0e", ratios[best_lo]) + ".." +
                                               fmt("%.0e", ratios[best_lo + best_len - 1]);
  return {best_len > 0 && collapse,
          "oracle " + fmt("%.3f", oracle) + "; band " + band + " (acc >= " + fmt("%.3f", 0.9 * oracle) +
              ", entropy >= " + fmt("%.3f", band_h) + "); at r=1e5 entropy " + fmt("%.3f", ent.back()) + " (<= " +
              fmt("%.3f", 0.1 * log_n) + "), acc " + fmt("%.3f", acc.back()) + " (< " + fmt("%.3f", band_min_acc) +
              "); r:acc/entropy " + table};
}

// --- 9 ---------------------------------------------------------------------------------------

Outcome importance_sampling() {
  CounterRng rng(1009);
  const MatrixXd atoms = rng.normal_matrix(8, 3);
  const VectorXd truth = rng.normal_vector(3);
  // Atoms the test set covers follow one linear model; the others carry
  // unrelated targets, so weighting them hurts.
  const std::set<Index> covered{0, 2, 3, 4, 6};
  VectorXd target(8);
  for (Index a = 0; a < 8; ++a) target[a] = covered.count(a) ? atoms.row(a).dot(truth) : 3.0 * rng.normal();
  auto build = [&](const std::vector<Index>& ids) {
    Dataset d;
    d.features.resize(static_cast<Index>(ids.size()), 3);
    d.targets.resize(static_cast<Index>(ids.size()));
    for (std::size_t r = 0; r < ids.size(); ++r) {
      d.features.row(static_cast<Index>(r)) = atoms.row(ids[r]);
      d.targets[static_cast<Index>(r)] = target[ids[r]];
    }
    return d;
  };
  const Dataset train = build({0, 0, 1, 2, 2, 3, 4, 4, 4, 5, 6, 7, 7});
  const Dataset test = build({0, 2, 3, 3, 4, 6});
  const RidgeLeastSquares model{0.0};
  const auto star = importance_weights(train, test);
  audit.check(star.values());
  const double best = value_function(model, train, test, star);
  int beaten = 0;
  double margin = 1e300;
  for (int trial = 0; trial < 200; ++trial) {
    const auto w = random_simplex(rng, train.size());
    const double h = value_function(model, train, test, w);
    margin = std::min(margin, h - best);
    beaten += best > h + 1e-12;
  }
  return {best <= 1e-10 && beaten == 0,
          "h(importance weights) " + sci(best) + " (<= 1e-10); " + std::to_string(beaten) +
              " of 200 random points below it; min gap " + sci(margin)};
}

// --- 10 --------------------------------------------------------------------------------------

Outcome discretization_order() {
  MixtureSpec spec;
  spec.n = 100;
  const auto mix = gen_mixture(spec);
  const RidgeLeastSquares model{1e-3};
  const auto w0 = SimplexWeights::uniform(spec.n);
  const VectorXd theta0 = VectorXd::Zero(2);
  const double alpha = 1.0, beta = 1.0, horizon = 2.0, tau0 = 0.02;
  // Reference: RK4 on the joint flow, recorded on the coarsest grid.
  FlowConfig ref;
  ref.alpha = alpha;
  ref.beta = beta;
  ref.t_max = horizon;
  const std::int64_t ref_steps = 8000;
  ref.dt = horizon / static_cast<double>(ref_steps);
  ref.record_every = static_cast<std::int64_t>(std::llround(tau0 / ref.dt));
  const FlowTrace flow = integrate_joint_flow(model, mix.train, mix.test, theta0, w0, ref);
  audit.check(flow);
  std::vector<double> errs;
  for (int h = 0; h < 4; ++h) {
    const double tau = tau0 / std::pow(2.0, h);
    SolverConfig cfg;
    cfg.rho = alpha * tau;
    cfg.eta = beta * tau;
    cfg.iterations = static_cast<std::int64_t>(std::llround(horizon / tau));
    cfg.record_every = 1LL << h;
    const FlowTrace alg = warm_started(model, mix.train, mix.test, theta0, w0, cfg);
    audit.check(alg);
    double err = 0.0;
    for (std::size_t j = 0; j < flow.records.size(); ++j) {
      const auto& a = alg.records[j];
      const auto& f = flow.records[j];
      err = std::max(err, std::sqrt((a.theta - f.theta).squaredNorm() + (a.w - f.w).squaredNorm()));
    }
    errs.push_back(err);
  }
  double min_order = 1e300;
  std::string orders;
  for (std::size_t i = 0; i + 1 < errs.size(); ++i) {
    const double o = std::log2(errs[i] / errs[i + 1]);
    min_order = std::min(min_order, o);
    orders += (orders.empty() ? "" : ", ") + fmt("%.3f", o);
  }
  return {min_order >= 1.0, "errors " + sci(errs[0]) + " .. " + sci(errs[3]) + "; observed orders " + orders +
                                " (>= 1)"};
}

// --- 11 --------------------------------------------------------------------------------------

Outcome softmax_reparameterization() {
  const auto mix = gen_mixture(MixtureSpec{});
  const RidgeLeastSquares model{1e-3};
  SolverConfig cfg;
  cfg.eta = 500.0;
  cfg.rho = 0.05;
  cfg.iterations = 2000;
  cfg.record_every = 100;
  const FlowTrace tr = softmax_reparam(model, mix.train, mix.test, VectorXd::Zero(2), VectorXd::Zero(500), cfg);
  audit.check(tr);
  const double h0 = tr.records.front().entropy;
  const double h1 = tr.back().entropy;

  CounterRng rng(1011);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd lambda = rng.normal_vector(500);
    const SimplexWeights w = softmax_weights(lambda);
    const VectorXd psi = hypergrad(model, mix.train, mix.test, inner_minimizer(model, mix.train, w.values()), w);
    const VectorXd grad = softmax_chain_rule(lambda, psi);
    for (int k = 0; k < 5; ++k) {
      VectorXd dir = rng.normal_vector(500);
      dir /= dir.norm();
      const double eps = 1e-4;
      const double fd = (value_function(model, mix.train, mix.test, softmax_weights(lambda + eps * dir)) -
                         value_function(model, mix.train, mix.test, softmax_weights(lambda - eps * dir))) /
                        (2.0 * eps);
      worst = std::max(worst, std::abs(grad.dot(dir) - fd) / std::abs(fd));
    }
  }
  return {h1 < h0 && worst <= 1e-5, "entropy " + fmt("%.4f", h0) + " -> " + fmt("%.4f", h1) +
                                        "; chain-rule gradient max relative error " + sci(worst) + " (<= 1e-5)"};
}

// --- 12 --------------------------------------------------------------------------------------

Outcome invariant_suites() {
  CounterRng rng(1012);
  const int trials = 10000;
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok && std::find(failed.begin(), failed.end(), what) == failed.end()) failed.push_back(what);
  };

  for (int t = 0; t < trials; ++t) {
    const Index n = 2 + static_cast<Index>(rng.below(12));
    const auto w = t % 3 == 0 ? random_simplex(rng, n) : interior_weights(rng, n);
    const VectorXd phi = rng.normal_vector(n) * std::exp(rng.uniform(-3.0, 3.0));
    const double eta = std::exp(rng.uniform(-6.0, 3.0));
    const auto next = mirror_step(w, phi, eta);
    audit.check(next.values());
    expect(next.values().minCoeff() >= 0.0 && std::abs(next.values().sum() - 1.0) <= 1e-12, "mirror_step simplex");
    const double c = rng.uniform(-50.0, 50.0);
    expect((mirror_step(w, (phi.array() + c).matrix(), eta).values() - next.values()).cwiseAbs().maxCoeff() <= 1e-12,
           "mirror_step shift invariance");
    const MatrixXd pm = preconditioner(w);
    expect((pm - pm.transpose()).cwiseAbs().maxCoeff() <= 1e-15, "P symmetric");
    expect((pm * VectorXd::Ones(n)).cwiseAbs().maxCoeff() <= 1e-14, "P annihilates ones");
    const VectorXd x = rng.normal_vector(n);
    expect(x.dot(pm * x) >= -1e-14, "P positive semidefinite");
    expect(std::abs(apply_preconditioner(w, x).sum()) <= 1e-13 * (1.0 + x.cwiseAbs().sum()), "P maps into tangent space");
    expect(entropy(w) <= std::log(static_cast<double>(support(w).size())) + 1e-12, "entropy bound");

    const Index p = 1 + static_cast<Index>(rng.below(6));
    const Dataset data = t % 2 == 0 ? random_regression(50000 + t, n, p) : random_classification(60000 + t, n, p, 3);
    const double mu = std::exp(rng.uniform(-5.0, 0.0));
    const VectorXd a = rng.normal_vector(t % 2 == 0 ? p : 3 * p);
    const VectorXd b = rng.normal_vector(a.size());
    const VectorXd v = rng.normal_vector(a.size());
    const VectorXd w1 = random_simplex(rng, n).values();
    const VectorXd w2 = random_simplex(rng, n).values();
    const double s = rng.uniform();
    auto run_model = [&](const auto& model) {
      const VectorXd ga = inner_grad(model, data, a, w1);
      const VectorXd gb = inner_grad(model, data, b, w1);
      expect((ga - gb).dot(a - b) >= mu * (a - b).squaredNorm() * (1.0 - 1e-10) - 1e-14, "strong convexity");
      const VectorXd hv = inner_hess_apply(model, data, a, w1, v);
      expect((inner_hessian(model, data, a, w1) * v - hv).norm() <= 1e-10 * (1.0 + hv.norm()), "Hessian paths agree");
      const VectorXd mixed = inner_grad(model, data, a, (s * w1 + (1.0 - s) * w2).eval());
      const VectorXd lin = s * ga + (1.0 - s) * inner_grad(model, data, a, w2);
      expect((mixed - lin).norm() <= 1e-12 * (1.0 + lin.norm()), "gradient linearity in w");
    };
    if (t % 2 == 0) {
      run_model(RidgeLeastSquares{mu});
    } else {
      RegularizedMultinomialLogistic lg;
      lg.mu = mu;
      run_model(lg);
    }
  }

  // Simplex preservation across every solver and integrator on random instances.
  for (int inst = 0; inst < 40; ++inst) {
    const Index n = 3 + static_cast<Index>(rng.below(10));
    const Dataset train = random_regression(70000 + inst, n, 2);
    const Dataset test = random_regression(80000 + inst, 8, 2);
    const RidgeLeastSquares model{0.05};
    const auto w0 = interior_weights(rng, n);
    const VectorXd z = VectorXd::Zero(2);
    SolverConfig sc;
    sc.eta = std::exp(rng.uniform(-3.0, 1.0));
    sc.rho = 0.05;
    sc.iterations = 40;
    std::vector<FlowTrace> traces{exact_bilevel(model, train, test, w0, sc), warm_started(model, train, test, z, w0, sc),
                                  soba(model, train, test, z, w0, z, sc),
                                  softmax_reparam(model, train, test, z, rng.normal_vector(n), sc)};
    FlowConfig fc;
    fc.dt = 0.01;
    fc.t_max = 2.0;
    fc.record_every = 10;
    traces.push_back(integrate_mirror_flow(frozen_field(model, train, test, z), w0, fc));
    traces.push_back(integrate_joint_flow(model, train, test, z, w0, fc));
    fc.t_max = 50.0;
    traces.push_back(omega_limit(gen_random_frozen_field(RandomFieldSpec{n, 3, 0.1, 90000u + inst}), w0, fc).trace);
    for (const auto& tr : traces) {
      const long before = audit.violations;
      audit.check(tr);
      expect(audit.violations == before, "trace simplex preservation");
    }
  }

  // Cross-cutting: every trace above and in the other criteria.
  expect(audit.violations == 0, "simplex audit");
  std::string detail = std::to_string(trials) + " randomized trials; " + std::to_string(audit.checked) +
                       " weight vectors audited, " + std::to_string(audit.violations) + " off the simplex";
  for (const auto& f : failed) detail += "; FAILED " + f;
  return {failed.empty(), detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "hypergradient vs finite differences", 5.0, hypergradient_fd},
      {2, "constant-field closed form", 1.0, constant_field},
      {3, "I_l^p membership dichotomy", 1.0, membership_dichotomy},
      {4, "sparse stationary supports", 120.0, sparse_supports},
      {5, "fast-theta regime", 300.0, fast_theta_regime},
      {6, "fast-w regime", 600.0, fast_w_regime},
      {7, "toy-mixture reweighting", 120.0, fig2_reproduction},
      {8, "learning-rate ratio sweep", 900.0, fig6_trend},
      {9, "importance sampling optimum", 10.0, importance_sampling},
      {10, "discretization order", 120.0, discretization_order},
      {11, "softmax reparameterization", 120.0, softmax_reparameterization},
      // Runs last so the audit covers every trace produced above.
      {12, "invariant suites", 600.0, invariant_suites},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && wanted.count(c.id) == 0) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("raised: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = out.pass && in_time;
    failures += !pass;
    std::printf("%s C%d %s: %s; runtime %.2f s (< %.0f s)%s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                out.detail.c_str(), secs, c.budget_s, in_time ? "" : " OVER BUDGET");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
