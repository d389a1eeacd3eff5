#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "datagen.hpp"
#include "dataset.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "hypergradient.hpp"
#include "io.hpp"
#include "loss_models.hpp"
#include "simplex.hpp"
#include "solvers.hpp"
#include "trace.hpp"

namespace bilevel_reweight::experiments {

namespace fs = std::filesystem;

// --- logging ---------------------------------------------------------------------------------

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

/// Level from BILEVEL_REWEIGHT_LOG (error | info | debug); info when unset.
inline LogLevel log_level_from_env() {
  const char* raw = std::getenv("BILEVEL_REWEIGHT_LOG");
  if (raw == nullptr) return LogLevel::kInfo;
  const std::string_view v(raw);
  if (v == "error") return LogLevel::kError;
  if (v == "debug") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

class Logger {
 public:
  explicit Logger(LogLevel level = log_level_from_env(), std::ostream* sink = &std::cerr)
      : level_(level), sink_(sink) {}

  void log(LogLevel level, const std::string& msg) const {
    if (static_cast<int>(level) > static_cast<int>(level_) || sink_ == nullptr) return;
    static constexpr const char* kNames[] = {"error", "info", "debug"};
    std::lock_guard<std::mutex> lock(mutex_);
    *sink_ << "[" << kNames[static_cast<int>(level)] << "] " << msg << '\n';
  }
  void error(const std::string& msg) const { log(LogLevel::kError, msg); }
  void info(const std::string& msg) const { log(LogLevel::kInfo, msg); }
  void debug(const std::string& msg) const { log(LogLevel::kDebug, msg); }

 private:
  LogLevel level_;
  std::ostream* sink_;
  mutable std::mutex mutex_;
};

// --- configuration ---------------------------------------------------------------------------

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"toy-mixture", "frozen-flow", "ratio-sweep", "softmax-toy",
                                              "regime-check"};
  return names;
}

inline bool is_experiment(std::string_view name) {
  const auto& names = experiment_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

inline Json vec_json(std::initializer_list<double> xs) { return Json(std::vector<double>(xs)); }

inline Json default_data(std::string_view kind) {
  Json d;
  d["kind"] = std::string(kind);
  if (kind == "mixture") {
    d["n"] = 500;
    d["m"] = 100;
    d["sigma"] = 0.1;
    d["p_cluster1"] = 0.5;
    d["mu1"] = vec_json({-2.0, 0.0});
    d["mu2"] = vec_json({2.0, 0.0});
    d["theta1_hat"] = vec_json({1.0, 1.0});
    d["theta2_hat"] = vec_json({-1.0, 2.0});
  } else if (kind == "corrupted") {
    d["n"] = 800;
    d["m"] = 200;
    d["n_val"] = 1000;
    d["classes"] = 10;
    d["dim"] = 20;
    d["p_c"] = 0.9;
    d["separation"] = 3.0;
  } else if (kind == "random-field") {
    d["n"] = 5;
    d["p"] = 3;
    d["ridge"] = 0.1;
  } else if (kind == "constant-field") {
    d["phi"] = vec_json({0.3, -0.2, 0.5, -0.2});
    d["w0"] = vec_json({0.1, 0.2, 0.3, 0.4});
  } else if (kind == "linear-field") {
    d["matrix"] = Json::array({vec_json({0.0, 1.0, -1.0}), vec_json({-1.0, 0.0, 1.0}), vec_json({1.0, -1.0, 0.0})});
    d["w0"] = vec_json({0.5, 0.3, 0.2});
  } else if (kind == "csv") {
    d["train"] = "train.csv";
    d["test"] = "test.csv";
    d["val"] = nullptr;
  } else {
    fail(ErrorKind::kInvalidArgument, "unknown data kind '" + std::string(kind) + "'");
  }
  return d;
}

inline Json default_solver() {
  Json s;
  s["kind"] = "exact";
  s["eta"] = 0.03;
  s["rho"] = 1e-3;
  s["rho_v"] = 0.0;
  s["iterations"] = 10000;
  s["record_every"] = 100;
  s["inner_tol"] = 0.0;
  // When set, eta = min(ratio * rho_max, eta_max) and rho = eta / ratio.
  s["ratio"] = nullptr;
  s["eta_max"] = 1.0;
  s["rho_max"] = 1e-2;
  return s;
}

inline Json default_flow() {
  Json f;
  f["kind"] = "omega";
  f["alpha"] = 1.0;
  f["beta"] = 1.0;
  f["dt"] = 0.01;
  f["t_max"] = 1000.0;
  f["stationarity_tol"] = 1e-8;
  f["oscillation_window"] = 50;
  f["record_every"] = 0;
  f["support_tol"] = 1e-6;
  // zero | inner: theta0 = 0 or theta*(uniform).
  f["theta0"] = "zero";
  return f;
}

inline Json default_model(std::string_view kind = "auto") {
  Json m;
  m["kind"] = std::string(kind);
  m["mu"] = nullptr;
  return m;
}

/// Full default document for a command (generate | solve | flow) or preset.
inline Json default_config(std::string_view name) {
  Json c;
  c["experiment"] = std::string(name);
  c["seed"] = 0;
  c["data"] = default_data("mixture");
  c["model"] = default_model();
  if (name == "generate") return c;
  if (name == "solve") {
    c["solver"] = default_solver();
    return c;
  }
  if (name == "flow") {
    c["data"] = default_data("random-field");
    c["flow"] = default_flow();
    return c;
  }
  if (name == "toy-mixture") {
    c["model"] = default_model("ridge");
    c["model"]["mu"] = 1e-3;
    c["exact"] = default_solver();
    Json warm = default_solver();
    warm["kind"] = "warm";
    warm["eta"] = 1.0;
    warm["rho"] = 1e-3;
    warm["iterations"] = 2000;
    warm["record_every"] = 20;
    c["warm"] = warm;
    return c;
  }
  if (name == "frozen-flow") {
    c["data"] = default_data("random-field");
    c["flow"] = default_flow();
    c["sweep"] = {{"seeds", Json(std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9})}};
    return c;
  }
  if (name == "ratio-sweep") {
    c["data"] = default_data("corrupted");
    c["model"] = default_model("logistic");
    c["model"]["mu"] = 1e-2;
    Json s = default_solver();
    s["kind"] = "soba";
    s["iterations"] = 12000;
    s["record_every"] = 500;
    c["solver"] = s;
    c["sweep"] = {{"ratios", vec_json({1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5})}};
    return c;
  }
  if (name == "softmax-toy") {
    c["model"] = default_model("ridge");
    c["model"]["mu"] = 1e-3;
    Json s = default_solver();
    s["kind"] = "softmax";
    s["eta"] = 500.0;
    s["rho"] = 0.05;
    s["iterations"] = 2000;
    s["record_every"] = 50;
    c["solver"] = s;
    return c;
  }
  if (name == "regime-check") {
    c["model"] = default_model("ridge");
    c["model"]["mu"] = 1e-3;
    c["regime"] = {{"alpha", 1.0}, {"horizon", 1.0}, {"fast_dt", 0.05}, {"grid", 100}, {"reference_steps", 2000}};
    c["sweep"] = {{"betas", vec_json({1e-1, 1e-2, 1e-3})}};
    return c;
  }
  fail(ErrorKind::kInvalidArgument, "unknown experiment '" + std::string(name) + "'");
}

namespace detail {

/// Merges `patch` into `base`. Objects merge key by key and reject keys the
/// base does not have; everything else is replaced.
inline void strict_merge(Json& base, const Json& patch, const std::string& where) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  // Changing the data kind swaps in that kind's defaults before merging.
  if (where == "data" && patch.contains("kind") && patch["kind"].is_string() &&
      patch["kind"] != base.value("kind", Json())) {
    base = default_data(patch["kind"].get<std::string>());
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    require(base.contains(it.key()), ErrorKind::kInvalidArgument, "unknown config key '" + path + "'");
    strict_merge(base[it.key()], it.value(), path);
  }
}

inline std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

}  // namespace detail

/// Parses "a.b.c=value". The value is read as JSON when it parses, as a plain
/// string otherwise.
inline std::pair<std::string, Json> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  require(eq != std::string::npos && eq > 0, ErrorKind::kInvalidArgument,
          "override '" + text + "' is not of the form key=value");
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

inline void apply_override(Json& cfg, const std::string& assignment) {
  const auto [key, value] = parse_assignment(assignment);
  const auto parts = detail::split_path(key);
  require(!parts.empty(), ErrorKind::kInvalidArgument, "empty override key");
  Json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  detail::strict_merge(cfg, patch, "");
}

/// Defaults, then the user document, then --set overrides, then --seed.
/// Model "auto" and a null mu are replaced by the concrete values used.
inline Json resolve_config(std::string_view name, const Json& user = Json::object(),
                           const std::vector<std::string>& overrides = {},
                           std::optional<std::uint64_t> seed = std::nullopt) {
  Json cfg = default_config(name);
  if (!user.is_null()) {
    require(user.is_object(), ErrorKind::kInvalidArgument, "config must be a JSON object");
    Json patch = user;
    if (patch.contains("experiment")) {
      require(patch["experiment"] == cfg["experiment"], ErrorKind::kInvalidArgument,
              "config is for '" + patch["experiment"].dump() + "', not '" + std::string(name) + "'");
      patch.erase("experiment");
    }
    detail::strict_merge(cfg, patch, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  if (seed) cfg["seed"] = *seed;
  require(cfg["seed"].is_number_unsigned() || (cfg["seed"].is_number_integer() && cfg["seed"].get<std::int64_t>() >= 0),
          ErrorKind::kInvalidArgument, "seed must be a nonnegative integer");

  Json& model = cfg["model"];
  if (model["kind"] == "auto") {
    const std::string dk = cfg["data"]["kind"];
    model["kind"] = dk == "corrupted" ? "logistic" : "ridge";
  }
  require(model["kind"] == "ridge" || model["kind"] == "logistic", ErrorKind::kInvalidArgument,
          "model.kind must be ridge or logistic");
  if (model["mu"].is_null()) model["mu"] = model["kind"] == "ridge" ? 1e-3 : 1e-2;
  return cfg;
}

inline Json load_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open config");
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ParseError(path.string(), 0, "invalid JSON");
  return j;
}

// --- typed views of a resolved config --------------------------------------------------------

namespace detail {

inline VectorXd json_vector(const Json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(xs.data(), static_cast<Index>(xs.size()));
}

template <class T>
T num(const Json& j, const char* key) {
  require(j.contains(key) && j[key].is_number(), ErrorKind::kInvalidArgument,
          std::string("config field '") + key + "' must be a number");
  return j[key].get<T>();
}

}  // namespace detail

inline MixtureSpec mixture_spec(const Json& d, std::uint64_t seed) {
  MixtureSpec s;
  s.n = detail::num<Index>(d, "n");
  s.m = detail::num<Index>(d, "m");
  s.sigma = detail::num<double>(d, "sigma");
  s.p_cluster1 = detail::num<double>(d, "p_cluster1");
  s.mu1 = detail::json_vector(d["mu1"]);
  s.mu2 = detail::json_vector(d["mu2"]);
  s.theta1_hat = detail::json_vector(d["theta1_hat"]);
  s.theta2_hat = detail::json_vector(d["theta2_hat"]);
  s.seed = seed;
  s.validate();
  return s;
}

inline CorruptionSpec corruption_spec(const Json& d, std::uint64_t seed) {
  CorruptionSpec s;
  s.n = detail::num<Index>(d, "n");
  s.m = detail::num<Index>(d, "m");
  s.n_val = detail::num<Index>(d, "n_val");
  s.classes = detail::num<Index>(d, "classes");
  s.dim = detail::num<Index>(d, "dim");
  s.p_c = detail::num<double>(d, "p_c");
  s.separation = detail::num<double>(d, "separation");
  s.seed = seed;
  s.validate();
  return s;
}

inline SolverConfig solver_config(const Json& s) {
  SolverConfig c;
  c.eta = detail::num<double>(s, "eta");
  c.rho = detail::num<double>(s, "rho");
  c.rho_v = detail::num<double>(s, "rho_v");
  c.iterations = detail::num<std::int64_t>(s, "iterations");
  c.record_every = detail::num<std::int64_t>(s, "record_every");
  c.inner_tol = detail::num<double>(s, "inner_tol");
  if (!s["ratio"].is_null()) {
    const double r = detail::num<double>(s, "ratio");
    require(r > 0.0 && std::isfinite(r), ErrorKind::kInvalidArgument, "solver.ratio must be positive");
    c.eta = std::min(r * detail::num<double>(s, "rho_max"), detail::num<double>(s, "eta_max"));
    c.rho = c.eta / r;
  }
  c.validate();
  return c;
}

inline FlowConfig flow_config(const Json& f) {
  FlowConfig c;
  c.alpha = detail::num<double>(f, "alpha");
  c.beta = detail::num<double>(f, "beta");
  c.dt = detail::num<double>(f, "dt");
  c.t_max = detail::num<double>(f, "t_max");
  c.stationarity_tol = detail::num<double>(f, "stationarity_tol");
  c.oscillation_window = detail::num<Index>(f, "oscillation_window");
  c.record_every = detail::num<std::int64_t>(f, "record_every");
  c.validate();
  return c;
}

using Model = std::variant<RidgeLeastSquares, RegularizedMultinomialLogistic>;

inline Model make_model(const Json& m) {
  const double mu = detail::num<double>(m, "mu");
  require(mu >= 0.0, ErrorKind::kInvalidArgument, "model.mu must be nonnegative");
  if (m["kind"] == "logistic") {
    RegularizedMultinomialLogistic model;
    model.mu = mu;
    return model;
  }
  return RidgeLeastSquares{mu};
}

/// Train/test pair plus whatever ground truth the generator knows.
struct Problem {
  Dataset train;
  Dataset test;
  std::optional<Dataset> val;
  std::optional<VectorXd> theta_ref;
  /// Mixture: latent cluster per train sample.
  std::vector<int> cluster;
  /// Corrupted: which train labels are intact.
  std::vector<bool> clean_mask;
};

inline Problem make_problem(const Json& cfg, const fs::path& base_dir = {}) {
  const Json& d = cfg["data"];
  const auto seed = cfg["seed"].get<std::uint64_t>();
  const std::string kind = d["kind"];
  Problem p;
  if (kind == "mixture") {
    auto mix = gen_mixture(mixture_spec(d, seed));
    p.train = std::move(mix.train);
    p.test = std::move(mix.test);
    p.theta_ref = mix.theta_hat;
    p.cluster = std::move(mix.cluster);
  } else if (kind == "corrupted") {
    auto cd = gen_corrupted(corruption_spec(d, seed));
    p.train = std::move(cd.train);
    p.test = std::move(cd.test);
    p.val = std::move(cd.val);
    p.clean_mask = std::move(cd.clean_mask);
  } else if (kind == "csv") {
    auto resolve = [&](const Json& j) {
      fs::path path = j.get<std::string>();
      return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    p.train = load_dataset(resolve(d["train"]));
    p.test = load_dataset(resolve(d["test"]));
    if (!d["val"].is_null()) p.val = load_dataset(resolve(d["val"]));
  } else {
    fail(ErrorKind::kInvalidArgument, "data kind '" + kind + "' does not describe a train/test problem");
  }
  return p;
}

// --- summaries -------------------------------------------------------------------------------

inline Json finite_or_null(const std::optional<double>& x) {
  return x ? bilevel_reweight::finite_or_null(*x) : Json(nullptr);
}

template <LossModel M>
Json summarize_weights(const M& model, const Problem& p, const VectorXd& theta, const SimplexWeights& w,
                       double support_tol = kDefaultSupportTol) {
  Json s;
  s["final_entropy"] = entropy(w);
  s["log_n"] = std::log(static_cast<double>(w.size()));
  s["support_size"] = support(w, support_tol).size();
  s["outer_loss"] = bilevel_reweight::finite_or_null(outer_loss(model, p.test, theta));
  s["inner_loss"] = bilevel_reweight::finite_or_null(inner_loss(model, p.train, theta, w));
  s["theta_err"] = p.theta_ref ? bilevel_reweight::finite_or_null((theta - *p.theta_ref).norm()) : Json(nullptr);
  if (!p.cluster.empty()) {
    double wrong = 0.0;
    for (Index i = 0; i < w.size(); ++i) wrong += p.cluster[static_cast<std::size_t>(i)] == 1 ? 0.0 : w[i];
    s["wrong_cluster_mass"] = wrong;
  }
  if (!p.clean_mask.empty()) {
    double clean = 0.0;
    for (Index i = 0; i < w.size(); ++i) clean += p.clean_mask[static_cast<std::size_t>(i)] ? w[i] : 0.0;
    s["clean_mass"] = clean;
  }
  if constexpr (std::is_same_v<M, RegularizedMultinomialLogistic>) {
    s["test_accuracy"] = accuracy(model, p.test, theta);
    s["val_accuracy"] = p.val ? Json(accuracy(model, *p.val, theta)) : Json(nullptr);
  }
  s["theta"] = to_json(theta);
  return s;
}

template <LossModel M>
Json summarize_trace(const M& model, const Problem& p, const FlowTrace& trace) {
  Json s;
  s["status"] = to_string(trace.status);
  s["message"] = trace.message;
  s["records"] = trace.records.size();
  if (trace.empty()) return s;
  const auto& last = trace.back();
  s["iterations"] = last.k;
  s["initial_entropy"] = trace.records.front().entropy;
  s.update(summarize_weights(model, p, last.theta, SimplexWeights(last.w)));
  s["support_size"] = last.support_size;
  return s;
}

// --- run directories -------------------------------------------------------------------------

inline void write_run(const fs::path& dir, const Json& summary, const FlowTrace* trace, double wall_seconds) {
  fs::create_directories(dir);
  if (trace != nullptr) write_trace_jsonl(*trace, dir / "trace.jsonl");
  write_json(summary, dir / "summary.json");
  // Kept apart from summary.json so that summaries stay byte-identical across reruns.
  write_json(Json{{"wall_time_s", wall_seconds}}, dir / "timing.json");
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Tidy CSV: one row per summary, columns in the given order; nested values
/// are written as compact JSON.
inline void write_table(const std::vector<Json>& rows, const std::vector<std::string>& columns,
                        const fs::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kInvalidArgument, "cannot open " + path.string());
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      if (c) out << ',';
      if (!row.contains(columns[c]) || row[columns[c]].is_null()) continue;
      const Json& v = row[columns[c]];
      if (v.is_string()) {
        out << '"' << v.get<std::string>() << '"';
      } else if (v.is_number_float()) {
        out << format_double(v.get<double>());
      } else {
        out << v.dump();
      }
    }
    out << '\n';
  }
}

/// Runs `tasks` on up to `jobs` threads. Results keep the task order.
inline std::vector<Json> run_parallel(const std::vector<std::function<Json()>>& tasks, unsigned jobs) {
  std::vector<Json> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        results[i] = tasks[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned count = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(tasks.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < count; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

struct RunOptions {
  fs::path out = "out";
  unsigned jobs = 1;
  /// Directory relative CSV paths are resolved against.
  fs::path base_dir;
  const Logger* logger = nullptr;
};

namespace detail {

inline const Logger& logger_or_default(const RunOptions& opt) {
  static const Logger fallback;
  return opt.logger ? *opt.logger : fallback;
}

inline void write_resolved(const Json& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_json(cfg, out / "resolved-config.json");
}

}  // namespace detail

// --- generate --------------------------------------------------------------------------------

/// Writes train.csv, test.csv and (for corrupted data) val.csv with sidecars.
/// Returns the written paths.
inline std::vector<fs::path> cmd_generate(const Json& cfg, const RunOptions& opt) {
  const std::string kind = cfg["data"]["kind"];
  require(kind == "mixture" || kind == "corrupted", ErrorKind::kInvalidArgument,
          "generate supports data.kind mixture or corrupted, got '" + kind + "'");
  const Problem p = make_problem(cfg);
  detail::write_resolved(cfg, opt.out);
  std::vector<fs::path> paths{opt.out / "train.csv", opt.out / "test.csv"};
  Dataset train = p.train;
  Dataset test = p.test;
  train.seed = test.seed = cfg["seed"].get<std::uint64_t>();
  save_dataset(train, paths[0]);
  save_dataset(test, paths[1]);
  if (p.val) {
    Dataset val = *p.val;
    val.seed = train.seed;
    paths.push_back(opt.out / "val.csv");
    save_dataset(val, paths.back());
  }
  detail::logger_or_default(opt).info("wrote " + std::to_string(paths.size()) + " datasets to " + opt.out.string());
  return paths;
}

// --- solve -----------------------------------------------------------------------------------

/// Dispatches on solver.kind (exact | warm | soba | softmax). Solver failures
/// other than bad input end up in the summary with the partial trace.
template <LossModel M>
FlowTrace run_solver(const M& model, const Problem& p, const Json& solver_json) {
  const SolverConfig sc = solver_config(solver_json);
  const std::string kind = solver_json["kind"];
  const Index np = model.num_params(p.train);
  const auto w0 = SimplexWeights::uniform(p.train.size());
  const VectorXd zero = VectorXd::Zero(np);
  if (kind == "exact") return exact_bilevel(model, p.train, p.test, w0, sc, p.theta_ref);
  if (kind == "warm") return warm_started(model, p.train, p.test, zero, w0, sc, p.theta_ref);
  if (kind == "soba") return soba(model, p.train, p.test, zero, w0, zero, sc, p.theta_ref);
  if (kind == "softmax") {
    SolverConfig smc = sc;
    smc.track_inner_error = true;
    return softmax_reparam(model, p.train, p.test, zero, VectorXd::Zero(p.train.size()), smc, p.theta_ref);
  }
  fail(ErrorKind::kInvalidArgument, "solver.kind must be exact, warm, soba or softmax, got '" + kind + "'");
}

template <LossModel M>
Json solve_into(const M& model, const Problem& p, const Json& solver_json, const fs::path& dir) {
  Stopwatch clock;
  FlowTrace trace;
  Json summary;
  try {
    trace = run_solver(model, p, solver_json);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInvalidArgument) throw;
    trace.status = TraceStatus::kFailed;
    trace.message = e.what();
  }
  summary = summarize_trace(model, p, trace);
  summary["solver"] = solver_json["kind"];
  const SolverConfig sc = solver_config(solver_json);
  summary["eta"] = sc.eta;
  summary["rho"] = sc.rho;
  write_run(dir, summary, &trace, clock.seconds());
  return summary;
}

inline Json cmd_solve(const Json& cfg, const RunOptions& opt) {
  detail::write_resolved(cfg, opt.out);
  const Problem p = make_problem(cfg, opt.base_dir);
  const Model model = make_model(cfg["model"]);
  Json summary = std::visit([&](const auto& m) { return solve_into(m, p, cfg["solver"], opt.out); }, model);
  detail::logger_or_default(opt).info("solve " + cfg["solver"]["kind"].get<std::string>() + ": " +
                                      summary["status"].get<std::string>());
  return summary;
}

// --- flow ------------------------------------------------------------------------------------

namespace detail {

template <WeightField Field>
Json omega_into(const Field& field, const SimplexWeights& w0, const FlowConfig& fc, double support_tol,
                const fs::path& dir) {
  Stopwatch clock;
  const OmegaLimit om = omega_limit(field, w0, fc);
  Json s;
  s["flow"] = "omega";
  s["converged"] = om.converged;
  s["oscillating"] = om.oscillating;
  s["t"] = om.t;
  s["last_change"] = bilevel_reweight::finite_or_null(om.last_change);
  s["support_size"] = support(om.w, support_tol).size();
  s["final_entropy"] = entropy(om.w);
  Json report;
  if (om.converged) {
    const StationaryReport r = stability_check(om.w, field, fc.stationarity_tol, JacobianMode::kAuto, support_tol);
    report = to_json(r);
    s["is_stable"] = r.is_stable;
    s["in_I_lp"] = r.in_I_lp ? Json(*r.in_I_lp) : Json(nullptr);
  } else {
    report = to_json(is_stationary(om.w, field, fc.stationarity_tol, support_tol));
    s["is_stable"] = nullptr;
    s["in_I_lp"] = nullptr;
  }
  report["converged"] = om.converged;
  report["oscillating"] = om.oscillating;
  fs::create_directories(dir);
  write_json(report, dir / "report.json");
  write_run(dir, s, &om.trace, clock.seconds());
  return s;
}

template <WeightField Field>
Json mirror_into(const Field& field, const SimplexWeights& w0, const FlowConfig& fc, double support_tol,
                 const fs::path& dir, const std::optional<VectorXd>& constant_phi) {
  Stopwatch clock;
  const FlowTrace trace = integrate_mirror_flow(field, w0, fc);
  Json s;
  s["flow"] = "mirror";
  s["t"] = trace.back().t;
  s["support_size"] = support(trace.final_weights(), support_tol).size();
  s["final_entropy"] = trace.back().entropy;
  if (constant_phi) {
    double err = 0.0;
    for (const auto& r : trace.records)
      err = std::max(err, (r.w - constant_field_solution(w0, *constant_phi * fc.beta, r.t).values())
                              .cwiseAbs()
                              .maxCoeff());
    s["closed_form_error"] = err;
  }
  write_run(dir, s, &trace, clock.seconds());
  return s;
}

template <WeightField Field>
Json field_flow_into(const Field& field, const SimplexWeights& w0, const Json& flow_json, const fs::path& dir,
                     const std::optional<VectorXd>& constant_phi = std::nullopt) {
  const FlowConfig fc = flow_config(flow_json);
  const double support_tol = detail::num<double>(flow_json, "support_tol");
  const std::string kind = flow_json["kind"];
  if (kind == "omega") return omega_into(field, w0, fc, support_tol, dir);
  if (kind == "mirror") return mirror_into(field, w0, fc, support_tol, dir, constant_phi);
  fail(ErrorKind::kInvalidArgument, "flow.kind '" + kind + "' needs a train/test problem");
}

template <LossModel M>
VectorXd initial_theta(const M& model, const Problem& p, const Json& flow_json) {
  const std::string mode = flow_json["theta0"];
  if (mode == "zero") return VectorXd::Zero(model.num_params(p.train));
  require(mode == "inner", ErrorKind::kInvalidArgument, "flow.theta0 must be zero or inner");
  return inner_minimizer(model, p.train, SimplexWeights::uniform(p.train.size()).values());
}

template <LossModel M>
Json problem_flow_into(const M& model, const Problem& p, const Json& flow_json, const fs::path& dir) {
  const VectorXd theta0 = initial_theta(model, p, flow_json);
  const auto w0 = SimplexWeights::uniform(p.train.size());
  if (flow_json["kind"] != "joint") return field_flow_into(frozen_field(model, p.train, p.test, theta0), w0, flow_json, dir);
  Stopwatch clock;
  const FlowConfig fc = flow_config(flow_json);
  FlowTrace trace;
  try {
    trace = integrate_joint_flow(model, p.train, p.test, theta0, w0, fc, p.theta_ref);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumericOverflow) throw;
    trace.status = TraceStatus::kNumericOverflow;
    trace.message = e.what();
  }
  Json s = summarize_trace(model, p, trace);
  s["flow"] = "joint";
  if (!trace.empty()) s["support_size"] = support(trace.final_weights(), detail::num<double>(flow_json, "support_tol")).size();
  write_run(dir, s, &trace, clock.seconds());
  return s;
}

inline Json flow_run(const Json& cfg, const fs::path& dir, const fs::path& base_dir) {
  const Json& d = cfg["data"];
  const std::string kind = d["kind"];
  if (kind == "random-field") {
    RandomFieldSpec spec;
    spec.n = detail::num<Index>(d, "n");
    spec.p = detail::num<Index>(d, "p");
    spec.ridge = detail::num<double>(d, "ridge");
    spec.seed = cfg["seed"].get<std::uint64_t>();
    Json s = field_flow_into(gen_random_frozen_field(spec), SimplexWeights::uniform(spec.n), cfg["flow"], dir);
    s["p"] = spec.p;
    return s;
  }
  if (kind == "constant-field") {
    const VectorXd phi = json_vector(d["phi"]);
    const SimplexWeights w0(json_vector(d["w0"]));
    require(w0.size() == phi.size(), ErrorKind::kInvalidArgument, "data.phi and data.w0 differ in length");
    return field_flow_into(ConstantField{phi}, w0, cfg["flow"], dir, phi);
  }
  if (kind == "linear-field") {
    const auto rows = d["matrix"].get<std::vector<std::vector<double>>>();
    const SimplexWeights w0(json_vector(d["w0"]));
    MatrixXd a(static_cast<Index>(rows.size()), w0.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(static_cast<Index>(rows[r].size()) == w0.size(), ErrorKind::kInvalidArgument,
              "data.matrix must be square with the length of data.w0");
      for (Index c = 0; c < w0.size(); ++c) a(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
    require(a.rows() == w0.size(), ErrorKind::kInvalidArgument, "data.matrix must be square with the length of data.w0");
    return field_flow_into(LinearField{a}, w0, cfg["flow"], dir);
  }
  const Problem p = make_problem(cfg, base_dir);
  const Model model = make_model(cfg["model"]);
  return std::visit([&](const auto& m) { return problem_flow_into(m, p, cfg["flow"], dir); }, model);
}

}  // namespace detail

inline Json cmd_flow(const Json& cfg, const RunOptions& opt) {
  detail::write_resolved(cfg, opt.out);
  Json s = detail::flow_run(cfg, opt.out, opt.base_dir);
  const auto& log = detail::logger_or_default(opt);
  if (s.contains("converged") && !s["converged"].get<bool>())
    log.info(std::string("flow did not converge") + (s["oscillating"].get<bool>() ? " (oscillating)" : ""));
  return s;
}

// --- named experiments -----------------------------------------------------------------------

struct ExperimentResult {
  /// One summary per run, sorted by run key.
  std::vector<Json> rows;
  Json summary;
};

namespace detail {

inline Json toy_mixture_fixed(const RidgeLeastSquares& model, const Problem& p, const SimplexWeights& w,
                              const std::string& key, const fs::path& dir) {
  Stopwatch clock;
  const VectorXd theta = inner_minimizer(model, p.train, w.values());
  FlowTrace trace;
  TraceRecord r = weight_record(0, 0.0, w);
  r.theta = theta;
  r.inner_loss = inner_loss(model, p.train, theta, w);
  r.outer_loss = outer_loss(model, p.test, theta);
  if (p.theta_ref) r.theta_err = (theta - *p.theta_ref).norm();
  trace.push(r);
  Json s = summarize_weights(model, p, theta, w);
  s["run"] = key;
  s["status"] = "completed";
  write_run(dir, s, &trace, clock.seconds());
  return s;
}

inline ExperimentResult toy_mixture(const Json& cfg, const RunOptions& opt) {
  require(cfg["model"]["kind"] == "ridge", ErrorKind::kInvalidArgument, "toy-mixture uses the ridge model");
  const Problem p = make_problem(cfg);
  const RidgeLeastSquares model{detail::num<double>(cfg["model"], "mu")};
  const Index n = p.train.size();
  VectorXd indicator(n);
  for (Index i = 0; i < n; ++i) indicator[i] = p.cluster[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;
  require(indicator.sum() > 0.0, ErrorKind::kInvalidArgument, "mixture has no cluster-1 train samples");
  const fs::path runs = opt.out / "runs";
  std::vector<std::function<Json()>> tasks{
      [&] { return toy_mixture_fixed(model, p, SimplexWeights::uniform(n), "uniform", runs / "uniform"); },
      [&] { return toy_mixture_fixed(model, p, SimplexWeights(indicator), "optimal", runs / "optimal"); },
      [&] {
        Json s = solve_into(model, p, cfg["exact"], runs / "exact");
        s["run"] = "exact";
        return s;
      },
      [&] {
        Json s = solve_into(model, p, cfg["warm"], runs / "warm");
        s["run"] = "warm";
        return s;
      }};
  ExperimentResult res;
  res.rows = run_parallel(tasks, opt.jobs);
  std::sort(res.rows.begin(), res.rows.end(), [](const Json& a, const Json& b) { return a["run"] < b["run"]; });
  write_table(res.rows, {"run", "status", "final_entropy", "support_size", "outer_loss", "theta_err", "wrong_cluster_mass"},
              opt.out / "table.csv");
  // Oracle: ridge fit on the test cluster's train samples only.
  res.summary["oracle_theta_err"] = (inner_minimizer(model, p.train, indicator) - *p.theta_ref).norm();
  return res;
}

inline ExperimentResult frozen_flow(const Json& cfg, const RunOptions& opt) {
  const auto seeds = cfg["sweep"]["seeds"].get<std::vector<std::uint64_t>>();
  const auto base_seed = cfg["seed"].get<std::uint64_t>();
  std::vector<std::function<Json()>> tasks;
  for (const auto s : seeds) {
    tasks.push_back([&, s] {
      Json run_cfg = cfg;
      run_cfg["seed"] = base_seed + s;
      const std::string key = "seed-" + std::to_string(base_seed + s);
      Json row = flow_run(run_cfg, opt.out / "runs" / key, opt.base_dir);
      row["run"] = key;
      row["seed"] = base_seed + s;
      return row;
    });
  }
  ExperimentResult res;
  res.rows = run_parallel(tasks, opt.jobs);
  std::sort(res.rows.begin(), res.rows.end(),
            [](const Json& a, const Json& b) { return a["seed"].get<std::uint64_t>() < b["seed"].get<std::uint64_t>(); });
  write_table(res.rows, {"run", "seed", "converged", "oscillating", "t", "support_size", "p", "is_stable", "in_I_lp"},
              opt.out / "table.csv");
  Index converged = 0;
  Index within_p = 0;
  for (const auto& r : res.rows) {
    if (!r.contains("converged") || !r["converged"].get<bool>()) continue;
    ++converged;
    within_p += r["support_size"].get<Index>() <= r["p"].get<Index>();
  }
  res.summary["converged"] = converged;
  res.summary["converged_with_support_le_p"] = within_p;
  return res;
}

inline ExperimentResult ratio_sweep(const Json& cfg, const RunOptions& opt) {
  require(cfg["model"]["kind"] == "logistic", ErrorKind::kInvalidArgument, "ratio-sweep uses the logistic model");
  require(cfg["data"]["kind"] == "corrupted", ErrorKind::kInvalidArgument, "ratio-sweep uses corrupted data");
  const Problem p = make_problem(cfg);
  RegularizedMultinomialLogistic model;
  model.mu = detail::num<double>(cfg["model"], "mu");
  const auto ratios = cfg["sweep"]["ratios"].get<std::vector<double>>();
  std::vector<std::function<Json()>> tasks;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    tasks.push_back([&, i] {
      Json solver = cfg["solver"];
      solver["ratio"] = ratios[i];
      char key[32];
      std::snprintf(key, sizeof key, "r%02zu", i);
      Json row = solve_into(model, p, solver, opt.out / "runs" / key);
      row["run"] = key;
      row["ratio"] = ratios[i];
      return row;
    });
  }
  ExperimentResult res;
  res.rows = run_parallel(tasks, opt.jobs);
  std::sort(res.rows.begin(), res.rows.end(), [](const Json& a, const Json& b) { return a["run"] < b["run"]; });
  write_table(res.rows,
              {"run", "ratio", "eta", "rho", "status", "final_entropy", "support_size", "val_accuracy",
               "test_accuracy", "clean_mass", "outer_loss"},
              opt.out / "table.csv");
  // Clean oracle: the same model fit on the intact samples only.
  std::vector<Index> clean;
  for (Index i = 0; i < p.train.size(); ++i)
    if (p.clean_mask[static_cast<std::size_t>(i)]) clean.push_back(i);
  if (!clean.empty()) {
    const Dataset sub = subset(p.train, clean);
    const VectorXd theta = inner_minimizer(model, sub, SimplexWeights::uniform(sub.size()).values());
    res.summary["oracle_val_accuracy"] = accuracy(model, *p.val, theta);
  } else {
    res.summary["oracle_val_accuracy"] = nullptr;
  }
  res.summary["clean_count"] = clean.size();
  return res;
}

inline ExperimentResult softmax_toy(const Json& cfg, const RunOptions& opt) {
  const Problem p = make_problem(cfg);
  const Model model = make_model(cfg["model"]);
  Json row = std::visit([&](const auto& m) { return solve_into(m, p, cfg["solver"], opt.out / "runs" / "softmax"); },
                        model);
  row["run"] = "softmax";
  ExperimentResult res;
  res.rows.push_back(row);
  write_table(res.rows, {"run", "status", "initial_entropy", "final_entropy", "support_size", "outer_loss", "theta_err"},
              opt.out / "table.csv");
  return res;
}

/// Sup over a uniform grid of slow times of ||w^{alpha,beta}(t / beta) - w*(t)||,
/// w* from the mirror flow of the exact hypergradient field.
inline ExperimentResult regime_check(const Json& cfg, const RunOptions& opt) {
  require(cfg["model"]["kind"] == "ridge", ErrorKind::kInvalidArgument, "regime-check uses the ridge model");
  const Problem p = make_problem(cfg, opt.base_dir);
  const RidgeLeastSquares model{detail::num<double>(cfg["model"], "mu")};
  const Json& rg = cfg["regime"];
  const double alpha = detail::num<double>(rg, "alpha");
  const double horizon = detail::num<double>(rg, "horizon");
  const double fast_dt = detail::num<double>(rg, "fast_dt");
  const auto grid = detail::num<std::int64_t>(rg, "grid");
  const auto ref_steps = detail::num<std::int64_t>(rg, "reference_steps");
  require(grid >= 1 && ref_steps >= grid && ref_steps % grid == 0, ErrorKind::kInvalidArgument,
          "regime.reference_steps must be a positive multiple of regime.grid");
  const auto w0 = SimplexWeights::uniform(p.train.size());
  FlowConfig ref;
  ref.dt = horizon / static_cast<double>(ref_steps);
  ref.t_max = horizon;
  ref.record_every = ref_steps / grid;
  const FlowTrace star = integrate_mirror_flow(exact_hypergradient_field(model, p.train, p.test), w0, ref);
  fs::create_directories(opt.out / "runs");
  write_trace_jsonl(star, opt.out / "runs" / "reference.jsonl");

  const auto betas = cfg["sweep"]["betas"].get<std::vector<double>>();
  std::vector<std::function<Json()>> tasks;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    tasks.push_back([&, i] {
      Stopwatch clock;
      FlowConfig fc;
      fc.alpha = alpha;
      fc.beta = betas[i];
      fc.t_max = horizon / betas[i];
      const auto steps = static_cast<std::int64_t>(std::ceil(fc.t_max / fast_dt / static_cast<double>(grid))) * grid;
      fc.dt = fc.t_max / static_cast<double>(steps);
      fc.record_every = steps / grid;
      const FlowTrace jt = integrate_joint_flow(model, p.train, p.test, VectorXd::Zero(p.train.dim()), w0, fc, p.theta_ref);
      double gap = 0.0;
      for (std::size_t j = 0; j < star.records.size(); ++j)
        gap = std::max(gap, (jt.records[j].w - star.records[j].w).norm());
      char key[32];
      std::snprintf(key, sizeof key, "b%02zu", i);
      Json row = summarize_trace(model, p, jt);
      row["run"] = key;
      row["beta"] = betas[i];
      row["alpha"] = alpha;
      row["trajectory_gap"] = gap;
      write_run(opt.out / "runs" / key, row, &jt, clock.seconds());
      return row;
    });
  }
  ExperimentResult res;
  res.rows = run_parallel(tasks, opt.jobs);
  std::sort(res.rows.begin(), res.rows.end(), [](const Json& a, const Json& b) { return a["run"] < b["run"]; });
  write_table(res.rows, {"run", "alpha", "beta", "trajectory_gap", "final_entropy", "outer_loss"}, opt.out / "table.csv");
  res.summary["reference_final_entropy"] = star.back().entropy;
  return res;
}

}  // namespace detail

/// Runs a named preset and writes resolved-config.json, runs/<key>/...,
/// table.csv and summary.json under opt.out.
inline ExperimentResult cmd_experiment(const Json& cfg, const RunOptions& opt) {
  const std::string name = cfg["experiment"];
  require(is_experiment(name), ErrorKind::kInvalidArgument, "unknown experiment '" + name + "'");
  detail::write_resolved(cfg, opt.out);
  const auto& log = detail::logger_or_default(opt);
  log.info("experiment " + name + " -> " + opt.out.string());
  ExperimentResult res;
  if (name == "toy-mixture") res = detail::toy_mixture(cfg, opt);
  else if (name == "frozen-flow") res = detail::frozen_flow(cfg, opt);
  else if (name == "ratio-sweep") res = detail::ratio_sweep(cfg, opt);
  else if (name == "softmax-toy") res = detail::softmax_toy(cfg, opt);
  else res = detail::regime_check(cfg, opt);
  Json summary;
  summary["experiment"] = name;
  summary["seed"] = cfg["seed"];
  if (res.summary.is_object()) summary.update(res.summary);
  summary["runs"] = res.rows;
  res.summary = summary;
  write_json(summary, opt.out / "summary.json");
  for (const auto& r : res.rows) log.debug(r["run"].get<std::string>() + ": " + r.value("status", std::string("done")));
  return res;
}

}  // namespace bilevel_reweight::experiments
