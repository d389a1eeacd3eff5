#pragma once

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "dataset.hpp"
#include "dynamics.hpp"
#include "error.hpp"
#include "trace.hpp"

namespace bilevel_reweight {

using Json = nlohmann::ordered_json;

/// 17 significant digits, enough to read back the same double.
inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline Json finite_or_null(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

inline Json to_json(const VectorXd& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(finite_or_null(v[i]));
  return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  std::filesystem::path side = csv;
  side += ".json";
  return side;
}

/// Writes `path` as CSV (header x0..x{d-1},y; 17 significant digits) and
/// `path.json` with kind, n, d, C and seed.
inline void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  std::ofstream csv(path);
  require(static_cast<bool>(csv), ErrorKind::kInvalidArgument, "cannot open " + path.string() + " for writing");
  for (Index k = 0; k < data.dim(); ++k) csv << 'x' << k << ',';
  csv << "y\n";
  for (Index i = 0; i < data.size(); ++i) {
    for (Index k = 0; k < data.dim(); ++k) csv << format_double(data.features(i, k)) << ',';
    csv << format_double(data.targets[i]) << '\n';
  }
  Json side;
  side["kind"] = std::string(to_string(data.kind));
  side["n"] = data.size();
  side["d"] = data.dim();
  side["C"] = data.num_classes;
  side["seed"] = data.seed;
  std::ofstream meta(sidecar_path(path));
  require(static_cast<bool>(meta), ErrorKind::kInvalidArgument, "cannot write sidecar for " + path.string());
  meta << side.dump(2) << '\n';
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_cell(const std::string& cell, const std::string& source, std::size_t line) {
  if (cell.empty()) throw ParseError(source, line, "empty cell");
  errno = 0;
  char* end = nullptr;
  const double value = std::strtod(cell.c_str(), &end);
  if (end != cell.c_str() + cell.size() || errno == ERANGE)
    throw ParseError(source, line, "not a number: '" + cell + "'");
  return value;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto side_path = sidecar_path(path);
  std::ifstream meta(side_path);
  if (!meta) throw ParseError(side_path.string(), 0, "missing JSON sidecar");
  Json side;
  try {
    side = Json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(side_path.string(), 0, e.what());
  }
  Dataset data;
  Index n = 0;
  Index d = 0;
  try {
    data.kind = parse_task_kind(side.at("kind").get<std::string>());
    n = side.at("n").get<Index>();
    d = side.at("d").get<Index>();
    data.num_classes = side.value("C", Index{0});
    data.seed = side.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(side_path.string(), 0, std::string("bad sidecar: ") + e.what());
  }

  std::ifstream csv(path);
  if (!csv) throw ParseError(source, 0, "cannot open file");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(csv, line)) throw ParseError(source, 1, "missing header row");
  ++line_no;
  const auto header = detail::split_csv_line(line);
  if (static_cast<Index>(header.size()) != d + 1)
    throw ParseError(source, line_no, "header has " + std::to_string(header.size()) + " columns, expected " +
                                          std::to_string(d + 1));
  std::vector<std::vector<double>> rows;
  while (std::getline(csv, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (static_cast<Index>(cells.size()) != d + 1)
      throw ParseError(source, line_no, "expected " + std::to_string(d + 1) + " cells, found " +
                                            std::to_string(cells.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(detail::parse_cell(c, source, line_no));
    rows.push_back(std::move(row));
  }
  if (static_cast<Index>(rows.size()) != n)
    throw ParseError(source, line_no, "sidecar declares n = " + std::to_string(n) + " but file has " +
                                          std::to_string(rows.size()) + " rows");
  data.features.resize(n, d);
  data.targets.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    for (Index k = 0; k < d; ++k) data.features(i, k) = row[static_cast<std::size_t>(k)];
    data.targets[i] = row.back();
  }
  try {
    data.validate();
  } catch (const Error& e) {
    throw ParseError(source, 0, e.what());
  }
  return data;
}

/// Maximum n for which full weight vectors are written to trace lines.
inline constexpr Index kTraceWeightLimit = 1000;

inline Json to_json(const TraceRecord& r) {
  Json j;
  j["k"] = r.k;
  j["t"] = r.t;
  j["inner_loss"] = finite_or_null(r.inner_loss);
  j["outer_loss"] = finite_or_null(r.outer_loss);
  j["entropy"] = r.entropy;
  j["support_size"] = r.support_size;
  j["theta_err"] = r.theta_err ? finite_or_null(*r.theta_err) : Json(nullptr);
  if (r.inner_theta_err) j["inner_theta_err"] = finite_or_null(*r.inner_theta_err);
  if (r.theta.size() > 0) j["theta"] = to_json(r.theta);
  if (r.w.size() > 0 && r.w.size() <= kTraceWeightLimit) j["w"] = to_json(r.w);
  return j;
}

inline void write_trace_jsonl(const FlowTrace& trace, std::ostream& out) {
  for (const auto& r : trace.records) out << to_json(r).dump() << '\n';
}

inline void write_trace_jsonl(const FlowTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kInvalidArgument, "cannot open " + path.string());
  write_trace_jsonl(trace, out);
}

inline Json to_json(const MembershipResult& m) {
  Json j;
  j["member"] = m.member;
  j["witness"] = to_string(m.witness);
  j["x"] = to_json(m.x);
  j["ls_residual"] = m.ls_residual;
  j["min_singular"] = m.min_singular;
  return j;
}

inline Json to_json(const StationaryReport& r) {
  Json j;
  j["w"] = to_json(r.w.values());
  j["is_stationary"] = r.is_stationary;
  j["support"] = r.support;
  j["proportionality_residual"] = r.proportionality_residual;
  j["offsupport_margin"] = to_json(r.offsupport_margin);
  Json eig = Json::array();
  for (const auto& ev : r.tangent_eigenvalues) eig.push_back(Json::array({ev.real(), ev.imag()}));
  j["tangent_eigenvalues"] = eig;
  j["is_stable"] = r.is_stable;
  j["in_I_lp"] = r.in_I_lp ? Json(*r.in_I_lp) : Json(nullptr);
  j["certificate"] = r.certificate ? to_json(*r.certificate) : Json(nullptr);
  return j;
}

inline void write_json(const Json& j, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::kInvalidArgument, "cannot open " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace bilevel_reweight
