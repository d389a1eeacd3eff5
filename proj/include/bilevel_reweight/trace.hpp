#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "simplex.hpp"

namespace bilevel_reweight {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// One logged iterate of a solver or integrator. Losses are NaN when the run
/// has no model attached (pure weight flows).
struct TraceRecord {
  std::int64_t k = 0;
  double t = 0.0;
  VectorXd theta;
  VectorXd w;
  double inner_loss = kNaN;
  double outer_loss = kNaN;
  double entropy = 0.0;
  Index support_size = 0;
  /// ||theta - theta_ref|| when a reference parameter is known.
  std::optional<double> theta_err;
  /// ||theta - theta*(w)|| with theta*(w) re-solved from a cold start.
  std::optional<double> inner_theta_err;
};

enum class TraceStatus { kCompleted, kNumericOverflow, kFailed };

inline std::string to_string(TraceStatus status) {
  switch (status) {
    case TraceStatus::kCompleted: return "completed";
    case TraceStatus::kNumericOverflow: return "numeric-overflow";
    case TraceStatus::kFailed: return "failed";
  }
  return "unknown";
}

struct FlowTrace {
  std::vector<TraceRecord> records;
  TraceStatus status = TraceStatus::kCompleted;
  std::string message;

  bool empty() const { return records.empty(); }
  const TraceRecord& back() const {
    require(!records.empty(), ErrorKind::kPreconditionViolation, "trace has no records");
    return records.back();
  }
  SimplexWeights final_weights() const { return SimplexWeights(back().w); }

  void push(TraceRecord record) {
    require(records.empty() || record.k > records.back().k, ErrorKind::kPreconditionViolation,
            "trace iteration indices must increase");
    records.push_back(std::move(record));
  }
};

/// Fills the weight bookkeeping fields of a record.
inline TraceRecord weight_record(std::int64_t k, double t, const SimplexWeights& w,
                                 double support_tol = kDefaultSupportTol) {
  TraceRecord r;
  r.k = k;
  r.t = t;
  r.w = w.values();
  r.entropy = entropy(w);
  r.support_size = static_cast<Index>(support(w, support_tol).size());
  return r;
}

/// record_every == 0 keeps only the first and last iterate.
inline bool should_record(std::int64_t k, std::int64_t last, std::int64_t record_every) {
  if (k == 0 || k == last) return true;
  return record_every > 0 && k % record_every == 0;
}

}  // namespace bilevel_reweight
