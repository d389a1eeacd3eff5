#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "error.hpp"

namespace bilevel_reweight {

enum class TaskKind { kRegression, kClassification };

inline std::string_view to_string(TaskKind kind) {
  return kind == TaskKind::kRegression ? "regression" : "classification";
}

inline TaskKind parse_task_kind(std::string_view text) {
  if (text == "regression") return TaskKind::kRegression;
  if (text == "classification") return TaskKind::kClassification;
  fail(ErrorKind::kInvalidArgument, "unknown dataset kind '" + std::string(text) + "'");
}

/// Samples stored row-wise. For classification the targets hold class
/// indices in {0, ..., num_classes - 1} as doubles.
struct Dataset {
  Eigen::MatrixXd features;
  Eigen::VectorXd targets;
  TaskKind kind = TaskKind::kRegression;
  Eigen::Index num_classes = 0;
  std::uint64_t seed = 0;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }

  Eigen::Index label(Eigen::Index i) const { return static_cast<Eigen::Index>(std::lround(targets[i])); }

  void validate() const {
    require(features.rows() >= 1, ErrorKind::kInvalidArgument, "dataset needs at least one sample");
    require(targets.size() == features.rows(), ErrorKind::kInvalidArgument,
            "feature rows and targets differ in count");
    require(features.allFinite(), ErrorKind::kInvalidArgument, "feature rows must be finite");
    require(targets.allFinite(), ErrorKind::kInvalidArgument, "targets must be finite");
    if (kind == TaskKind::kClassification) {
      require(num_classes >= 2, ErrorKind::kInvalidArgument, "classification needs at least two classes");
      for (Eigen::Index i = 0; i < targets.size(); ++i) {
        const double t = targets[i];
        require(t == std::round(t) && t >= 0 && t < static_cast<double>(num_classes),
                ErrorKind::kInvalidArgument, "class target out of range at row " + std::to_string(i));
      }
    }
  }
};

/// Rows selected by `indices`, in the given order.
template <class IndexRange>
Dataset subset(const Dataset& data, const IndexRange& indices) {
  Dataset out;
  out.kind = data.kind;
  out.num_classes = data.num_classes;
  out.seed = data.seed;
  const auto count = static_cast<Eigen::Index>(std::size(indices));
  out.features.resize(count, data.dim());
  out.targets.resize(count);
  Eigen::Index row = 0;
  for (auto i : indices) {
    out.features.row(row) = data.features.row(static_cast<Eigen::Index>(i));
    out.targets[row] = data.targets[static_cast<Eigen::Index>(i)];
    ++row;
  }
  return out;
}

}  // namespace bilevel_reweight
