#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dataset.hpp"
#include "error.hpp"
#include "hypergradient.hpp"
#include "rng.hpp"
#include "simplex.hpp"

namespace bilevel_reweight {

/// Two-cluster linear regression. Train samples pick cluster 1 with
/// probability `p_cluster1`, draw d ~ N(mu_z, I) and
/// y ~ N(<d, theta_z_hat>, sigma^2) with that cluster's parameter. Test
/// samples all come from cluster 1.
///
/// Centroids, parameters and sigma are implementation defaults chosen so the
/// two clusters are visibly apart in 2-d.
struct MixtureSpec {
  Index n = 500;
  Index m = 100;
  VectorXd mu1 = (VectorXd(2) << -2.0, 0.0).finished();
  VectorXd mu2 = (VectorXd(2) << 2.0, 0.0).finished();
  VectorXd theta1_hat = (VectorXd(2) << 1.0, 1.0).finished();
  VectorXd theta2_hat = (VectorXd(2) << -1.0, 2.0).finished();
  double sigma = 0.1;
  double p_cluster1 = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    require(n >= 1 && m >= 1, ErrorKind::kInvalidArgument, "mixture needs n, m >= 1");
    require(sigma >= 0.0, ErrorKind::kInvalidArgument, "sigma must be nonnegative");
    require(p_cluster1 >= 0.0 && p_cluster1 <= 1.0, ErrorKind::kInvalidArgument, "p_cluster1 must lie in [0, 1]");
    const Index d = mu1.size();
    require(d >= 1 && mu2.size() == d && theta1_hat.size() == d && theta2_hat.size() == d,
            ErrorKind::kInvalidArgument, "centroids and parameters must share one dimension");
  }
};

struct MixtureData {
  Dataset train;
  Dataset test;
  /// Parameter of the test cluster.
  VectorXd theta_hat;
  /// Latent cluster (1 or 2) of each train sample; 1 is the test cluster.
  std::vector<int> cluster;
};

inline MixtureData gen_mixture(const MixtureSpec& spec) {
  spec.validate();
  const Index d = spec.mu1.size();
  MixtureData out;
  out.theta_hat = spec.theta1_hat;
  out.cluster.resize(static_cast<std::size_t>(spec.n));

  auto draw = [&](CounterRng& rng, Dataset& data, Index count, bool train) {
    data.kind = TaskKind::kRegression;
    data.seed = spec.seed;
    data.features.resize(count, d);
    data.targets.resize(count);
    for (Index i = 0; i < count; ++i) {
      int z = 1;
      if (train) {
        z = rng.uniform() < spec.p_cluster1 ? 1 : 2;
        out.cluster[static_cast<std::size_t>(i)] = z;
      }
      const VectorXd& centroid = z == 1 ? spec.mu1 : spec.mu2;
      const VectorXd& theta = z == 1 ? spec.theta1_hat : spec.theta2_hat;
      for (Index k = 0; k < d; ++k) data.features(i, k) = centroid[k] + rng.normal();
      const double noise = rng.normal();
      data.targets[i] = data.features.row(i).dot(theta) + spec.sigma * noise;
    }
  };
  CounterRng train_rng(spec.seed, 0);
  CounterRng test_rng(spec.seed, 1);
  draw(train_rng, out.train, spec.n, true);
  draw(test_rng, out.test, spec.m, false);
  return out;
}

/// Gaussian class blobs with label noise on the train split.
///
/// Class centroids are drawn as N(0, (separation^2 / d) I), samples as
/// N(centroid, I). With probability p_c a train label is replaced by one of
/// the C - 1 wrong classes chosen uniformly. Test and validation splits are
/// clean and drawn from independent streams.
struct CorruptionSpec {
  Index n = 800;
  Index m = 200;
  Index n_val = 1000;
  Index classes = 10;
  Index dim = 20;
  double p_c = 0.9;
  double separation = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    require(n >= 1 && m >= 1 && n_val >= 1, ErrorKind::kInvalidArgument, "corruption splits need >= 1 sample");
    require(classes >= 2, ErrorKind::kInvalidArgument, "corruption needs at least two classes");
    require(dim >= 1, ErrorKind::kInvalidArgument, "feature dimension must be positive");
    require(p_c >= 0.0 && p_c <= 1.0, ErrorKind::kInvalidArgument, "p_c must lie in [0, 1]");
    require(separation >= 0.0, ErrorKind::kInvalidArgument, "separation must be nonnegative");
  }
};

struct CorruptedData {
  Dataset train;
  /// True where the train label was left untouched.
  std::vector<bool> clean_mask;
  /// Labels before corruption.
  std::vector<Index> true_labels;
  Dataset test;
  Dataset val;
  MatrixXd centroids;

  Index clean_count() const {
    Index count = 0;
    for (bool c : clean_mask) count += c;
    return count;
  }
};

inline CorruptedData gen_corrupted(const CorruptionSpec& spec) {
  spec.validate();
  CorruptedData out;
  CounterRng centroid_rng(spec.seed, 10);
  out.centroids = centroid_rng.normal_matrix(spec.classes, spec.dim) *
                  (spec.separation / std::sqrt(static_cast<double>(spec.dim)));

  auto draw = [&](CounterRng& rng, Index count, std::vector<Index>* labels) {
    Dataset data;
    data.kind = TaskKind::kClassification;
    data.num_classes = spec.classes;
    data.seed = spec.seed;
    data.features.resize(count, spec.dim);
    data.targets.resize(count);
    for (Index i = 0; i < count; ++i) {
      const auto label = static_cast<Index>(rng.below(static_cast<std::uint64_t>(spec.classes)));
      for (Index k = 0; k < spec.dim; ++k) data.features(i, k) = out.centroids(label, k) + rng.normal();
      data.targets[i] = static_cast<double>(label);
      if (labels) labels->push_back(label);
    }
    return data;
  };
  CounterRng train_rng(spec.seed, 0);
  CounterRng test_rng(spec.seed, 1);
  CounterRng val_rng(spec.seed, 2);
  CounterRng corrupt_rng(spec.seed, 3);
  out.train = draw(train_rng, spec.n, &out.true_labels);
  out.test = draw(test_rng, spec.m, nullptr);
  out.val = draw(val_rng, spec.n_val, nullptr);

  out.clean_mask.assign(static_cast<std::size_t>(spec.n), true);
  for (Index i = 0; i < spec.n; ++i) {
    // Both draws happen for every sample so the stream layout does not depend on p_c.
    const double u = corrupt_rng.uniform();
    const auto shift = static_cast<Index>(corrupt_rng.below(static_cast<std::uint64_t>(spec.classes - 1)));
    if (u < spec.p_c) {
      const Index label = out.true_labels[static_cast<std::size_t>(i)];
      out.train.targets[i] = static_cast<double>((label + 1 + shift) % spec.classes);
      out.clean_mask[static_cast<std::size_t>(i)] = false;
    }
  }
  return out;
}

/// Exact atom matching: a sample is its feature row followed by its target.
inline std::vector<double> atom_key(const Dataset& data, Index i) {
  std::vector<double> key(static_cast<std::size_t>(data.dim() + 1));
  for (Index k = 0; k < data.dim(); ++k) key[static_cast<std::size_t>(k)] = data.features(i, k);
  key.back() = data.targets[i];
  return key;
}

/// Density ratio of the empirical test measure to the empirical train
/// measure, evaluated per train sample and normalized.
inline SimplexWeights importance_weights(const Dataset& train, const Dataset& test) {
  std::map<std::vector<double>, Index> train_count;
  std::map<std::vector<double>, Index> test_count;
  for (Index i = 0; i < train.size(); ++i) ++train_count[atom_key(train, i)];
  for (Index j = 0; j < test.size(); ++j) ++test_count[atom_key(test, j)];
  for (const auto& [atom, count] : test_count) {
    (void)count;
    require(train_count.contains(atom), ErrorKind::kAbsoluteContinuityViolation,
            "a test atom never occurs in the train set");
  }
  VectorXd w(train.size());
  for (Index i = 0; i < train.size(); ++i) {
    const auto key = atom_key(train, i);
    const auto hit = test_count.find(key);
    w[i] = hit == test_count.end()
               ? 0.0
               : static_cast<double>(hit->second) / static_cast<double>(train_count.at(key));
  }
  return SimplexWeights(std::move(w));
}

/// Synthetic frozen field: Gamma, grad F and the vectors u_i are i.i.d.
/// standard Gaussian, and sample i has Hessian u_i u_i^T + ridge * I.
struct RandomFieldSpec {
  Index n = 5;
  Index p = 3;
  double ridge = 0.1;
  std::uint64_t seed = 0;
};

inline FrozenField gen_random_frozen_field(const RandomFieldSpec& spec) {
  require(spec.n >= 1 && spec.p >= 1 && spec.ridge > 0.0, ErrorKind::kInvalidArgument, "invalid random field spec");
  CounterRng rng(spec.seed, 20);
  MatrixXd gamma = rng.normal_matrix(spec.n, spec.p);
  VectorXd outer = rng.normal_vector(spec.p);
  auto u = std::make_shared<const MatrixXd>(rng.normal_matrix(spec.n, spec.p));
  const double ridge = spec.ridge;
  FrozenField::HessianFn hessian = [u, ridge](const VectorXd& weights) {
    MatrixXd h = u->transpose() * weights.asDiagonal() * *u;
    h.diagonal().array() += ridge * weights.sum();
    return h;
  };
  FrozenField::HessApplyFn apply = [u, ridge](const VectorXd& weights, const VectorXd& v) {
    return (u->transpose() * weights.cwiseProduct(*u * v) + ridge * weights.sum() * v).eval();
  };
  FrozenField::SampleHessApplyFn sample = [u, ridge](Index j, const VectorXd& v) {
    return (u->row(j).transpose() * u->row(j).dot(v) + ridge * v).eval();
  };
  return FrozenField(std::move(gamma), std::move(outer), std::move(hessian), std::move(apply), std::move(sample));
}

}  // namespace bilevel_reweight
