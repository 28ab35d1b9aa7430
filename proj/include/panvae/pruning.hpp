#pragma once

#include <Eigen/Dense>

#include "panvae/data.hpp"
#include "panvae/model.hpp"

namespace panvae {

/// counts(k, j): number of training images of class k whose maximal
/// similarity among the active prototypes of class k lands on prototype j.
struct ResponsibilityCount {
  Eigen::MatrixXi counts;  // K x M
};

/// Deterministic embedding (z = mu); ties break toward the lowest
/// prototype index. Throws DataError naming any class absent from the set.
ResponsibilityCount responsibility_counts(const Model& model, const Dataset& train);

/// Same counting against precomputed embeddings (no encoder pass).
ResponsibilityCount responsibility_counts(const Matrix& embeddings,
                                          const Eigen::VectorXi& labels,
                                          const PrototypeBank& bank, double epsilon);

struct PruneDecision {
  int class_index;
  int prototype_index;
  int count;
  bool pruned;
  bool kept_as_last_survivor;
};

struct PruneResult {
  PrototypeBank bank;
  std::vector<PruneDecision> decisions;
};

/// Deactivates active prototypes with zero responsibility; never removes
/// the last active prototype of a class.
PruneResult prune(const ResponsibilityCount& counts, const PrototypeBank& bank);

/// CSV: class,prototype_index,count,pruned
void write_prune_report(const PruneResult& result, const std::string& path);

}  // namespace panvae
