#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "panvae/model.hpp"

namespace panvae {

/// Maximal-similarity cluster assignment: each observation is attached to
/// one active prototype (global row index into the bank).
struct ClusterAssignment {
  std::vector<int> assignment;                 // per observation
  std::vector<std::vector<int>> member_lists;  // per prototype row
};

/// Assigns by maximal Eq.-1 similarity over active prototypes; ties break
/// toward the lowest prototype row. When labels are given the candidates
/// are restricted to the sample's true class (the per-class variant).
ClusterAssignment assign_clusters(const Matrix& embeddings, const PrototypeBank& bank,
                                  double epsilon,
                                  const Eigen::VectorXi* labels = nullptr);

/// Davies-Bouldin index over prototype-induced clusters. Prototypes with
/// empty member lists are excluded (reported through `excluded` when
/// given). Throws NumericalError for coincident prototypes.
double db_index(const Matrix& embeddings, const PrototypeBank& bank,
                const ClusterAssignment& clusters,
                std::vector<int>* excluded = nullptr);

struct HullPolygon {
  std::vector<Eigen::Vector2d> vertices;  // counter-clockwise, strictly convex
  double area = 0.0;
};

/// Monotone-chain hull with shoelace area; duplicates removed first.
/// Throws GeometryError when all points are collinear.
HullPolygon convex_hull(const std::vector<Eigen::Vector2d>& points);

/// Deterministic top-2 PCA projection. Sign convention: within each
/// component the largest-magnitude loading is positive. Throws
/// GeometryError on rank-deficient input.
Matrix project_pca(const Matrix& points);  // N x 2

/// Loads externally produced 2D coordinates (CSV "x,y" per row).
Matrix load_projection_csv(const std::string& path, long expected_rows);

struct CoverageReport {
  double ratio = 0.0;
  HullPolygon full_hull;
  HullPolygon sample_hull;
  Matrix projected;                // N x 2, all class observations
  std::vector<int> sample_indices; // union of per-prototype neighborhoods
};

/// Fig.-4 style coverage: per active prototype of class k, the n_nearest
/// observations by similarity in the full latent space; hulls are taken
/// in the 2D projection. `external_projection`, when given, replaces PCA.
CoverageReport coverage_ratio(const Matrix& class_embeddings, const PrototypeBank& bank,
                              int class_index, double epsilon, int n_nearest,
                              const Matrix* external_projection = nullptr);

struct DiversityDistribution {
  Vector probabilities;  // sums to 1
};

/// Shannon entropy with the 0 log 0 := 0 convention, natural log.
double combinatorial_diversity(const DiversityDistribution& dist);

/// Group-label distribution over the nearest test image to each active
/// prototype.
DiversityDistribution prototype_group_distribution(const Matrix& test_embeddings,
                                                   const Eigen::VectorXi& group_labels,
                                                   const PrototypeBank& bank,
                                                   double epsilon);

/// accuracy(group_a) - accuracy(group_b), signed.
double accuracy_gap(const Eigen::VectorXi& predicted, const Eigen::VectorXi& labels,
                    const Eigen::VectorXi& group_labels, int group_a, int group_b);

struct MetricsReport {
  double accuracy = 0.0;
  double db_score = 0.0;
  Vector per_class_volume;
  std::vector<int> active_per_class;
  std::optional<double> entropy_diversity;
  std::optional<Vector> group_distribution;
};

}  // namespace panvae
