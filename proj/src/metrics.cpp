#include "panvae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace panvae {

ClusterAssignment assign_clusters(const Matrix& embeddings, const PrototypeBank& bank,
                                  double epsilon, const Eigen::VectorXi* labels) {
  ClusterAssignment out;
  out.assignment.resize(std::size_t(embeddings.rows()), -1);
  out.member_lists.resize(std::size_t(bank.phi.rows()));
  for (long i = 0; i < embeddings.rows(); ++i) {
    int best = -1;
    double best_sim = -1.0;
    for (long r = 0; r < bank.phi.rows(); ++r) {
      if (!bank.active[std::size_t(r)]) continue;
      if (labels && int(r) / bank.per_class != (*labels)[i]) continue;
      const double d2 = (embeddings.row(i) - bank.phi.row(r)).squaredNorm();
      const double s = std::log((d2 + 1.0) / (d2 + epsilon));
      if (s > best_sim) {  // strict: ties keep the lowest row
        best_sim = s;
        best = int(r);
      }
    }
    out.assignment[std::size_t(i)] = best;
    out.member_lists[std::size_t(best)].push_back(int(i));
  }
  return out;
}

double db_index(const Matrix& embeddings, const PrototypeBank& bank,
                const ClusterAssignment& clusters, std::vector<int>* excluded) {
  std::vector<int> rows;
  for (long r = 0; r < bank.phi.rows(); ++r) {
    if (!bank.active[std::size_t(r)]) continue;
    if (clusters.member_lists[std::size_t(r)].empty()) {
      if (excluded) excluded->push_back(int(r));
      continue;
    }
    rows.push_back(int(r));
  }
  const int k = int(rows.size());
  if (k < 2) throw NumericalError("DB index needs at least 2 populated clusters");

  Vector intra(k);
  for (int a = 0; a < k; ++a) {
    const auto& members = clusters.member_lists[std::size_t(rows[std::size_t(a)])];
    double sum = 0.0;
    for (int i : members) {
      sum += (embeddings.row(i) - bank.phi.row(rows[std::size_t(a)])).norm();
    }
    intra[a] = sum / double(members.size());
  }

  double db = 0.0;
  for (int a = 0; a < k; ++a) {
    double worst = 0.0;
    for (int b = 0; b < k; ++b) {
      if (a == b) continue;
      const double dist =
          (bank.phi.row(rows[std::size_t(a)]) - bank.phi.row(rows[std::size_t(b)])).norm();
      if (dist == 0.0) {
        throw NumericalError("coincident prototypes " + std::to_string(rows[std::size_t(a)]) +
                             " and " + std::to_string(rows[std::size_t(b)]));
      }
      worst = std::max(worst, (intra[a] + intra[b]) / dist);
    }
    db += worst;
  }
  return db / double(k);
}

namespace {
double cross(const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}
}  // namespace

HullPolygon convex_hull(const std::vector<Eigen::Vector2d>& points) {
  std::vector<Eigen::Vector2d> pts = points;
  std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const auto& a, const auto& b) { return a == b; }),
            pts.end());
  if (pts.size() < 3) throw GeometryError("need at least 3 distinct points for a hull");

  const std::size_t n = pts.size();
  std::vector<Eigen::Vector2d> hull(2 * n);
  std::size_t h = 0;
  for (std::size_t i = 0; i < n; ++i) {  // lower chain
    while (h >= 2 && cross(hull[h - 2], hull[h - 1], pts[i]) <= 0) --h;
    hull[h++] = pts[i];
  }
  const std::size_t lower = h + 1;
  for (std::size_t i = n - 1; i-- > 0;) {  // upper chain
    while (h >= lower && cross(hull[h - 2], hull[h - 1], pts[i]) <= 0) --h;
    hull[h++] = pts[i];
  }
  hull.resize(h - 1);  // last point repeats the first
  if (hull.size() < 3) throw GeometryError("all points collinear: hull has zero area");

  HullPolygon out;
  out.vertices = std::move(hull);
  double area2 = 0.0;
  for (std::size_t i = 0; i < out.vertices.size(); ++i) {
    const auto& p = out.vertices[i];
    const auto& q = out.vertices[(i + 1) % out.vertices.size()];
    area2 += p.x() * q.y() - q.x() * p.y();
  }
  out.area = 0.5 * area2;  // counter-clockwise order makes this positive
  return out;
}

Matrix project_pca(const Matrix& points) {
  if (points.rows() < 3) throw GeometryError("projection needs at least 3 points");
  const Eigen::RowVectorXd mean = points.colwise().mean();
  Matrix centered = points.rowwise() - mean;
  Matrix cov = centered.transpose() * centered / double(points.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  if (es.info() != Eigen::Success) throw GeometryError("eigendecomposition failed");

  const long d = cov.rows();
  const double tol = 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff());
  if (d < 2 || es.eigenvalues()(d - 2) <= tol) {
    throw GeometryError("rank-deficient input: fewer than 2 informative directions");
  }
  Matrix components(d, 2);
  components.col(0) = es.eigenvectors().col(d - 1);  // eigenvalues ascending
  components.col(1) = es.eigenvectors().col(d - 2);
  for (int c = 0; c < 2; ++c) {
    long idx = 0;
    components.col(c).cwiseAbs().maxCoeff(&idx);
    if (components(idx, c) < 0) components.col(c) = -components.col(c);
  }
  return centered * components;
}

Matrix load_projection_csv(const std::string& path, long expected_rows) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open projection file " + path);
  std::vector<Eigen::Vector2d> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.find_first_not_of("0123456789+-.eE, \t") != std::string::npos) {
      continue;  // header
    }
    std::istringstream ss(line);
    double x, y;
    char comma;
    if (!(ss >> x >> comma >> y) || comma != ',') {
      throw DataError(path + ": line " + std::to_string(line_no) + ": expected x,y");
    }
    rows.emplace_back(x, y);
  }
  if (expected_rows >= 0 && long(rows.size()) != expected_rows) {
    throw DataError(path + ": " + std::to_string(rows.size()) +
                    " coordinates for " + std::to_string(expected_rows) + " observations");
  }
  Matrix out(long(rows.size()), 2);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(long(i)) = rows[i].transpose();
  return out;
}

CoverageReport coverage_ratio(const Matrix& class_embeddings, const PrototypeBank& bank,
                              int class_index, double epsilon, int n_nearest,
                              const Matrix* external_projection) {
  if (class_embeddings.rows() < 3) {
    throw GeometryError("class needs at least 3 observations for coverage");
  }
  if (n_nearest <= 0) throw ConfigError("n_nearest must be positive");

  CoverageReport report;
  report.projected = external_projection ? *external_projection
                                         : project_pca(class_embeddings);
  if (report.projected.rows() != class_embeddings.rows()) {
    throw DataError("projection row count does not match class observations");
  }

  // Neighborhood selection happens in the full latent space.
  std::vector<char> selected(std::size_t(class_embeddings.rows()), 0);
  for (int j = 0; j < bank.per_class; ++j) {
    if (!bank.is_active(class_index, j)) continue;
    const long row = bank.index(class_index, j);
    std::vector<std::pair<double, int>> sims;
    sims.reserve(std::size_t(class_embeddings.rows()));
    for (long i = 0; i < class_embeddings.rows(); ++i) {
      const double d2 = (class_embeddings.row(i) - bank.phi.row(row)).squaredNorm();
      sims.emplace_back(std::log((d2 + 1.0) / (d2 + epsilon)), int(i));
    }
    const int take = std::min<int>(n_nearest, int(sims.size()));
    std::partial_sort(sims.begin(), sims.begin() + take, sims.end(),
                      [](const auto& a, const auto& b) {
                        return a.first > b.first ||
                               (a.first == b.first && a.second < b.second);
                      });
    for (int t = 0; t < take; ++t) selected[std::size_t(sims[std::size_t(t)].second)] = 1;
  }

  std::vector<Eigen::Vector2d> all_pts, sample_pts;
  for (long i = 0; i < report.projected.rows(); ++i) {
    all_pts.emplace_back(report.projected(i, 0), report.projected(i, 1));
    if (selected[std::size_t(i)]) {
      sample_pts.emplace_back(report.projected(i, 0), report.projected(i, 1));
      report.sample_indices.push_back(int(i));
    }
  }
  report.full_hull = convex_hull(all_pts);
  report.sample_hull = convex_hull(sample_pts);
  report.ratio = report.sample_hull.area / report.full_hull.area;
  return report;
}

double combinatorial_diversity(const DiversityDistribution& dist) {
  const double sum = dist.probabilities.sum();
  if (std::abs(sum - 1.0) > 1e-12 || (dist.probabilities.array() < 0.0).any()) {
    throw DataError("invalid probability distribution");
  }
  double h = 0.0;
  for (long i = 0; i < dist.probabilities.size(); ++i) {
    const double p = dist.probabilities[i];
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

DiversityDistribution prototype_group_distribution(const Matrix& test_embeddings,
                                                   const Eigen::VectorXi& group_labels,
                                                   const PrototypeBank& bank,
                                                   double epsilon) {
  if (test_embeddings.rows() == 0) throw DataError("empty evaluation set");
  if (group_labels.size() != test_embeddings.rows()) {
    throw DataError("missing group labels for evaluation set");
  }
  const int num_groups = group_labels.maxCoeff() + 1;
  Vector tally = Vector::Zero(num_groups);
  int total = 0;
  for (long r = 0; r < bank.phi.rows(); ++r) {
    if (!bank.active[std::size_t(r)]) continue;
    int best = 0;
    double best_sim = -1.0;
    for (long i = 0; i < test_embeddings.rows(); ++i) {
      const double d2 = (test_embeddings.row(i) - bank.phi.row(r)).squaredNorm();
      const double s = std::log((d2 + 1.0) / (d2 + epsilon));
      if (s > best_sim) {
        best_sim = s;
        best = int(i);
      }
    }
    tally[group_labels[best]] += 1.0;
    ++total;
  }
  DiversityDistribution dist;
  dist.probabilities = tally / double(total);
  return dist;
}

double accuracy_gap(const Eigen::VectorXi& predicted, const Eigen::VectorXi& labels,
                    const Eigen::VectorXi& group_labels, int group_a, int group_b) {
  double correct_a = 0, total_a = 0, correct_b = 0, total_b = 0;
  for (long i = 0; i < predicted.size(); ++i) {
    if (group_labels[i] == group_a) {
      ++total_a;
      if (predicted[i] == labels[i]) ++correct_a;
    } else if (group_labels[i] == group_b) {
      ++total_b;
      if (predicted[i] == labels[i]) ++correct_b;
    }
  }
  if (total_a == 0) throw DataError("group " + std::to_string(group_a) + " is empty");
  if (total_b == 0) throw DataError("group " + std::to_string(group_b) + " is empty");
  return correct_a / total_a - correct_b / total_b;
}

}  // namespace panvae
