#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "panvae/pruning.hpp"
#include "support/test_util.hpp"

using namespace panvae;
using panvae::testing::random_matrix;

namespace {

PrototypeBank make_bank(const Matrix& phi, int num_classes, int per_class) {
  PrototypeBank bank(num_classes, per_class, int(phi.cols()));
  bank.phi = phi;
  return bank;
}

}  // namespace

TEST_CASE("responsibility counts on a hand-built layout") {
  // class 0 prototypes at x = -2 and x = +2; class 1 prototypes at y = -2, +2
  Matrix phi(4, 2);
  phi << -2.0, 0.0, 2.0, 0.0, 0.0, -2.0, 0.0, 2.0;
  PrototypeBank bank = make_bank(phi, 2, 2);

  Matrix emb(5, 2);
  emb << -2.1, 0.0,  // class 0, near prototype 0
      -1.9, 0.0,     // class 0, near prototype 0
      2.0, 0.1,      // class 0, near prototype 1
      0.0, 5.0,      // class 1, near prototype 1
      0.0, 4.0;      // class 1, near prototype 1
  Eigen::VectorXi labels(5);
  labels << 0, 0, 0, 1, 1;

  ResponsibilityCount rc = responsibility_counts(emb, labels, bank, 1e-4);
  CHECK(rc.counts(0, 0) == 2);
  CHECK(rc.counts(0, 1) == 1);
  CHECK(rc.counts(1, 0) == 0);
  CHECK(rc.counts(1, 1) == 2);

  SUBCASE("only same-class prototypes compete") {
    // the class-1 points are far from both class-1 prototypes but must not
    // count toward class 0
    CHECK(rc.counts.row(0).sum() == 3);
    CHECK(rc.counts.row(1).sum() == 2);
  }

  SUBCASE("exact tie goes to the lower prototype index") {
    Matrix mid(2, 2);
    mid << 0.0, 0.0, 0.0, 3.0;
    Eigen::VectorXi lab(2);
    lab << 0, 1;
    ResponsibilityCount tied = responsibility_counts(mid, lab, bank, 1e-4);
    CHECK(tied.counts(0, 0) == 1);
    CHECK(tied.counts(0, 1) == 0);
  }

  SUBCASE("inactive prototypes receive no counts") {
    bank.active[0] = 0;
    ResponsibilityCount masked = responsibility_counts(emb, labels, bank, 1e-4);
    CHECK(masked.counts(0, 0) == 0);
    CHECK(masked.counts(0, 1) == 3);
  }

  SUBCASE("a class missing from the data is an error") {
    Eigen::VectorXi only_zero = Eigen::VectorXi::Zero(5);
    CHECK_THROWS_WITH_AS(responsibility_counts(emb, only_zero, bank, 1e-4),
                         doctest::Contains("class 1"), DataError);
  }
}

TEST_CASE("responsibility counts match a brute-force scan") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 20; ++trial) {
    const int classes = 2 + int(rng() % 3);
    const int per_class = 1 + int(rng() % 4);
    const int dim = 3;
    Matrix phi = random_matrix(classes * per_class, dim, rng, 2.0);
    PrototypeBank bank = make_bank(phi, classes, per_class);
    for (auto& a : bank.active) a = (rng() % 4 != 0) ? 1 : 0;
    for (int k = 0; k < classes; ++k) {
      if (bank.active_count(k) == 0) bank.active[std::size_t(bank.index(k, 0))] = 1;
    }

    const int n = classes * 15;
    Matrix emb = random_matrix(n, dim, rng, 2.0);
    Eigen::VectorXi labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % classes;

    ResponsibilityCount rc = responsibility_counts(emb, labels, bank, 1e-4);

    Eigen::MatrixXi expected = Eigen::MatrixXi::Zero(classes, per_class);
    for (int i = 0; i < n; ++i) {
      const int k = labels[i];
      int best_j = -1;
      double best = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < per_class; ++j) {
        if (!bank.is_active(k, j)) continue;
        const double d2 = (emb.row(i) - phi.row(bank.index(k, j))).squaredNorm();
        const double s = std::log((d2 + 1.0) / (d2 + 1e-4));
        if (s > best) {
          best = s;
          best_j = j;
        }
      }
      expected(k, best_j) += 1;
    }
    CHECK(rc.counts == expected);
  }
}

TEST_CASE("pruning removes exactly the unused prototypes") {
  Matrix phi(6, 2);
  phi << -2, 0, 2, 0, 9, 9, 0, -2, 0, 2, -9, -9;
  PrototypeBank bank = make_bank(phi, 2, 3);

  ResponsibilityCount rc;
  rc.counts = Eigen::MatrixXi::Zero(2, 3);
  rc.counts << 5, 3, 0, 4, 4, 0;

  PruneResult result = prune(rc, bank);
  CHECK(result.bank.is_active(0, 0));
  CHECK(result.bank.is_active(0, 1));
  CHECK_FALSE(result.bank.is_active(0, 2));
  CHECK_FALSE(result.bank.is_active(1, 2));
  CHECK(result.bank.active_count(0) == 2);
  CHECK(result.bank.active_count(1) == 2);
  // coordinates are untouched; only the mask changes
  CHECK((result.bank.phi - phi).cwiseAbs().maxCoeff() == 0.0);

  int pruned = 0;
  for (const auto& d : result.decisions) {
    if (d.pruned) {
      ++pruned;
      CHECK(d.count == 0);
    }
  }
  CHECK(pruned == 2);

  SUBCASE("already-inactive prototypes stay inactive and are not re-decided") {
    bank.active[2] = 0;
    PruneResult again = prune(rc, bank);
    CHECK_FALSE(again.bank.is_active(0, 2));
    CHECK(again.bank.active_count(0) == 2);
  }
}

TEST_CASE("last survivor guard") {
  Matrix phi(4, 2);
  phi << 1, 0, 2, 0, 3, 0, 4, 0;
  PrototypeBank bank = make_bank(phi, 2, 2);
  ResponsibilityCount rc;
  rc.counts = Eigen::MatrixXi::Zero(2, 2);  // nobody claims anything

  PruneResult result = prune(rc, bank);
  // the lowest-index active prototype of each class survives
  CHECK(result.bank.is_active(0, 0));
  CHECK_FALSE(result.bank.is_active(0, 1));
  CHECK(result.bank.is_active(1, 0));
  CHECK_FALSE(result.bank.is_active(1, 1));
  for (const auto& d : result.decisions) {
    if (d.kept_as_last_survivor) CHECK(d.prototype_index == 0);
  }

  SUBCASE("guard respects a pre-existing mask") {
    bank.active[0] = 0;  // class 0 prototype 0 already gone
    PruneResult again = prune(rc, bank);
    CHECK(again.bank.is_active(0, 1));  // now the lowest active index
    CHECK(again.bank.active_count(0) == 1);
  }
}

TEST_CASE("pruning is idempotent") {
  std::mt19937_64 rng(7);
  Matrix phi = random_matrix(9, 3, rng, 2.0);
  PrototypeBank bank = make_bank(phi, 3, 3);
  Matrix emb = random_matrix(60, 3, rng, 2.0);
  Eigen::VectorXi labels(60);
  for (int i = 0; i < 60; ++i) labels[i] = i % 3;

  ResponsibilityCount rc = responsibility_counts(emb, labels, bank, 1e-4);
  PruneResult once = prune(rc, bank);
  ResponsibilityCount rc2 = responsibility_counts(emb, labels, once.bank, 1e-4);
  PruneResult twice = prune(rc2, once.bank);
  CHECK(twice.bank.active == once.bank.active);
}

TEST_CASE("pruning zero-responsibility prototypes preserves assignments") {
  // every observation keeps its nearest same-class prototype after pruning,
  // because only prototypes nobody was assigned to are removed
  std::mt19937_64 rng(19);
  Matrix phi = random_matrix(8, 3, rng, 3.0);
  PrototypeBank bank = make_bank(phi, 2, 4);
  Matrix emb = random_matrix(30, 3, rng, 3.0);
  Eigen::VectorXi labels(30);
  for (int i = 0; i < 30; ++i) labels[i] = i % 2;

  ResponsibilityCount before = responsibility_counts(emb, labels, bank, 1e-4);
  PruneResult result = prune(before, bank);
  ResponsibilityCount after = responsibility_counts(emb, labels, result.bank, 1e-4);
  CHECK(before.counts == after.counts);
}

TEST_CASE("prune report csv") {
  Matrix phi(2, 2);
  phi << 0, 0, 5, 5;
  PrototypeBank bank = make_bank(phi, 1, 2);
  ResponsibilityCount rc;
  rc.counts = Eigen::MatrixXi::Zero(1, 2);
  rc.counts << 7, 0;
  PruneResult result = prune(rc, bank);

  const std::string path = "/tmp/panvae_prune_report_test.csv";
  write_prune_report(result, path);
  std::ifstream in(path);
  std::string header, line1, line2;
  std::getline(in, header);
  std::getline(in, line1);
  std::getline(in, line2);
  CHECK(header == "class,prototype_index,count,pruned");
  CHECK(line1 == "0,0,7,false");
  CHECK(line2 == "0,1,0,true");
  std::remove(path.c_str());
}
