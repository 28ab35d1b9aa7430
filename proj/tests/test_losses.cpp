#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Dense>
#include <random>

#include "panvae/losses.hpp"
#include "support/test_util.hpp"

using namespace panvae;
using nn::Matrix;
using nn::Vector;
using panvae::testing::cofactor_determinant;
using panvae::testing::grad_check;
using panvae::testing::random_matrix;

namespace {

PrototypeBank random_bank(int k, int m, int d, std::mt19937_64& rng) {
  PrototypeBank bank(k, m, d);
  bank.phi = random_matrix(k * m, d, rng);
  return bank;
}

}  // namespace

TEST_CASE("prediction loss closed-form values") {
  Matrix labels(1, 10);
  labels.setZero();
  labels(0, 3) = 1.0;

  Matrix exact = labels;
  CHECK(prediction_loss(exact, labels) == doctest::Approx(0.0).epsilon(1e-9));

  Matrix uniform = Matrix::Constant(1, 10, 0.1);
  CHECK(prediction_loss(uniform, labels) == doctest::Approx(std::log(10.0)));
}

TEST_CASE("prediction loss is the batch mean") {
  Matrix labels(2, 2);
  labels << 1, 0, 0, 1;
  Matrix preds(2, 2);
  preds << 0.8, 0.2, 0.4, 0.6;
  const double a = -std::log(0.8);
  const double b = -std::log(0.6);
  CHECK(prediction_loss(preds, labels) == doctest::Approx((a + b) / 2.0));
}

TEST_CASE("prediction loss gradient matches finite differences") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + int(rng() % 2);
    const int b = 1 + int(rng() % 3);
    Matrix preds = random_matrix(b, k, rng).array().abs() + 0.05;
    for (int i = 0; i < b; ++i) preds.row(i) /= preds.row(i).sum();
    Matrix labels = Matrix::Zero(b, k);
    for (int i = 0; i < b; ++i) labels(i, int(rng() % std::uint64_t(k))) = 1.0;

    Matrix grad;
    prediction_loss(preds, labels, &grad);
    const double err = grad_check(
        [&] { return prediction_loss(preds, labels); }, preds.data(), preds.size(),
        grad.data());
    CHECK(err < 1e-4);
  }
}

TEST_CASE("closed-form KL special values") {
  Vector mu = Vector::Zero(3), sigma = Vector::Ones(3), center = Vector::Zero(3);
  CHECK(kl_diag_gaussian_to_unit(mu, sigma, center) == doctest::Approx(0.0));

  mu[0] = 1.0;  // unit displacement, unit variance
  CHECK(kl_diag_gaussian_to_unit(mu, sigma, center) == doctest::Approx(0.5));
}

TEST_CASE("closed-form KL matches a Monte Carlo estimate") {
  std::mt19937_64 rng(11);
  const int d = 4;
  Vector mu = random_matrix(d, 1, rng).col(0);
  Vector sigma = random_matrix(d, 1, rng).col(0).array().abs() + 0.3;
  Vector center = random_matrix(d, 1, rng).col(0);
  const double exact = kl_diag_gaussian_to_unit(mu, sigma, center);

  // log q(x) - log p(x) averaged over x ~ q
  std::normal_distribution<double> gauss(0.0, 1.0);
  const long n = 1000000;
  double sum = 0.0, sum2 = 0.0;
  for (long i = 0; i < n; ++i) {
    double term = 0.0;
    for (int j = 0; j < d; ++j) {
      const double eps = gauss(rng);
      const double x = mu[j] + sigma[j] * eps;
      const double log_q = -0.5 * eps * eps - std::log(sigma[j]);
      const double log_p = -0.5 * (x - center[j]) * (x - center[j]);
      term += log_q - log_p;
    }
    sum += term;
    sum2 += term * term;
  }
  const double mc = sum / double(n);
  const double stderr_mc = std::sqrt((sum2 / double(n) - mc * mc) / double(n));
  CHECK(std::abs(mc - exact) < 3.0 * stderr_mc);
}

TEST_CASE("closed-form KL gradients match finite differences") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + int(rng() % 7);
    Vector mu = random_matrix(d, 1, rng).col(0);
    Vector sigma = random_matrix(d, 1, rng).col(0).array().abs() + 0.3;
    Vector center = random_matrix(d, 1, rng).col(0);
    Vector d_mu, d_sigma, d_center;
    kl_diag_gaussian_to_unit(mu, sigma, center, &d_mu, &d_sigma, &d_center);

    auto loss = [&] { return kl_diag_gaussian_to_unit(mu, sigma, center); };
    CHECK(grad_check(loss, mu.data(), d, d_mu.data()) < 1e-4);
    CHECK(grad_check(loss, sigma.data(), d, d_sigma.data()) < 1e-4);
    CHECK(grad_check(loss, center.data(), d, d_center.data()) < 1e-4);
  }
}

TEST_CASE("vae loss reduces to plain KL when M = 1") {
  std::mt19937_64 rng(17);
  const int d = 4;
  PrototypeBank bank = random_bank(2, 1, d, rng);
  PosteriorParams post;
  post.mu = random_matrix(1, d, rng);
  post.sigma = random_matrix(1, d, rng).array().abs() + 0.3;
  Matrix images = random_matrix(1, 5, rng);
  Eigen::VectorXi labels(1);
  labels << 1;
  Matrix sims = similarity(post.mu, bank, 1e-4);

  const auto [recon, kl] = vae_loss(images, images, post, sims, labels, bank);
  CHECK(recon == doctest::Approx(0.0));
  const double plain = kl_diag_gaussian_to_unit(
      post.mu.row(0).transpose(), post.sigma.row(0).transpose(),
      bank.phi.row(bank.index(1, 0)).transpose());
  CHECK(kl == doctest::Approx(plain));
}

TEST_CASE("vae loss KL weights are uniform under equal similarities") {
  const int d = 4, m = 3;
  // class-0 prototypes equidistant from mu = 0: unit vectors along axes
  PrototypeBank bank2(2, m, d);
  bank2.phi.setZero();
  for (int j = 0; j < m; ++j) bank2.phi(j, j) = 1.0;
  bank2.phi.block(m, 0, m, d).setConstant(5.0);

  PosteriorParams post;
  post.mu = Matrix::Zero(1, d);
  post.sigma = Matrix::Ones(1, d);
  Eigen::VectorXi labels(1);
  labels << 0;
  Matrix sims = similarity(post.mu, bank2, 1e-4);
  const auto [recon, kl] = vae_loss(Matrix::Zero(1, 2), Matrix::Zero(1, 2), post, sims,
                                    labels, bank2);
  CHECK(recon == 0.0);
  double mean_kl = 0.0;
  for (int j = 0; j < m; ++j) {
    mean_kl += kl_diag_gaussian_to_unit(post.mu.row(0).transpose(),
                                        post.sigma.row(0).transpose(),
                                        bank2.phi.row(j).transpose()) / m;
  }
  CHECK(kl == doctest::Approx(mean_kl));
}

TEST_CASE("vae loss gradients match finite differences") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 2, m = 2 + int(rng() % 2), d = 3 + int(rng() % 4), b = 2;
    PrototypeBank bank = random_bank(k, m, d, rng);
    PosteriorParams post;
    post.mu = random_matrix(b, d, rng);
    post.sigma = random_matrix(b, d, rng).array().abs() + 0.3;
    Matrix images = random_matrix(b, 6, rng);
    Matrix recons = random_matrix(b, 6, rng);
    Eigen::VectorXi labels(b);
    for (int i = 0; i < b; ++i) labels[i] = int(rng() % std::uint64_t(k));
    Matrix sims = similarity(random_matrix(b, d, rng), bank, 1e-4);

    VaeLossGrads grads;
    vae_loss(images, recons, post, sims, labels, bank, &grads);
    auto total = [&] {
      const auto [r, kl] = vae_loss(images, recons, post, sims, labels, bank);
      return r + kl;
    };
    CHECK(grad_check(total, recons.data(), recons.size(),
                     Matrix(grads.d_recon).data()) < 1e-4);
    CHECK(grad_check(total, post.mu.data(), post.mu.size(), grads.d_mu.data()) < 1e-4);
    CHECK(grad_check(total, post.sigma.data(), post.sigma.size(),
                     grads.d_sigma.data()) < 1e-4);
    CHECK(grad_check(total, sims.data(), sims.size(), grads.d_sim.data()) < 1e-4);
    CHECK(grad_check(total, bank.phi.data(), bank.phi.size(), grads.d_phi.data()) < 1e-4);
  }
}

TEST_CASE("orthonormality loss hand values") {
  SUBCASE("two classes of opposite unit vectors give 2 per class") {
    PrototypeBank bank(2, 2, 4);
    bank.phi.setZero();
    bank.phi(0, 0) = 1.0;
    bank.phi(1, 0) = -1.0;
    bank.phi(2, 1) = 1.0;
    bank.phi(3, 1) = -1.0;
    CHECK(orthonormality_loss(bank) == doctest::Approx(4.0));
  }

  SUBCASE("M = 2 opposite unit vectors give loss 2") {
    PrototypeBank bank(1, 2, 2);
    bank.phi << 1, 0, -1, 0;
    CHECK(orthonormality_loss(bank) == doctest::Approx(2.0));
  }

  SUBCASE("collapsed prototypes give M per class") {
    PrototypeBank bank(1, 3, 4);
    bank.phi = Matrix::Constant(3, 4, 0.7);
    CHECK(orthonormality_loss(bank) == doctest::Approx(3.0));
  }
}

TEST_CASE("orthonormality loss gradient matches finite differences") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + int(rng() % 2), m = 2 + int(rng() % 3), d = 4 + int(rng() % 5);
    PrototypeBank bank = random_bank(k, m, d, rng);
    Matrix d_phi;
    orthonormality_loss(bank, &d_phi);
    const double err = grad_check([&] { return orthonormality_loss(bank); },
                                  bank.phi.data(), bank.phi.size(), d_phi.data());
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gramian hand values and brute-force determinant oracle") {
  SUBCASE("diagonal case") {
    PrototypeBank bank(1, 2, 2);
    bank.phi << 2, 0, 0, 3;
    Matrix g;
    double log_det = 0.0;
    gramian(bank, 0, 1e-12, &g, &log_det);
    CHECK(g(0, 0) == doctest::Approx(4.0));
    CHECK(g(1, 1) == doctest::Approx(9.0));
    CHECK(log_det == doctest::Approx(std::log(36.0)).epsilon(1e-8));
  }

  SUBCASE("random instances vs cofactor expansion") {
    std::mt19937_64 rng(29);
    for (int trial = 0; trial < 20; ++trial) {
      PrototypeBank bank = random_bank(1, 3, 8, rng);
      Matrix g;
      double log_det = 0.0;
      gramian(bank, 0, 0.0, &g, &log_det);
      Matrix plain = bank.phi * bank.phi.transpose();
      CHECK(std::abs(log_det - std::log(cofactor_determinant(plain))) < 1e-8);
    }
  }

  SUBCASE("orthonormal prototypes give identity gram") {
    PrototypeBank bank(1, 2, 4);
    bank.phi.setZero();
    bank.phi(0, 0) = 1.0;
    bank.phi(1, 1) = 1.0;
    Matrix g;
    double log_det = 1.0;
    gramian(bank, 0, 0.0, &g, &log_det);
    CHECK(g.isApprox(Matrix::Identity(2, 2)));
    CHECK(log_det == doctest::Approx(0.0));
  }
}

TEST_CASE("volumetric loss hand values") {
  SUBCASE("orthonormal prototypes in every class give 1") {
    PrototypeBank bank(2, 2, 4);
    bank.phi.setZero();
    bank.phi(0, 0) = 1.0;
    bank.phi(1, 1) = 1.0;
    bank.phi(2, 2) = 1.0;
    bank.phi(3, 3) = 1.0;
    const auto result = volumetric_loss(bank, 1e-12);
    CHECK(result.loss == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("single class with volume 6") {
    PrototypeBank bank(1, 2, 2);
    bank.phi << 2, 0, 0, 3;
    const auto result = volumetric_loss(bank, 1e-12);
    CHECK(result.loss == doctest::Approx(1.0 / 6.0).epsilon(1e-6));
    CHECK(result.per_class_volume[0] == doctest::Approx(6.0).epsilon(1e-6));
  }
}

TEST_CASE("volumetric loss gradient matches finite differences") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 1 + int(rng() % 3), m = 2 + int(rng() % 3), d = 4 + int(rng() % 5);
    PrototypeBank bank = random_bank(k, m, d, rng);
    Matrix d_phi;
    volumetric_loss(bank, 1e-8, &d_phi);
    const double err =
        grad_check([&] { return volumetric_loss(bank, 1e-8).loss; }, bank.phi.data(),
                   bank.phi.size(), d_phi.data());
    CHECK(err < 1e-4);
  }
}

TEST_CASE("volumetric loss on a nearly collapsed class stays finite and pushes apart") {
  PrototypeBank bank(1, 2, 4);
  bank.phi.row(0) << 1, 0, 0, 0;
  bank.phi.row(1) << 1 + 1e-7, 0, 0, 0;
  Matrix d_phi;
  const auto result = volumetric_loss(bank, 1e-8, &d_phi);
  CHECK(std::isfinite(result.loss));
  CHECK(result.loss > 100.0);
  // finite-difference direction: moving prototype 1 orthogonally must
  // decrease the loss
  PrototypeBank moved = bank;
  moved.phi(1, 1) += 1e-4;
  CHECK(volumetric_loss(moved, 1e-8).loss < result.loss);
  CHECK(d_phi.allFinite());
}

TEST_CASE("volumetric loss invariances") {
  std::mt19937_64 rng(37);
  PrototypeBank bank = random_bank(2, 3, 6, rng);
  const double base = volumetric_loss(bank, 1e-10).loss;

  SUBCASE("permutation of prototypes within a class") {
    PrototypeBank permuted = bank;
    permuted.phi.row(0).swap(permuted.phi.row(2));
    CHECK(volumetric_loss(permuted, 1e-10).loss == doctest::Approx(base).epsilon(1e-9));
  }

  SUBCASE("joint rotation of a class by an orthogonal matrix") {
    Matrix a = random_matrix(6, 6, rng);
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix q = qr.householderQ();
    PrototypeBank rotated = bank;
    rotated.phi.topRows(3) = bank.phi.topRows(3) * q;
    CHECK(volumetric_loss(rotated, 1e-10).loss == doctest::Approx(base).epsilon(1e-7));
  }

  SUBCASE("scaling one prototype away from the span lowers the loss") {
    PrototypeBank scaled = bank;
    scaled.phi.row(0) *= 2.0;
    CHECK(volumetric_loss(scaled, 1e-10).loss < base);
  }
}

TEST_CASE("inactive prototypes are excluded from the diversity losses") {
  std::mt19937_64 rng(41);
  PrototypeBank bank = random_bank(2, 3, 6, rng);
  // collapse prototype (0,2) onto (0,0); deactivating it must restore a
  // healthy volume
  bank.phi.row(2) = bank.phi.row(0);
  const double collapsed = volumetric_loss(bank, 1e-8).loss;
  bank.active[2] = 0;
  const double pruned = volumetric_loss(bank, 1e-8).loss;
  CHECK(pruned < collapsed);

  Matrix g;
  double log_det = 0.0;
  gramian(bank, 0, 1e-12, &g, &log_det);
  CHECK(g.rows() == 2);  // active count, not M
}

TEST_CASE("total loss composition") {
  Vector volumes = Vector::Ones(2);
  LossWeights w;

  SUBCASE("all weights one") {
    const auto breakdown = total_loss(Variant::panvae, 1, 2, 3, 4, volumes, w);
    CHECK(breakdown.total == doctest::Approx(10.0));
  }

  SUBCASE("w_div zero makes variants agree") {
    w.w_div = 0.0;
    const auto pan = total_loss(Variant::panvae, 1, 2, 3, 100, volumes, w);
    const auto proto = total_loss(Variant::protovae, 1, 2, 3, 7, volumes, w);
    CHECK(pan.total == doctest::Approx(proto.total));
  }

  SUBCASE("div scale 100") {
    w.w_div = 100.0;
    const auto breakdown = total_loss(Variant::panvae, 0, 0, 0, 0.5, volumes, w);
    CHECK(breakdown.total == doctest::Approx(50.0));
  }

  SUBCASE("non-finite component raises a divergence error naming it") {
    CHECK_THROWS_WITH_AS(
        total_loss(Variant::panvae, std::nan(""), 0, 0, 0, volumes, w),
        doctest::Contains("pred"), TrainingDivergence);
  }

  SUBCASE("weighted sum identity holds") {
    w.w_pred = 0.5;
    w.w_vae_recon = 2.0;
    w.w_vae_kl = 0.25;
    w.w_div = 3.0;
    const auto breakdown = total_loss(Variant::protovae, 1, 2, 3, 4, volumes, w);
    const double expect = 0.5 * 1 + 2.0 * 2 + 0.25 * 3 + 3.0 * 4;
    CHECK(std::abs(breakdown.total - expect) < 1e-9);
  }
}

TEST_CASE("loss weights validation") {
  LossWeights w;
  w.w_div = -1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
  w.w_div = 0.0;
  w.jitter = 1.0;
  CHECK_THROWS_AS(w.validate(), ConfigError);
}
