#include "panvae/losses.hpp"

#include <Eigen/Cholesky>
#include <cmath>

namespace panvae {

Variant parse_variant(const std::string& name) {
  if (name == "protovae") return Variant::protovae;
  if (name == "panvae") return Variant::panvae;
  throw ConfigError("unknown variant '" + name + "' (expected panvae or protovae)");
}

std::string variant_name(Variant v) {
  return v == Variant::panvae ? "panvae" : "protovae";
}

void LossWeights::validate() const {
  if (w_pred < 0 || w_vae_recon < 0 || w_vae_kl < 0 || w_div < 0) {
    throw ConfigError("loss weights must be nonnegative");
  }
  if (jitter < 1e-12 || jitter > 1e-3) {
    throw ConfigError("jitter must lie in [1e-12, 1e-3]");
  }
}

double prediction_loss(const Matrix& predictions, const Matrix& labels,
                       Matrix* grad_predictions) {
  const long batch = predictions.rows();
  if (grad_predictions) {
    *grad_predictions = Matrix::Zero(predictions.rows(), predictions.cols());
  }
  double loss = 0.0;
  constexpr double kClamp = 1e-12;
  for (long i = 0; i < batch; ++i) {
    for (long k = 0; k < predictions.cols(); ++k) {
      if (labels(i, k) == 0.0) continue;
      const double p = std::max(predictions(i, k), kClamp);
      loss -= labels(i, k) * std::log(p);
      if (grad_predictions && predictions(i, k) > kClamp) {
        (*grad_predictions)(i, k) -= labels(i, k) / (p * double(batch));
      }
    }
  }
  return loss / double(batch);
}

double kl_diag_gaussian_to_unit(const Vector& mu, const Vector& sigma,
                                const Vector& center, Vector* d_mu, Vector* d_sigma,
                                Vector* d_center) {
  const Eigen::ArrayXd s2 = sigma.array().square();
  const Eigen::ArrayXd diff = (mu - center).array();
  const double kl = 0.5 * (s2 + diff.square() - 1.0 - s2.log()).sum();
  if (d_mu) *d_mu = diff.matrix();
  if (d_center) *d_center = (-diff).matrix();
  if (d_sigma) *d_sigma = (sigma.array() - sigma.array().inverse()).matrix();
  return kl;
}

std::pair<double, double> vae_loss(const Matrix& images, const Matrix& reconstructions,
                                   const PosteriorParams& posterior,
                                   const Matrix& similarities,
                                   const Eigen::VectorXi& labels,
                                   const PrototypeBank& bank, VaeLossGrads* grads) {
  const long batch = images.rows();
  const double inv_b = 1.0 / double(batch);

  Matrix diff = reconstructions - images;
  const double recon = diff.array().square().rowwise().sum().mean();
  if (grads) {
    grads->d_recon = 2.0 * inv_b * diff;
    grads->d_mu = Matrix::Zero(posterior.mu.rows(), posterior.mu.cols());
    grads->d_sigma = Matrix::Zero(posterior.sigma.rows(), posterior.sigma.cols());
    grads->d_sim = Matrix::Zero(similarities.rows(), similarities.cols());
    grads->d_phi = Matrix::Zero(bank.phi.rows(), bank.phi.cols());
  }

  double kl_total = 0.0;
  for (long i = 0; i < batch; ++i) {
    const int k = labels[i];
    const auto rows = bank.active_rows(k);
    double sum_s = 0.0;
    for (int r : rows) sum_s += similarities(i, r);
    if (sum_s <= 0.0) {
      throw NumericalError("degenerate similarity normalization for sample " +
                           std::to_string(i));
    }

    std::vector<double> kls(rows.size());
    double weighted = 0.0;
    for (std::size_t a = 0; a < rows.size(); ++a) {
      const int r = rows[a];
      const Eigen::ArrayXd s2 = posterior.sigma.row(i).array().square();
      const Eigen::ArrayXd d = (posterior.mu.row(i) - bank.phi.row(r)).array();
      kls[a] = 0.5 * (s2 + d.square() - 1.0 - s2.log()).sum();
      weighted += similarities(i, r) / sum_s * kls[a];
    }
    kl_total += weighted;

    if (grads) {
      for (std::size_t a = 0; a < rows.size(); ++a) {
        const int r = rows[a];
        const double w = similarities(i, r) / sum_s;
        const Eigen::RowVectorXd d = posterior.mu.row(i) - bank.phi.row(r);
        grads->d_mu.row(i) += inv_b * w * d;
        grads->d_phi.row(r) -= inv_b * w * d;
        grads->d_sigma.row(i) +=
            inv_b * w *
            (posterior.sigma.row(i).array() - posterior.sigma.row(i).array().inverse())
                .matrix();
        grads->d_sim(i, r) = inv_b * (kls[a] - weighted) / sum_s;
      }
    }
  }
  return {recon, kl_total * inv_b};
}

double orthonormality_loss(const PrototypeBank& bank, Matrix* d_phi) {
  if (d_phi) *d_phi = Matrix::Zero(bank.phi.rows(), bank.phi.cols());
  double loss = 0.0;
  for (int k = 0; k < bank.num_classes; ++k) {
    const auto rows = bank.active_rows(k);
    const int m = int(rows.size());
    Matrix p(m, bank.latent_dim());
    for (int a = 0; a < m; ++a) p.row(a) = bank.phi.row(rows[std::size_t(a)]);
    const Eigen::RowVectorXd mean = p.colwise().mean();
    Matrix centered = p.rowwise() - mean;
    Matrix err = centered * centered.transpose() - Matrix::Identity(m, m);
    loss += err.squaredNorm();
    if (d_phi) {
      Matrix g = 4.0 * err * centered;  // wrt centered rows
      // chain through row centering: g -> (I - 11^T/m) g
      Eigen::RowVectorXd gmean = g.colwise().mean();
      g.rowwise() -= gmean;
      for (int a = 0; a < m; ++a) d_phi->row(rows[std::size_t(a)]) += g.row(a);
    }
  }
  return loss;
}

void gramian(const PrototypeBank& bank, int k, double jitter, Matrix* gram,
             double* log_det) {
  const auto rows = bank.active_rows(k);
  const int m = int(rows.size());
  Matrix p(m, bank.latent_dim());
  for (int a = 0; a < m; ++a) p.row(a) = bank.phi.row(rows[std::size_t(a)]);

  double j = jitter;
  for (int attempt = 0; attempt < 4; ++attempt) {
    Matrix g = p * p.transpose() + j * Matrix::Identity(m, m);
    Eigen::LLT<Matrix> llt(g);
    if (llt.info() == Eigen::Success) {
      double ld = 0.0;
      for (int a = 0; a < m; ++a) ld += std::log(llt.matrixL()(a, a));
      if (std::isfinite(ld)) {
        if (gram) *gram = g;
        if (log_det) *log_det = 2.0 * ld;
        return;
      }
    }
    j = (j == 0.0) ? 1e-12 : j * 10.0;
  }
  throw NumericalError("Gram factorization failed for class " + std::to_string(k) +
                       " after jitter escalation");
}

VolumetricResult volumetric_loss(const PrototypeBank& bank, double jitter,
                                 Matrix* d_phi) {
  VolumetricResult result;
  result.per_class_volume = Vector::Zero(bank.num_classes);
  if (d_phi) *d_phi = Matrix::Zero(bank.phi.rows(), bank.phi.cols());
  const double inv_k = 1.0 / double(bank.num_classes);

  for (int k = 0; k < bank.num_classes; ++k) {
    Matrix gram;
    double log_det = 0.0;
    gramian(bank, k, jitter, &gram, &log_det);
    const double inv_sqrt = std::exp(-0.5 * log_det);
    result.loss += inv_k * inv_sqrt;
    result.per_class_volume[k] = std::exp(0.5 * log_det);

    if (d_phi) {
      const auto rows = bank.active_rows(k);
      const int m = int(rows.size());
      Matrix p(m, bank.latent_dim());
      for (int a = 0; a < m; ++a) p.row(a) = bank.phi.row(rows[std::size_t(a)]);
      // d logdet / dP = 2 G^{-1} P
      Matrix ginv_p = gram.ldlt().solve(p);
      Matrix g = -inv_k * inv_sqrt * ginv_p;
      for (int a = 0; a < m; ++a) d_phi->row(rows[std::size_t(a)]) += g.row(a);
    }
  }
  return result;
}

LossBreakdown total_loss(Variant variant, double pred, double recon, double kl,
                         double diversity, const Vector& per_class_volume,
                         const LossWeights& weights) {
  weights.validate();
  const std::pair<const char*, double> components[] = {
      {"pred", pred}, {"recon", recon}, {"kl", kl}, {"diversity", diversity}};
  for (const auto& [name, value] : components) {
    if (!std::isfinite(value)) {
      throw TrainingDivergence(std::string("non-finite loss component '") + name + "'");
    }
  }
  LossBreakdown out;
  out.pred = pred;
  out.recon = recon;
  out.kl = kl;
  out.diversity = diversity;
  out.per_class_volume = per_class_volume;
  out.total = weights.w_pred * pred + weights.w_vae_recon * recon +
              weights.w_vae_kl * kl + weights.w_div * diversity;
  (void)variant;  // both variants compose identically; they differ in which
                  // diversity term feeds `diversity`
  return out;
}

}  // namespace panvae
