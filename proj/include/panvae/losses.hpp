#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>

#include "panvae/model.hpp"

namespace panvae {

enum class Variant { protovae, panvae };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct LossWeights {
  double w_pred = 1.0;
  double w_vae_recon = 1.0;
  double w_vae_kl = 1.0;
  double w_div = 1.0;   // the diversity "scale factor"
  double jitter = 1e-8;

  void validate() const;
};

struct LossBreakdown {
  double pred = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double diversity = 0.0;
  double total = 0.0;
  Vector per_class_volume;  // |G_k|^{1/2} per class
};

/// Mean cross-entropy between predicted distributions and one-hot labels,
/// rows are samples. Probabilities are clamped at 1e-12 before the log.
double prediction_loss(const Matrix& predictions, const Matrix& labels,
                       Matrix* grad_predictions = nullptr);

/// Closed-form KL(N(mu, diag(sigma^2)) || N(center, I)).
double kl_diag_gaussian_to_unit(const Vector& mu, const Vector& sigma,
                                const Vector& center, Vector* d_mu = nullptr,
                                Vector* d_sigma = nullptr, Vector* d_center = nullptr);

struct VaeLossGrads {
  Matrix d_recon;  // wrt reconstructions
  Matrix d_mu, d_sigma;
  Matrix d_sim;    // wrt similarity entries (through the mixture weights)
  Matrix d_phi;
};

/// Reconstruction MSE plus the similarity-weighted KL to the true-class
/// prototypes. Weights normalize over the active prototypes of the label
/// class. Returns (recon, kl).
std::pair<double, double> vae_loss(const Matrix& images, const Matrix& reconstructions,
                                   const PosteriorParams& posterior,
                                   const Matrix& similarities,
                                   const Eigen::VectorXi& labels,
                                   const PrototypeBank& bank,
                                   VaeLossGrads* grads = nullptr);

/// Sum over classes of ||Phi_k^T Phi_k - I||_F^2 on mean-subtracted
/// active prototypes.
double orthonormality_loss(const PrototypeBank& bank, Matrix* d_phi = nullptr);

/// Jittered Gram matrix of the active prototypes of class k and its log
/// determinant via Cholesky. Escalates jitter x10 up to 3 retries, then
/// throws NumericalError naming the class.
void gramian(const PrototypeBank& bank, int k, double jitter, Matrix* gram,
             double* log_det);

struct VolumetricResult {
  double loss = 0.0;
  Vector per_class_volume;
};

/// Eq.-7 style loss: mean over classes of |G_k|^{-1/2}, evaluated in the
/// log domain.
VolumetricResult volumetric_loss(const PrototypeBank& bank, double jitter,
                                 Matrix* d_phi = nullptr);

/// Weighted composition; throws TrainingDivergence naming the first
/// non-finite component.
LossBreakdown total_loss(Variant variant, double pred, double recon, double kl,
                         double diversity, const Vector& per_class_volume,
                         const LossWeights& weights);

}  // namespace panvae
