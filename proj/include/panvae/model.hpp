#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "panvae/errors.hpp"
#include "panvae/nn.hpp"

namespace panvae {

using nn::Matrix;
using nn::Vector;

struct ModelConfig {
  int num_classes = 2;         // K
  int prototypes_per_class = 1;  // M
  int latent_dim = 16;         // d
  int channels = 1;
  int height = 28;
  int width = 28;
  double epsilon = 1e-4;
  std::uint64_t seed = 0;
  int conv_blocks = 4;
  int base_channels = 8;

  int input_dim() const { return channels * height * width; }
  void validate() const;  // throws ConfigError
};

/// Per-image encoder output: one row per sample.
struct PosteriorParams {
  Matrix mu;      // B x d
  Matrix sigma;   // B x d, strictly positive
};

/// Learnable prototype coordinates in latent space, K*M rows of d entries;
/// row (k*M + j) holds prototype j of class k.
struct PrototypeBank {
  Matrix phi;
  std::vector<std::uint8_t> active;
  int num_classes = 0;
  int per_class = 0;

  PrototypeBank() = default;
  PrototypeBank(int num_classes, int per_class, int latent_dim);

  int latent_dim() const { return int(phi.cols()); }
  int index(int k, int j) const { return k * per_class + j; }
  bool is_active(int k, int j) const { return active[std::size_t(index(k, j))] != 0; }
  int active_count(int k) const;
  std::vector<int> active_rows(int k) const;
  void validate() const;
  void init(std::mt19937_64& rng);  // N(0, 1/sqrt(d)) entries
};

/// Eq.-1 similarity of each latent code to every prototype; inactive
/// prototypes contribute exact zeros. Output is B x (K*M).
Matrix similarity(const Matrix& z, const PrototypeBank& bank, double epsilon);

/// Accumulates dL/dz and dL/dphi given dL/ds from downstream.
void similarity_backward(const Matrix& z, const PrototypeBank& bank, double epsilon,
                         const Matrix& d_sim, Matrix& dz, Matrix& dphi);

struct EncoderActs {
  Matrix input;
  std::vector<Matrix> cols;
  std::vector<Matrix> pre;
  std::vector<Matrix> post;
  Matrix flat;
  Matrix mu, logvar;
};

struct Encoder {
  std::vector<nn::Conv2d> convs;
  nn::Dense mu_head, logvar_head;

  Encoder() = default;
  explicit Encoder(const ModelConfig& config);

  void init(std::mt19937_64& rng);
  void zero_grad();
  void collect(std::vector<nn::ParamRef>& refs);

  PosteriorParams forward(const Matrix& images, EncoderActs* acts = nullptr) const;
  void backward(const EncoderActs& acts, const Matrix& d_mu, const Matrix& d_logvar);
};

struct DecoderActs {
  Matrix z;
  Matrix fc_pre, fc_post;
  std::vector<Matrix> inputs;  // input to each transposed conv
  std::vector<Matrix> pre;
  Matrix output;               // after final sigmoid
};

struct Decoder {
  nn::Dense fc;
  std::vector<nn::ConvTranspose2d> deconvs;

  Decoder() = default;
  explicit Decoder(const ModelConfig& config);

  void init(std::mt19937_64& rng);
  void zero_grad();
  void collect(std::vector<nn::ParamRef>& refs);

  Matrix forward(const Matrix& z, DecoderActs* acts = nullptr) const;
  Matrix backward(const DecoderActs& acts, const Matrix& d_output);  // returns dL/dz
};

struct ForwardResult {
  Matrix prediction;       // B x K probabilities
  Matrix reconstruction;   // B x input_dim
  Matrix similarities;     // B x (K*M)
  PosteriorParams posterior;
  Matrix z;
};

/// The glass-box pipeline: encoder, prototype bank, bias-less linear head
/// over flattened similarities, mirrored decoder. Inference methods are
/// const and safe to call concurrently; training owns mutation.
class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }
  Encoder& encoder() { return encoder_; }
  const Encoder& encoder() const { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const Decoder& decoder() const { return decoder_; }
  nn::Dense& head() { return head_; }
  const nn::Dense& head() const { return head_; }

  PosteriorParams encode(const Matrix& images) const;
  static Matrix reparameterize(const PosteriorParams& p, const Matrix& noise);
  Matrix decode(const Matrix& z) const;
  Matrix classify(const Matrix& similarities) const;  // softmax probabilities
  ForwardResult forward(const Matrix& images, const Matrix& noise) const;

  /// Deterministic latent embedding (z = mu).
  Matrix embed(const Matrix& images) const;

  void collect(std::vector<nn::ParamRef>& refs);
  void zero_grad();

  void save(const std::string& path, const std::string& variant_note = "") const;
  static Model load(const std::string& path, std::string* variant_note = nullptr);

 private:
  ModelConfig config_;
  Encoder encoder_;
  Decoder decoder_;
  nn::Dense head_;
  PrototypeBank bank_;
  Matrix phi_grad_;

 public:
  Matrix& phi_grad() { return phi_grad_; }
};

}  // namespace panvae
