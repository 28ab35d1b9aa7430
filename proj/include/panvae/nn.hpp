#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <vector>

namespace panvae::nn {

// Dense layers are batch-major (one sample per row). Conv layers are
// feature-major (one sample per contiguous column, features flattened
// channel-major (c, h, w)) so each sample is a unit-stride block.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ParamRef {
  double* value;
  double* grad;
  long size;
};

/// Fully connected layer, y = x W^T (+ b).
struct Dense {
  Matrix W;   // out x in
  Vector b;   // out (unused when has_bias is false)
  Matrix gW;
  Vector gb;
  bool has_bias = true;

  Dense() = default;
  Dense(int in_dim, int out_dim, bool bias = true);

  void init(std::mt19937_64& rng);
  void zero_grad();
  void collect(std::vector<ParamRef>& refs);

  Matrix forward(const Matrix& x) const;
  // Accumulates gW/gb from the cached input; returns dL/dx.
  Matrix backward(const Matrix& x, const Matrix& d_out);
};

/// Strided 2D convolution via im2col + GEMM.
struct Conv2d {
  int in_c, in_h, in_w;
  int out_c, kernel, stride, pad;
  int out_h, out_w;
  Matrix W;   // out_c x (in_c*kernel*kernel)
  Vector b;   // out_c
  Matrix gW;
  Vector gb;

  Conv2d(int in_c, int in_h, int in_w, int out_c, int kernel, int stride, int pad);

  void init(std::mt19937_64& rng);
  void zero_grad();
  void collect(std::vector<ParamRef>& refs);

  long in_dim() const { return long(in_c) * in_h * in_w; }
  long out_dim() const { return long(out_c) * out_h * out_w; }

  Matrix im2col(const Matrix& x) const;   // (in_c*k*k) x (B*out_h*out_w)
  Matrix col2im(const Matrix& col, int batch) const;

  Matrix forward(const Matrix& x, Matrix* col_cache = nullptr) const;
  Matrix backward(const Matrix& col, const Matrix& d_out);
};

/// Transposed convolution that exactly inverts the geometry of a Conv2d:
/// input has the conv's output shape, output has the conv's input shape.
struct ConvTranspose2d {
  Conv2d geom;  // weight shape and index mapping borrowed from the forward conv
  Vector b;     // one bias per output channel (geom.in_c)
  Vector gb;

  explicit ConvTranspose2d(const Conv2d& mirror);

  void init(std::mt19937_64& rng);
  void zero_grad();
  void collect(std::vector<ParamRef>& refs);

  long in_dim() const { return geom.out_dim(); }
  long out_dim() const { return geom.in_dim(); }

  Matrix forward(const Matrix& u) const;
  Matrix backward(const Matrix& u, const Matrix& d_out);
};

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& pre, const Matrix& d_out);
Matrix sigmoid(const Matrix& x);
Matrix sigmoid_backward(const Matrix& post, const Matrix& d_out);

/// Row-wise softmax.
Matrix softmax(const Matrix& logits);

/// Adaptive-moment gradient descent over a fixed set of parameter views.
class Adam {
 public:
  Adam(std::vector<ParamRef> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();

 private:
  std::vector<ParamRef> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace panvae::nn
