#include "panvae/nn.hpp"

#include <cmath>

namespace panvae::nn {

Dense::Dense(int in_dim, int out_dim, bool bias) : has_bias(bias) {
  W = Matrix::Zero(out_dim, in_dim);
  b = Vector::Zero(out_dim);
  gW = Matrix::Zero(out_dim, in_dim);
  gb = Vector::Zero(out_dim);
}

void Dense::init(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double scale = std::sqrt(2.0 / double(W.cols()));
  for (long i = 0; i < W.size(); ++i) W.data()[i] = scale * gauss(rng);
  b.setZero();
}

void Dense::zero_grad() {
  gW.setZero();
  gb.setZero();
}

void Dense::collect(std::vector<ParamRef>& refs) {
  refs.push_back({W.data(), gW.data(), W.size()});
  if (has_bias) refs.push_back({b.data(), gb.data(), b.size()});
}

Matrix Dense::forward(const Matrix& x) const {
  Matrix y = x * W.transpose();
  if (has_bias) y.rowwise() += b.transpose();
  return y;
}

Matrix Dense::backward(const Matrix& x, const Matrix& d_out) {
  gW.noalias() += d_out.transpose() * x;
  if (has_bias) gb += d_out.colwise().sum().transpose();
  return d_out * W;
}

Conv2d::Conv2d(int in_c_, int in_h_, int in_w_, int out_c_, int kernel_, int stride_,
               int pad_)
    : in_c(in_c_), in_h(in_h_), in_w(in_w_), out_c(out_c_), kernel(kernel_),
      stride(stride_), pad(pad_) {
  out_h = (in_h + 2 * pad - kernel) / stride + 1;
  out_w = (in_w + 2 * pad - kernel) / stride + 1;
  W = Matrix::Zero(out_c, in_c * kernel * kernel);
  b = Vector::Zero(out_c);
  gW = Matrix::Zero(out_c, in_c * kernel * kernel);
  gb = Vector::Zero(out_c);
}

void Conv2d::init(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double scale = std::sqrt(2.0 / double(in_c * kernel * kernel));
  for (long i = 0; i < W.size(); ++i) W.data()[i] = scale * gauss(rng);
  b.setZero();
}

void Conv2d::zero_grad() {
  gW.setZero();
  gb.setZero();
}

void Conv2d::collect(std::vector<ParamRef>& refs) {
  refs.push_back({W.data(), gW.data(), W.size()});
  refs.push_back({b.data(), gb.data(), b.size()});
}

Matrix Conv2d::im2col(const Matrix& x) const {
  const int batch = int(x.cols());
  Matrix col = Matrix::Zero(long(in_c) * kernel * kernel, long(batch) * out_h * out_w);
  for (int n = 0; n < batch; ++n) {
    const double* xp = x.data() + long(n) * x.rows();  // contiguous sample
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const long c_idx = (long(n) * out_h + oy) * out_w + ox;
        double* cp = col.data() + c_idx * col.rows();
        for (int ic = 0; ic < in_c; ++ic) {
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= in_h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= in_w) continue;
              const long r_idx = (long(ic) * kernel + ky) * kernel + kx;
              const long feat = (long(ic) * in_h + iy) * in_w + ix;
              cp[r_idx] = xp[feat];
            }
          }
        }
      }
    }
  }
  return col;
}

Matrix Conv2d::col2im(const Matrix& col, int batch) const {
  Matrix x = Matrix::Zero(in_dim(), batch);
  for (int n = 0; n < batch; ++n) {
    double* xp = x.data() + long(n) * x.rows();  // contiguous sample
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const long c_idx = (long(n) * out_h + oy) * out_w + ox;
        const double* cp = col.data() + c_idx * col.rows();
        for (int ic = 0; ic < in_c; ++ic) {
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= in_h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= in_w) continue;
              const long r_idx = (long(ic) * kernel + ky) * kernel + kx;
              const long feat = (long(ic) * in_h + iy) * in_w + ix;
              xp[feat] += cp[r_idx];
            }
          }
        }
      }
    }
  }
  return x;
}

namespace {

// om (C x B*P, sample-blocked columns) -> feature-major (C*P x B).
Matrix channel_major_to_features(const Matrix& om, int batch, long channels, long p) {
  Matrix y(channels * p, batch);
  for (int n = 0; n < batch; ++n) {
    Eigen::Map<Matrix> dst(y.data() + long(n) * channels * p, p, channels);
    dst = om.middleCols(long(n) * p, p).transpose();
  }
  return y;
}

// feature-major (C*P x B) -> channel-major (C x B*P).
Matrix features_to_channel_major(const Matrix& y, int batch, long channels, long p) {
  Matrix om(channels, long(batch) * p);
  for (int n = 0; n < batch; ++n) {
    Eigen::Map<const Matrix> src(y.data() + long(n) * channels * p, p, channels);
    om.middleCols(long(n) * p, p) = src.transpose();
  }
  return om;
}

}  // namespace

Matrix Conv2d::forward(const Matrix& x, Matrix* col_cache) const {
  const int batch = int(x.cols());
  Matrix col = im2col(x);
  Matrix om = W * col;  // out_c x (B*out_h*out_w)
  om.colwise() += b;
  Matrix y = channel_major_to_features(om, batch, out_c, long(out_h) * out_w);
  if (col_cache) *col_cache = std::move(col);
  return y;
}

Matrix Conv2d::backward(const Matrix& col, const Matrix& d_out) {
  const int batch = int(d_out.cols());
  Matrix dom = features_to_channel_major(d_out, batch, out_c, long(out_h) * out_w);
  gW.noalias() += dom * col.transpose();
  gb += dom.rowwise().sum();
  Matrix dcol = W.transpose() * dom;
  return col2im(dcol, batch);
}

ConvTranspose2d::ConvTranspose2d(const Conv2d& mirror) : geom(mirror) {
  b = Vector::Zero(geom.in_c);
  gb = Vector::Zero(geom.in_c);
}

void ConvTranspose2d::init(std::mt19937_64& rng) {
  geom.init(rng);
  b.setZero();
}

void ConvTranspose2d::zero_grad() {
  geom.zero_grad();
  gb.setZero();
}

void ConvTranspose2d::collect(std::vector<ParamRef>& refs) {
  refs.push_back({geom.W.data(), geom.gW.data(), geom.W.size()});
  refs.push_back({b.data(), gb.data(), b.size()});
}

Matrix ConvTranspose2d::forward(const Matrix& u) const {
  const int batch = int(u.cols());
  Matrix um = features_to_channel_major(u, batch, geom.out_c,
                                        long(geom.out_h) * geom.out_w);
  Matrix col = geom.W.transpose() * um;
  Matrix x = geom.col2im(col, batch);
  // One bias per output channel.
  const long hw = long(geom.in_h) * geom.in_w;
  for (int ic = 0; ic < geom.in_c; ++ic) {
    x.middleRows(ic * hw, hw).array() += b[ic];
  }
  return x;
}

Matrix ConvTranspose2d::backward(const Matrix& u, const Matrix& d_out) {
  const int batch = int(u.cols());
  Matrix dcol = geom.im2col(d_out);
  Matrix um = features_to_channel_major(u, batch, geom.out_c,
                                        long(geom.out_h) * geom.out_w);
  geom.gW.noalias() += um * dcol.transpose();
  const long hw = long(geom.in_h) * geom.in_w;
  for (int ic = 0; ic < geom.in_c; ++ic) {
    gb[ic] += d_out.middleRows(ic * hw, hw).sum();
  }
  Matrix dum = geom.W * dcol;
  return channel_major_to_features(dum, batch, geom.out_c,
                                   long(geom.out_h) * geom.out_w);
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& pre, const Matrix& d_out) {
  return (pre.array() > 0.0).select(d_out, Matrix::Zero(d_out.rows(), d_out.cols()));
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Matrix sigmoid_backward(const Matrix& post, const Matrix& d_out) {
  return d_out.array() * post.array() * (1.0 - post.array());
}

Matrix softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (long i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

Adam::Adam(std::vector<ParamRef> params, double lr, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p.size));
    v_.push_back(Eigen::ArrayXd::Zero(p.size));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Eigen::Map<Eigen::ArrayXd> value(params_[i].value, params_[i].size);
    Eigen::Map<const Eigen::ArrayXd> grad(params_[i].grad, params_[i].size);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad.square();
    value -= lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    Eigen::Map<Eigen::ArrayXd>(p.grad, p.size).setZero();
  }
}

}  // namespace panvae::nn
