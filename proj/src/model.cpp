#include "panvae/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "nlohmann/json.hpp"

namespace panvae {

void ModelConfig::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (prototypes_per_class < 1) throw ConfigError("prototypes_per_class must be >= 1");
  if (latent_dim < prototypes_per_class) {
    throw ConfigError("latent_dim must be >= prototypes_per_class so class prototypes can span a parallelotope");
  }
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("invalid input shape");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must lie in (0, 1)");
  if (conv_blocks < 1) throw ConfigError("conv_blocks must be >= 1");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  int h = height, w = width;
  for (int i = 0; i < conv_blocks; ++i) {
    h = (h + 2 - 3) / 2 + 1;
    w = (w + 2 - 3) / 2 + 1;
    if (h < 1 || w < 1) throw ConfigError("input too small for conv_blocks stride-2 stages");
  }
}

PrototypeBank::PrototypeBank(int num_classes_, int per_class_, int latent_dim_)
    : num_classes(num_classes_), per_class(per_class_) {
  phi = Matrix::Zero(long(num_classes) * per_class, latent_dim_);
  active.assign(std::size_t(num_classes) * per_class, 1);
}

int PrototypeBank::active_count(int k) const {
  int n = 0;
  for (int j = 0; j < per_class; ++j) n += is_active(k, j) ? 1 : 0;
  return n;
}

std::vector<int> PrototypeBank::active_rows(int k) const {
  std::vector<int> rows;
  for (int j = 0; j < per_class; ++j) {
    if (is_active(k, j)) rows.push_back(index(k, j));
  }
  return rows;
}

void PrototypeBank::validate() const {
  if (!phi.allFinite()) throw NumericalError("prototype bank contains non-finite entries");
  for (int k = 0; k < num_classes; ++k) {
    if (active_count(k) == 0) {
      throw ConfigError("class " + std::to_string(k) + " has no active prototype");
    }
  }
}

void PrototypeBank::init(std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  // expected norm ~3, matching the scale latent codes settle at under the
  // reconstruction/KL balance; prototypes initialized much smaller spend most
  // of training chasing the expanding latent cloud
  const double scale = 3.0 / std::sqrt(double(phi.cols()));
  for (long i = 0; i < phi.size(); ++i) phi.data()[i] = scale * gauss(rng);
}

Matrix similarity(const Matrix& z, const PrototypeBank& bank, double epsilon) {
  const long batch = z.rows();
  Matrix s = Matrix::Zero(batch, bank.phi.rows());
  for (long i = 0; i < batch; ++i) {
    for (long r = 0; r < bank.phi.rows(); ++r) {
      if (!bank.active[std::size_t(r)]) continue;
      const double d2 = (z.row(i) - bank.phi.row(r)).squaredNorm();
      s(i, r) = std::log((d2 + 1.0) / (d2 + epsilon));
    }
  }
  return s;
}

void similarity_backward(const Matrix& z, const PrototypeBank& bank, double epsilon,
                         const Matrix& d_sim, Matrix& dz, Matrix& dphi) {
  const long batch = z.rows();
  for (long i = 0; i < batch; ++i) {
    for (long r = 0; r < bank.phi.rows(); ++r) {
      if (!bank.active[std::size_t(r)]) continue;
      const double g = d_sim(i, r);
      if (g == 0.0) continue;
      Eigen::RowVectorXd diff = z.row(i) - bank.phi.row(r);
      const double d2 = diff.squaredNorm();
      // ds/d(d2) for s = log(d2+1) - log(d2+eps)
      const double ds = 1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon);
      dz.row(i) += (2.0 * g * ds) * diff;
      dphi.row(r) -= (2.0 * g * ds) * diff;
    }
  }
}

Encoder::Encoder(const ModelConfig& config) {
  int c = config.channels, h = config.height, w = config.width;
  int ch = config.base_channels;
  for (int i = 0; i < config.conv_blocks; ++i) {
    convs.emplace_back(c, h, w, ch, 3, 2, 1);
    c = ch;
    h = convs.back().out_h;
    w = convs.back().out_w;
    ch *= 2;
  }
  const int flat = c * h * w;
  mu_head = nn::Dense(flat, config.latent_dim);
  logvar_head = nn::Dense(flat, config.latent_dim);
}

void Encoder::init(std::mt19937_64& rng) {
  for (auto& conv : convs) conv.init(rng);
  mu_head.init(rng);
  logvar_head.init(rng);
}

void Encoder::zero_grad() {
  for (auto& conv : convs) conv.zero_grad();
  mu_head.zero_grad();
  logvar_head.zero_grad();
}

void Encoder::collect(std::vector<nn::ParamRef>& refs) {
  for (auto& conv : convs) conv.collect(refs);
  mu_head.collect(refs);
  logvar_head.collect(refs);
}

PosteriorParams Encoder::forward(const Matrix& images, EncoderActs* acts) const {
  EncoderActs local;
  EncoderActs& a = acts ? *acts : local;
  a.cols.resize(convs.size());
  a.pre.resize(convs.size());
  a.post.resize(convs.size());
  Matrix x = images.transpose();  // conv stack runs feature-major
  if (acts) a.input = images;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    a.pre[i] = convs[i].forward(x, acts ? &a.cols[i] : nullptr);
    a.post[i] = nn::relu(a.pre[i]);
    x = a.post[i];
  }
  Matrix flat = x.transpose();  // back to batch-major for the dense heads
  if (acts) a.flat = flat;
  PosteriorParams p;
  p.mu = mu_head.forward(flat);
  Matrix logvar = logvar_head.forward(flat);
  if (acts) {
    a.mu = p.mu;
    a.logvar = logvar;
  }
  p.sigma = (0.5 * logvar.array()).exp();
  return p;
}

void Encoder::backward(const EncoderActs& acts, const Matrix& d_mu,
                       const Matrix& d_logvar) {
  Matrix dflat =
      mu_head.backward(acts.flat, d_mu) + logvar_head.backward(acts.flat, d_logvar);
  Matrix dx = dflat.transpose();  // feature-major through the conv stack
  for (long i = long(convs.size()) - 1; i >= 0; --i) {
    dx = nn::relu_backward(acts.pre[std::size_t(i)], dx);
    dx = convs[std::size_t(i)].backward(acts.cols[std::size_t(i)], dx);
  }
}

Decoder::Decoder(const ModelConfig& config) {
  Encoder mirror(config);
  const auto& top = mirror.convs.back();
  const int flat = top.out_c * top.out_h * top.out_w;
  fc = nn::Dense(config.latent_dim, flat);
  for (auto it = mirror.convs.rbegin(); it != mirror.convs.rend(); ++it) {
    deconvs.emplace_back(*it);
  }
}

void Decoder::init(std::mt19937_64& rng) {
  fc.init(rng);
  for (auto& d : deconvs) d.init(rng);
}

void Decoder::zero_grad() {
  fc.zero_grad();
  for (auto& d : deconvs) d.zero_grad();
}

void Decoder::collect(std::vector<nn::ParamRef>& refs) {
  fc.collect(refs);
  for (auto& d : deconvs) d.collect(refs);
}

Matrix Decoder::forward(const Matrix& z, DecoderActs* acts) const {
  DecoderActs local;
  DecoderActs& a = acts ? *acts : local;
  if (acts) a.z = z;
  a.fc_pre = fc.forward(z);
  a.fc_post = nn::relu(a.fc_pre);
  a.inputs.resize(deconvs.size());
  a.pre.resize(deconvs.size());
  Matrix x = a.fc_post.transpose();  // deconv stack runs feature-major
  for (std::size_t i = 0; i < deconvs.size(); ++i) {
    a.inputs[i] = x;
    a.pre[i] = deconvs[i].forward(x);
    if (i + 1 < deconvs.size()) {
      x = nn::relu(a.pre[i]);
    } else {
      x = nn::sigmoid(a.pre[i]);
    }
  }
  a.output = x.transpose();  // batch-major reconstruction
  return a.output;
}

Matrix Decoder::backward(const DecoderActs& acts, const Matrix& d_output) {
  Matrix dx = nn::sigmoid_backward(acts.output, d_output).transpose();
  for (long i = long(deconvs.size()) - 1; i >= 0; --i) {
    const auto idx = std::size_t(i);
    dx = deconvs[idx].backward(acts.inputs[idx], dx);
    if (i > 0) {
      dx = nn::relu_backward(acts.pre[std::size_t(i - 1)], dx);
    }
  }
  Matrix dfc = nn::relu_backward(acts.fc_pre, dx.transpose());
  return fc.backward(acts.z, dfc);
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  encoder_ = Encoder(config_);
  decoder_ = Decoder(config_);
  head_ = nn::Dense(config_.num_classes * config_.prototypes_per_class,
                    config_.num_classes, /*bias=*/false);
  bank_ = PrototypeBank(config_.num_classes, config_.prototypes_per_class,
                        config_.latent_dim);
  std::mt19937_64 rng(config_.seed);
  encoder_.init(rng);
  decoder_.init(rng);
  head_.init(rng);
  bank_.init(rng);
  phi_grad_ = Matrix::Zero(bank_.phi.rows(), bank_.phi.cols());
}

PosteriorParams Model::encode(const Matrix& images) const {
  if (images.cols() != config_.input_dim()) {
    throw ConfigError("image dimension " + std::to_string(images.cols()) +
                      " does not match configured input shape (" +
                      std::to_string(config_.input_dim()) + ")");
  }
  return encoder_.forward(images);
}

Matrix Model::reparameterize(const PosteriorParams& p, const Matrix& noise) {
  return p.mu.array() + p.sigma.array() * noise.array();
}

Matrix Model::decode(const Matrix& z) const { return decoder_.forward(z); }

Matrix Model::classify(const Matrix& similarities) const {
  return nn::softmax(head_.forward(similarities));
}

Matrix Model::embed(const Matrix& images) const { return encode(images).mu; }

ForwardResult Model::forward(const Matrix& images, const Matrix& noise) const {
  ForwardResult r;
  r.posterior = encode(images);
  r.z = reparameterize(r.posterior, noise);
  r.reconstruction = decode(r.z);
  r.similarities = similarity(r.z, bank_, config_.epsilon);
  r.prediction = classify(r.similarities);
  return r;
}

void Model::collect(std::vector<nn::ParamRef>& refs) {
  encoder_.collect(refs);
  decoder_.collect(refs);
  head_.collect(refs);
  refs.push_back({bank_.phi.data(), phi_grad_.data(), bank_.phi.size()});
}

void Model::zero_grad() {
  encoder_.zero_grad();
  decoder_.zero_grad();
  head_.zero_grad();
  phi_grad_.setZero();
}

namespace {

constexpr char kCkptMagic[] = "PANVAECKPT";
constexpr char kFormatTag[] = "panvae-ckpt-v1";

std::uint64_t fnv1a(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

struct NamedArray {
  std::string name;
  const Matrix* mat = nullptr;
  const Vector* vec = nullptr;
};

void enumerate_arrays(const Model& model, Model* mutable_model,
                      std::vector<NamedArray>& out) {
  // const walk; loading reuses the same naming through mutable access
  (void)mutable_model;
  const Encoder& enc = model.encoder();
  for (std::size_t i = 0; i < enc.convs.size(); ++i) {
    out.push_back({"encoder.conv" + std::to_string(i) + ".W", &enc.convs[i].W, nullptr});
    out.push_back({"encoder.conv" + std::to_string(i) + ".b", nullptr, &enc.convs[i].b});
  }
  out.push_back({"encoder.mu.W", &enc.mu_head.W, nullptr});
  out.push_back({"encoder.mu.b", nullptr, &enc.mu_head.b});
  out.push_back({"encoder.logvar.W", &enc.logvar_head.W, nullptr});
  out.push_back({"encoder.logvar.b", nullptr, &enc.logvar_head.b});
  const Decoder& dec = model.decoder();
  out.push_back({"decoder.fc.W", &dec.fc.W, nullptr});
  out.push_back({"decoder.fc.b", nullptr, &dec.fc.b});
  for (std::size_t i = 0; i < dec.deconvs.size(); ++i) {
    out.push_back({"decoder.deconv" + std::to_string(i) + ".W", &dec.deconvs[i].geom.W, nullptr});
    out.push_back({"decoder.deconv" + std::to_string(i) + ".b", nullptr, &dec.deconvs[i].b});
  }
  out.push_back({"head.W", &model.head().W, nullptr});
  out.push_back({"prototypes.phi", &model.bank().phi, nullptr});
}

}  // namespace

void Model::save(const std::string& path, const std::string& variant_note) const {
  std::vector<NamedArray> arrays;
  enumerate_arrays(*this, nullptr, arrays);

  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& a : arrays) {
    const double* data = a.mat ? a.mat->data() : a.vec->data();
    const long rows = a.mat ? a.mat->rows() : a.vec->size();
    const long cols = a.mat ? a.mat->cols() : 1;
    index.push_back({{"name", a.name}, {"rows", rows}, {"cols", cols},
                     {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(data), sizeof(double) * rows * cols);
  }

  nlohmann::json header;
  header["format"] = kFormatTag;
  header["config"] = {{"num_classes", config_.num_classes},
                      {"prototypes_per_class", config_.prototypes_per_class},
                      {"latent_dim", config_.latent_dim},
                      {"channels", config_.channels},
                      {"height", config_.height},
                      {"width", config_.width},
                      {"epsilon", config_.epsilon},
                      {"seed", config_.seed},
                      {"conv_blocks", config_.conv_blocks},
                      {"base_channels", config_.base_channels}};
  header["active_mask"] = bank_.active;
  header["variant_note"] = variant_note;
  header["arrays"] = index;
  header["checksum"] = fnv1a(reinterpret_cast<const unsigned char*>(payload.data()),
                             payload.size());
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic) - 1);
  const std::uint64_t hsize = header_str.size();
  out.write(reinterpret_cast<const char*>(&hsize), 8);
  out.write(header_str.data(), std::streamsize(header_str.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
}

Model Model::load(const std::string& path, std::string* variant_note) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  char magic[sizeof(kCkptMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path + ": not a panvae checkpoint");
  }
  std::uint64_t hsize = 0;
  in.read(reinterpret_cast<char*>(&hsize), 8);
  std::string header_str(hsize, '\0');
  in.read(header_str.data(), std::streamsize(hsize));
  if (!in) throw CheckpointError(path + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": bad header: " + std::string(e.what()));
  }
  if (header.value("format", "") != kFormatTag) {
    throw CheckpointError(path + ": incompatible format tag '" +
                          header.value("format", "") + "' (expected " + kFormatTag + ")");
  }

  ModelConfig config;
  const auto& c = header.at("config");
  config.num_classes = c.at("num_classes").get<int>();
  config.prototypes_per_class = c.at("prototypes_per_class").get<int>();
  config.latent_dim = c.at("latent_dim").get<int>();
  config.channels = c.at("channels").get<int>();
  config.height = c.at("height").get<int>();
  config.width = c.at("width").get<int>();
  config.epsilon = c.at("epsilon").get<double>();
  config.seed = c.at("seed").get<std::uint64_t>();
  config.conv_blocks = c.at("conv_blocks").get<int>();
  config.base_channels = c.at("base_channels").get<int>();

  Model model(config);
  model.bank_.active = header.at("active_mask").get<std::vector<std::uint8_t>>();
  if (variant_note) *variant_note = header.value("variant_note", "");

  std::string payload((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  const std::uint64_t expected = header.at("checksum").get<std::uint64_t>();
  const std::uint64_t actual =
      fnv1a(reinterpret_cast<const unsigned char*>(payload.data()), payload.size());
  if (expected != actual) {
    throw CheckpointError(path + ": checksum mismatch (corrupted payload)");
  }

  std::vector<NamedArray> arrays;
  enumerate_arrays(model, &model, arrays);
  for (const auto& entry : header.at("arrays")) {
    const std::string name = entry.at("name").get<std::string>();
    const long rows = entry.at("rows").get<long>();
    const long cols = entry.at("cols").get<long>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    bool found = false;
    for (const auto& a : arrays) {
      if (a.name != name) continue;
      double* dst = a.mat ? const_cast<double*>(a.mat->data())
                          : const_cast<double*>(a.vec->data());
      const long expected_rows = a.mat ? a.mat->rows() : a.vec->size();
      const long expected_cols = a.mat ? a.mat->cols() : 1;
      if (rows != expected_rows || cols != expected_cols) {
        throw CheckpointError(path + ": array " + name + " has incompatible shape");
      }
      const std::size_t bytes = sizeof(double) * std::size_t(rows) * std::size_t(cols);
      if (offset + bytes > payload.size()) {
        throw CheckpointError(path + ": array " + name + " exceeds payload");
      }
      std::memcpy(dst, payload.data() + offset, bytes);
      found = true;
      break;
    }
    if (!found) throw CheckpointError(path + ": unknown array " + name);
  }
  model.bank_.validate();
  return model;
}

}  // namespace panvae
