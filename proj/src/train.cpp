#include "panvae/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "nlohmann/json.hpp"

namespace panvae {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  weights.validate();
}

namespace {

std::vector<nn::ParamRef> collect_params(Model& model) {
  std::vector<nn::ParamRef> refs;
  model.collect(refs);
  return refs;
}

}  // namespace

Trainer::Trainer(Model& model, const TrainConfig& config)
    : model_(model), config_(config),
      optimizer_(collect_params(model), config.learning_rate),
      rng_(config.seed) {
  config_.validate();
}

LossBreakdown Trainer::step(const Matrix& images, const Eigen::VectorXi& labels,
                            const Matrix& noise) {
  const long batch = images.rows();
  const int num_classes = model_.config().num_classes;
  const LossWeights& w = config_.weights;

  model_.zero_grad();

  // Forward.
  EncoderActs enc_acts;
  PosteriorParams posterior = model_.encoder().forward(images, &enc_acts);
  Matrix z = Model::reparameterize(posterior, noise);
  DecoderActs dec_acts;
  Matrix recon = model_.decoder().forward(z, &dec_acts);
  Matrix sims = similarity(z, model_.bank(), model_.config().epsilon);
  Matrix logits = model_.head().forward(sims);
  Matrix probs = nn::softmax(logits);

  Matrix onehot = Matrix::Zero(batch, num_classes);
  for (long i = 0; i < batch; ++i) onehot(i, labels[i]) = 1.0;

  LossBreakdown breakdown;
  VaeLossGrads vae_grads;
  Matrix div_dphi;
  try {
    const double pred = prediction_loss(probs, onehot);
    const auto [recon_loss, kl_loss] =
        vae_loss(images, recon, posterior, sims, labels, model_.bank(), &vae_grads);

    double diversity = 0.0;
    Vector volumes;
    if (config_.variant == Variant::panvae) {
      VolumetricResult vol = volumetric_loss(model_.bank(), w.jitter, &div_dphi);
      diversity = vol.loss;
      volumes = vol.per_class_volume;
    } else {
      diversity = orthonormality_loss(model_.bank(), &div_dphi);
      VolumetricResult vol = volumetric_loss(model_.bank(), w.jitter);
      volumes = vol.per_class_volume;  // reported for both variants
    }

    breakdown = total_loss(config_.variant, pred, recon_loss, kl_loss, diversity,
                           volumes, w);
  } catch (const TrainingDivergence& e) {
    throw TrainingDivergence(std::string(e.what()) + " at step " +
                             std::to_string(step_count_));
  } catch (const NumericalError& e) {
    // a numerical failure mid-optimization means the run has diverged
    throw TrainingDivergence(std::string(e.what()) + " at step " +
                             std::to_string(step_count_));
  }

  // Backward. Softmax + cross-entropy fuse to (p - y)/B on the logits.
  Matrix d_logits = (w.w_pred / double(batch)) * (probs - onehot);
  Matrix d_sims = model_.head().backward(sims, d_logits);
  d_sims += w.w_vae_kl * vae_grads.d_sim;
  // Inactive prototype entries carry no gradient.
  for (long r = 0; r < model_.bank().phi.rows(); ++r) {
    if (!model_.bank().active[std::size_t(r)]) d_sims.col(r).setZero();
  }

  Matrix dz = Matrix::Zero(batch, model_.config().latent_dim);
  similarity_backward(z, model_.bank(), model_.config().epsilon, d_sims, dz,
                      model_.phi_grad());

  Matrix d_recon = w.w_vae_recon * vae_grads.d_recon;
  dz += model_.decoder().backward(dec_acts, d_recon);

  Matrix d_mu = dz + w.w_vae_kl * vae_grads.d_mu;
  Matrix d_sigma = (dz.array() * noise.array()).matrix() + w.w_vae_kl * vae_grads.d_sigma;
  Matrix d_logvar = 0.5 * (d_sigma.array() * posterior.sigma.array()).matrix();
  model_.encoder().backward(enc_acts, d_mu, d_logvar);

  model_.phi_grad() += w.w_vae_kl * vae_grads.d_phi + w.w_div * div_dphi;

  optimizer_.step();
  ++step_count_;
  return breakdown;
}

RunRecord train(Model& model, const TrainConfig& config, const Dataset& train_data,
                const Dataset* eval_data, const std::string& step_log_path) {
  config.validate();
  train_data.validate(model.config().num_classes);

  Trainer trainer(model, config);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::ofstream step_log;
  if (!step_log_path.empty()) {
    step_log.open(step_log_path);
    if (!step_log) throw DataError("cannot write " + step_log_path);
    step_log << "step,pred,recon,kl,diversity,total";
    for (int k = 0; k < model.config().num_classes; ++k) step_log << ",volume_class_" << k;
    step_log << '\n';
  }

  RunRecord record;
  const int n = train_data.size();
  // transposed copy so each batch gathers contiguous columns instead of
  // strided rows
  const Matrix images_t = train_data.images.transpose();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  long global_step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown epoch_sum;
    epoch_sum.per_class_volume = Vector::Zero(model.config().num_classes);
    int steps = 0;

    for (int start = 0; start < n; start += config.batch_size) {
      const int b = std::min(config.batch_size, n - start);
      Matrix batch_t(train_data.sample_dim(), b);
      Eigen::VectorXi labels(b);
      for (int i = 0; i < b; ++i) {
        batch_t.col(i) = images_t.col(order[std::size_t(start + i)]);
        labels[i] = train_data.labels[order[std::size_t(start + i)]];
      }
      const Matrix images = batch_t.transpose();
      Matrix noise(b, model.config().latent_dim);
      for (long i = 0; i < noise.size(); ++i) noise.data()[i] = gauss(trainer.rng());

      const LossBreakdown loss = trainer.step(images, labels, noise);
      record.step_totals.push_back(loss.total);
      epoch_sum.pred += loss.pred;
      epoch_sum.recon += loss.recon;
      epoch_sum.kl += loss.kl;
      epoch_sum.diversity += loss.diversity;
      epoch_sum.total += loss.total;
      epoch_sum.per_class_volume += loss.per_class_volume;
      ++steps;

      if (step_log) {
        step_log << global_step << ',' << loss.pred << ',' << loss.recon << ','
                 << loss.kl << ',' << loss.diversity << ',' << loss.total;
        for (long k = 0; k < loss.per_class_volume.size(); ++k) {
          step_log << ',' << loss.per_class_volume[k];
        }
        step_log << '\n';
      }
      ++global_step;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.mean_loss.pred = epoch_sum.pred / steps;
    er.mean_loss.recon = epoch_sum.recon / steps;
    er.mean_loss.kl = epoch_sum.kl / steps;
    er.mean_loss.diversity = epoch_sum.diversity / steps;
    er.mean_loss.total = epoch_sum.total / steps;
    er.per_class_volume = epoch_sum.per_class_volume / double(steps);
    er.mean_loss.per_class_volume = er.per_class_volume;

    if (eval_data && (epoch % config.eval_every == 0 || epoch == config.epochs - 1)) {
      try {
        const auto [accuracy, report] = evaluate(model, *eval_data, config.weights.jitter);
        er.test_accuracy = accuracy;
        er.db_score = report.db_score;
      } catch (const NumericalError&) {
        // degenerate cluster structure (common early in training): record
        // accuracy only and leave the DB score unset for this epoch
        const Eigen::VectorXi predicted = predict(model, *eval_data);
        double correct = 0.0;
        for (long i = 0; i < predicted.size(); ++i) {
          if (predicted[i] == eval_data->labels[i]) correct += 1.0;
        }
        er.test_accuracy = correct / double(eval_data->size());
      }
    }
    er.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.epochs.push_back(std::move(er));
  }
  return record;
}

Matrix embed_batched(const Model& model, const Matrix& images, int chunk) {
  Matrix out(images.rows(), model.config().latent_dim);
  for (long start = 0; start < images.rows(); start += chunk) {
    const long b = std::min<long>(chunk, images.rows() - start);
    out.middleRows(start, b) = model.embed(images.middleRows(start, b));
  }
  return out;
}

Eigen::VectorXi predict(const Model& model, const Dataset& data) {
  const Matrix embeddings = embed_batched(model, data.images);
  const Matrix sims = similarity(embeddings, model.bank(), model.config().epsilon);
  const Matrix probs = model.classify(sims);
  Eigen::VectorXi out(probs.rows());
  for (long i = 0; i < probs.rows(); ++i) {
    long best = 0;
    probs.row(i).maxCoeff(&best);
    out[i] = int(best);
  }
  return out;
}

std::pair<double, MetricsReport> evaluate(const Model& model, const Dataset& data,
                                          double jitter) {
  const Matrix embeddings = embed_batched(model, data.images);
  const Matrix sims = similarity(embeddings, model.bank(), model.config().epsilon);
  const Matrix probs = model.classify(sims);

  Eigen::VectorXi predicted(probs.rows());
  double correct = 0.0;
  for (long i = 0; i < probs.rows(); ++i) {
    long best = 0;
    probs.row(i).maxCoeff(&best);
    predicted[i] = int(best);
    if (predicted[i] == data.labels[i]) correct += 1.0;
  }

  MetricsReport report;
  report.accuracy = correct / double(data.size());
  const ClusterAssignment clusters =
      assign_clusters(embeddings, model.bank(), model.config().epsilon);
  report.db_score = db_index(embeddings, model.bank(), clusters);

  const VolumetricResult vol = volumetric_loss(model.bank(), jitter);
  report.per_class_volume = vol.per_class_volume;
  for (int k = 0; k < model.bank().num_classes; ++k) {
    report.active_per_class.push_back(model.bank().active_count(k));
  }

  if (data.group_labels) {
    const DiversityDistribution dist = prototype_group_distribution(
        embeddings, *data.group_labels, model.bank(), model.config().epsilon);
    report.group_distribution = dist.probabilities;
    report.entropy_diversity = combinatorial_diversity(dist);
  }
  return {report.accuracy, report};
}

void write_run_record_csv(const RunRecord& record, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "epoch,pred,recon,kl,diversity,total,test_accuracy,db_score,seconds";
  if (!record.epochs.empty()) {
    for (long k = 0; k < record.epochs.front().per_class_volume.size(); ++k) {
      out << ",volume_class_" << k;
    }
  }
  out << '\n';
  for (const auto& e : record.epochs) {
    out << e.epoch << ',' << e.mean_loss.pred << ',' << e.mean_loss.recon << ','
        << e.mean_loss.kl << ',' << e.mean_loss.diversity << ',' << e.mean_loss.total
        << ',' << (e.test_accuracy ? std::to_string(*e.test_accuracy) : "")
        << ',' << (e.db_score ? std::to_string(*e.db_score) : "") << ',' << e.seconds;
    for (long k = 0; k < e.per_class_volume.size(); ++k) out << ',' << e.per_class_volume[k];
    out << '\n';
  }
}

void write_metrics_report_csv(const MetricsReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "metric,value\n";
  out << "accuracy," << report.accuracy << '\n';
  out << "db_score," << report.db_score << '\n';
  for (long k = 0; k < report.per_class_volume.size(); ++k) {
    out << "volume_class_" << k << ',' << report.per_class_volume[k] << '\n';
  }
  for (std::size_t k = 0; k < report.active_per_class.size(); ++k) {
    out << "active_class_" << k << ',' << report.active_per_class[k] << '\n';
  }
  if (report.entropy_diversity) {
    out << "entropy_diversity," << *report.entropy_diversity << '\n';
  }
}

void write_metrics_report_json(const MetricsReport& report, const std::string& path) {
  nlohmann::json j;
  j["accuracy"] = report.accuracy;
  j["db_score"] = report.db_score;
  j["per_class_volume"] = std::vector<double>(
      report.per_class_volume.data(),
      report.per_class_volume.data() + report.per_class_volume.size());
  j["active_per_class"] = report.active_per_class;
  if (report.entropy_diversity) j["entropy_diversity"] = *report.entropy_diversity;
  if (report.group_distribution) {
    j["group_distribution"] = std::vector<double>(
        report.group_distribution->data(),
        report.group_distribution->data() + report.group_distribution->size());
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << '\n';
}

void write_config_echo(const ModelConfig& model_config, const TrainConfig& config,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "[model]\n";
  out << "num_classes=" << model_config.num_classes << '\n';
  out << "prototypes_per_class=" << model_config.prototypes_per_class << '\n';
  out << "latent_dim=" << model_config.latent_dim << '\n';
  out << "channels=" << model_config.channels << '\n';
  out << "height=" << model_config.height << '\n';
  out << "width=" << model_config.width << '\n';
  out << "epsilon=" << model_config.epsilon << '\n';
  out << "conv_blocks=" << model_config.conv_blocks << '\n';
  out << "base_channels=" << model_config.base_channels << '\n';
  out << "\n[train]\n";
  out << "variant=" << variant_name(config.variant) << '\n';
  out << "epochs=" << config.epochs << '\n';
  out << "batch_size=" << config.batch_size << '\n';
  out << "learning_rate=" << config.learning_rate << '\n';
  out << "seed=" << config.seed << '\n';
  out << "eval_every=" << config.eval_every << '\n';
  out << "w_pred=" << config.weights.w_pred << '\n';
  out << "w_vae_recon=" << config.weights.w_vae_recon << '\n';
  out << "w_vae_kl=" << config.weights.w_vae_kl << '\n';
  out << "div_scale=" << config.weights.w_div << '\n';
  out << "jitter=" << config.weights.jitter << '\n';
}

}  // namespace panvae
