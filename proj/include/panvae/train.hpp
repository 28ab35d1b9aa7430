#pragma once

#include <optional>
#include <string>
#include <vector>

#include "panvae/data.hpp"
#include "panvae/losses.hpp"
#include "panvae/metrics.hpp"
#include "panvae/model.hpp"

namespace panvae {

struct TrainConfig {
  Variant variant = Variant::panvae;
  int epochs = 10;
  int batch_size = 128;
  double learning_rate = 1e-3;
  LossWeights weights;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;
  int eval_every = 1;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown mean_loss;
  std::optional<double> test_accuracy;
  std::optional<double> db_score;
  Vector per_class_volume;
  double seconds = 0.0;
};

struct RunRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_totals;
};

/// Runs the optimization loop on the selected variant. When `eval_data`
/// is given, accuracy and DB are recorded every `eval_every` epochs.
/// `step_log_path`, when nonempty, receives the per-step loss CSV
/// (step,pred,recon,kl,diversity,total,volume_class_0..K-1).
RunRecord train(Model& model, const TrainConfig& config, const Dataset& train_data,
                const Dataset* eval_data = nullptr,
                const std::string& step_log_path = "");

/// Single training step on one batch; exposed for tests. Returns the
/// loss breakdown before the parameter update.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& config);
  LossBreakdown step(const Matrix& images, const Eigen::VectorXi& labels,
                     const Matrix& noise);
  std::mt19937_64& rng() { return rng_; }

 private:
  Model& model_;
  TrainConfig config_;
  nn::Adam optimizer_;
  std::mt19937_64 rng_;
  long step_count_ = 0;
};

/// Deterministic (z = mu) evaluation.
std::pair<double, MetricsReport> evaluate(const Model& model, const Dataset& data,
                                          double jitter = 1e-8);

/// Encoder embedding in bounded-memory chunks.
Matrix embed_batched(const Model& model, const Matrix& images, int chunk = 512);

/// Class predictions (argmax over deterministic forward).
Eigen::VectorXi predict(const Model& model, const Dataset& data);

void write_run_record_csv(const RunRecord& record, const std::string& path);
void write_metrics_report_csv(const MetricsReport& report, const std::string& path);
void write_metrics_report_json(const MetricsReport& report, const std::string& path);

/// Echoes the effective configuration as the flat key-value format the
/// CLI reads back (provenance record in checkpoint_dir).
void write_config_echo(const ModelConfig& model_config, const TrainConfig& config,
                       const std::string& path);

}  // namespace panvae
