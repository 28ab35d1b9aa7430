#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "panvae/data.hpp"
#include "panvae/metrics.hpp"
#include "panvae/model.hpp"
#include "panvae/pruning.hpp"
#include "panvae/train.hpp"

namespace fs = std::filesystem;
using namespace panvae;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitCheckpoint = 5;
constexpr int kExitGeometry = 6;

// "images_path,labels_path" selects the IDX pair loader; anything else is
// an array archive.
Dataset load_data(const std::string& path, const std::string& groups_csv) {
  Dataset data;
  const auto comma = path.find(',');
  if (comma != std::string::npos) {
    data = load_idx(path.substr(0, comma), path.substr(comma + 1));
  } else {
    data = load_archive(path);
  }
  if (!groups_csv.empty()) attach_group_labels_csv(data, groups_csv);
  return data;
}

// Flat sectioned key=value config, the exact format write_config_echo
// emits. Returns section-qualified keys ("model.latent_dim").
std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string section, line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    if (line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ": line " + std::to_string(line_no) +
                        ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    kv[section.empty() ? key : section + "." + key] = line.substr(eq + 1);
  }
  return kv;
}

template <typename T>
void apply(const std::map<std::string, std::string>& kv, const std::string& key,
           T& target) {
  const auto it = kv.find(key);
  if (it == kv.end()) return;
  std::istringstream in(it->second);
  T value;
  if constexpr (std::is_same_v<T, std::string>) {
    value = it->second;
  } else {
    in >> value;
    if (in.fail()) throw ConfigError("config key " + key + ": cannot parse '" +
                                     it->second + "'");
  }
  target = value;
}

void write_pnm(const std::string& path, const Matrix& pixels, int channels,
               int height, int width) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  const bool color = channels == 3;
  out << (color ? "P6" : "P5") << "\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> bytes(std::size_t(height * width * (color ? 3 : 1)));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < (color ? 3 : 1); ++c) {
        const double v = pixels(0, (c * height + y) * width + x);
        bytes[std::size_t((y * width + x) * (color ? 3 : 1) + c)] =
            static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

// Fig.-1 style pruning marker: both diagonals drawn with inverted pixels,
// visible on any background.
void overlay_cross(Matrix& pixels, int channels, int height, int width) {
  for (int t = 0; t < std::min(height, width); ++t) {
    for (int c = 0; c < channels; ++c) {
      const int y = t * (height - 1) / std::max(1, std::min(height, width) - 1);
      const int x = t * (width - 1) / std::max(1, std::min(height, width) - 1);
      double& a = pixels(0, (c * height + y) * width + x);
      a = 1.0 - a;
      double& b = pixels(0, (c * height + y) * width + (width - 1 - x));
      b = 1.0 - b;
    }
  }
}

int cmd_train(const std::string& config_path, const std::string& variant_flag,
              double div_scale, bool div_scale_set, const std::string& data_path,
              const std::string& eval_path, const std::string& groups_csv,
              const std::string& out_dir, std::uint64_t seed, bool seed_set) {
  std::map<std::string, std::string> kv;
  if (!config_path.empty()) kv = read_config_file(config_path);

  ModelConfig mc;
  mc.height = 0;  // inferred from data unless configured
  mc.width = 0;
  apply(kv, "model.num_classes", mc.num_classes);
  apply(kv, "model.prototypes_per_class", mc.prototypes_per_class);
  apply(kv, "model.latent_dim", mc.latent_dim);
  apply(kv, "model.channels", mc.channels);
  apply(kv, "model.height", mc.height);
  apply(kv, "model.width", mc.width);
  apply(kv, "model.epsilon", mc.epsilon);
  apply(kv, "model.conv_blocks", mc.conv_blocks);
  apply(kv, "model.base_channels", mc.base_channels);

  TrainConfig tc;
  std::string variant_name_cfg = "panvae";
  apply(kv, "train.variant", variant_name_cfg);
  apply(kv, "train.epochs", tc.epochs);
  apply(kv, "train.batch_size", tc.batch_size);
  apply(kv, "train.learning_rate", tc.learning_rate);
  apply(kv, "train.seed", tc.seed);
  apply(kv, "train.eval_every", tc.eval_every);
  apply(kv, "train.w_pred", tc.weights.w_pred);
  apply(kv, "train.w_vae_recon", tc.weights.w_vae_recon);
  apply(kv, "train.w_vae_kl", tc.weights.w_vae_kl);
  apply(kv, "train.div_scale", tc.weights.w_div);
  apply(kv, "train.jitter", tc.weights.jitter);

  // explicit flags override the config file
  if (!variant_flag.empty()) variant_name_cfg = variant_flag;
  tc.variant = parse_variant(variant_name_cfg);
  if (div_scale_set) tc.weights.w_div = div_scale;
  if (seed_set) tc.seed = seed;

  if (data_path.empty()) throw DataError("missing --data: no training set given");
  Dataset train_set = load_data(data_path, groups_csv);
  if (mc.height == 0) mc.height = train_set.height;
  if (mc.width == 0) mc.width = train_set.width;
  if (mc.channels != train_set.channels || mc.height != train_set.height ||
      mc.width != train_set.width) {
    throw ConfigError("configured input shape does not match the dataset");
  }
  mc.seed = tc.seed;
  mc.validate();
  tc.validate();
  train_set.validate(mc.num_classes);

  std::optional<Dataset> eval_set;
  if (!eval_path.empty()) {
    eval_set = load_data(eval_path, "");
    eval_set->validate(mc.num_classes);
  }

  fs::create_directories(out_dir);
  tc.checkpoint_dir = out_dir;
  write_config_echo(mc, tc, (fs::path(out_dir) / "config.ini").string());

  Model model(mc);
  RunRecord record = train(model, tc, train_set, eval_set ? &*eval_set : nullptr,
                           (fs::path(out_dir) / "steps.csv").string());
  for (const auto& e : record.epochs) {
    std::cout << "epoch=" << e.epoch << " total=" << e.mean_loss.total
              << " pred=" << e.mean_loss.pred;
    if (e.test_accuracy) std::cout << " accuracy=" << *e.test_accuracy;
    if (e.db_score) std::cout << " db=" << *e.db_score;
    std::cout << "\n";
  }
  write_run_record_csv(record, (fs::path(out_dir) / "run_record.csv").string());
  model.save((fs::path(out_dir) / "model.ckpt").string(), variant_name_cfg);
  std::cout << "checkpoint=" << (fs::path(out_dir) / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::string& groups_csv, const std::string& report_path) {
  Model model = Model::load(ckpt);
  Dataset data = load_data(data_path, groups_csv);
  data.validate(model.config().num_classes);
  auto [accuracy, report] = evaluate(model, data);

  if (report_path.size() > 5 && report_path.substr(report_path.size() - 5) == ".json") {
    write_metrics_report_json(report, report_path);
  } else {
    write_metrics_report_csv(report, report_path);
  }
  std::cout << "accuracy=" << accuracy << " db=" << report.db_score << "\n";
  if (report.entropy_diversity) {
    std::cout << "entropy_diversity=" << *report.entropy_diversity << "\n";
    // pairwise accuracy gaps across demographic groups
    const Eigen::VectorXi pred = predict(model, data);
    const Eigen::VectorXi& groups = *data.group_labels;
    const int g_max = groups.maxCoeff();
    for (int a = 0; a <= g_max; ++a) {
      for (int b = a + 1; b <= g_max; ++b) {
        std::cout << "accuracy_gap_" << a << "_" << b << "="
                  << accuracy_gap(pred, data.labels, groups, a, b) << "\n";
      }
    }
  }
  return 0;
}

int cmd_prune(const std::string& ckpt, const std::string& data_path,
              const std::string& out_path) {
  if (fs::weakly_canonical(out_path) == fs::weakly_canonical(ckpt)) {
    throw ConfigError("--out must differ from --ckpt (refusing to clobber in place)");
  }
  std::string note;
  Model model = Model::load(ckpt, &note);
  Dataset data = load_data(data_path, "");
  data.validate(model.config().num_classes);

  ResponsibilityCount counts = responsibility_counts(model, data);
  PruneResult result = prune(counts, model.bank());
  model.bank() = result.bank;
  model.save(out_path, note);
  write_prune_report(result, out_path + ".prune.csv");

  int pruned = 0;
  for (const auto& d : result.decisions)
    if (d.pruned) ++pruned;
  std::cout << "pruned=" << pruned << " checkpoint=" << out_path << "\n";
  return 0;
}

int cmd_report(const std::string& ckpt, const std::string& data_path, int class_index,
               int n_nearest, const std::string& proj, const std::string& proj_file,
               const std::string& out_dir) {
  if (proj != "pca" && proj != "external") {
    throw ConfigError("--proj must be pca or external");
  }
  if (proj == "external" && proj_file.empty()) {
    throw ConfigError("--proj external requires --proj-file");
  }
  Model model = Model::load(ckpt);
  Dataset data = load_data(data_path, "");
  data.validate(model.config().num_classes);
  if (class_index < 0 || class_index >= model.config().num_classes) {
    throw ConfigError("--class out of range");
  }

  std::vector<int> rows;
  for (int i = 0; i < data.size(); ++i)
    if (data.labels[i] == class_index) rows.push_back(i);
  if (rows.empty()) throw DataError("no observations of the requested class");
  Dataset cls = subset(data, rows);
  Matrix embeddings = embed_batched(model, cls.images);

  Matrix external;
  const Matrix* external_ptr = nullptr;
  if (proj == "external") {
    external = load_projection_csv(proj_file, embeddings.rows());
    external_ptr = &external;
  }
  CoverageReport report = coverage_ratio(embeddings, model.bank(), class_index,
                                         model.config().epsilon, n_nearest,
                                         external_ptr);

  fs::create_directories(out_dir);
  auto write_hull = [](const HullPolygon& hull, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out.precision(17);
    out << "x,y\n";
    for (const auto& v : hull.vertices) out << v.x() << ',' << v.y() << '\n';
  };
  write_hull(report.full_hull, (fs::path(out_dir) / "hull_full.csv").string());
  write_hull(report.sample_hull, (fs::path(out_dir) / "hull_sample.csv").string());
  {
    std::ofstream out(fs::path(out_dir) / "projection.csv");
    out.precision(17);
    out << "x,y\n";
    for (long i = 0; i < report.projected.rows(); ++i)
      out << report.projected(i, 0) << ',' << report.projected(i, 1) << '\n';
  }
  {
    std::ofstream out(fs::path(out_dir) / "coverage.csv");
    out.precision(17);
    out << "class,n_nearest,coverage_ratio,full_area,sample_area\n";
    out << class_index << ',' << n_nearest << ',' << report.ratio << ','
        << report.full_hull.area << ',' << report.sample_hull.area << '\n';
  }
  std::cout << "coverage_ratio=" << report.ratio << "\n";
  return 0;
}

int cmd_export_prototypes(const std::string& ckpt, const std::string& out_dir,
                          bool include_pruned) {
  Model model = Model::load(ckpt);
  const ModelConfig& mc = model.config();
  const PrototypeBank& bank = model.bank();
  fs::create_directories(out_dir);
  const std::string ext = (mc.channels == 3) ? ".ppm" : ".pgm";

  int written = 0;
  for (int k = 0; k < mc.num_classes; ++k) {
    // montage: one row of M tiles; pruned tiles blank unless marked
    Matrix montage = Matrix::Zero(1, mc.channels * mc.height *
                                        mc.width * mc.prototypes_per_class);
    for (int j = 0; j < mc.prototypes_per_class; ++j) {
      const bool active = bank.is_active(k, j);
      if (!active && !include_pruned) continue;
      Matrix decoded = model.decode(bank.phi.row(bank.index(k, j)));
      if (!active) overlay_cross(decoded, mc.channels, mc.height, mc.width);
      const std::string name = "class_" + std::to_string(k) + "_proto_" +
                               std::to_string(j) + ext;
      write_pnm((fs::path(out_dir) / name).string(), decoded, mc.channels,
                mc.height, mc.width);
      ++written;
      for (int c = 0; c < mc.channels; ++c) {
        for (int y = 0; y < mc.height; ++y) {
          for (int x = 0; x < mc.width; ++x) {
            montage(0, (c * mc.height + y) * (mc.width * mc.prototypes_per_class) +
                           j * mc.width + x) = decoded(0, (c * mc.height + y) * mc.width + x);
          }
        }
      }
    }
    write_pnm((fs::path(out_dir) / ("class_" + std::to_string(k) + "_montage" + ext))
                  .string(),
              montage, mc.channels, mc.height, mc.width * mc.prototypes_per_class);
  }
  std::cout << "written=" << written << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-based self-explainable classifier toolkit"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  std::string config_path, variant_flag, data_path, eval_path, groups_csv, out_dir;
  double div_scale = 1.0;
  std::uint64_t seed = 0;
  train_cmd->add_option("--config", config_path, "Sectioned key=value config file");
  train_cmd->add_option("--variant", variant_flag, "panvae or protovae");
  auto* div_opt = train_cmd->add_option("--div-scale", div_scale,
                                        "Diversity loss scale (w_div)");
  train_cmd->add_option("--data", data_path,
                        "Training set: archive path, or 'images.idx,labels.idx'");
  train_cmd->add_option("--eval-data", eval_path, "Held-out set for per-epoch metrics");
  train_cmd->add_option("--groups", groups_csv, "Group-label CSV sidecar");
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  auto* seed_opt = train_cmd->add_option("--seed", seed, "Training seed");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string e_ckpt, e_data, e_groups, e_report;
  eval_cmd->add_option("--ckpt", e_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--data", e_data, "Evaluation set")->required();
  eval_cmd->add_option("--groups", e_groups, "Group-label CSV sidecar");
  eval_cmd->add_option("--report", e_report, "Report output (.csv or .json)")->required();

  // prune
  auto* prune_cmd = app.add_subcommand("prune", "Prune zero-responsibility prototypes");
  std::string p_ckpt, p_data, p_out;
  prune_cmd->add_option("--ckpt", p_ckpt, "Checkpoint path")->required();
  prune_cmd->add_option("--data", p_data, "Training set for responsibility counts")
      ->required();
  prune_cmd->add_option("--out", p_out, "Pruned checkpoint output path")->required();

  // report
  auto* report_cmd = app.add_subcommand("report", "Coverage/diversity report");
  std::string r_ckpt, r_data, r_proj = "pca", r_proj_file, r_out;
  int r_class = 0, r_n_nearest = 100;
  report_cmd->add_option("--ckpt", r_ckpt, "Checkpoint path")->required();
  report_cmd->add_option("--data", r_data, "Evaluation set")->required();
  report_cmd->add_option("--class", r_class, "Class index")->required();
  report_cmd->add_option("--n-nearest", r_n_nearest, "Neighborhood size per prototype");
  report_cmd->add_option("--proj", r_proj, "pca or external");
  report_cmd->add_option("--proj-file", r_proj_file, "External 2D projection CSV");
  report_cmd->add_option("--out", r_out, "Output directory")->required();

  // export-prototypes
  auto* export_cmd = app.add_subcommand("export-prototypes", "Decode prototype images");
  std::string x_ckpt, x_out;
  bool x_include_pruned = false;
  export_cmd->add_option("--ckpt", x_ckpt, "Checkpoint path")->required();
  export_cmd->add_option("--out", x_out, "Output directory")->required();
  export_cmd->add_flag("--include-pruned", x_include_pruned,
                       "Render pruned prototypes with a cross marker");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (train_cmd->parsed()) {
      return cmd_train(config_path, variant_flag, div_scale, div_opt->count() > 0,
                       data_path, eval_path, groups_csv, out_dir, seed,
                       seed_opt->count() > 0);
    }
    if (eval_cmd->parsed()) return cmd_eval(e_ckpt, e_data, e_groups, e_report);
    if (prune_cmd->parsed()) return cmd_prune(p_ckpt, p_data, p_out);
    if (report_cmd->parsed()) {
      return cmd_report(r_ckpt, r_data, r_class, r_n_nearest, r_proj, r_proj_file,
                        r_out);
    }
    if (export_cmd->parsed()) {
      return cmd_export_prototypes(x_ckpt, x_out, x_include_pruned);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainingDivergence& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << "\n";
    return kExitGeometry;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitDivergence;
  }
  return 0;
}
