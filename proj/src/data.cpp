#include "panvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "nlohmann/json.hpp"

namespace panvae {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path, std::streamoff offset) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) {
    throw DataError(path + ": truncated header at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

}  // namespace

void Dataset::validate(int num_classes) const {
  if (size() == 0) throw DataError("dataset is empty");
  if (labels.size() != size()) {
    throw DataError("label count " + std::to_string(labels.size()) +
                    " does not match image count " + std::to_string(size()));
  }
  for (int i = 0; i < size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " +
                      std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  if (group_labels && group_labels->size() != size()) {
    throw DataError("group label count does not match image count");
  }
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot open " + images_path);
  std::uint32_t magic = read_be32(img, images_path, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << images_path << ": bad image magic 0x" << std::hex << magic
        << " at byte offset 0 (expected 0x803)";
    throw DataError(msg.str());
  }
  const std::uint32_t n = read_be32(img, images_path, 4);
  const std::uint32_t rows = read_be32(img, images_path, 8);
  const std::uint32_t cols = read_be32(img, images_path, 12);
  if (n == 0) throw DataError(images_path + ": header claims 0 items");

  const std::size_t pixels = std::size_t(n) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()), std::streamsize(pixels));
  if (std::size_t(img.gcount()) != pixels) {
    throw DataError(images_path + ": truncated payload at byte offset " +
                    std::to_string(16 + img.gcount()));
  }

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot open " + labels_path);
  magic = read_be32(lab, labels_path, 0);
  if (magic != kIdxLabelMagic) {
    std::ostringstream msg;
    msg << labels_path << ": bad label magic 0x" << std::hex << magic
        << " at byte offset 0 (expected 0x801)";
    throw DataError(msg.str());
  }
  const std::uint32_t n_labels = read_be32(lab, labels_path, 4);
  if (n_labels != n) {
    throw DataError(labels_path + ": label count " + std::to_string(n_labels) +
                    " does not match image count " + std::to_string(n));
  }
  std::vector<unsigned char> raw_labels(n_labels);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), std::streamsize(n_labels));
  if (std::size_t(lab.gcount()) != n_labels) {
    throw DataError(labels_path + ": truncated payload at byte offset " +
                    std::to_string(8 + lab.gcount()));
  }

  Dataset out;
  out.channels = 1;
  out.height = int(rows);
  out.width = int(cols);
  out.images.resize(n, rows * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::uint32_t p = 0; p < rows * cols; ++p) {
      out.images(i, p) = raw[std::size_t(i) * rows * cols + p] / 255.0;
    }
  }
  out.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) out.labels[i] = raw_labels[i];
  return out;
}

void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path) {
  if (data.channels != 1) {
    throw DataError("IDX export supports single-channel images only");
  }
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw DataError("cannot write " + images_path);
  write_be32(img, kIdxImageMagic);
  write_be32(img, std::uint32_t(data.size()));
  write_be32(img, std::uint32_t(data.height));
  write_be32(img, std::uint32_t(data.width));
  for (int i = 0; i < data.size(); ++i) {
    for (int p = 0; p < data.sample_dim(); ++p) {
      const double v = std::clamp(data.images(i, p), 0.0, 1.0);
      const unsigned char byte = static_cast<unsigned char>(std::lround(v * 255.0));
      img.put(char(byte));
    }
  }

  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw DataError("cannot write " + labels_path);
  write_be32(lab, kIdxLabelMagic);
  write_be32(lab, std::uint32_t(data.size()));
  for (int i = 0; i < data.size(); ++i) lab.put(char(data.labels[i]));
}

namespace {
constexpr char kArchiveMagic[] = "PANVAE-ARR1\n";
}

void save_archive(const Dataset& data, const std::string& path) {
  nlohmann::json manifest;
  manifest["n"] = data.size();
  manifest["channels"] = data.channels;
  manifest["height"] = data.height;
  manifest["width"] = data.width;
  manifest["dtype"] = "f64";
  manifest["has_groups"] = data.group_labels.has_value();
  manifest["split_tag"] = data.split_tag;
  const std::string header = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out.write(kArchiveMagic, sizeof(kArchiveMagic) - 1);
  const std::uint64_t header_size = header.size();
  out.write(reinterpret_cast<const char*>(&header_size), 8);
  out.write(header.data(), std::streamsize(header.size()));
  for (int i = 0; i < data.size(); ++i) {
    out.write(reinterpret_cast<const char*>(data.images.row(i).eval().data()),
              std::streamsize(sizeof(double) * data.sample_dim()));
  }
  std::vector<std::int32_t> labels(data.size());
  for (int i = 0; i < data.size(); ++i) labels[i] = data.labels[i];
  out.write(reinterpret_cast<const char*>(labels.data()),
            std::streamsize(4 * labels.size()));
  if (data.group_labels) {
    std::vector<std::int32_t> groups(data.size());
    for (int i = 0; i < data.size(); ++i) groups[i] = (*data.group_labels)[i];
    out.write(reinterpret_cast<const char*>(groups.data()),
              std::streamsize(4 * groups.size()));
  }
}

Dataset load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[sizeof(kArchiveMagic) - 1];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof(magic)) != 0) {
    throw DataError(path + ": not an array archive (bad magic)");
  }
  std::uint64_t header_size = 0;
  in.read(reinterpret_cast<char*>(&header_size), 8);
  std::string header(header_size, '\0');
  in.read(header.data(), std::streamsize(header_size));
  if (!in) throw DataError(path + ": truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": bad manifest: " + e.what());
  }

  Dataset out;
  const int n = manifest.at("n").get<int>();
  out.channels = manifest.at("channels").get<int>();
  out.height = manifest.at("height").get<int>();
  out.width = manifest.at("width").get<int>();
  out.split_tag = manifest.value("split_tag", "train");
  if (n <= 0) throw DataError(path + ": manifest claims 0 items");

  out.images.resize(n, out.sample_dim());
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd row(out.sample_dim());
    in.read(reinterpret_cast<char*>(row.data()),
            std::streamsize(sizeof(double) * out.sample_dim()));
    out.images.row(i) = row;
  }
  std::vector<std::int32_t> labels(n);
  in.read(reinterpret_cast<char*>(labels.data()), std::streamsize(4) * n);
  if (!in) throw DataError(path + ": truncated payload");
  out.labels.resize(n);
  for (int i = 0; i < n; ++i) out.labels[i] = labels[i];
  if (manifest.value("has_groups", false)) {
    std::vector<std::int32_t> groups(n);
    in.read(reinterpret_cast<char*>(groups.data()), std::streamsize(4) * n);
    if (!in) throw DataError(path + ": truncated group labels");
    Eigen::VectorXi g(n);
    for (int i = 0; i < n; ++i) g[i] = groups[i];
    out.group_labels = g;
  }
  return out;
}

void attach_group_labels_csv(Dataset& data, const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open " + csv_path);
  Eigen::VectorXi groups = Eigen::VectorXi::Constant(data.size(), -1);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || (line_no == 1 && line.find("index") != std::string::npos)) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw DataError(csv_path + ": line " + std::to_string(line_no) + ": expected index,group");
    }
    const int idx = std::stoi(line.substr(0, comma));
    const int group = std::stoi(line.substr(comma + 1));
    if (idx < 0 || idx >= data.size()) {
      throw DataError(csv_path + ": line " + std::to_string(line_no) + ": index out of range");
    }
    groups[idx] = group;
  }
  for (int i = 0; i < data.size(); ++i) {
    if (groups[i] < 0) {
      throw DataError(csv_path + ": missing group label for index " + std::to_string(i));
    }
  }
  data.group_labels = groups;
}

Eigen::VectorXd one_hot(int label, int num_classes) {
  if (label < 0 || label >= num_classes) {
    throw DataError("label " + std::to_string(label) + " outside [0, " +
                    std::to_string(num_classes) + ")");
  }
  Eigen::VectorXd v = Eigen::VectorXd::Zero(num_classes);
  v[label] = 1.0;
  return v;
}

int SyntheticSpec::total_modes() const {
  return std::accumulate(modes_per_class.begin(), modes_per_class.end(), 0);
}

void SyntheticSpec::validate() const {
  if (modes_per_class.empty()) throw ConfigError("synthetic spec has no classes");
  const int modes = total_modes();
  if (int(mode_centers.size()) != modes || int(mode_scales.size()) != modes) {
    throw ConfigError("synthetic spec: centers/scales must have one entry per mode");
  }
  if (samples_per_mode <= 0) throw ConfigError("samples_per_mode must be positive");
  for (double s : mode_scales) {
    if (s <= 0.0) throw ConfigError("mode scales must be positive");
  }
  if (render == Render::blob_images) {
    for (const auto& c : mode_centers) {
      if (c.size() != 2) throw ConfigError("blob image centers must be 2D");
    }
    if (image_size < 4) throw ConfigError("image_size too small for blob rendering");
  }
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  const int n = spec.total_modes() * spec.samples_per_mode;
  Dataset out;
  Eigen::VectorXi groups(n);
  out.labels.resize(n);

  if (spec.render == SyntheticSpec::Render::vectors) {
    const int dim = int(spec.mode_centers.front().size());
    out.images.resize(n, dim);
    out.channels = dim;  // raw vectors: one "pixel" per dimension
    out.height = 1;
    out.width = 1;
  } else {
    out.channels = 1;
    out.height = spec.image_size;
    out.width = spec.image_size;
    out.images.resize(n, out.sample_dim());
  }

  int row = 0;
  int mode_index = 0;
  for (int k = 0; k < spec.num_classes(); ++k) {
    for (int m = 0; m < spec.modes_per_class[k]; ++m, ++mode_index) {
      const Eigen::VectorXd& center = spec.mode_centers[mode_index];
      const double scale = spec.mode_scales[mode_index];
      for (int s = 0; s < spec.samples_per_mode; ++s, ++row) {
        out.labels[row] = k;
        groups[row] = mode_index;
        if (spec.render == SyntheticSpec::Render::vectors) {
          for (int j = 0; j < center.size(); ++j) {
            out.images(row, j) = center[j] + scale * gauss(rng);
          }
        } else {
          // Blob at a jittered position; centers live in [0,1]^2.
          const double px = (center[0] + scale * gauss(rng)) * (spec.image_size - 1);
          const double py = (center[1] + scale * gauss(rng)) * (spec.image_size - 1);
          const double inv2s2 = 1.0 / (2.0 * spec.blob_sigma * spec.blob_sigma);
          for (int y = 0; y < spec.image_size; ++y) {
            for (int x = 0; x < spec.image_size; ++x) {
              const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
              double v = std::exp(-d2 * inv2s2);
              if (spec.pixel_noise > 0.0) v += spec.pixel_noise * unif(rng);
              out.images(row, y * spec.image_size + x) = std::clamp(v, 0.0, 1.0);
            }
          }
        }
      }
    }
  }
  out.group_labels = groups;
  return out;
}

std::pair<std::vector<int>, std::vector<int>> split_indices(int n, int head_count,
                                                            std::uint64_t seed) {
  if (head_count < 0 || head_count > n) throw ConfigError("split size out of range");
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return {std::vector<int>(perm.begin(), perm.begin() + head_count),
          std::vector<int>(perm.begin() + head_count, perm.end())};
}

Dataset subset(const Dataset& data, const std::vector<int>& indices) {
  Dataset out;
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  out.split_tag = data.split_tag;
  out.images.resize(indices.size(), data.sample_dim());
  out.labels.resize(indices.size());
  Eigen::VectorXi groups(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.images.row(long(i)) = data.images.row(indices[i]);
    out.labels[long(i)] = data.labels[indices[i]];
    if (data.group_labels) groups[long(i)] = (*data.group_labels)[indices[i]];
  }
  if (data.group_labels) out.group_labels = groups;
  return out;
}

}  // namespace panvae
