#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "panvae/errors.hpp"

namespace panvae {

/// A labeled set of observations. Images are stored one per row,
/// flattened channel-major (c, h, w), values in [0, 1].
struct Dataset {
  Eigen::MatrixXd images;              // N x (channels*height*width)
  Eigen::VectorXi labels;              // N, values in [0, K)
  std::optional<Eigen::VectorXi> group_labels;  // N, demographic group ids
  int channels = 1;
  int height = 1;
  int width = 1;
  std::string split_tag = "train";

  int size() const { return static_cast<int>(images.rows()); }
  int sample_dim() const { return channels * height * width; }
  void validate(int num_classes) const;
};

/// Reads an IDX image/label file pair (the MNIST distribution format).
/// Pixel bytes are scaled to [0, 1]. Throws DataError with byte offsets
/// on malformed input.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes a dataset back to the IDX pair. Values are quantized to bytes
/// with round(v * 255); a dataset loaded by load_idx round-trips exactly.
void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path);

/// Dense array-archive container: a JSON manifest followed by raw
/// little-endian payloads (images as float64, labels as int32, optional
/// group labels as int32).
Dataset load_archive(const std::string& path);
void save_archive(const Dataset& data, const std::string& path);

/// CSV sidecar "index,group" attaching group labels to an existing set.
void attach_group_labels_csv(Dataset& data, const std::string& csv_path);

/// One-hot encoding; throws DataError when label is outside [0, K).
Eigen::VectorXd one_hot(int label, int num_classes);

/// Gaussian-mode synthetic benchmark. Modes are listed class by class:
/// mode_centers/mode_scales hold one entry per mode, in class order.
struct SyntheticSpec {
  enum class Render { vectors, blob_images };

  std::vector<int> modes_per_class;
  std::vector<Eigen::VectorXd> mode_centers;
  std::vector<double> mode_scales;
  int samples_per_mode = 100;
  std::uint64_t seed = 0;
  Render render = Render::vectors;
  int image_size = 16;      // blob images are 1 x size x size
  double blob_sigma = 1.5;  // blob radius in pixels
  double pixel_noise = 0.0; // additive uniform noise amplitude

  int num_classes() const { return static_cast<int>(modes_per_class.size()); }
  int total_modes() const;
  void validate() const;
};

/// Deterministic under (spec, seed); group_labels carry the global mode
/// index of each sample.
Dataset make_synthetic(const SyntheticSpec& spec);

/// Seeded permutation split: a pure function of (N, seed).
/// Returns (head indices, tail indices) with head_count entries up front.
std::pair<std::vector<int>, std::vector<int>> split_indices(int n, int head_count,
                                                            std::uint64_t seed);

/// Row subset of a dataset (labels and group labels follow).
Dataset subset(const Dataset& data, const std::vector<int>& indices);

}  // namespace panvae
