#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bridgeprune/tensor.hpp"

namespace bridgeprune::data {

enum class Split { train, test };

/// Images [N,C,H,W] with pixels in [0,1] (channel-normalized once
/// normalize() has run) and integer labels in [0, classes).
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::size_t classes = 10;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  Shape example_shape() const;
  /// Throws InputError when labels and images disagree or labels fall
  /// outside [0, classes).
  void validate() const;
};

/// IDX pair (MNIST layout): images magic 0x00000803 with dims [N,H,W],
/// labels magic 0x00000801 with dim [N]. Big-endian header fields.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records (label, then 1024 R, 1024 G,
/// 1024 B bytes). subset > 0 keeps subset/10 images per class in file order.
Dataset load_cifar_bin(const std::vector<std::string>& paths, std::size_t subset = 0);

/// First n/classes images of each class, in file order.
Dataset balanced_subset(const Dataset& ds, std::size_t n);

/// Test split takes the first `test_per_class` images of every class (file
/// order); the train split keeps the rest, order preserved.
std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t test_per_class);

struct SynthOptions {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  double noise = 0.1;
};

/// Class-conditional Gaussian blobs. Example i has label i % classes; each
/// class owns a blob at a distinct position; pixels get N(0, noise^2) noise.
Dataset synth_dataset(std::size_t n, std::size_t classes, std::uint64_t seed,
                      const SynthOptions& options = {});

struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel statistics of a (train) split.
Normalization compute_normalization(const Dataset& train);
void normalize(Dataset& ds, const Normalization& norm);
void denormalize(Dataset& ds, const Normalization& norm);

struct BatchPlan {
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  bool drop_last = false;
  bool shuffle = true;
};

/// Index batches for one epoch. The shuffle is a function of (seed, epoch).
std::vector<std::vector<std::size_t>> batches(std::size_t n, const BatchPlan& plan,
                                              std::size_t epoch);

template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices);

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

/// Writes an IDX pair (used by tests and tooling).
void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& labels,
               std::size_t rows, std::size_t cols);

}  // namespace bridgeprune::data
