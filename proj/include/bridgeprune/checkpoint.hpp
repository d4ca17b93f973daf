#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "bridgeprune/graph.hpp"
#include "bridgeprune/train.hpp"

namespace bridgeprune::ckpt {

inline constexpr int kFormatVersion = 1;

/// Everything needed to evaluate a model or continue training it.
template <typename T>
struct Checkpoint {
  nn::Graph<T> graph;
  train::OptimizerState<T> optimizer;
  std::size_t epoch = 0;                      // epochs completed
  std::map<std::string, std::string> config;  // flat key = value
  std::string rng_state;                      // regularizer RNG
  std::map<std::string, std::string> meta;
};

/// File layout:
///   BRIDGEPRUNE-CKPT\n
///   <manifest length in bytes>\n
///   <JSON manifest>
///   <blob: tensors back to back, little-endian, offsets relative to blob>
/// Written to a temporary sibling and renamed into place.
template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt);

/// Tensors stored in another precision are converted.
/// Throws CheckpointVersionError, CorruptManifestError or TensorLengthError.
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

/// "f32" or "f64", read from the manifest.
std::string checkpoint_dtype(const std::string& path);

/// Writes `bytes` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace bridgeprune::ckpt
