#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bridgeprune/data.hpp"
#include "bridgeprune/graph.hpp"
#include "bridgeprune/prune.hpp"
#include "bridgeprune/train.hpp"

namespace bridgeprune::metrics {

/// Hoyer's sparsity: (sqrt(d) - |x|_1/|x|_2) / (sqrt(d) - 1), in [0,1].
/// Throws InputError for d < 2 or an all-zero vector.
template <typename T>
double hoyer(std::span<const T> x);

struct LayerSparsity {
  std::string layer;
  std::size_t d = 0;
  double hoyer = 0.0;
};

/// Hoyer measure of each conv layer's flattened weight tensor.
template <typename T>
std::vector<LayerSparsity> sparsity_report(const nn::Graph<T>& graph);

struct NormCurve {
  std::string layer;
  std::vector<double> rank_fraction;  // i / (n-1), 0 for a single filter
  std::vector<double> norms;          // descending
};

std::vector<NormCurve> sorted_norm_curve(const prune::FilterNorms& norms);

template <typename T>
std::vector<int> predict(const nn::Graph<T>& graph, const data::Dataset& ds,
                         std::size_t batch_size = 256);

/// Top-1 accuracy in eval mode. Throws InputError on an empty dataset.
template <typename T>
double accuracy(const nn::Graph<T>& graph, const data::Dataset& ds, std::size_t batch_size = 256);

struct CostReport {
  std::size_t params = 0;        // every stored model tensor element
  std::size_t memory_bytes = 0;  // params * 4
  std::size_t macs = 0;          // multiply-accumulates per example
  double runtime_s = 0.0;        // median wall-clock of one pass over the dataset
  double compression = 1.0;      // baseline.params / params
  double speedup = 1.0;          // baseline.runtime_s / runtime_s
};

std::size_t param_count(const std::vector<nn::LayerSpec>& layers);

/// Conv: N*Cout*H'*W'*Cin*kh*kw; linear: N*in*out. Other layers count 0.
std::size_t mac_count(const std::vector<nn::LayerSpec>& layers, const Shape& input_shape,
                      std::size_t batch = 1);

/// `repetitions` >= 3 timed inference passes; the median is reported. When
/// `baseline` is given, ratios are taken against it.
template <typename T>
CostReport cost_report(const nn::Graph<T>& graph, const data::Dataset& ds,
                       std::size_t repetitions, const CostReport* baseline = nullptr);

struct OverheadRow {
  reg::Method method = reg::Method::none;
  double seconds_per_epoch = 0.0;  // median over epochs
};

/// Trains a fresh copy of `layers` under each config for `epochs` epochs
/// (same seed and batch order) and reports median seconds per epoch.
std::vector<OverheadRow> regularizer_overhead_bench(
    const std::vector<nn::LayerSpec>& layers, const data::Dataset& ds,
    const std::vector<reg::PerturbationConfig>& configs, std::size_t epochs,
    const train::TrainConfig& base);

}  // namespace bridgeprune::metrics
