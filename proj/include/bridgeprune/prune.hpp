#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bridgeprune/graph.hpp"

namespace bridgeprune::prune {

/// L2 norms of the output filters of one conv layer.
struct LayerNorms {
  std::string layer;
  std::size_t layer_index = 0;
  std::vector<double> norms;  // norms[j] for filter j
};

using FilterNorms = std::vector<LayerNorms>;

enum class PruneMode { zero, remove };

const char* to_string(PruneMode m);
PruneMode prune_mode_from_string(const std::string& s);

struct LayerKeep {
  std::string layer;
  std::size_t layer_index = 0;
  std::size_t out_channels = 0;   // before pruning
  std::vector<std::size_t> keep;  // sorted, non-empty
};

struct PruneSpec {
  std::vector<LayerKeep> layers;
  PruneMode mode = PruneMode::zero;
};

/// One entry per conv2d layer: sqrt of the sum of squares of W[j,:,:,:].
template <typename T>
FilterNorms filter_l2_norms(const nn::Graph<T>& graph);

/// floor(r * cout), r in [0,1).
std::size_t pruned_count(std::size_t out_channels, double fraction);

/// Prunes floor(r * Cout) lowest-norm filters per layer; among equal norms
/// the lower index is pruned first.
PruneSpec select_filters(const FilterNorms& norms, double fraction, PruneMode mode);

/// Keeps exactly k[i] largest-norm filters in layer i.
PruneSpec select_filters(const FilterNorms& norms, const std::vector<std::size_t>& keep_counts,
                         PruneMode mode);

/// Zeroes each pruned filter's weights and bias plus the scale and shift of
/// the batchnorm that follows it. Shapes are unchanged.
template <typename T>
nn::Graph<T> zero_prune(const nn::Graph<T>& graph, const PruneSpec& spec);

/// Deletes pruned filters and every downstream weight that reads them: the
/// following batchnorm entries, the next conv's input channels, or, across a
/// flatten, the classifier columns of the removed channels.
/// Throws UnsupportedStructureError for graphs with residual connections.
template <typename T>
nn::Graph<T> structural_remove(const nn::Graph<T>& graph, const PruneSpec& spec);

/// Max |out_zeroed - out_removed| over n_batches random N(0,1) batches.
template <typename T>
double equivalence_check(const nn::Graph<T>& zeroed, const nn::Graph<T>& removed,
                         std::size_t n_batches, std::size_t batch_size, std::uint64_t seed);

/// Flat index of classifier columns fed by channel `c` after a flatten of
/// a [C,H,W] map: c*H*W .. c*H*W + H*W - 1.
std::vector<std::size_t> flatten_columns(std::size_t channel, std::size_t spatial);

/// Layer list after structural removal (no tensors involved), for
/// closed-form accounting.
std::vector<nn::LayerSpec> removed_layers(const std::vector<nn::LayerSpec>& layers,
                                          const PruneSpec& spec);

}  // namespace bridgeprune::prune
