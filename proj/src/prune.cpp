#include "bridgeprune/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bridgeprune/autodiff.hpp"
#include "bridgeprune/rng.hpp"

namespace bridgeprune::prune {

using nn::Graph;
using nn::LayerKind;
using nn::LayerSpec;

const char* to_string(PruneMode m) { return m == PruneMode::zero ? "zero" : "remove"; }

PruneMode prune_mode_from_string(const std::string& s) {
  if (s == "zero") return PruneMode::zero;
  if (s == "remove") return PruneMode::remove;
  throw ConfigError("unknown prune mode '" + s + "' (expected zero or remove)");
}

template <typename T>
FilterNorms filter_l2_norms(const Graph<T>& graph) {
  FilterNorms out;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    if (l.kind != LayerKind::conv2d) continue;
    const Tensor<T>& w = graph.param(nn::weight_name(l));
    const std::size_t per = w.numel() / w.dim(0);
    LayerNorms ln{l.name, i, std::vector<double>(w.dim(0))};
    for (std::size_t j = 0; j < w.dim(0); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < per; ++k) {
        const double v = w[j * per + k];
        s += v * v;
      }
      ln.norms[j] = std::sqrt(s);
    }
    out.push_back(std::move(ln));
  }
  return out;
}

std::size_t pruned_count(std::size_t out_channels, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ConfigError("prune fraction must lie in [0,1), got " + std::to_string(fraction));
  }
  const double raw = std::floor(fraction * static_cast<double>(out_channels) + 1e-9);
  return std::min(out_channels - 1, static_cast<std::size_t>(raw));
}

namespace {

// Filter indices ordered weakest first: ascending norm, then ascending index.
std::vector<std::size_t> weakest_first(const std::vector<double>& norms) {
  std::vector<std::size_t> order(norms.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] < norms[b]; });
  return order;
}

LayerKeep keep_strongest(const LayerNorms& ln, std::size_t n_pruned) {
  const auto order = weakest_first(ln.norms);
  LayerKeep lk{ln.layer, ln.layer_index, ln.norms.size(),
               std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(n_pruned),
                                        order.end())};
  std::sort(lk.keep.begin(), lk.keep.end());
  return lk;
}

// Layers downstream of conv `idx` that see its channels, up to the consumer.
struct ChannelTrace {
  std::vector<std::size_t> batchnorms;
  std::size_t consumer = SIZE_MAX;  // next conv2d or linear
  bool through_flatten = false;
  std::size_t flatten_index = 0;
  bool hits_residual = false;
};

ChannelTrace trace_channels(const std::vector<LayerSpec>& layers, std::size_t idx) {
  ChannelTrace t;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::residual_add && l.skip_from >= idx) t.hits_residual = true;
  }
  for (std::size_t i = idx + 1; i < layers.size(); ++i) {
    switch (layers[i].kind) {
      case LayerKind::batchnorm2d:
        t.batchnorms.push_back(i);
        break;
      case LayerKind::relu:
      case LayerKind::maxpool2d:
        break;
      case LayerKind::flatten:
        t.through_flatten = true;
        t.flatten_index = i;
        break;
      case LayerKind::residual_add:
        t.hits_residual = true;
        return t;
      case LayerKind::conv2d:
      case LayerKind::linear:
        t.consumer = i;
        return t;
    }
  }
  return t;
}

template <typename T>
void validate_spec(const Graph<T>& graph, const PruneSpec& spec) {
  for (const LayerKeep& lk : spec.layers) {
    if (lk.layer_index >= graph.layers.size() ||
        graph.layers[lk.layer_index].kind != LayerKind::conv2d ||
        graph.layers[lk.layer_index].name != lk.layer) {
      throw PruneSpecError("prune spec names '" + lk.layer + "' at index " +
                           std::to_string(lk.layer_index) + ", which is not that conv layer");
    }
    const std::size_t cout = graph.layers[lk.layer_index].out_channels;
    if (lk.out_channels != cout) {
      throw PruneSpecError("prune spec for '" + lk.layer + "' assumes " +
                           std::to_string(lk.out_channels) + " filters, layer has " +
                           std::to_string(cout));
    }
    if (lk.keep.empty()) throw PruneSpecError("prune spec keeps no filters of '" + lk.layer + "'");
    for (std::size_t i = 0; i < lk.keep.size(); ++i) {
      if (lk.keep[i] >= cout) {
        throw PruneSpecError("filter index " + std::to_string(lk.keep[i]) + " out of range for '" +
                             lk.layer + "'");
      }
      if (i && lk.keep[i] <= lk.keep[i - 1]) {
        throw PruneSpecError("keep set of '" + lk.layer + "' must be sorted and unique");
      }
    }
  }
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& t, const std::vector<std::size_t>& keep) {
  Shape s = t.shape();
  const std::size_t per = t.numel() / s[0];
  s[0] = keep.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy(t.raw() + keep[i] * per, t.raw() + (keep[i] + 1) * per, out.raw() + i * per);
  }
  return out;
}

// Keeps the listed positions of axis 1; trailing axes are carried as blocks.
template <typename T>
Tensor<T> slice_axis1(const Tensor<T>& t, const std::vector<std::size_t>& keep) {
  Shape s = t.shape();
  const std::size_t rows = s[0], cols = s[1];
  const std::size_t block = t.numel() / (rows * cols);
  s[1] = keep.size();
  Tensor<T> out(s);
  T* dst = out.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c : keep) {
      const T* src = t.raw() + (r * cols + c) * block;
      dst = std::copy(src, src + block, dst);
    }
  }
  return out;
}

std::vector<std::size_t> column_keep(const std::vector<std::size_t>& channel_keep,
                                     std::size_t spatial) {
  std::vector<std::size_t> cols;
  cols.reserve(channel_keep.size() * spatial);
  for (std::size_t c : channel_keep) {
    for (std::size_t k : flatten_columns(c, spatial)) cols.push_back(k);
  }
  return cols;
}

std::size_t spatial_at(const std::vector<LayerSpec>& layers, const Shape& input_shape,
                       std::size_t flatten_index) {
  const auto shapes = nn::infer_shapes(layers, input_shape);
  const Shape& before = flatten_index == 0 ? Shape{} : shapes[flatten_index - 1];
  if (before.size() != 4) throw UnsupportedStructureError("flatten input is not a feature map");
  return before[2] * before[3];
}

}  // namespace

PruneSpec select_filters(const FilterNorms& norms, double fraction, PruneMode mode) {
  PruneSpec spec;
  spec.mode = mode;
  for (const LayerNorms& ln : norms) {
    spec.layers.push_back(keep_strongest(ln, pruned_count(ln.norms.size(), fraction)));
  }
  return spec;
}

PruneSpec select_filters(const FilterNorms& norms, const std::vector<std::size_t>& keep_counts,
                         PruneMode mode) {
  if (keep_counts.size() != norms.size()) {
    throw ConfigError("need one keep count per conv layer");
  }
  PruneSpec spec;
  spec.mode = mode;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    const std::size_t cout = norms[i].norms.size();
    if (keep_counts[i] < 1 || keep_counts[i] > cout) {
      throw ConfigError("keep count " + std::to_string(keep_counts[i]) + " outside [1," +
                        std::to_string(cout) + "] for '" + norms[i].layer + "'");
    }
    spec.layers.push_back(keep_strongest(norms[i], cout - keep_counts[i]));
  }
  return spec;
}

std::vector<std::size_t> flatten_columns(std::size_t channel, std::size_t spatial) {
  std::vector<std::size_t> cols(spatial);
  std::iota(cols.begin(), cols.end(), channel * spatial);
  return cols;
}

template <typename T>
Graph<T> zero_prune(const Graph<T>& graph, const PruneSpec& spec) {
  if (spec.mode != PruneMode::zero) throw PruneSpecError("zero_prune needs a zero-mode spec");
  validate_spec(graph, spec);
  Graph<T> out = graph;
  for (const LayerKeep& lk : spec.layers) {
    const LayerSpec& l = out.layers[lk.layer_index];
    std::vector<bool> kept(lk.out_channels, false);
    for (std::size_t k : lk.keep) kept[k] = true;
    Tensor<T>& w = out.param(nn::weight_name(l));
    Tensor<T>& b = out.param(nn::bias_name(l));
    const std::size_t per = w.numel() / w.dim(0);
    const ChannelTrace t = trace_channels(out.layers, lk.layer_index);
    const LayerSpec* bn = t.batchnorms.empty() ? nullptr : &out.layers[t.batchnorms.front()];
    for (std::size_t j = 0; j < lk.out_channels; ++j) {
      if (kept[j]) continue;
      std::fill(w.raw() + j * per, w.raw() + (j + 1) * per, T{0});
      b[j] = T{0};
      if (bn) {
        out.param(nn::bn_scale_name(*bn))[j] = T{0};
        out.param(nn::bn_shift_name(*bn))[j] = T{0};
      }
    }
  }
  return out;
}

std::vector<LayerSpec> removed_layers(const std::vector<LayerSpec>& layers, const PruneSpec& spec) {
  std::vector<LayerSpec> out = layers;
  for (const LayerKeep& lk : spec.layers) {
    const ChannelTrace t = trace_channels(layers, lk.layer_index);
    if (t.hits_residual) {
      throw UnsupportedStructureError("cannot remove filters of '" + lk.layer +
                                      "': its channels reach a residual connection");
    }
    out[lk.layer_index].out_channels = lk.keep.size();
    for (std::size_t bi : t.batchnorms) {
      out[bi].out_channels = lk.keep.size();
      out[bi].in_channels = lk.keep.size();
    }
    if (t.consumer == SIZE_MAX) continue;
    LayerSpec& c = out[t.consumer];
    if (t.through_flatten) {
      const std::size_t spatial = layers[t.consumer].in_channels / lk.out_channels;
      c.in_channels = lk.keep.size() * spatial;
    } else {
      c.in_channels = lk.keep.size();
    }
  }
  return out;
}

template <typename T>
Graph<T> structural_remove(const Graph<T>& graph, const PruneSpec& spec) {
  if (spec.mode != PruneMode::remove) throw PruneSpecError("structural_remove needs a remove-mode spec");
  if (nn::has_residual(graph.layers)) {
    throw UnsupportedStructureError("structural removal is not supported for residual graphs");
  }
  validate_spec(graph, spec);
  Graph<T> out = graph;
  out.layers = removed_layers(graph.layers, spec);
  for (const LayerKeep& lk : spec.layers) {
    const LayerSpec& l = graph.layers[lk.layer_index];
    const ChannelTrace t = trace_channels(graph.layers, lk.layer_index);
    for (const std::string& name : {nn::weight_name(l), nn::bias_name(l)}) {
      out.param(name) = slice_rows(out.param(name), lk.keep);
    }
    for (std::size_t bi : t.batchnorms) {
      const LayerSpec& bn = graph.layers[bi];
      for (const std::string& name : {nn::bn_scale_name(bn), nn::bn_shift_name(bn),
                                      nn::bn_mean_name(bn), nn::bn_var_name(bn)}) {
        out.param(name) = slice_rows(out.param(name), lk.keep);
      }
    }
    if (t.consumer == SIZE_MAX) continue;
    Tensor<T>& cw = out.param(nn::weight_name(graph.layers[t.consumer]));
    if (t.through_flatten) {
      const std::size_t spatial = spatial_at(graph.layers, graph.input_shape, t.flatten_index);
      cw = slice_axis1(cw, column_keep(lk.keep, spatial));
    } else {
      cw = slice_axis1(cw, lk.keep);
    }
  }
  out.validate();
  return out;
}

template <typename T>
double equivalence_check(const Graph<T>& zeroed, const Graph<T>& removed, std::size_t n_batches,
                         std::size_t batch_size, std::uint64_t seed) {
  if (zeroed.input_shape != removed.input_shape) {
    throw DimensionError("equivalence_check: graphs take inputs " + shape_str(zeroed.input_shape) +
                         " and " + shape_str(removed.input_shape));
  }
  Rng rng(mix_seed(seed, 0xe9));
  Shape s{batch_size};
  s.insert(s.end(), zeroed.input_shape.begin(), zeroed.input_shape.end());
  double worst = 0.0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    Tensor<T> x(s);
    for (auto& v : x.data()) v = static_cast<T>(rng.normal());
    const Tensor<T> a = nn::forward(zeroed, x);
    const Tensor<T> c = nn::forward(removed, x);
    if (a.shape() != c.shape()) {
      throw DimensionError("equivalence_check: output shapes " + shape_str(a.shape()) + " vs " +
                           shape_str(c.shape()));
    }
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(a[i]) - c[i]));
    }
  }
  return worst;
}

#define BRIDGEPRUNE_INSTANTIATE_PRUNE(T)                                                    \
  template FilterNorms filter_l2_norms(const Graph<T>&);                                    \
  template Graph<T> zero_prune(const Graph<T>&, const PruneSpec&);                          \
  template Graph<T> structural_remove(const Graph<T>&, const PruneSpec&);                   \
  template double equivalence_check(const Graph<T>&, const Graph<T>&, std::size_t,          \
                                    std::size_t, std::uint64_t);

BRIDGEPRUNE_INSTANTIATE_PRUNE(float)
BRIDGEPRUNE_INSTANTIATE_PRUNE(double)

#undef BRIDGEPRUNE_INSTANTIATE_PRUNE

}  // namespace bridgeprune::prune
