#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bridgeprune/tensor.hpp"

namespace bridgeprune::nn {

enum class LayerKind { conv2d, batchnorm2d, relu, maxpool2d, flatten, linear, residual_add };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// One layer of a sequential graph. Fields not used by a kind stay zero.
///   conv2d:       in_channels, out_channels, kernel, stride, padding
///   batchnorm2d:  out_channels (== in_channels)
///   maxpool2d:    kernel (window), stride
///   linear:       in_channels (features in), out_channels (features out)
///   residual_add: skip_from, the index of an earlier layer whose output is
///                 added to this layer's input
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t skip_from = 0;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

bool has_weight(const LayerSpec& layer);  // conv2d or linear

std::string weight_name(const LayerSpec& layer);
std::string bias_name(const LayerSpec& layer);
std::string bn_scale_name(const LayerSpec& layer);
std::string bn_shift_name(const LayerSpec& layer);
std::string bn_mean_name(const LayerSpec& layer);
std::string bn_var_name(const LayerSpec& layer);

/// Per-layer output shapes (including the batch axis `batch`).
/// Throws DimensionError / ConfigError when the layer list does not chain.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& example_shape,
                                std::size_t batch = 1);

/// Sequential network: layers plus named parameters.
/// Parameter names are "<layer>.weight", "<layer>.bias" for conv2d/linear and
/// "<layer>.scale", "<layer>.shift", "<layer>.running_mean",
/// "<layer>.running_var" for batchnorm2d.
template <typename T>
struct Graph {
  Shape input_shape;  // per-example [C,H,W]
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor<T>> params;

  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;

  /// Parameter names in layer order (the serialization order).
  std::vector<std::string> param_names() const;

  /// Names that receive gradients (everything except running statistics).
  std::vector<std::string> trainable_names() const;

  std::size_t num_classes() const;

  /// Checks layer chaining and that every parameter has the shape its
  /// LayerSpec implies.
  void validate() const;
};

bool is_trainable_name(const std::string& name);

/// Expected parameter shapes for a layer list.
std::vector<std::pair<std::string, Shape>> expected_params(const std::vector<LayerSpec>& layers);

/// Kaiming fan-in normal init for conv/linear weights (std = sqrt(2/fan_in)),
/// zero biases, batchnorm scale 1, shift 0, running mean 0, running var 1.
template <typename T>
Graph<T> init_graph(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed);

template <typename T, typename U>
Graph<T> graph_cast(const Graph<U>& g) {
  Graph<T> out;
  out.input_shape = g.input_shape;
  out.layers = g.layers;
  for (const auto& [name, t] : g.params) out.params.emplace(name, tensor_cast<T>(t));
  return out;
}

/// VGG-style stack: pairs of 3x3 conv+bn+relu, maxpool after each pair,
/// then flatten and a linear classifier.
std::vector<LayerSpec> tiny_vgg_layers(const Shape& input_shape, std::size_t classes,
                                       const std::vector<std::size_t>& widths = {32, 32, 64, 64,
                                                                                 128, 128});

/// Residual stack: per stage an entry conv (preceded by 2x2 maxpool after
/// the first stage) then conv-bn-relu-conv-bn with an identity skip from
/// the entry activation, followed by relu.
std::vector<LayerSpec> tiny_resnet_layers(const Shape& input_shape, std::size_t classes,
                                          const std::vector<std::size_t>& widths = {8, 16, 32,
                                                                                    64});

/// Fully connected classifier: flatten, then linear+relu per hidden width.
std::vector<LayerSpec> mlp_layers(const Shape& input_shape, std::size_t classes,
                                  const std::vector<std::size_t>& hidden);

/// Builds layers for a model id ("tiny_vgg", "tiny_resnet", "mlp").
/// `widths` overrides the default channel/hidden widths when non-empty.
std::vector<LayerSpec> model_layers(const std::string& model, const Shape& input_shape,
                                    std::size_t classes, const std::vector<std::size_t>& widths);

bool has_residual(const std::vector<LayerSpec>& layers);

}  // namespace bridgeprune::nn
