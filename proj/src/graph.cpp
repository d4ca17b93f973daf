#include "bridgeprune/graph.hpp"

#include <cmath>

#include "bridgeprune/ops.hpp"
#include "bridgeprune/rng.hpp"

namespace bridgeprune::nn {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::residual_add: return "residual_add";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::batchnorm2d, LayerKind::relu,
                      LayerKind::maxpool2d, LayerKind::flatten, LayerKind::linear,
                      LayerKind::residual_add}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + s + "'");
}

bool has_weight(const LayerSpec& layer) {
  return layer.kind == LayerKind::conv2d || layer.kind == LayerKind::linear;
}

std::string weight_name(const LayerSpec& layer) { return layer.name + ".weight"; }
std::string bias_name(const LayerSpec& layer) { return layer.name + ".bias"; }
std::string bn_scale_name(const LayerSpec& layer) { return layer.name + ".scale"; }
std::string bn_shift_name(const LayerSpec& layer) { return layer.name + ".shift"; }
std::string bn_mean_name(const LayerSpec& layer) { return layer.name + ".running_mean"; }
std::string bn_var_name(const LayerSpec& layer) { return layer.name + ".running_var"; }

bool is_trainable_name(const std::string& name) {
  auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !ends_with(".running_mean") && !ends_with(".running_var");
}

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& example_shape,
                                std::size_t batch) {
  Shape cur{batch};
  cur.insert(cur.end(), example_shape.begin(), example_shape.end());
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + l.name + ")";
    auto need4 = [&] {
      if (cur.size() != 4) throw DimensionError(where + " needs a 4-D input, got " + shape_str(cur));
    };
    switch (l.kind) {
      case LayerKind::conv2d:
        need4();
        if (cur[1] != l.in_channels) {
          throw DimensionError(where + ": expects " + std::to_string(l.in_channels) +
                               " input channels, receives " + std::to_string(cur[1]));
        }
        cur = {batch, l.out_channels, conv_output_size(cur[2], l.kernel, l.stride, l.padding),
               conv_output_size(cur[3], l.kernel, l.stride, l.padding)};
        break;
      case LayerKind::batchnorm2d:
        need4();
        if (cur[1] != l.out_channels) {
          throw DimensionError(where + ": expects " + std::to_string(l.out_channels) +
                               " channels, receives " + std::to_string(cur[1]));
        }
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2d:
        need4();
        cur = {batch, cur[1], pool_output_size(cur[2], l.kernel, l.stride),
               pool_output_size(cur[3], l.kernel, l.stride)};
        break;
      case LayerKind::flatten:
        cur = {batch, shape_numel(cur) / batch};
        break;
      case LayerKind::linear:
        if (cur.size() != 2 || cur[1] != l.in_channels) {
          throw DimensionError(where + ": expects [N," + std::to_string(l.in_channels) +
                               "], receives " + shape_str(cur));
        }
        cur = {batch, l.out_channels};
        break;
      case LayerKind::residual_add:
        if (l.skip_from >= i) throw ConfigError(where + ": skip_from must reference an earlier layer");
        if (shapes[l.skip_from] != cur) {
          throw DimensionError(where + ": skip source shape " + shape_str(shapes[l.skip_from]) +
                               " differs from " + shape_str(cur));
        }
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

std::vector<std::pair<std::string, Shape>> expected_params(const std::vector<LayerSpec>& layers) {
  std::vector<std::pair<std::string, Shape>> out;
  for (const LayerSpec& l : layers) {
    switch (l.kind) {
      case LayerKind::conv2d:
        out.emplace_back(weight_name(l), Shape{l.out_channels, l.in_channels, l.kernel, l.kernel});
        out.emplace_back(bias_name(l), Shape{l.out_channels});
        break;
      case LayerKind::linear:
        out.emplace_back(weight_name(l), Shape{l.out_channels, l.in_channels});
        out.emplace_back(bias_name(l), Shape{l.out_channels});
        break;
      case LayerKind::batchnorm2d:
        out.emplace_back(bn_scale_name(l), Shape{l.out_channels});
        out.emplace_back(bn_shift_name(l), Shape{l.out_channels});
        out.emplace_back(bn_mean_name(l), Shape{l.out_channels});
        out.emplace_back(bn_var_name(l), Shape{l.out_channels});
        break;
      default:
        break;
    }
  }
  return out;
}

template <typename T>
Tensor<T>& Graph<T>::param(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("graph has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Tensor<T>& Graph<T>::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("graph has no parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::vector<std::string> Graph<T>::param_names() const {
  std::vector<std::string> names;
  for (auto& [name, shape] : expected_params(layers)) names.push_back(name);
  return names;
}

template <typename T>
std::vector<std::string> Graph<T>::trainable_names() const {
  std::vector<std::string> names;
  for (auto& [name, shape] : expected_params(layers)) {
    if (is_trainable_name(name)) names.push_back(name);
  }
  return names;
}

template <typename T>
std::size_t Graph<T>::num_classes() const {
  const auto shapes = infer_shapes(layers, input_shape);
  if (shapes.empty() || shapes.back().size() != 2) {
    throw DimensionError("graph output is not [N, classes]");
  }
  return shapes.back()[1];
}

template <typename T>
void Graph<T>::validate() const {
  infer_shapes(layers, input_shape);
  std::map<std::string, Shape> expected;
  for (auto& [name, shape] : expected_params(layers)) {
    if (!expected.emplace(name, shape).second) {
      throw ConfigError("duplicate parameter name '" + name + "'");
    }
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", layer implies " + shape_str(shape));
    }
  }
  if (expected.size() != params.size()) throw ConfigError("graph holds unexpected parameters");
}

template <typename T>
Graph<T> init_graph(std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t seed) {
  Graph<T> g;
  g.input_shape = std::move(input_shape);
  g.layers = std::move(layers);
  Rng rng(mix_seed(seed, 0x1417));
  for (const LayerSpec& l : g.layers) {
    if (has_weight(l)) {
      const std::size_t fan_in =
          l.kind == LayerKind::conv2d ? l.in_channels * l.kernel * l.kernel : l.in_channels;
      const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
      Shape ws = l.kind == LayerKind::conv2d
                     ? Shape{l.out_channels, l.in_channels, l.kernel, l.kernel}
                     : Shape{l.out_channels, l.in_channels};
      Tensor<T> w(ws);
      for (auto& v : w.data()) v = static_cast<T>(rng.normal() * std);
      g.params.emplace(weight_name(l), std::move(w));
      g.params.emplace(bias_name(l), Tensor<T>({l.out_channels}));
    } else if (l.kind == LayerKind::batchnorm2d) {
      g.params.emplace(bn_scale_name(l), Tensor<T>({l.out_channels}, T{1}));
      g.params.emplace(bn_shift_name(l), Tensor<T>({l.out_channels}));
      g.params.emplace(bn_mean_name(l), Tensor<T>({l.out_channels}));
      g.params.emplace(bn_var_name(l), Tensor<T>({l.out_channels}, T{1}));
    }
  }
  g.validate();
  return g;
}

namespace {

struct LayerListBuilder {
  std::vector<LayerSpec> layers;
  std::size_t conv = 0, bn = 0, relu = 0, pool = 0, fc = 0, add = 0;

  std::size_t push(LayerSpec l) {
    layers.push_back(std::move(l));
    return layers.size() - 1;
  }
  std::size_t conv3x3(std::size_t in, std::size_t out) {
    LayerSpec l{LayerKind::conv2d, "conv" + std::to_string(++conv), in, out, 3, 1, 1, 0};
    return push(l);
  }
  std::size_t batchnorm(std::size_t c) {
    return push({LayerKind::batchnorm2d, "bn" + std::to_string(++bn), c, c, 0, 1, 0, 0});
  }
  std::size_t relu_() { return push({LayerKind::relu, "relu" + std::to_string(++relu)}); }
  std::size_t maxpool2() {
    return push({LayerKind::maxpool2d, "pool" + std::to_string(++pool), 0, 0, 2, 2, 0, 0});
  }
  std::size_t flatten_() { return push({LayerKind::flatten, "flatten"}); }
  std::size_t linear(std::size_t in, std::size_t out) {
    return push({LayerKind::linear, "fc" + std::to_string(++fc), in, out, 0, 1, 0, 0});
  }
  std::size_t residual(std::size_t from) {
    LayerSpec l{LayerKind::residual_add, "add" + std::to_string(++add)};
    l.skip_from = from;
    return push(l);
  }
};

std::size_t flat_features(const std::vector<LayerSpec>& layers, const Shape& input_shape) {
  const auto shapes = infer_shapes(layers, input_shape);
  const Shape& last = shapes.empty() ? input_shape : shapes.back();
  return shape_numel(last) / (shapes.empty() ? 1 : last[0]);
}

}  // namespace

std::vector<LayerSpec> tiny_vgg_layers(const Shape& input_shape, std::size_t classes,
                                       const std::vector<std::size_t>& widths) {
  if (input_shape.size() != 3) throw ConfigError("tiny_vgg needs a [C,H,W] input shape");
  if (widths.empty() || widths.size() % 2 != 0) {
    throw ConfigError("tiny_vgg widths must come in conv pairs");
  }
  LayerListBuilder b;
  std::size_t in = input_shape[0];
  for (std::size_t i = 0; i < widths.size(); ++i) {
    b.conv3x3(in, widths[i]);
    b.batchnorm(widths[i]);
    b.relu_();
    in = widths[i];
    if (i % 2 == 1) b.maxpool2();
  }
  b.flatten_();
  b.linear(flat_features(b.layers, input_shape), classes);
  return b.layers;
}

std::vector<LayerSpec> tiny_resnet_layers(const Shape& input_shape, std::size_t classes,
                                          const std::vector<std::size_t>& widths) {
  if (input_shape.size() != 3) throw ConfigError("tiny_resnet needs a [C,H,W] input shape");
  if (widths.empty()) throw ConfigError("tiny_resnet needs at least one stage");
  LayerListBuilder b;
  std::size_t in = input_shape[0];
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::size_t c = widths[s];
    if (s > 0) b.maxpool2();
    b.conv3x3(in, c);
    b.batchnorm(c);
    const std::size_t entry = b.relu_();
    b.conv3x3(c, c);
    b.batchnorm(c);
    b.relu_();
    b.conv3x3(c, c);
    b.batchnorm(c);
    b.residual(entry);
    b.relu_();
    in = c;
  }
  b.flatten_();
  b.linear(flat_features(b.layers, input_shape), classes);
  return b.layers;
}

std::vector<LayerSpec> mlp_layers(const Shape& input_shape, std::size_t classes,
                                  const std::vector<std::size_t>& hidden) {
  LayerListBuilder b;
  b.flatten_();
  std::size_t in = shape_numel(input_shape);
  for (std::size_t h : hidden) {
    b.linear(in, h);
    b.relu_();
    in = h;
  }
  b.linear(in, classes);
  return b.layers;
}

std::vector<LayerSpec> model_layers(const std::string& model, const Shape& input_shape,
                                    std::size_t classes, const std::vector<std::size_t>& widths) {
  if (model == "tiny_vgg") {
    return widths.empty() ? tiny_vgg_layers(input_shape, classes)
                          : tiny_vgg_layers(input_shape, classes, widths);
  }
  if (model == "tiny_resnet") {
    return widths.empty() ? tiny_resnet_layers(input_shape, classes)
                          : tiny_resnet_layers(input_shape, classes, widths);
  }
  if (model == "mlp") {
    return mlp_layers(input_shape, classes, widths.empty() ? std::vector<std::size_t>{1024} : widths);
  }
  throw ConfigError("unknown model '" + model + "'");
}

bool has_residual(const std::vector<LayerSpec>& layers) {
  for (const auto& l : layers) {
    if (l.kind == LayerKind::residual_add) return true;
  }
  return false;
}

template struct Graph<float>;
template struct Graph<double>;
template Graph<float> init_graph(std::vector<LayerSpec>, Shape, std::uint64_t);
template Graph<double> init_graph(std::vector<LayerSpec>, Shape, std::uint64_t);

}  // namespace bridgeprune::nn
