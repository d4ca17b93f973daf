#include "bridgeprune/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace bridgeprune::nn {

namespace {

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  require_shape(src, dst.shape(), "gradient accumulation");
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

template <typename T>
void check_input(const Graph<T>& g, const Tensor<T>& input) {
  if (input.rank() != g.input_shape.size() + 1 ||
      !std::equal(g.input_shape.begin(), g.input_shape.end(), input.shape().begin() + 1)) {
    throw DimensionError("graph expects examples of shape " + shape_str(g.input_shape) +
                         ", got batch " + shape_str(input.shape()));
  }
}

// One layer forward. `mut` is non-null only when running stats may change.
template <typename T>
Tensor<T> layer_forward(const Graph<T>& g, Graph<T>* mut, std::size_t i, const Tensor<T>& x,
                        const Tensor<T>* skip, const ForwardOptions& opt, Tape<T>* tape) {
  const LayerSpec& l = g.layers[i];
  switch (l.kind) {
    case LayerKind::conv2d:
      return conv2d_forward(x, g.param(weight_name(l)), g.param(bias_name(l)), l.stride,
                            l.padding);
    case LayerKind::batchnorm2d: {
      const Tensor<T>& scale = g.param(bn_scale_name(l));
      const Tensor<T>& shift = g.param(bn_shift_name(l));
      if (opt.mode == Mode::eval) {
        return batchnorm2d_eval(x, scale, shift, g.param(bn_mean_name(l)), g.param(bn_var_name(l)),
                                opt.batchnorm.epsilon);
      }
      Tensor<T>* rm = nullptr;
      Tensor<T>* rv = nullptr;
      if (mut && opt.update_running_stats) {
        rm = &mut->param(bn_mean_name(l));
        rv = &mut->param(bn_var_name(l));
      }
      BatchNormCache<T>* cache = tape ? &tape->batchnorm[i] : nullptr;
      return batchnorm2d_train(x, scale, shift, rm, rv, opt.batchnorm, cache);
    }
    case LayerKind::relu:
      return relu_forward(x);
    case LayerKind::maxpool2d:
      return maxpool2d_forward(x, l.kernel, l.stride, tape ? &tape->pool_argmax[i] : nullptr);
    case LayerKind::flatten:
      return flatten(x);
    case LayerKind::linear:
      return linear_forward(x, g.param(weight_name(l)), g.param(bias_name(l)));
    case LayerKind::residual_add:
      return residual_add(x, *skip);
  }
  throw ConfigError("unhandled layer kind");
}

template <typename T>
Tensor<T> run_forward(const Graph<T>& g, Graph<T>* mut, const Tensor<T>& input,
                      const ForwardOptions& opt, Tape<T>* tape) {
  check_input(g, input);
  std::set<std::size_t> skip_sources;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::residual_add) skip_sources.insert(l.skip_from);
  }
  if (tape) {
    tape->activations.clear();
    tape->batchnorm.clear();
    tape->pool_argmax.clear();
    tape->activations.reserve(g.layers.size() + 1);
    tape->activations.push_back(input);
  }
  std::map<std::size_t, Tensor<T>> kept;
  Tensor<T> cur = input;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    const Tensor<T>* skip = nullptr;
    if (l.kind == LayerKind::residual_add) {
      skip = tape ? &tape->activations[l.skip_from + 1] : &kept.at(l.skip_from);
    }
    Tensor<T> next = layer_forward(g, mut, i, tape ? tape->activations.back() : cur, skip, opt, tape);
    if (tape) {
      tape->activations.push_back(std::move(next));
    } else {
      if (skip_sources.count(i)) kept[i] = next;
      cur = std::move(next);
    }
  }
  return tape ? tape->activations.back() : cur;
}

template <typename T>
BatchNormGrads<T> batchnorm_eval_backward(const Graph<T>& g, const LayerSpec& l,
                                          const Tensor<T>& x, const Tensor<T>& dy, double eps) {
  const Tensor<T>& scale = g.param(bn_scale_name(l));
  const Tensor<T>& mean = g.param(bn_mean_name(l));
  const Tensor<T>& var = g.param(bn_var_name(l));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BatchNormGrads<T> r{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(var[ch]) + eps);
    double ds = 0.0, db = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) {
        ds += static_cast<double>(dy[off + k]) * (x[off + k] - mean[ch]) * inv_std;
        db += dy[off + k];
        r.input[off + k] = static_cast<T>(dy[off + k] * scale[ch] * inv_std);
      }
    }
    r.scale[ch] = static_cast<T>(ds);
    r.shift[ch] = static_cast<T>(db);
  }
  return r;
}

}  // namespace

template <typename T>
Tensor<T> forward(const Graph<T>& graph, const Tensor<T>& input,
                  const BatchNormOptions& batchnorm) {
  ForwardOptions opt{Mode::eval, false, batchnorm};
  return run_forward<T>(graph, nullptr, input, opt, nullptr);
}

template <typename T>
Tensor<T> forward(Graph<T>& graph, const Tensor<T>& input, const ForwardOptions& options,
                  Tape<T>* tape) {
  return run_forward<T>(graph, &graph, input, options, tape);
}

template <typename T>
LossAndGrads<T> backward(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                         const ForwardOptions& options) {
  Tape<T> tape;
  LossAndGrads<T> out;
  out.logits = forward(graph, input, options, &tape);
  auto xent = softmax_xent(out.logits, labels);
  out.loss = xent.loss;

  const std::size_t L = graph.layers.size();
  std::vector<Tensor<T>> pending(L + 1);
  Tensor<T> d = std::move(xent.grad_logits);
  for (std::size_t ii = L; ii-- > 0;) {
    if (!pending[ii + 1].empty()) add_into(d, pending[ii + 1]);
    const LayerSpec& l = graph.layers[ii];
    const Tensor<T>& x = tape.activations[ii];
    const bool need_dx = ii > 0;
    switch (l.kind) {
      case LayerKind::conv2d: {
        auto g = conv2d_backward(x, graph.param(weight_name(l)), d, l.stride, l.padding, need_dx);
        out.grads[weight_name(l)] = std::move(g.weight);
        out.grads[bias_name(l)] = std::move(g.bias);
        d = std::move(g.input);
        break;
      }
      case LayerKind::batchnorm2d: {
        BatchNormGrads<T> g =
            options.mode == Mode::train
                ? batchnorm2d_train_backward(d, graph.param(bn_scale_name(l)), tape.batchnorm.at(ii))
                : batchnorm_eval_backward(graph, l, x, d, options.batchnorm.epsilon);
        out.grads[bn_scale_name(l)] = std::move(g.scale);
        out.grads[bn_shift_name(l)] = std::move(g.shift);
        d = std::move(g.input);
        break;
      }
      case LayerKind::relu:
        d = relu_backward(tape.activations[ii + 1], d);
        break;
      case LayerKind::maxpool2d:
        d = maxpool2d_backward(x.shape(), d, tape.pool_argmax.at(ii));
        break;
      case LayerKind::flatten:
        d.reshape(x.shape());
        break;
      case LayerKind::linear: {
        auto g = linear_backward(x, graph.param(weight_name(l)), d, need_dx);
        out.grads[weight_name(l)] = std::move(g.weight);
        out.grads[bias_name(l)] = std::move(g.bias);
        d = std::move(g.input);
        break;
      }
      case LayerKind::residual_add:
        add_into(pending[l.skip_from + 1], d);
        break;
    }
  }
  return out;
}

template <typename T>
double loss_only(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                 const ForwardOptions& options) {
  ForwardOptions frozen = options;
  frozen.update_running_stats = false;
  const Tensor<T> logits = run_forward<T>(graph, nullptr, input, frozen, nullptr);
  return softmax_xent(logits, labels).loss;
}

template <typename T>
GradCheckReport grad_check(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                           const Gradients<T>& analytic, const GradCheckOptions& options) {
  GradCheckReport report;
  const ForwardOptions fo{options.mode, false, {}};
  for (const std::string& name : graph.trainable_names()) {
    Tensor<T>& p = graph.param(name);
    auto it = analytic.find(name);
    ParamCheck pc;
    pc.name = name;
    if (it == analytic.end() || it->second.shape() != p.shape()) {
      pc.max_relative_error = INFINITY;
      report.params.push_back(pc);
      report.failing.push_back(name);
      continue;
    }
    const std::size_t n = p.numel();
    std::size_t stride = 1;
    if (options.max_entries_per_tensor && n > options.max_entries_per_tensor) {
      stride = (n + options.max_entries_per_tensor - 1) / options.max_entries_per_tensor;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = p[i];
      p[i] = static_cast<T>(saved + options.step);
      const double plus = loss_only(graph, input, labels, fo);
      p[i] = static_cast<T>(saved - options.step);
      const double minus = loss_only(graph, input, labels, fo);
      p[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = it->second[i];
      const double denom =
          std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > pc.max_relative_error || !std::isfinite(rel)) {
        pc.max_relative_error = std::isfinite(rel) ? rel : INFINITY;
        pc.worst_index = i;
      }
      ++pc.entries_checked;
    }
    if (!(pc.max_relative_error <= options.tolerance)) report.failing.push_back(name);
    report.params.push_back(pc);
  }
  return report;
}

template <typename T>
GradCheckReport grad_check(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                           const GradCheckOptions& options) {
  const ForwardOptions fo{options.mode, false, {}};
  const auto lg = backward(graph, input, labels, fo);
  return grad_check(graph, input, labels, lg.grads, options);
}

#define BRIDGEPRUNE_INSTANTIATE_AD(T)                                                           \
  template Tensor<T> forward(const Graph<T>&, const Tensor<T>&, const BatchNormOptions&);       \
  template Tensor<T> forward(Graph<T>&, const Tensor<T>&, const ForwardOptions&, Tape<T>*);     \
  template LossAndGrads<T> backward(Graph<T>&, const Tensor<T>&, std::span<const int>,          \
                                    const ForwardOptions&);                                     \
  template double loss_only(Graph<T>&, const Tensor<T>&, std::span<const int>,                  \
                            const ForwardOptions&);                                             \
  template GradCheckReport grad_check(Graph<T>&, const Tensor<T>&, std::span<const int>,        \
                                      const Gradients<T>&, const GradCheckOptions&);            \
  template GradCheckReport grad_check(Graph<T>&, const Tensor<T>&, std::span<const int>,        \
                                      const GradCheckOptions&);

BRIDGEPRUNE_INSTANTIATE_AD(float)
BRIDGEPRUNE_INSTANTIATE_AD(double)

#undef BRIDGEPRUNE_INSTANTIATE_AD

}  // namespace bridgeprune::nn
