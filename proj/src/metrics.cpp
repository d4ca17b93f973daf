#include "bridgeprune/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "bridgeprune/autodiff.hpp"

namespace bridgeprune::metrics {

template <typename T>
double hoyer(std::span<const T> x) {
  const std::size_t d = x.size();
  if (d < 2) throw InputError("hoyer needs at least two entries");
  double peak = 0.0;
  for (T v : x) peak = std::max(peak, std::abs(static_cast<double>(v)));
  if (peak == 0.0) throw InputError("hoyer of an all-zero vector is undefined");
  double l1 = 0.0, l2sq = 0.0;
  for (T v : x) {
    const double a = std::abs(static_cast<double>(v)) / peak;
    l1 += a;
    l2sq += a * a;
  }
  const double sd = std::sqrt(static_cast<double>(d));
  const double h = (sd - std::sqrt(l1 * l1 / l2sq)) / (sd - 1.0);
  return std::clamp(h, 0.0, 1.0);
}

template <typename T>
std::vector<LayerSparsity> sparsity_report(const nn::Graph<T>& graph) {
  std::vector<LayerSparsity> out;
  for (const auto& l : graph.layers) {
    if (l.kind != nn::LayerKind::conv2d) continue;
    const Tensor<T>& w = graph.param(nn::weight_name(l));
    out.push_back({l.name, w.numel(), hoyer<T>(w.data())});
  }
  return out;
}

std::vector<NormCurve> sorted_norm_curve(const prune::FilterNorms& norms) {
  std::vector<NormCurve> out;
  for (const auto& ln : norms) {
    NormCurve c{ln.layer, {}, ln.norms};
    std::sort(c.norms.begin(), c.norms.end(), std::greater<>());
    const std::size_t n = c.norms.size();
    for (std::size_t i = 0; i < n; ++i) {
      c.rank_fraction.push_back(n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0);
    }
    out.push_back(std::move(c));
  }
  return out;
}

template <typename T>
std::vector<int> predict(const nn::Graph<T>& graph, const data::Dataset& ds,
                         std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(ds.size());
  const data::BatchPlan plan{batch_size, 0, false, false};
  for (const auto& idx : data::batches(ds.size(), plan, 0)) {
    const Tensor<T> logits = nn::forward(graph, data::gather_images<T>(ds, idx));
    const std::size_t k = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const T* row = logits.raw() + b * k;
      out.push_back(static_cast<int>(std::max_element(row, row + k) - row));
    }
  }
  return out;
}

template <typename T>
double accuracy(const nn::Graph<T>& graph, const data::Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw InputError("accuracy: empty dataset");
  ds.validate();
  const auto pred = predict(graph, ds, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

std::size_t param_count(const std::vector<nn::LayerSpec>& layers) {
  std::size_t n = 0;
  for (const auto& [name, shape] : nn::expected_params(layers)) n += shape_numel(shape);
  return n;
}

std::size_t mac_count(const std::vector<nn::LayerSpec>& layers, const Shape& input_shape,
                      std::size_t batch) {
  const auto shapes = nn::infer_shapes(layers, input_shape, batch);
  std::size_t macs = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.kind == nn::LayerKind::conv2d) {
      const Shape& o = shapes[i];
      macs += o[0] * o[1] * o[2] * o[3] * l.in_channels * l.kernel * l.kernel;
    } else if (l.kind == nn::LayerKind::linear) {
      macs += batch * l.in_channels * l.out_channels;
    }
  }
  return macs;
}

template <typename T>
CostReport cost_report(const nn::Graph<T>& graph, const data::Dataset& ds,
                       std::size_t repetitions, const CostReport* baseline) {
  if (repetitions < 3) throw ConfigError("cost_report needs at least 3 repetitions");
  CostReport r;
  r.params = param_count(graph.layers);
  r.memory_bytes = r.params * 4;
  r.macs = mac_count(graph.layers, graph.input_shape);
  std::vector<double> times;
  predict(graph, ds);  // warm-up
  for (std::size_t i = 0; i < repetitions; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    predict(graph, ds);
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2),
                   times.end());
  r.runtime_s = times[times.size() / 2];
  if (baseline) {
    r.compression = static_cast<double>(baseline->params) / static_cast<double>(r.params);
    r.speedup = baseline->runtime_s / r.runtime_s;
  }
  return r;
}

std::vector<OverheadRow> regularizer_overhead_bench(
    const std::vector<nn::LayerSpec>& layers, const data::Dataset& ds,
    const std::vector<reg::PerturbationConfig>& configs, std::size_t epochs,
    const train::TrainConfig& base) {
  std::vector<OverheadRow> rows;
  for (const auto& pc : configs) {
    train::TrainConfig cfg = base;
    cfg.perturbation = pc;
    cfg.epochs = epochs;
    auto graph = nn::init_graph<float>(layers, ds.example_shape(), cfg.seed);
    auto state = train::make_trainer_state<float>(cfg);
    std::vector<double> secs;
    for (std::size_t e = 0; e < epochs; ++e) {
      secs.push_back(train::train_epoch(graph, ds, cfg, state).seconds);
    }
    std::nth_element(secs.begin(), secs.begin() + static_cast<std::ptrdiff_t>(secs.size() / 2),
                     secs.end());
    rows.push_back({pc.method, secs[secs.size() / 2]});
  }
  return rows;
}

#define BRIDGEPRUNE_INSTANTIATE_METRICS(T)                                                    \
  template double hoyer(std::span<const T>);                                                  \
  template std::vector<LayerSparsity> sparsity_report(const nn::Graph<T>&);                   \
  template std::vector<int> predict(const nn::Graph<T>&, const data::Dataset&, std::size_t);  \
  template double accuracy(const nn::Graph<T>&, const data::Dataset&, std::size_t);           \
  template CostReport cost_report(const nn::Graph<T>&, const data::Dataset&, std::size_t,     \
                                  const CostReport*);

BRIDGEPRUNE_INSTANTIATE_METRICS(float)
BRIDGEPRUNE_INSTANTIATE_METRICS(double)

#undef BRIDGEPRUNE_INSTANTIATE_METRICS

}  // namespace bridgeprune::metrics
