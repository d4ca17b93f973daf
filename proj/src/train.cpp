#include "bridgeprune/train.hpp"

#include <chrono>
#include <cmath>

#include "bridgeprune/rng.hpp"

namespace bridgeprune::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train.lr_decay must lie in (0,1]");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  perturbation.validate();
}

double lr_schedule(double lr0, double decay, std::size_t epoch) {
  return lr0 * std::pow(decay, static_cast<double>(epoch));
}

template <typename T>
void sgd_step(nn::Graph<T>& graph, const nn::Gradients<T>& grads, OptimizerState<T>& state,
              double lr, double momentum, double weight_decay) {
  std::map<std::string, bool> decayed;
  for (const auto& l : graph.layers) {
    if (nn::has_weight(l)) decayed[nn::weight_name(l)] = true;
  }
  for (const auto& [name, g] : grads) {
    Tensor<T>& w = graph.param(name);
    require_shape(g, w.shape(), name.c_str());
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + name + "'");
    auto [it, fresh] = state.velocity.try_emplace(name, w.shape());
    Tensor<T>& v = it->second;
    const double wd = decayed.count(name) ? weight_decay : 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double vi = momentum * v[i] + g[i] + wd * w[i];
      v[i] = static_cast<T>(vi);
      w[i] = static_cast<T>(w[i] - lr * vi);
    }
  }
  ++state.step;
  state.lr = lr;
}

template <typename T>
TrainerState<T> make_trainer_state(const TrainConfig& config) {
  TrainerState<T> s;
  s.regularizer = reg::RegularizerState<T>(mix_seed(config.seed, 0x7e6));
  s.optimizer.lr = config.lr;
  return s;
}

namespace {

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.raw() + b * k;
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (row[j] > row[best]) best = j;
    }
    if (static_cast<int>(best) == labels[b]) ++correct;
  }
  return correct;
}

}  // namespace

template <typename T>
EpochStats train_epoch(nn::Graph<T>& graph, const data::Dataset& train, const TrainConfig& config,
                       TrainerState<T>& state) {
  if (state.regularizer.active) throw LifecycleError("regularizer active at epoch start");
  const auto t0 = std::chrono::steady_clock::now();
  EpochStats st;
  st.epoch = state.epoch;
  st.lr = lr_schedule(config.lr, config.lr_decay, state.epoch);
  const data::BatchPlan plan{config.batch_size, config.seed, false, true};
  const auto batch_list = data::batches(train.size(), plan, state.epoch);
  double loss_sum = 0.0;
  std::size_t correct = 0, seen = 0, used = 0;
  const nn::ForwardOptions fo{nn::Mode::train, true, {}};
  for (std::size_t bi = 0; bi < batch_list.size(); ++bi) {
    const auto& idx = batch_list[bi];
    // batchnorm needs at least two values per channel
    if (idx.size() < 2) continue;
    const Tensor<T> x = data::gather_images<T>(train, idx);
    const std::vector<int> y = data::gather_labels(train, idx);
    reg::begin_minibatch(graph, config.perturbation, state.regularizer);
    nn::LossAndGrads<T> lg;
    try {
      lg = nn::backward(graph, x, std::span<const int>(y), fo);
    } catch (...) {
      reg::end_minibatch(graph, config.perturbation, state.regularizer, {});
      throw;
    }
    auto grads = reg::end_minibatch(graph, config.perturbation, state.regularizer,
                                    std::move(lg.grads));
    if (!std::isfinite(lg.loss)) {
      throw NumericError("non-finite loss at epoch " + std::to_string(state.epoch) + ", batch " +
                         std::to_string(bi));
    }
    try {
      sgd_step(graph, grads, state.optimizer, st.lr, config.momentum, config.weight_decay);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(state.epoch) +
                         ", batch " + std::to_string(bi));
    }
    loss_sum += lg.loss;
    correct += count_correct(lg.logits, y);
    seen += idx.size();
    ++used;
  }
  st.train_loss = used ? loss_sum / static_cast<double>(used) : 0.0;
  st.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
  ++state.epoch;
  st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return st;
}

template <typename T>
EvalResult evaluate(const nn::Graph<T>& graph, const data::Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw InputError("evaluate: empty dataset");
  const data::BatchPlan plan{batch_size, 0, false, false};
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& idx : data::batches(ds.size(), plan, 0)) {
    const Tensor<T> x = data::gather_images<T>(ds, idx);
    const std::vector<int> y = data::gather_labels(ds, idx);
    const Tensor<T> logits = nn::forward(graph, x);
    loss += nn::softmax_xent(logits, std::span<const int>(y)).loss * static_cast<double>(idx.size());
    correct += count_correct(logits, y);
  }
  const double n = static_cast<double>(ds.size());
  return {loss / n, static_cast<double>(correct) / n};
}

template <typename T>
std::vector<CurveRow> fit(nn::Graph<T>& graph, const data::Dataset& train,
                          const data::Dataset* val, const TrainConfig& config,
                          TrainerState<T>& state, const EpochCallback& on_epoch) {
  config.validate();
  std::vector<CurveRow> rows;
  while (state.epoch < config.epochs) {
    const EpochStats st = train_epoch(graph, train, config, state);
    CurveRow row{st.epoch, st.train_loss, 0.0, st.train_acc, 0.0, st.lr, st.seconds};
    if (val) {
      const EvalResult ev = evaluate(graph, *val);
      row.val_loss = ev.loss;
      row.val_acc = ev.accuracy;
    }
    rows.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return rows;
}

#define BRIDGEPRUNE_INSTANTIATE_TRAIN(T)                                                        \
  template void sgd_step(nn::Graph<T>&, const nn::Gradients<T>&, OptimizerState<T>&, double,     \
                         double, double);                                                       \
  template TrainerState<T> make_trainer_state(const TrainConfig&);                              \
  template EpochStats train_epoch(nn::Graph<T>&, const data::Dataset&, const TrainConfig&,      \
                                  TrainerState<T>&);                                            \
  template EvalResult evaluate(const nn::Graph<T>&, const data::Dataset&, std::size_t);         \
  template std::vector<CurveRow> fit(nn::Graph<T>&, const data::Dataset&, const data::Dataset*, \
                                     const TrainConfig&, TrainerState<T>&, const EpochCallback&);

BRIDGEPRUNE_INSTANTIATE_TRAIN(float)
BRIDGEPRUNE_INSTANTIATE_TRAIN(double)

#undef BRIDGEPRUNE_INSTANTIATE_TRAIN

}  // namespace bridgeprune::train
