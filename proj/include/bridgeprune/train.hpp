#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bridgeprune/autodiff.hpp"
#include "bridgeprune/data.hpp"
#include "bridgeprune/graph.hpp"
#include "bridgeprune/regularize.hpp"

namespace bridgeprune::train {

enum class NumericMode { f32, f64 };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double lr_decay = 0.98;  // per-epoch factor kappa
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  reg::PerturbationConfig perturbation;
  NumericMode numeric = NumericMode::f32;
  bool deterministic = true;

  void validate() const;
};

template <typename T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> velocity;
  std::uint64_t step = 0;
  double lr = 0.0;
};

/// v <- mu v + g + lambda w ; w <- w - lr v. Weight decay applies to conv
/// and linear weights only. Throws NumericError naming a non-finite grad.
template <typename T>
void sgd_step(nn::Graph<T>& graph, const nn::Gradients<T>& grads, OptimizerState<T>& state,
              double lr, double momentum, double weight_decay);

/// lr0 * decay^epoch
double lr_schedule(double lr0, double decay, std::size_t epoch);

template <typename T>
struct TrainerState {
  OptimizerState<T> optimizer;
  reg::RegularizerState<T> regularizer;
  std::size_t epoch = 0;  // epochs completed
};

template <typename T>
TrainerState<T> make_trainer_state(const TrainConfig& config);

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over batches, on perturbed weights
  double train_acc = 0.0;   // running accuracy of the training batches
  double lr = 0.0;
  double seconds = 0.0;
};

/// One pass over `train` in the (seed, epoch) shuffled order. Per batch:
/// begin_minibatch, forward/backward, end_minibatch, sgd_step.
template <typename T>
EpochStats train_epoch(nn::Graph<T>& graph, const data::Dataset& train, const TrainConfig& config,
                       TrainerState<T>& state);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Eval-mode loss and top-1 accuracy (unperturbed weights, running stats).
template <typename T>
EvalResult evaluate(const nn::Graph<T>& graph, const data::Dataset& ds,
                    std::size_t batch_size = 256);

struct CurveRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const CurveRow&)>;

/// Runs epochs state.epoch .. config.epochs-1. `val` may be null.
template <typename T>
std::vector<CurveRow> fit(nn::Graph<T>& graph, const data::Dataset& train,
                          const data::Dataset* val, const TrainConfig& config,
                          TrainerState<T>& state, const EpochCallback& on_epoch = {});

}  // namespace bridgeprune::train
