#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bridgeprune/graph.hpp"
#include "bridgeprune/ops.hpp"

namespace bridgeprune::nn {

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  // Train mode only: fold batch statistics into the running statistics.
  bool update_running_stats = true;
  BatchNormOptions batchnorm;
};

/// Everything the backward pass needs from a training-mode forward.
template <typename T>
struct Tape {
  std::vector<Tensor<T>> activations;  // [0] = input, [i+1] = output of layer i
  std::map<std::size_t, BatchNormCache<T>> batchnorm;
  std::map<std::size_t, std::vector<std::uint32_t>> pool_argmax;
};

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Inference forward; never touches the graph.
template <typename T>
Tensor<T> forward(const Graph<T>& graph, const Tensor<T>& input,
                  const BatchNormOptions& batchnorm = {});

/// Forward that records a tape. In train mode batchnorm running stats are
/// updated when options.update_running_stats is set.
template <typename T>
Tensor<T> forward(Graph<T>& graph, const Tensor<T>& input, const ForwardOptions& options,
                  Tape<T>* tape);

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  Gradients<T> grads;
  Tensor<T> logits;
};

/// Mean softmax cross-entropy and dLoss/dtheta for every trainable tensor.
template <typename T>
LossAndGrads<T> backward(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                         const ForwardOptions& options = {Mode::train, true, {}});

/// Loss only, no tape (used by finite differences).
template <typename T>
double loss_only(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                 const ForwardOptions& options);

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double denominator_floor = 1e-6;
  // Probe at most this many entries per tensor (0 = all), evenly spaced.
  std::size_t max_entries_per_tensor = 0;
  Mode mode = Mode::train;
};

struct ParamCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t entries_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  std::vector<std::string> failing;  // names above tolerance; empty means pass
  bool passed() const { return failing.empty(); }
};

/// Compares `analytic` against central finite differences of the loss.
/// Running statistics are frozen during probing.
template <typename T>
GradCheckReport grad_check(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                           const Gradients<T>& analytic, const GradCheckOptions& options = {});

/// Convenience: computes the analytic gradients with backward() first.
template <typename T>
GradCheckReport grad_check(Graph<T>& graph, const Tensor<T>& input, std::span<const int> labels,
                           const GradCheckOptions& options = {});

}  // namespace bridgeprune::nn
