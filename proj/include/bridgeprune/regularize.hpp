#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bridgeprune/autodiff.hpp"
#include "bridgeprune/graph.hpp"
#include "bridgeprune/rng.hpp"

namespace bridgeprune::reg {

enum class Method { none, batch_bridgeout, weight_dropout };
enum class GradMode { straight_through, full_derivative };

const char* to_string(Method m);
const char* to_string(GradMode m);
Method method_from_string(const std::string& s);
GradMode grad_mode_from_string(const std::string& s);

struct PerturbationConfig {
  Method method = Method::none;
  double p = 0.3;      // probability of the M=1 (keep / boost) branch
  double q = 1.5;      // bridgeout norm exponent
  double gamma = 0.75; // fraction of lowest-magnitude weights targeted
  GradMode grad_mode = GradMode::straight_through;
  double epsilon_q = 1e-8;

  /// Throws ConfigError on out-of-range settings.
  void validate() const;
};

using Mask = std::vector<std::uint8_t>;

/// Marks floor(gamma * n) entries with the smallest |w|. Equal magnitudes
/// are taken in increasing flat-index order.
template <typename T>
Mask target_mask(std::span<const T> weights, double gamma);

/// |w|^(q/2), with fast paths for q in {1, 1.5, 2}.
double bridge_magnitude(double abs_w, double q);

/// Targeted entries: w - |w|^(q/2) where M=0, w + |w|^(q/2) (1-p)/p where M=1.
template <typename T>
Tensor<T> bridgeout_perturb(const Tensor<T>& weights, std::span<const std::uint8_t> mask,
                            std::span<const std::uint8_t> target, double p, double q);

/// Targeted entries: 0 where M=0, w/p where M=1 (p is the keep probability).
template <typename T>
Tensor<T> dropout_perturb(const Tensor<T>& weights, std::span<const std::uint8_t> mask,
                          std::span<const std::uint8_t> target, double p);

/// dW~/dW for one entry under the given branch.
double bridgeout_derivative(double w, bool keep, double p, double q, double epsilon_q);

/// Names of the weight tensors a regularizer may perturb: every conv2d and
/// linear weight except the last weight layer of the graph.
template <typename T>
std::vector<std::string> perturbable_weights(const nn::Graph<T>& graph);

template <typename T>
struct RegularizerState {
  explicit RegularizerState(std::uint64_t seed = 0) : rng(seed) {}

  std::map<std::string, Mask> masks;
  std::map<std::string, Mask> targets;
  std::map<std::string, Tensor<T>> snapshot;  // non-empty exactly while active
  Rng rng;
  bool active = false;
};

/// Snapshots the perturbable weights, recomputes targets from the current
/// magnitudes, samples one fresh mask per layer, and installs W~.
template <typename T>
void begin_minibatch(nn::Graph<T>& graph, const PerturbationConfig& config,
                     RegularizerState<T>& state);

/// Restores the snapshot. In full_derivative mode targeted-entry gradients
/// are multiplied by dW~/dW; straight_through leaves them untouched.
template <typename T>
nn::Gradients<T> end_minibatch(nn::Graph<T>& graph, const PerturbationConfig& config,
                               RegularizerState<T>& state, nn::Gradients<T> grads);

}  // namespace bridgeprune::reg
