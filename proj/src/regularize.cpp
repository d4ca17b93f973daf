#include "bridgeprune/regularize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bridgeprune::reg {

const char* to_string(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::batch_bridgeout: return "batch_bridgeout";
    case Method::weight_dropout: return "weight_dropout";
  }
  return "?";
}

const char* to_string(GradMode m) {
  return m == GradMode::straight_through ? "straight_through" : "full_derivative";
}

Method method_from_string(const std::string& s) {
  if (s == "none" || s == "backprop") return Method::none;
  if (s == "batch_bridgeout" || s == "bridgeout") return Method::batch_bridgeout;
  if (s == "weight_dropout" || s == "dropout") return Method::weight_dropout;
  throw ConfigError("unknown regularizer method '" + s + "'");
}

GradMode grad_mode_from_string(const std::string& s) {
  if (s == "straight_through") return GradMode::straight_through;
  if (s == "full_derivative") return GradMode::full_derivative;
  throw ConfigError("unknown gradient mode '" + s + "'");
}

void PerturbationConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0,1]");
  if (method == Method::none) return;
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0,1)");
  if (method == Method::batch_bridgeout && !(q > 0.0 && q <= 2.0)) {
    throw ConfigError("q must lie in (0,2]");
  }
  if (!(epsilon_q > 0.0)) throw ConfigError("epsilon_q must be positive");
}

template <typename T>
Mask target_mask(std::span<const T> weights, double gamma) {
  const std::size_t n = weights.size();
  Mask mask(n, 0);
  // The small slack keeps products like 0.29 * 100 from flooring to 28.
  const double raw = std::floor(std::clamp(gamma, 0.0, 1.0) * static_cast<double>(n) + 1e-9);
  const std::size_t k = std::min(n, static_cast<std::size_t>(raw));
  if (k == 0) return mask;
  if (k == n) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  auto less = [&](std::uint32_t a, std::uint32_t b) {
    const T fa = std::abs(weights[a]), fb = std::abs(weights[b]);
    return fa < fb || (fa == fb && a < b);
  };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
  for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = 1;
  return mask;
}

double bridge_magnitude(double abs_w, double q) {
  if (q == 2.0) return abs_w;
  if (q == 1.0) return std::sqrt(abs_w);
  if (q == 1.5) {
    const double s = std::sqrt(abs_w);
    return s * std::sqrt(s);
  }
  return std::pow(abs_w, 0.5 * q);
}

namespace {

template <typename T>
void check_congruent(const Tensor<T>& w, std::span<const std::uint8_t> mask,
                     std::span<const std::uint8_t> target) {
  if (mask.size() != w.numel() || target.size() != w.numel()) {
    throw DimensionError("perturbation mask/target size does not match weight " +
                         shape_str(w.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> bridgeout_perturb(const Tensor<T>& weights, std::span<const std::uint8_t> mask,
                            std::span<const std::uint8_t> target, double p, double q) {
  check_congruent(weights, mask, target);
  Tensor<T> out = weights;
  const double boost = (1.0 - p) / p;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!target[i]) continue;
    const double w = weights[i];
    const double m = bridge_magnitude(std::abs(w), q);
    out[i] = static_cast<T>(mask[i] ? w + m * boost : w - m);
  }
  return out;
}

template <typename T>
Tensor<T> dropout_perturb(const Tensor<T>& weights, std::span<const std::uint8_t> mask,
                          std::span<const std::uint8_t> target, double p) {
  check_congruent(weights, mask, target);
  Tensor<T> out = weights;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!target[i]) continue;
    out[i] = mask[i] ? static_cast<T>(weights[i] / p) : T{0};
  }
  return out;
}

double bridgeout_derivative(double w, bool keep, double p, double q, double epsilon_q) {
  const double sign = w > 0.0 ? 1.0 : (w < 0.0 ? -1.0 : 0.0);
  const double slope = 0.5 * q * std::pow(std::abs(w) + epsilon_q, 0.5 * q - 1.0) * sign;
  return keep ? 1.0 + slope * (1.0 - p) / p : 1.0 - slope;
}

template <typename T>
std::vector<std::string> perturbable_weights(const nn::Graph<T>& graph) {
  std::vector<std::string> names;
  for (const auto& l : graph.layers) {
    if (nn::has_weight(l)) names.push_back(nn::weight_name(l));
  }
  if (!names.empty()) names.pop_back();
  return names;
}

template <typename T>
void begin_minibatch(nn::Graph<T>& graph, const PerturbationConfig& config,
                     RegularizerState<T>& state) {
  if (state.active) throw LifecycleError("begin_minibatch called while a perturbation is active");
  config.validate();
  state.masks.clear();
  state.targets.clear();
  state.snapshot.clear();
  state.active = true;
  if (config.method == Method::none) return;

  for (const std::string& name : perturbable_weights(graph)) {
    Tensor<T>& w = graph.param(name);
    Mask target = target_mask<T>(w.data(), config.gamma);
    Mask mask(w.numel());
    for (auto& m : mask) m = state.rng.bernoulli(config.p) ? 1 : 0;
    Tensor<T> perturbed = config.method == Method::batch_bridgeout
                              ? bridgeout_perturb(w, mask, target, config.p, config.q)
                              : dropout_perturb(w, mask, target, config.p);
    state.snapshot.emplace(name, std::move(w));
    w = std::move(perturbed);
    state.masks.emplace(name, std::move(mask));
    state.targets.emplace(name, std::move(target));
  }
}

template <typename T>
nn::Gradients<T> end_minibatch(nn::Graph<T>& graph, const PerturbationConfig& config,
                               RegularizerState<T>& state, nn::Gradients<T> grads) {
  if (!state.active) throw LifecycleError("end_minibatch called without begin_minibatch");
  for (auto& [name, original] : state.snapshot) {
    if (config.grad_mode == GradMode::full_derivative) {
      auto it = grads.find(name);
      if (it != grads.end()) {
        const Mask& mask = state.masks.at(name);
        const Mask& target = state.targets.at(name);
        Tensor<T>& g = it->second;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (!target[i]) continue;
          const double d =
              config.method == Method::batch_bridgeout
                  ? bridgeout_derivative(original[i], mask[i] != 0, config.p, config.q,
                                         config.epsilon_q)
                  : (mask[i] ? 1.0 / config.p : 0.0);
          g[i] = static_cast<T>(g[i] * d);
        }
      }
    }
    graph.param(name) = std::move(original);
  }
  state.snapshot.clear();
  state.active = false;
  return grads;
}

#define BRIDGEPRUNE_INSTANTIATE_REG(T)                                                          \
  template Mask target_mask(std::span<const T>, double);                                        \
  template Tensor<T> bridgeout_perturb(const Tensor<T>&, std::span<const std::uint8_t>,          \
                                       std::span<const std::uint8_t>, double, double);          \
  template Tensor<T> dropout_perturb(const Tensor<T>&, std::span<const std::uint8_t>,            \
                                     std::span<const std::uint8_t>, double);                    \
  template std::vector<std::string> perturbable_weights(const nn::Graph<T>&);                   \
  template void begin_minibatch(nn::Graph<T>&, const PerturbationConfig&, RegularizerState<T>&); \
  template nn::Gradients<T> end_minibatch(nn::Graph<T>&, const PerturbationConfig&,              \
                                          RegularizerState<T>&, nn::Gradients<T>);

BRIDGEPRUNE_INSTANTIATE_REG(float)
BRIDGEPRUNE_INSTANTIATE_REG(double)

#undef BRIDGEPRUNE_INSTANTIATE_REG

}  // namespace bridgeprune::reg
