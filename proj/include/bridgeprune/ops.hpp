#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bridgeprune/tensor.hpp"

// Forward and backward kernels for the layer types used by the models.
// All tensors are NCHW (4-D) or NF (2-D). Reductions accumulate in double.
namespace bridgeprune::nn {

/// Output extent of a convolution along one axis. Throws ConfigError when
/// (in + 2*padding - kernel) is negative or not divisible by stride.
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding);

/// Output extent of a pooling window (floor division, like most frameworks).
std::size_t pool_output_size(std::size_t in, std::size_t window, std::size_t stride);

// Convolution (cross-correlation, no kernel flip).
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding);

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;  // empty when not requested
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight,
                               const Tensor<T>& grad_output, std::size_t stride,
                               std::size_t padding, bool need_input_grad = true);

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Saved by the training-mode forward for the backward pass.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;         // x-hat, same shape as the input
  std::vector<double> inv_std;  // per channel
};

/// Training mode: normalizes with batch statistics over (N,H,W). When
/// running_mean/running_var are non-null they are updated in place
/// (running var uses the unbiased batch variance).
template <typename T>
Tensor<T> batchnorm2d_train(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                            Tensor<T>* running_mean, Tensor<T>* running_var,
                            const BatchNormOptions& options, BatchNormCache<T>* cache);

/// Eval mode: (x - m) / sqrt(v + eps) * scale + shift with stored stats.
template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var,
                           double epsilon);

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  Tensor<T> scale;
  Tensor<T> shift;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_train_backward(const Tensor<T>& grad_output, const Tensor<T>& scale,
                                             const BatchNormCache<T>& cache);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input);

/// Gradient is zero where the forward output was <= 0 (so relu'(0) = 0).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_output);

/// Square window max pool. argmax (optional) receives, per output element,
/// the flat input index of the first maximal element in scan order.
template <typename T>
Tensor<T> maxpool2d_forward(const Tensor<T>& input, std::size_t window, std::size_t stride,
                            std::vector<std::uint32_t>* argmax);

template <typename T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const Tensor<T>& grad_output,
                             std::span<const std::uint32_t> argmax);

/// [N, ...] -> [N, rest]
template <typename T>
Tensor<T> flatten(const Tensor<T>& input);

/// y = x W^T + b with x [N,in], W [out,in], b [out].
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weight,
                               const Tensor<T>& grad_output, bool need_input_grad = true);

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
struct SoftmaxXent {
  double loss = 0.0;
  Tensor<T> grad_logits;  // (softmax - onehot) / N
};

/// Mean cross-entropy of softmax(logits) against integer labels.
template <typename T>
SoftmaxXent<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels);

}  // namespace bridgeprune::nn
