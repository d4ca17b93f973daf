#include "bridgeprune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "gemm.hpp"

namespace bridgeprune::nn {

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  if (stride == 0 || kernel == 0) throw ConfigError("conv kernel and stride must be positive");
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel) {
    throw ConfigError("conv kernel " + std::to_string(kernel) + " larger than padded input " +
                      std::to_string(padded));
  }
  if ((padded - kernel) % stride != 0) {
    throw ConfigError("conv output size is not an integer: (" + std::to_string(in) + " + 2*" +
                      std::to_string(padding) + " - " + std::to_string(kernel) + ") / " +
                      std::to_string(stride));
  }
  return (padded - kernel) / stride + 1;
}

std::size_t pool_output_size(std::size_t in, std::size_t window, std::size_t stride) {
  if (stride == 0 || window == 0) throw ConfigError("pool window and stride must be positive");
  if (in < window) throw ConfigError("pool window larger than input");
  return (in - window) / stride + 1;
}

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo, stride, pad;
  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

template <typename T>
ConvGeom conv_geometry(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride,
                       std::size_t padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(input.dim(1)) +
                         " channels, weight expects " + std::to_string(weight.dim(1)));
  }
  ConvGeom g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  g.ho = conv_output_size(g.h, g.kh, stride, padding);
  g.wo = conv_output_size(g.w, g.kw, stride, padding);
  return g;
}

// col[(c*kh + i)*kw + j][oh*wo + ow] = x[c][oh*s - pad + i][ow*s - pad + j]
// Rows of `col` are `ld` apart so several images can share one matrix.
// Stride 1 with output size equal to input size: each tap is the input
// plane shifted by (i - pad) rows and (j - pad) columns.
bool is_same_shift(const ConvGeom& g) {
  return g.stride == 1 && g.ho == g.h && g.wo == g.w;
}

template <typename T>
void im2col_same(const T* x, const ConvGeom& g, T* col, std::size_t ld) {
  const long p = static_cast<long>(g.p()), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.p();
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        const long dj = static_cast<long>(j) - pad;
        const long shift = (static_cast<long>(i) - pad) * w + dj;
        const long lo = std::clamp<long>(-shift, 0, p), hi = std::clamp<long>(p - shift, lo, p);
        std::fill(row, row + lo, T{0});
        std::copy(xc + lo + shift, xc + hi + shift, row + lo);
        std::fill(row + hi, row + p, T{0});
        // entries that wrapped across a row boundary
        if (dj < 0) {
          for (long r = 0; r < p; r += w) std::fill(row + r, row + r - dj, T{0});
        } else if (dj > 0) {
          for (long r = 0; r < p; r += w) std::fill(row + r + w - dj, row + r + w, T{0});
        }
      }
    }
  }
}

// Destroys the wrapped entries of `col`.
template <typename T>
void col2im_same(T* col, const ConvGeom& g, T* x, std::size_t ld) {
  const long p = static_cast<long>(g.p()), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad);
  std::fill(x, x + g.cin * g.p(), T{0});
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* xc = x + c * g.p();
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        const long dj = static_cast<long>(j) - pad;
        const long shift = (static_cast<long>(i) - pad) * w + dj;
        if (dj < 0) {
          for (long r = 0; r < p; r += w) std::fill(row + r, row + r - dj, T{0});
        } else if (dj > 0) {
          for (long r = 0; r < p; r += w) std::fill(row + r + w - dj, row + r + w, T{0});
        }
        const long lo = std::clamp<long>(-shift, 0, p), hi = std::clamp<long>(p - shift, lo, p);
        T* dst = xc + shift;
        for (long q = lo; q < hi; ++q) dst[q] += row[q];
      }
    }
  }
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col, std::size_t ld) {
  if (is_same_shift(g)) {
    im2col_same(x, g, col, ld);
    return;
  }
  const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad);
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - pad;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= h) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(ih) * g.w;
          if (g.stride == 1) {
            // valid ow satisfy 0 <= ow + j - pad < w
            const long off = static_cast<long>(j) - pad;
            const long lo = std::clamp<long>(-off, 0, static_cast<long>(g.wo));
            const long hi = std::clamp<long>(w - off, lo, static_cast<long>(g.wo));
            std::fill(dst, dst + lo, T{0});
            std::copy(src + lo + off, src + hi + off, dst + lo);
            std::fill(dst + hi, dst + g.wo, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - pad;
            dst[ow] = (iw < 0 || iw >= w) ? T{0} : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(T* col, const ConvGeom& g, T* x, std::size_t ld) {
  if (is_same_shift(g)) {
    col2im_same(col, g, x, ld);
    return;
  }
  const long h = static_cast<long>(g.h), w = static_cast<long>(g.w);
  const long pad = static_cast<long>(g.pad);
  std::fill(x, x + g.cin * g.h * g.w, T{0});
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* xc = x + c * g.h * g.w;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * ld;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + i) - pad;
          if (ih < 0 || ih >= h) continue;
          T* dst = xc + static_cast<std::size_t>(ih) * g.w;
          const T* src = row + oh * g.wo;
          if (g.stride == 1) {
            const long off = static_cast<long>(j) - pad;
            const long lo = std::clamp<long>(-off, 0, static_cast<long>(g.wo));
            const long hi = std::clamp<long>(w - off, lo, static_cast<long>(g.wo));
            for (long ow = lo; ow < hi; ++ow) dst[ow + off] += src[ow];
            continue;
          }
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + j) - pad;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Images per GEMM, keeping the column buffer near 8M entries.
std::size_t conv_chunk(const ConvGeom& g) {
  const std::size_t per_image = std::max<std::size_t>(1, g.k() * g.p());
  return std::clamp<std::size_t>((std::size_t{8} << 18) / per_image, 1, std::max<std::size_t>(g.n, 1));
}

// Reused per-thread buffers; contents are unspecified on return.
template <typename T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local std::vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry(input, weight, stride, padding);
  require_shape(bias, {g.cout}, "conv2d bias");
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  const std::size_t k = g.k(), p = g.p(), in_sz = g.cin * g.h * g.w;
  const std::size_t chunk = conv_chunk(g);
  T* col = scratch<T>(0, k * p * chunk);
  T* y = scratch<T>(1, g.cout * p * chunk);
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - n0), ld = nb * p;
    for (std::size_t b = 0; b < nb; ++b) {
      im2col(input.raw() + (n0 + b) * in_sz, g, col + b * p, ld);
    }
    // y[cout, nb*p] = W[cout,k] * col[k, nb*p]
    detail::gemm(false, false, static_cast<int>(g.cout), static_cast<int>(ld),
                 static_cast<int>(k), T{1}, weight.raw(), static_cast<int>(k), col,
                 static_cast<int>(ld), T{0}, y, static_cast<int>(ld));
    for (std::size_t b = 0; b < nb; ++b) {
      T* dst = out.raw() + (n0 + b) * g.cout * p;
      for (std::size_t c = 0; c < g.cout; ++c) {
        const T* src = y + c * ld + b * p;
        const T bc = bias[c];
        for (std::size_t i = 0; i < p; ++i) dst[c * p + i] = src[i] + bc;
      }
    }
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight,
                               const Tensor<T>& grad_output, std::size_t stride,
                               std::size_t padding, bool need_input_grad) {
  const ConvGeom g = conv_geometry(input, weight, stride, padding);
  require_shape(grad_output, {g.n, g.cout, g.ho, g.wo}, "conv2d grad_output");
  const std::size_t k = g.k(), p = g.p(), in_sz = g.cin * g.h * g.w;
  Conv2dGrads<T> grads;
  grads.weight = Tensor<T>(weight.shape());
  grads.bias = Tensor<T>({g.cout});
  if (need_input_grad) grads.input = Tensor<T>(input.shape());

  std::vector<double> bias_acc(g.cout, 0.0);
  const std::size_t chunk = conv_chunk(g);
  T* col = scratch<T>(0, k * p * chunk);
  T* dy = scratch<T>(1, g.cout * p * chunk);
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - n0), ld = nb * p;
    for (std::size_t b = 0; b < nb; ++b) {
      im2col(input.raw() + (n0 + b) * in_sz, g, col + b * p, ld);
      const T* src = grad_output.raw() + (n0 + b) * g.cout * p;
      for (std::size_t c = 0; c < g.cout; ++c) {
        std::copy(src + c * p, src + (c + 1) * p, dy + c * ld + b * p);
      }
    }
    for (std::size_t c = 0; c < g.cout; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < ld; ++i) s += dy[c * ld + i];
      bias_acc[c] += s;
    }
    // dW[cout,k] += dy[cout,nb*p] * col[k,nb*p]^T
    detail::gemm(false, true, static_cast<int>(g.cout), static_cast<int>(k), static_cast<int>(ld),
                 T{1}, dy, static_cast<int>(ld), col, static_cast<int>(ld), T{1},
                 grads.weight.raw(), static_cast<int>(k));
    if (need_input_grad) {
      // dcol[k,nb*p] = W[cout,k]^T * dy[cout,nb*p], reusing the column buffer
      detail::gemm(true, false, static_cast<int>(k), static_cast<int>(ld),
                   static_cast<int>(g.cout), T{1}, weight.raw(), static_cast<int>(k), dy,
                   static_cast<int>(ld), T{0}, col, static_cast<int>(ld));
      for (std::size_t b = 0; b < nb; ++b) {
        col2im(col + b * p, g, grads.input.raw() + (n0 + b) * in_sz, ld);
      }
    }
  }
  for (std::size_t c = 0; c < g.cout; ++c) grads.bias[c] = static_cast<T>(bias_acc[c]);
  return grads;
}

namespace {

// Double-precision reductions over eight independent lanes.
template <typename T>
double lane_sum(const T* x, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += static_cast<double>(x[i + l]);
  }
  for (; i < n; ++i) acc[0] += static_cast<double>(x[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double lane_sq_dev(const T* x, std::size_t n, double mean) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const double d = static_cast<double>(x[i + l]) - mean;
      acc[l] += d * d;
    }
  }
  for (; i < n; ++i) {
    const double d = static_cast<double>(x[i]) - mean;
    acc[0] += d * d;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double lane_dot(const T* a, const T* b, std::size_t n) {
  double acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      acc[l] += static_cast<double>(a[i + l]) * static_cast<double>(b[i + l]);
    }
  }
  for (; i < n; ++i) acc[0] += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
void check_bn_params(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift) {
  require_rank(input, 4, "batchnorm2d input");
  const Shape ch{input.dim(1)};
  require_shape(scale, ch, "batchnorm2d scale");
  require_shape(shift, ch, "batchnorm2d shift");
}

}  // namespace

template <typename T>
Tensor<T> batchnorm2d_train(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                            Tensor<T>* running_mean, Tensor<T>* running_var,
                            const BatchNormOptions& options, BatchNormCache<T>* cache) {
  check_bn_params(input, scale, shift);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  const std::size_t count = n * hw;
  if (count < 2) {
    throw DimensionError("batchnorm2d training mode needs N*H*W >= 2 per channel");
  }
  Tensor<T> out(input.shape());
  Tensor<T> normalized;
  if (cache) normalized = Tensor<T>(input.shape());
  std::vector<double> inv_stds(c);

  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) sum += lane_sum(input.raw() + (b * c + ch) * hw, hw);
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) sq += lane_sq_dev(input.raw() + (b * c + ch) * hw, hw, mean);
    const double var = sq / static_cast<double>(count);
    const double inv_std = 1.0 / std::sqrt(var + options.epsilon);
    inv_stds[ch] = inv_std;
    const T gamma = scale[ch], beta = shift[ch];
    const T m = static_cast<T>(mean), is = static_cast<T>(inv_std);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      const T* x = input.raw() + off;
      T* y = out.raw() + off;
      if (cache) {
        T* xh = normalized.raw() + off;
        for (std::size_t i = 0; i < hw; ++i) {
          xh[i] = (x[i] - m) * is;
          y[i] = gamma * xh[i] + beta;
        }
      } else {
        for (std::size_t i = 0; i < hw; ++i) y[i] = gamma * ((x[i] - m) * is) + beta;
      }
    }
    if (running_mean && running_var) {
      const double m = options.momentum;
      const double unbiased = sq / static_cast<double>(count - 1);
      (*running_mean)[ch] = static_cast<T>((1.0 - m) * (*running_mean)[ch] + m * mean);
      (*running_var)[ch] = static_cast<T>((1.0 - m) * (*running_var)[ch] + m * unbiased);
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_stds);
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& input, const Tensor<T>& scale, const Tensor<T>& shift,
                           const Tensor<T>& running_mean, const Tensor<T>& running_var,
                           double epsilon) {
  check_bn_params(input, scale, shift);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  require_shape(running_mean, {c}, "batchnorm2d running_mean");
  require_shape(running_var, {c}, "batchnorm2d running_var");
  Tensor<T> out(input.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + epsilon);
    const double a = scale[ch] * inv_std;
    const double b = shift[ch] - running_mean[ch] * a;
    const T af = static_cast<T>(a), bf = static_cast<T>(b);
    for (std::size_t bi = 0; bi < n; ++bi) {
      const std::size_t off = (bi * c + ch) * hw;
      const T* x = input.raw() + off;
      T* y = out.raw() + off;
      for (std::size_t i = 0; i < hw; ++i) y[i] = x[i] * af + bf;
    }
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_train_backward(const Tensor<T>& grad_output, const Tensor<T>& scale,
                                             const BatchNormCache<T>& cache) {
  require_shape(grad_output, cache.normalized.shape(), "batchnorm2d grad_output");
  const std::size_t n = grad_output.dim(0), c = grad_output.dim(1);
  const std::size_t hw = grad_output.dim(2) * grad_output.dim(3);
  const double count = static_cast<double>(n * hw);
  BatchNormGrads<T> g{Tensor<T>(grad_output.shape()), Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      sum_dy += lane_sum(grad_output.raw() + off, hw);
      sum_dy_xhat += lane_dot(grad_output.raw() + off, cache.normalized.raw() + off, hw);
    }
    g.scale[ch] = static_cast<T>(sum_dy_xhat);
    g.shift[ch] = static_cast<T>(sum_dy);
    const double k = scale[ch] * cache.inv_std[ch] / count;
    const T kc = static_cast<T>(k * count), mean_dy = static_cast<T>(k * sum_dy);
    const T proj = static_cast<T>(k * sum_dy_xhat);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      const T* dy = grad_output.raw() + off;
      const T* xh = cache.normalized.raw() + off;
      T* dx = g.input.raw() + off;
      for (std::size_t i = 0; i < hw; ++i) dx[i] = kc * dy[i] - mean_dy - xh[i] * proj;
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* x = input.raw();
  T* y = out.raw();
  for (std::size_t i = 0, n = input.numel(); i < n; ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& output, const Tensor<T>& grad_output) {
  require_shape(grad_output, output.shape(), "relu grad_output");
  Tensor<T> g(output.shape());
  const T* y = output.raw();
  const T* dy = grad_output.raw();
  T* dx = g.raw();
  for (std::size_t i = 0, n = output.numel(); i < n; ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
  return g;
}

template <typename T>
Tensor<T> maxpool2d_forward(const Tensor<T>& input, std::size_t window, std::size_t stride,
                            std::vector<std::uint32_t>* argmax) {
  require_rank(input, 4, "maxpool2d input");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t ho = pool_output_size(h, window, stride);
  const std::size_t wo = pool_output_size(w, window, stride);
  Tensor<T> out({n, c, ho, wo});
  if (argmax) argmax->assign(out.numel(), 0);
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow, ++o) {
        std::size_t best = base + oh * stride * w + ow * stride;
        T best_v = input[best];
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = base + (oh * stride + i) * w + ow * stride + j;
            if (input[idx] > best_v) {
              best_v = input[idx];
              best = idx;
            }
          }
        }
        out[o] = best_v;
        if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Shape& input_shape, const Tensor<T>& grad_output,
                             std::span<const std::uint32_t> argmax) {
  if (argmax.size() != grad_output.numel()) {
    throw DimensionError("maxpool2d backward: argmax/grad_output size mismatch");
  }
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_output[i];
  return g;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& input) {
  if (input.rank() < 2) throw DimensionError("flatten needs rank >= 2");
  const std::size_t n = input.dim(0);
  return input.reshaped({n, input.numel() / n});
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(input, 2, "linear input");
  require_rank(weight, 2, "linear weight");
  const std::size_t n = input.dim(0), in = input.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in) {
    throw DimensionError("linear: input has " + std::to_string(in) + " features, weight expects " +
                         std::to_string(weight.dim(1)));
  }
  require_shape(bias, {out_f}, "linear bias");
  Tensor<T> out({n, out_f});
  for (std::size_t b = 0; b < n; ++b) std::copy(bias.raw(), bias.raw() + out_f, out.raw() + b * out_f);
  detail::gemm(false, true, static_cast<int>(n), static_cast<int>(out_f), static_cast<int>(in), T{1},
               input.raw(), static_cast<int>(in), weight.raw(), static_cast<int>(in), T{1},
               out.raw(), static_cast<int>(out_f));
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& input, const Tensor<T>& weight,
                               const Tensor<T>& grad_output, bool need_input_grad) {
  const std::size_t n = input.dim(0), in = input.dim(1), out_f = weight.dim(0);
  require_shape(grad_output, {n, out_f}, "linear grad_output");
  LinearGrads<T> g;
  g.weight = Tensor<T>(weight.shape());
  g.bias = Tensor<T>({out_f});
  // dW[out,in] = dy[n,out]^T * x[n,in]
  detail::gemm(true, false, static_cast<int>(out_f), static_cast<int>(in), static_cast<int>(n), T{1},
               grad_output.raw(), static_cast<int>(out_f), input.raw(), static_cast<int>(in), T{0},
               g.weight.raw(), static_cast<int>(in));
  for (std::size_t o = 0; o < out_f; ++o) {
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) s += grad_output[b * out_f + o];
    g.bias[o] = static_cast<T>(s);
  }
  if (need_input_grad) {
    g.input = Tensor<T>(input.shape());
    detail::gemm(false, false, static_cast<int>(n), static_cast<int>(in), static_cast<int>(out_f),
                 T{1}, grad_output.raw(), static_cast<int>(out_f), weight.raw(),
                 static_cast<int>(in), T{0}, g.input.raw(), static_cast<int>(in));
  }
  return g;
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b, a.shape(), "residual_add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
SoftmaxXent<T> softmax_xent(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_xent logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  if (n == 0) throw InputError("softmax_xent: empty batch");
  SoftmaxXent<T> r;
  r.grad_logits = Tensor<T>(logits.shape());
  double total = 0.0;
  std::vector<double> e(k);
  for (std::size_t b = 0; b < n; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw InputError("softmax_xent: label " + std::to_string(y) + " outside [0," +
                       std::to_string(k) + ")");
    }
    const T* row = logits.raw() + b * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      e[j] = std::exp(row[j] - mx);
      z += e[j];
    }
    total += std::log(z) - (row[y] - mx);
    for (std::size_t j = 0; j < k; ++j) {
      const double prob = e[j] / z - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0);
      r.grad_logits[b * k + j] = static_cast<T>(prob / static_cast<double>(n));
    }
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

#define BRIDGEPRUNE_INSTANTIATE_OPS(T)                                                           \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                    std::size_t, std::size_t);                                   \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                          std::size_t, std::size_t, bool);                       \
  template Tensor<T> batchnorm2d_train(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       Tensor<T>*, Tensor<T>*, const BatchNormOptions&,          \
                                       BatchNormCache<T>*);                                      \
  template Tensor<T> batchnorm2d_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                      const Tensor<T>&, const Tensor<T>&, double);               \
  template BatchNormGrads<T> batchnorm2d_train_backward(const Tensor<T>&, const Tensor<T>&,      \
                                                        const BatchNormCache<T>&);               \
  template Tensor<T> relu_forward(const Tensor<T>&);                                             \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> maxpool2d_forward(const Tensor<T>&, std::size_t, std::size_t,               \
                                       std::vector<std::uint32_t>*);                             \
  template Tensor<T> maxpool2d_backward(const Shape&, const Tensor<T>&,                          \
                                        std::span<const std::uint32_t>);                         \
  template Tensor<T> flatten(const Tensor<T>&);                                                  \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                          bool);                                                 \
  template Tensor<T> residual_add(const Tensor<T>&, const Tensor<T>&);                           \
  template SoftmaxXent<T> softmax_xent(const Tensor<T>&, std::span<const int>);

BRIDGEPRUNE_INSTANTIATE_OPS(float)
BRIDGEPRUNE_INSTANTIATE_OPS(double)

#undef BRIDGEPRUNE_INSTANTIATE_OPS

}  // namespace bridgeprune::nn
