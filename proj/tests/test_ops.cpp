#include <doctest.h>

#include <cmath>
#include <vector>

#include "bridgeprune/ops.hpp"
#include "bridgeprune/rng.hpp"

using namespace bridgeprune;
using namespace bridgeprune::nn;

namespace {

template <typename T>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(scale * rng.normal());
  return t;
}

// Direct convolution, accumulated in long double.
template <typename T>
Tensor<T> conv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t s,
                      std::size_t pad) {
  const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / s + 1, wo = (wd + 2 * pad - kw) / s + 1;
  Tensor<T> y({n, cout, ho, wo});
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          long double acc = b[co];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd))
                  continue;
                acc += static_cast<long double>(x.at(in, ci, iy, ix)) * w.at(co, ci, ky, kx);
              }
          y.at(in, co, oy, ox) = static_cast<T>(acc);
        }
  return y;
}

template <typename T>
double max_rel_dev(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(double(a[i]) - double(b[i])) / std::max(1.0, std::abs(double(b[i])));
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace

TEST_CASE("conv2d: zero input and zero bias give zero output") {
  Rng rng(3);
  Tensor<float> x({2, 3, 5, 5});
  auto w = random_tensor<float>({4, 3, 3, 3}, rng);
  Tensor<float> b({4});
  const auto y = conv2d_forward(x, w, b, 1, 1);
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d: 1x1 kernel is an affine map") {
  Tensor<double> x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor<double> w({1, 1, 1, 1}, {2.0});
  Tensor<double> b({1}, {1.0});
  const auto y = conv2d_forward(x, w, b, 1, 0);
  for (std::size_t i = 0; i < 9; ++i) CHECK(y[i] == 2.0 * x[i] + 1.0);
}

TEST_CASE("conv2d: matches the direct loop on the 1x2x4x4 example") {
  Rng rng(11);
  auto x = random_tensor<float>({1, 2, 4, 4}, rng);
  auto w = random_tensor<float>({3, 2, 3, 3}, rng);
  auto b = random_tensor<float>({3}, rng);
  CHECK(max_rel_dev(conv2d_forward(x, w, b, 1, 1), conv_oracle(x, w, b, 1, 1)) < 1e-6);
}

TEST_CASE("conv2d: matches the direct loop on every small geometry") {
  Rng rng(12);
  int cases = 0;
  for (std::size_t h : {1, 2, 3, 5, 6})
    for (std::size_t k : {1, 2, 3})
      for (std::size_t s : {1, 2})
        for (std::size_t pad : {0, 1, 2}) {
          if (h + 2 * pad < k || (h + 2 * pad - k) % s != 0) continue;
          const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(4), cout = 1 + rng.below(5);
          auto x = random_tensor<double>({n, cin, h, h}, rng);
          auto w = random_tensor<double>({cout, cin, k, k}, rng);
          auto b = random_tensor<double>({cout}, rng);
          CAPTURE(h);
          CAPTURE(k);
          CAPTURE(s);
          CAPTURE(pad);
          CHECK(max_rel_dev(conv2d_forward(x, w, b, s, pad), conv_oracle(x, w, b, s, pad)) < 1e-12);
          ++cases;
        }
  CHECK(cases > 30);
}

TEST_CASE("conv2d: float path agrees with the oracle on a wide batch") {
  Rng rng(5);
  auto x = random_tensor<float>({9, 8, 6, 6}, rng);
  auto w = random_tensor<float>({16, 8, 3, 3}, rng);
  auto b = random_tensor<float>({16}, rng);
  CHECK(max_rel_dev(conv2d_forward(x, w, b, 1, 1), conv_oracle(x, w, b, 1, 1)) < 1e-5);
}

TEST_CASE("conv2d: shape errors") {
  Tensor<float> x({1, 2, 4, 4});
  Tensor<float> w({3, 3, 3, 3});
  Tensor<float> b({3});
  CHECK_THROWS_AS(conv2d_forward(x, w, b, 1, 1), DimensionError);
  Tensor<float> w2({3, 2, 3, 3});
  CHECK_THROWS_AS(conv2d_forward(x, w2, b, 2, 0), ConfigError);
}

TEST_CASE("conv2d backward: adjoint identities against the oracle") {
  // <dy, conv(x)> is bilinear, so dx and dW follow from the forward oracle
  // by probing with basis vectors.
  Rng rng(21);
  for (auto [s, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
    auto x = random_tensor<double>({2, 2, 5, 5}, rng);
    if ((5 + 2 * pad - 3) % s) continue;
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    Tensor<double> zero_b({3});
    auto y = conv_oracle(x, w, zero_b, s, pad);
    auto dy = random_tensor<double>(y.shape(), rng);
    const auto g = conv2d_backward(x, w, dy, s, pad, true);
    auto dot = [&](const Tensor<double>& a) {
      long double acc = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * dy[i];
      return double(acc);
    };
    for (std::size_t i = 0; i < w.numel(); ++i) {
      Tensor<double> e(w.shape());
      e[i] = 1.0;
      CHECK(g.weight[i] == doctest::Approx(dot(conv_oracle(x, e, zero_b, s, pad))).epsilon(1e-10));
    }
    for (std::size_t i = 0; i < x.numel(); i += 7) {
      Tensor<double> e(x.shape());
      e[i] = 1.0;
      CHECK(g.input[i] == doctest::Approx(dot(conv_oracle(e, w, zero_b, s, pad))).epsilon(1e-10));
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double sum = 0;
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < y.dim(2) * y.dim(3); ++i)
          sum += dy[(n * 3 + c) * y.dim(2) * y.dim(3) + i];
      CHECK(g.bias[c] == doctest::Approx(sum).epsilon(1e-12));
    }
  }
}

TEST_CASE("batchnorm train: normalized output per channel") {
  Rng rng(7);
  auto x = random_tensor<double>({4, 3, 3, 3}, rng, 5.0);
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] += 2.0;
  Tensor<double> scale({3}, 1.0), shift({3}, 0.0);
  BatchNormCache<double> cache;
  const auto y = batchnorm2d_train<double>(x, scale, shift, nullptr, nullptr, {}, &cache);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) m += y[(n * 3 + c) * 9 + i];
    m /= 36;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < 9; ++i) v += std::pow(y[(n * 3 + c) * 9 + i] - m, 2);
    v /= 36;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
}

TEST_CASE("batchnorm train: zero scale gives the shift everywhere") {
  Rng rng(8);
  auto x = random_tensor<float>({2, 2, 2, 2}, rng);
  Tensor<float> scale({2}, 0.0f), shift({2}, {0.25f, -1.5f});
  const auto y = batchnorm2d_train<float>(x, scale, shift, nullptr, nullptr, {}, nullptr);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) CHECK(y[(n * 2 + c) * 4 + i] == shift[c]);
}

TEST_CASE("batchnorm train: constant channel does not divide by zero") {
  Tensor<float> x({2, 1, 2, 2}, 3.0f);
  Tensor<float> scale({1}, 1.0f), shift({1}, 0.0f);
  const auto y = batchnorm2d_train<float>(x, scale, shift, nullptr, nullptr, {}, nullptr);
  CHECK(y.all_finite());
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("batchnorm train: running statistics use momentum and unbiased variance") {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 6});
  Tensor<double> scale({1}, 1.0), shift({1}, 0.0), rm({1}, 0.0), rv({1}, 1.0);
  batchnorm2d_train<double>(x, scale, shift, &rm, &rv, {}, nullptr);
  // mean 3, unbiased var (4+1+0+9)/3
  CHECK(rm[0] == doctest::Approx(0.1 * 3.0).epsilon(1e-15));
  CHECK(rv[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("batchnorm eval: scalar formula per element") {
  Rng rng(9);
  auto x = random_tensor<float>({3, 2, 2, 2}, rng);
  Tensor<float> scale({2}, {1.5f, -0.5f}), shift({2}, {0.1f, 2.0f});
  Tensor<float> m({2}, {0.3f, -0.2f}), v({2}, {2.0f, 0.5f});
  const auto y = batchnorm2d_eval(x, scale, shift, m, v, 1e-5);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 4; ++i) {
        const std::size_t k = (n * 2 + c) * 4 + i;
        const double want = (double(x[k]) - m[c]) / std::sqrt(double(v[c]) + 1e-5) * scale[c] + shift[c];
        CHECK(y[k] == doctest::Approx(want).epsilon(1e-6));
      }
}

TEST_CASE("batchnorm train: needs two values per channel") {
  Tensor<float> x({1, 2, 1, 1});
  Tensor<float> scale({2}, 1.0f), shift({2});
  CHECK_THROWS_AS(batchnorm2d_train<float>(x, scale, shift, nullptr, nullptr, {}, nullptr),
                  DimensionError);
}

TEST_CASE("relu and its derivative at zero") {
  Tensor<float> x({1, 3}, {-1.5f, 2.0f, 0.0f});
  const auto y = relu_forward(x);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 2.0f);
  CHECK(y[2] == 0.0f);
  Tensor<float> dy({1, 3}, 1.0f);
  const auto dx = relu_backward(y, dy);
  CHECK(dx[0] == 0.0f);
  CHECK(dx[1] == 1.0f);
  CHECK(dx[2] == 0.0f);
}

TEST_CASE("maxpool: single window and first-max tie rule") {
  Tensor<float> x({1, 1, 2, 2}, {1, 2, 3, 4});
  std::vector<std::uint32_t> arg;
  auto y = maxpool2d_forward(x, 2, 2, &arg);
  CHECK(y.numel() == 1);
  CHECK(y[0] == 4.0f);
  CHECK(arg[0] == 3);

  Tensor<float> tie({1, 1, 2, 2}, {5, 1, 5, 5});
  y = maxpool2d_forward(tie, 2, 2, &arg);
  CHECK(arg[0] == 0);
  Tensor<float> dy({1, 1, 1, 1}, {2.0f});
  const auto dx = maxpool2d_backward(tie.shape(), dy, arg);
  CHECK(dx[0] == 2.0f);
  CHECK(dx[2] == 0.0f);
  CHECK(dx[3] == 0.0f);
}

TEST_CASE("maxpool: floor division on odd extents") {
  Tensor<float> x({1, 1, 5, 5});
  for (std::size_t i = 0; i < 25; ++i) x[i] = float(i);
  const auto y = maxpool2d_forward(x, 2, 2, nullptr);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y[0] == 6.0f);
  CHECK(y[3] == 18.0f);
}

TEST_CASE("flatten keeps channel-major order") {
  Tensor<float> x({2, 2, 1, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  const auto y = flatten(x);
  CHECK(y.shape() == Shape{2, 4});
  for (std::size_t i = 0; i < 8; ++i) CHECK(y[i] == float(i));
}

TEST_CASE("linear: dot-product oracle") {
  Rng rng(13);
  auto x = random_tensor<double>({3, 2}, rng);
  auto w = random_tensor<double>({4, 2}, rng);
  auto b = random_tensor<double>({4}, rng);
  const auto y = linear_forward(x, w, b);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      CHECK(y[n * 4 + o] ==
            doctest::Approx(x[n * 2] * w[o * 2] + x[n * 2 + 1] * w[o * 2 + 1] + b[o]).epsilon(1e-14));
  Tensor<double> bad({3, 3});
  CHECK_THROWS_AS(linear_forward(bad, w, b), DimensionError);
}

TEST_CASE("residual_add sums and checks shapes") {
  Tensor<float> a({1, 2}, {1, 2}), b({1, 2}, {3, -5});
  const auto y = residual_add(a, b);
  CHECK(y[0] == 4.0f);
  CHECK(y[1] == -3.0f);
  CHECK_THROWS_AS(residual_add(a, Tensor<float>({2, 1})), DimensionError);
}

TEST_CASE("softmax_xent: uniform logits give ln K") {
  Tensor<float> logits({4, 10}, 0.7f);
  std::vector<int> labels = {0, 3, 9, 5};
  const auto r = softmax_xent(logits, labels);
  CHECK(r.loss == doctest::Approx(std::log(10.0)).epsilon(1e-7));
}

TEST_CASE("softmax_xent: saturated correct logits give zero loss") {
  Tensor<double> logits({1, 3}, {0.0, 1e6, 0.0});
  std::vector<int> labels = {1};
  const auto r = softmax_xent(logits, labels);
  CHECK(r.loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::isfinite(r.loss));
}

TEST_CASE("softmax_xent: direct high-precision evaluation on 2x3") {
  Tensor<double> logits({2, 3}, {0.3, -1.2, 2.5, 1.7, 0.4, -0.8});
  std::vector<int> labels = {2, 0};
  const auto r = softmax_xent(logits, labels);
  long double loss = 0;
  for (std::size_t n = 0; n < 2; ++n) {
    long double z = 0;
    for (std::size_t k = 0; k < 3; ++k) z += std::exp(static_cast<long double>(logits[n * 3 + k]));
    loss += std::log(z) - logits[n * 3 + labels[n]];
    for (std::size_t k = 0; k < 3; ++k) {
      const long double pk = std::exp(static_cast<long double>(logits[n * 3 + k])) / z;
      const long double want = (pk - (int(k) == labels[n] ? 1.0L : 0.0L)) / 2.0L;
      CHECK(std::abs(r.grad_logits[n * 3 + k] - double(want)) < 1e-10);
    }
  }
  CHECK(std::abs(r.loss - double(loss / 2)) < 1e-10);
}

TEST_CASE("softmax_xent: label out of range") {
  Tensor<float> logits({1, 3});
  std::vector<int> labels = {3};
  CHECK_THROWS_AS(softmax_xent(logits, labels), InputError);
  labels = {-1};
  CHECK_THROWS_AS(softmax_xent(logits, labels), InputError);
}

TEST_CASE("conv_output_size errors") {
  CHECK(conv_output_size(32, 3, 1, 1) == 32);
  CHECK(conv_output_size(5, 3, 2, 1) == 3);
  CHECK_THROWS_AS(conv_output_size(4, 3, 2, 1), ConfigError);
  CHECK_THROWS_AS(conv_output_size(2, 5, 1, 0), ConfigError);
}
