#include "bridgeprune/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "bridgeprune/rng.hpp"

namespace bridgeprune::data {

Shape Dataset::example_shape() const {
  const Shape& s = images.shape();
  return Shape(s.begin() + 1, s.end());
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != labels.size()) {
    throw InputError("dataset has " + std::to_string(labels.size()) + " labels for images " +
                     shape_str(images.shape()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw InputError("label " + std::to_string(y) + " outside [0," + std::to_string(classes) +
                       ")");
    }
  }
}

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

Dataset select(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out;
  out.classes = ds.classes;
  out.split = ds.split;
  out.images = gather_images<float>(ds, idx);
  out.labels = gather_labels(ds, idx);
  return out;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) {
    throw FormatError("'" + images_path + "' is not an IDX image file (magic 0x00000803)");
  }
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) {
    throw FormatError("'" + labels_path + "' is not an IDX label file (magic 0x00000801)");
  }
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  if (img.size() != 16 + n * rows * cols) {
    throw FormatError("'" + images_path + "': expected " + std::to_string(16 + n * rows * cols) +
                      " bytes, found " + std::to_string(img.size()));
  }
  const std::size_t nl = be32(lab, 4);
  if (lab.size() != 8 + nl) {
    throw FormatError("'" + labels_path + "': expected " + std::to_string(8 + nl) +
                      " bytes, found " + std::to_string(lab.size()));
  }
  if (nl != n) {
    throw FormatError("IDX image count " + std::to_string(n) + " != label count " +
                      std::to_string(nl));
  }
  Dataset ds;
  ds.images = Tensor<float>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = img[16 + i] / 255.0f;
  ds.labels.resize(n);
  std::size_t classes = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lab[8 + i];
    classes = std::max<std::size_t>(classes, lab[8 + i] + 1u);
  }
  ds.classes = std::max<std::size_t>(classes, 10);
  return ds;
}

Dataset load_cifar_bin(const std::vector<std::string>& paths, std::size_t subset) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  std::vector<std::uint8_t> all;
  for (const auto& path : paths) {
    const auto bytes = read_file(path);
    if (bytes.size() % kRecord != 0) {
      throw FormatError("'" + path + "': length " + std::to_string(bytes.size()) +
                        " is not a multiple of " + std::to_string(kRecord));
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  const std::size_t n = all.size() / kRecord;
  Dataset ds;
  ds.classes = 10;
  ds.images = Tensor<float>({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = all.data() + r * kRecord;
    if (rec[0] >= 10) throw FormatError("CIFAR record " + std::to_string(r) + " has label " +
                                        std::to_string(rec[0]));
    ds.labels[r] = rec[0];
    for (std::size_t i = 0; i < kPixels; ++i) ds.images[r * kPixels + i] = rec[1 + i] / 255.0f;
  }
  return subset ? balanced_subset(ds, subset) : ds;
}

Dataset balanced_subset(const Dataset& ds, std::size_t n) {
  const std::size_t per_class = n / ds.classes;
  std::vector<std::size_t> taken(ds.classes, 0), idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(ds.labels[i])];
    if (t < per_class) {
      ++t;
      idx.push_back(i);
    }
  }
  for (std::size_t c = 0; c < ds.classes; ++c) {
    if (taken[c] < per_class) {
      throw InputError("class " + std::to_string(c) + " has only " + std::to_string(taken[c]) +
                       " images, subset needs " + std::to_string(per_class));
    }
  }
  return select(ds, idx);
}

std::pair<Dataset, Dataset> split_per_class(const Dataset& ds, std::size_t test_per_class) {
  std::vector<std::size_t> taken(ds.classes, 0), train_idx, test_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(ds.labels[i])];
    if (t < test_per_class) {
      ++t;
      test_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  Dataset train = select(ds, train_idx), test = select(ds, test_idx);
  train.split = Split::train;
  test.split = Split::test;
  return {std::move(train), std::move(test)};
}

Dataset synth_dataset(std::size_t n, std::size_t classes, std::uint64_t seed,
                      const SynthOptions& o) {
  if (classes == 0 || n < classes) throw ConfigError("synth_dataset needs n >= classes >= 1");
  Rng rng(mix_seed(seed, 0x5e7));
  const double cy = (o.height - 1) / 2.0, cx = (o.width - 1) / 2.0;
  const double radius = 0.3 * static_cast<double>(std::min(o.height, o.width));
  const double sigma = std::max(0.8, 0.12 * static_cast<double>(std::min(o.height, o.width)));
  const double phase = rng.uniform() * 2.0 * std::numbers::pi;
  std::vector<double> py(classes), px(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const double a = phase + 2.0 * std::numbers::pi * static_cast<double>(k) / classes;
    py[k] = cy + radius * std::sin(a);
    px[k] = cx + radius * std::cos(a);
  }
  Dataset ds;
  ds.classes = classes;
  ds.images = Tensor<float>({n, o.channels, o.height, o.width});
  ds.labels.resize(n);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % classes;
    ds.labels[i] = static_cast<int>(k);
    for (std::size_t c = 0; c < o.channels; ++c) {
      const double amp = 1.0 / (1.0 + 0.25 * static_cast<double>(c));
      for (std::size_t y = 0; y < o.height; ++y) {
        for (std::size_t x = 0; x < o.width; ++x, ++off) {
          const double d2 = (y - py[k]) * (y - py[k]) + (x - px[k]) * (x - px[k]);
          double v = amp * std::exp(-d2 / (2.0 * sigma * sigma));
          if (o.noise > 0.0) v += o.noise * rng.normal();
          ds.images[off] = static_cast<float>(v);
        }
      }
    }
  }
  return ds;
}

Normalization compute_normalization(const Dataset& train) {
  const std::size_t n = train.images.dim(0), c = train.images.dim(1);
  const std::size_t hw = train.images.dim(2) * train.images.dim(3);
  Normalization norm{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, sq = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const float* p = train.images.raw() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        s += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double count = static_cast<double>(n * hw);
    norm.mean[ch] = s / count;
    const double var = std::max(0.0, sq / count - norm.mean[ch] * norm.mean[ch]);
    norm.stddev[ch] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

namespace {

template <typename F>
void per_channel(Dataset& ds, F&& f) {
  const std::size_t n = ds.images.dim(0), c = ds.images.dim(1);
  const std::size_t hw = ds.images.dim(2) * ds.images.dim(3);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* p = ds.images.raw() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] = f(ch, p[i]);
    }
  }
}

}  // namespace

void normalize(Dataset& ds, const Normalization& norm) {
  if (norm.mean.size() != ds.images.dim(1)) throw DimensionError("normalization channel mismatch");
  per_channel(ds, [&](std::size_t ch, float v) {
    return static_cast<float>((v - norm.mean[ch]) / norm.stddev[ch]);
  });
}

void denormalize(Dataset& ds, const Normalization& norm) {
  if (norm.mean.size() != ds.images.dim(1)) throw DimensionError("normalization channel mismatch");
  per_channel(ds, [&](std::size_t ch, float v) {
    return static_cast<float>(v * norm.stddev[ch] + norm.mean[ch]);
  });
}

std::vector<std::vector<std::size_t>> batches(std::size_t n, const BatchPlan& plan,
                                              std::size_t epoch) {
  if (plan.batch_size == 0) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (plan.shuffle) {
    Rng rng(mix_seed(plan.seed, 0xba7c0000ULL + epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += plan.batch_size) {
    const std::size_t end = std::min(n, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  Shape shape = ds.images.shape();
  const std::size_t per = shape_numel(ds.example_shape());
  shape[0] = indices.size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw InputError("example index out of range");
    const float* src = ds.images.raw() + indices[i] * per;
    T* dst = out.raw() + i * per;
    for (std::size_t k = 0; k < per; ++k) dst[k] = static_cast<T>(src[k]);
  }
  return out;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = ds.labels.at(indices[i]);
  return out;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::uint8_t>& pixels, const std::vector<std::uint8_t>& labels,
               std::size_t rows, std::size_t cols) {
  std::ofstream img(images_path, std::ios::binary);
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(labels.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  std::ofstream lab(labels_path, std::ios::binary);
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  if (!img || !lab) throw FormatError("failed writing IDX files");
}

template Tensor<float> gather_images(const Dataset&, std::span<const std::size_t>);
template Tensor<double> gather_images(const Dataset&, std::span<const std::size_t>);

}  // namespace bridgeprune::data
