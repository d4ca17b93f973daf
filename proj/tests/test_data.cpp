#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "bridgeprune/autodiff.hpp"
#include "bridgeprune/data.hpp"
#include "bridgeprune/train.hpp"

using namespace bridgeprune;
using namespace bridgeprune::data;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("bridgeprune_data_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Three 28x28 images, labels 7,0,9.
void write_tiny_idx(const fs::path& img, const fs::path& lab, std::size_t drop_tail = 0) {
  std::vector<std::uint8_t> ib = {0, 0, 8, 3};
  put_be32(ib, 3);
  put_be32(ib, 28);
  put_be32(ib, 28);
  for (std::size_t i = 0; i < 3 * 784; ++i) ib.push_back(static_cast<std::uint8_t>(i % 256));
  ib[16] = 255;
  ib.resize(ib.size() - drop_tail);
  std::vector<std::uint8_t> lb = {0, 0, 8, 1};
  put_be32(lb, 3);
  for (std::uint8_t v : {7, 0, 9}) lb.push_back(v);
  write_bytes(img, ib);
  write_bytes(lab, lb);
}

}  // namespace

TEST_CASE("load_idx: header, scaling and labels") {
  const auto d = scratch_dir("idx");
  write_tiny_idx(d / "i", d / "l");
  const auto ds = load_idx((d / "i").string(), (d / "l").string());
  CHECK(ds.images.shape() == Shape{3, 1, 28, 28});
  CHECK(ds.labels == std::vector<int>{7, 0, 9});
  CHECK(ds.images[0] == 1.0f);
  CHECK(ds.images[1] == 1.0f / 255.0f);
  CHECK(ds.images[300] == float(300 % 256) / 255.0f);
}

TEST_CASE("load_idx: bad magic and truncation") {
  const auto d = scratch_dir("idx_bad");
  write_tiny_idx(d / "i", d / "l", 10);
  CHECK_THROWS_AS(load_idx((d / "i").string(), (d / "l").string()), FormatError);
  write_tiny_idx(d / "i", d / "l");
  CHECK_THROWS_AS(load_idx((d / "l").string(), (d / "i").string()), FormatError);
  std::vector<std::uint8_t> lb = {0, 0, 8, 1};
  put_be32(lb, 2);
  lb.push_back(1);
  lb.push_back(2);
  write_bytes(d / "l2", lb);
  CHECK_THROWS_AS(load_idx((d / "i").string(), (d / "l2").string()), FormatError);
  CHECK_THROWS_AS(load_idx((d / "missing").string(), (d / "l").string()), FormatError);
}

TEST_CASE("write_idx round trip") {
  const auto d = scratch_dir("idx_rt");
  std::vector<std::uint8_t> px(4 * 5 * 6), lab = {1, 2, 3, 4};
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 7);
  write_idx((d / "i").string(), (d / "l").string(), px, lab, 5, 6);
  const auto ds = load_idx((d / "i").string(), (d / "l").string());
  CHECK(ds.images.shape() == Shape{4, 1, 5, 6});
  for (std::size_t i = 0; i < px.size(); ++i) CHECK(ds.images[i] == px[i] / 255.0f);
}

TEST_CASE("load_cifar_bin: layout, records and subset") {
  const auto d = scratch_dir("cifar");
  std::vector<std::uint8_t> bytes;
  for (std::size_t r = 0; r < 30; ++r) {
    bytes.push_back(static_cast<std::uint8_t>(r % 10));
    for (std::size_t i = 0; i < 3072; ++i) bytes.push_back(static_cast<std::uint8_t>((r * 31 + i) % 251));
  }
  write_bytes(d / "b1.bin", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10 * 3073));
  write_bytes(d / "b2.bin", std::vector<std::uint8_t>(bytes.begin() + 10 * 3073, bytes.end()));
  const auto ten = load_cifar_bin({(d / "b1.bin").string()});
  CHECK(ten.size() == 10);
  CHECK(ten.images.shape() == Shape{10, 3, 32, 32});
  for (int y : ten.labels) CHECK((y >= 0 && y < 10));
  CHECK(ten.images[0] == bytes[1] / 255.0f);
  // G plane of record 0 starts 1024 bytes into its pixels
  CHECK(ten.images[1024] == bytes[1 + 1024] / 255.0f);

  const auto sub = load_cifar_bin({(d / "b1.bin").string(), (d / "b2.bin").string()}, 20);
  CHECK(sub.size() == 20);
  std::vector<int> per(10, 0);
  for (int y : sub.labels) ++per[static_cast<std::size_t>(y)];
  for (int c : per) CHECK(c == 2);
  // file order: subset entry 13 is record 13, the second image of class 3
  CHECK(sub.labels[13] == 3);
  CHECK(sub.images[13 * 3072] == bytes[13 * 3073 + 1] / 255.0f);

  write_bytes(d / "bad.bin", std::vector<std::uint8_t>(3073 + 5, 1));
  CHECK_THROWS_AS(load_cifar_bin({(d / "bad.bin").string()}), FormatError);
}

TEST_CASE("split_per_class and balanced_subset") {
  const auto ds = synth_dataset(60, 3, 1);
  const auto [train, test] = split_per_class(ds, 5);
  CHECK(test.size() == 15);
  CHECK(train.size() == 45);
  CHECK(test.split == Split::test);
  // first five of each class, in file order
  CHECK(test.labels[0] == 0);
  CHECK(test.labels[1] == 1);
  CHECK(bitwise_equal(gather_images<float>(test, std::vector<std::size_t>{0}),
                      gather_images<float>(ds, std::vector<std::size_t>{0})));
  const auto sub = balanced_subset(ds, 9);
  CHECK(sub.size() == 9);
  CHECK_THROWS_AS(balanced_subset(ds, 90), InputError);
}

TEST_CASE("synth_dataset: determinism and balance") {
  const auto a = synth_dataset(100, 4, 7);
  const auto b = synth_dataset(100, 4, 7);
  CHECK(bitwise_equal(a.images, b.images));
  CHECK(a.labels == b.labels);
  CHECK_FALSE(bitwise_equal(a.images, synth_dataset(100, 4, 8).images));
  std::vector<int> per(4, 0);
  for (int y : a.labels) ++per[static_cast<std::size_t>(y)];
  for (int c : per) CHECK(std::abs(c - 25) <= 1);
  CHECK_THROWS_AS(synth_dataset(2, 3, 1), ConfigError);
}

TEST_CASE("synth_dataset: noise-free blobs are learnable") {
  SynthOptions o;
  o.noise = 0.0;
  const auto ds = synth_dataset(120, 4, 3, o);
  const auto layers = nn::mlp_layers(ds.example_shape(), 4, {16});
  auto g = nn::init_graph<float>(layers, ds.example_shape(), 1);
  train::TrainConfig tc;
  tc.epochs = 20;
  tc.batch_size = 16;
  tc.weight_decay = 0.0;
  auto st = train::make_trainer_state<float>(tc);
  train::fit(g, ds, nullptr, tc, st);
  CHECK(train::evaluate(g, ds).accuracy == 1.0);
}

TEST_CASE("normalization: per-channel stats and round trip") {
  auto ds = synth_dataset(50, 2, 4, {3, 4, 4, 0.3});
  const auto raw = ds.images;
  const auto norm = compute_normalization(ds);
  REQUIRE(norm.mean.size() == 3);
  normalize(ds, norm);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t n = 0; n < 50; ++n)
      for (std::size_t i = 0; i < 16; ++i) m += ds.images[(n * 3 + c) * 16 + i];
    m /= 800;
    for (std::size_t n = 0; n < 50; ++n)
      for (std::size_t i = 0; i < 16; ++i) v += std::pow(ds.images[(n * 3 + c) * 16 + i] - m, 2);
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v / 800 - 1.0) < 1e-3);
  }
  denormalize(ds, norm);
  for (std::size_t i = 0; i < raw.numel(); ++i) CHECK(std::abs(ds.images[i] - raw[i]) < 1e-6);
}

TEST_CASE("normalization: train stats ignore the test split") {
  const auto ds = synth_dataset(60, 3, 1);
  auto [train, test] = split_per_class(ds, 5);
  const auto before = compute_normalization(train);
  for (auto& v : test.images.data()) v = 100.0f;
  const auto after = compute_normalization(train);
  CHECK(before.mean == after.mean);
  CHECK(before.stddev == after.stddev);
}

TEST_CASE("batches: counts, determinism and partition") {
  BatchPlan plan;
  plan.batch_size = 3;
  plan.seed = 9;
  plan.drop_last = true;
  CHECK(batches(10, plan, 0).size() == 3);
  plan.drop_last = false;
  const auto a = batches(10, plan, 2);
  CHECK(a.size() == 4);
  CHECK(a == batches(10, plan, 2));
  CHECK(a != batches(10, plan, 3));
  std::multiset<std::size_t> seen;
  for (const auto& b : a) seen.insert(b.begin(), b.end());
  CHECK(seen.size() == 10);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 10);
  plan.batch_size = 0;
  CHECK_THROWS_AS(batches(10, plan, 0), ConfigError);
}

TEST_CASE("validate rejects bad labels") {
  auto ds = synth_dataset(6, 3, 1);
  ds.labels[2] = 3;
  CHECK_THROWS_AS(ds.validate(), InputError);
  ds.labels.pop_back();
  CHECK_THROWS_AS(ds.validate(), InputError);
}

TEST_CASE("bundled MNIST subset") {
  const std::string root = BRIDGEPRUNE_SOURCE_DIR;
  const auto ds = load_idx(root + "/data/mnist5k/images-idx3-ubyte", root + "/data/mnist5k/labels-idx1-ubyte");
  CHECK(ds.size() == 5000);
  std::vector<int> per(10, 0);
  for (int y : ds.labels) ++per[static_cast<std::size_t>(y)];
  for (int c : per) CHECK(c == 500);
}
