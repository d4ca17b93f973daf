// Acceptance checks. `acceptance` runs all of them; `acceptance 3 5` runs a
// subset. Each prints one PASS/FAIL line; the exit code is nonzero if any fail.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bridgeprune/autodiff.hpp"
#include "bridgeprune/checkpoint.hpp"
#include "bridgeprune/data.hpp"
#include "bridgeprune/experiment.hpp"
#include "bridgeprune/metrics.hpp"
#include "bridgeprune/prune.hpp"
#include "bridgeprune/regularize.hpp"
#include "bridgeprune/rng.hpp"
#include "bridgeprune/train.hpp"

using namespace bridgeprune;
namespace fs = std::filesystem;
using reg::Method;

namespace {

const std::string kRoot = BRIDGEPRUNE_SOURCE_DIR;
const fs::path kWork = BRIDGEPRUNE_WORK_DIR;

// Directional comparisons: quarter-width tiny_vgg on the bundled MNIST subset.
const std::string kVggWidths = "8,8,16,16,32,32";
const std::string kVggBatch = "64";
const std::string kVggDecay = "0.98";
const std::string kResnetWidths = "4,8,16,32";
const std::string kResnetBatch = "64";
constexpr std::size_t kSeeds = 5;
const std::array<Method, 3> kMethods = {Method::none, Method::weight_dropout, Method::batch_bridgeout};
const std::vector<double> kDirectionalFractions = {0.3, 0.4, 0.5};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

const char* label(Method m) {
  switch (m) {
    case Method::none: return "backprop";
    case Method::weight_dropout: return "dropout";
    case Method::batch_bridgeout: return "batch_bridgeout";
  }
  return "?";
}

exp::ConfigMap mnist_config(const std::string& model, const std::string& widths,
                            const fs::path& out) {
  exp::ConfigMap m;
  m["model"] = model;
  m["model.widths"] = widths;
  m["data.format"] = "idx";
  m["data.images"] = kRoot + "/data/mnist5k/images-idx3-ubyte";
  m["data.labels"] = kRoot + "/data/mnist5k/labels-idx1-ubyte";
  m["data.test_per_class"] = "100";
  m["train.epochs"] = "30";
  m["out"] = out.string();
  return exp::resolve_config(m);
}

const exp::Splits& mnist_splits() {
  static const exp::Splits splits =
      exp::load_splits(exp::to_experiment(mnist_config("tiny_vgg", kVggWidths, kWork)));
  return splits;
}

// Trained weights for every (seed, method) cell; reuses checkpoints already
// on disk for the same config.
struct RunTable {
  std::map<std::pair<std::size_t, Method>, nn::Graph<float>> graphs;
  double seconds = 0.0;  // training time spent by this process
};

RunTable train_runs(const exp::ConfigMap& base) {
  RunTable runs;
  const auto& splits = mnist_splits();
  for (std::size_t seed = 1; seed <= kSeeds; ++seed) {
    auto cfg = base;
    cfg["seed"] = std::to_string(seed);
    const auto ec = exp::to_experiment(cfg);
    for (Method m : kMethods) {
      reg::PerturbationConfig pc = ec.grid.front();
      pc.method = m;
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = exp::train_cell(cfg, pc, splits, true);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      runs.graphs.emplace(std::pair{seed, m}, ckpt::load_checkpoint<float>(out.checkpoint).graph);
      runs.seconds += secs;
      std::cerr << "  trained " << label(m) << " seed " << seed << " in " << fmt(secs, 3) << " s\n";
    }
  }
  return runs;
}

exp::ConfigMap vgg_config() {
  auto cfg = mnist_config("tiny_vgg", kVggWidths, kWork / "vgg");
  cfg["train.batch_size"] = kVggBatch;
  cfg["train.lr_decay"] = kVggDecay;
  return cfg;
}

const RunTable& vgg_runs() {
  static const RunTable runs = train_runs(vgg_config());
  return runs;
}

// Zero-mode accuracy of each method at each fraction; a seed counts when
// batch_bridgeout beats (or, when not strict, matches) both baselines at all
// fractions.
Outcome directional(const RunTable& runs, bool strict) {
  const auto& test = mnist_splits().test;
  std::size_t wins = 0;
  std::ostringstream table;
  for (std::size_t seed = 1; seed <= kSeeds; ++seed) {
    bool seed_ok = true;
    table << "\n    seed " << seed << ":";
    for (double f : kDirectionalFractions) {
      std::map<Method, double> acc;
      for (Method m : kMethods) {
        const auto& g = runs.graphs.at({seed, m});
        const auto spec = prune::select_filters(prune::filter_l2_norms(g), f, prune::PruneMode::zero);
        acc[m] = metrics::accuracy(prune::zero_prune(g, spec), test);
      }
      const double bb = acc[Method::batch_bridgeout];
      for (Method m : {Method::none, Method::weight_dropout}) {
        seed_ok = seed_ok && (strict ? bb > acc[m] : bb >= acc[m]);
      }
      table << "  r=" << f << " bb/do/bp " << fmt(bb, 3) << "/" << fmt(acc[Method::weight_dropout], 3)
            << "/" << fmt(acc[Method::none], 3);
    }
    wins += seed_ok;
  }
  return {wins >= 4, std::to_string(wins) + "/5 seeds, " + fmt(runs.seconds, 4) + " s training" +
                         table.str()};
}

// ---------------------------------------------------------------------------

Outcome unbiased_perturbation() {
  constexpr std::size_t kTriples = 1000;
  constexpr std::size_t kSamples = 100000;
  Rng rng(20240601);
  std::vector<std::uint8_t> target(kSamples, 1), mask(kSamples);
  std::size_t mean_fail = 0, var_fail = 0;
  double worst_z = 0.0, worst_var = 0.0;
  for (std::size_t t = 0; t < kTriples; ++t) {
    const double p = 0.1 + 0.8 * rng.uniform();
    const double q = 2.0 - 2.0 * rng.uniform();  // (0, 2]
    const double w = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.01 + 1.99 * rng.uniform());
    for (auto& m : mask) m = rng.bernoulli(p);
    const Tensor<double> wt({kSamples}, w);
    const Tensor<double> out = reg::bridgeout_perturb(wt, mask, target, p, q);
    long double sum = 0.0L;
    for (double v : out.data()) sum += v;
    const double mean = static_cast<double>(sum / kSamples);
    long double ss = 0.0L;
    for (double v : out.data()) ss += (v - mean) * (v - mean);
    const double var = static_cast<double>(ss / (kSamples - 1));
    const double z = std::abs(mean - w) / std::sqrt(var / kSamples);
    const double expected = std::pow(std::abs(w), q) * (1.0 - p) / p;
    const double rel = std::abs(var - expected) / expected;
    worst_z = std::max(worst_z, z);
    worst_var = std::max(worst_var, rel);
    mean_fail += z > 4.0;
    var_fail += rel > 0.05;
  }
  return {mean_fail == 0 && var_fail == 0,
          "worst |mean-w|/SE " + fmt(worst_z) + ", worst variance error " + fmt(100 * worst_var) +
              "%, failures " + std::to_string(mean_fail) + "+" + std::to_string(var_fail)};
}

Outcome gradient_check() {
  const Shape in{1, 8, 8};
  const auto layers = nn::tiny_vgg_layers(in, 3, {4, 4, 8, 8, 16, 16});
  const std::size_t params = metrics::param_count(layers);
  data::SynthOptions so;
  so.height = so.width = 8;
  const auto ds = data::synth_dataset(8, 3, 11, so);
  std::vector<std::size_t> idx(8);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto x = data::gather_images<double>(ds, idx);
  const auto y = data::gather_labels(ds, idx);
  bool ok = params <= 5000;
  std::string detail = std::to_string(params) + " params;";
  for (Method m : kMethods) {
    auto g = nn::init_graph<double>(layers, in, 1);
    reg::PerturbationConfig pc;
    pc.method = m;
    reg::RegularizerState<double> rs(17);
    reg::begin_minibatch(g, pc, rs);
    nn::GradCheckOptions opt;
    opt.step = 1e-5;
    const auto rep = nn::grad_check(g, x, std::span<const int>(y), opt);
    reg::end_minibatch(g, pc, rs, {});
    double worst = 0.0;
    for (const auto& p : rep.params) worst = std::max(worst, p.max_relative_error);
    ok = ok && rep.passed();
    detail += std::string(" ") + label(m) + " " + fmt(worst, 3);
    for (const auto& f : rep.failing) detail += " [" + f + "]";
  }
  return {ok, detail};
}

Outcome hoyer_exactness() {
  bool ok = true;
  for (std::size_t d : {2, 3, 10, 1000}) {
    std::vector<double> one(d, 0.0), flat(d, 2.5);
    one[d / 2] = -4.0;
    ok = ok && metrics::hoyer<double>(one) == 1.0 && metrics::hoyer<double>(flat) == 0.0;
  }
  const std::vector<double> v34 = {3.0, 4.0};
  const double h34 = metrics::hoyer<double>(v34);
  ok = ok && std::abs(h34 - 0.034314) <= 1e-6;
  Rng rng(99);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(2 + rng.below(200));
    for (auto& e : x) e = rng.normal();
    const double c = std::pow(10.0, 6.0 * rng.uniform() - 3.0) * (rng.bernoulli(0.5) ? 1 : -1);
    std::vector<double> cx(x);
    for (auto& e : cx) e *= c;
    worst = std::max(worst, std::abs(metrics::hoyer<double>(x) - metrics::hoyer<double>(cx)));
  }
  ok = ok && worst < 1e-12;
  return {ok, "H([3,4]) = " + fmt(h34, 8) + ", worst scale deviation " + fmt(worst, 3)};
}

Outcome zero_remove_equivalence() {
  const Shape in{1, 28, 28};
  const auto layers = nn::tiny_vgg_layers(in, 10, exp::parse_sizes(kVggWidths));
  Rng rng(4242);
  double worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    auto g = nn::init_graph<float>(layers, in, 100 + t);
    for (const auto& l : g.layers) {
      if (l.kind == nn::LayerKind::conv2d) {
        for (auto& b : g.param(nn::bias_name(l)).data()) b = static_cast<float>(0.2 * rng.normal());
      }
      if (l.kind != nn::LayerKind::batchnorm2d) continue;
      for (auto& v : g.param(nn::bn_scale_name(l)).data()) v = static_cast<float>(0.5 + rng.uniform());
      for (auto& v : g.param(nn::bn_shift_name(l)).data()) v = static_cast<float>(0.3 * rng.normal());
      for (auto& v : g.param(nn::bn_mean_name(l)).data()) v = static_cast<float>(0.3 * rng.normal());
      for (auto& v : g.param(nn::bn_var_name(l)).data()) v = static_cast<float>(0.5 + rng.uniform());
    }
    const auto norms = prune::filter_l2_norms(g);
    std::vector<std::size_t> keep;
    for (const auto& ln : norms) keep.push_back(1 + rng.below(ln.norms.size()));
    const auto zeroed = prune::zero_prune(g, prune::select_filters(norms, keep, prune::PruneMode::zero));
    const auto removed =
        prune::structural_remove(g, prune::select_filters(norms, keep, prune::PruneMode::remove));
    worst = std::max(worst, prune::equivalence_check(zeroed, removed, 10, 100, 7 + t));
  }
  return {worst < 1e-5, "max output deviation " + fmt(worst, 3) + " over 50 specs x 1000 inputs"};
}

Outcome vgg_directional() { return directional(vgg_runs(), true); }

Outcome vgg_sparsity() {
  const auto& runs = vgg_runs();
  std::map<Method, std::vector<double>> mean;
  for (const auto& [key, g] : runs.graphs) {
    const auto rep = metrics::sparsity_report(g);
    auto& acc = mean[key.second];
    acc.resize(rep.size(), 0.0);
    for (std::size_t i = 0; i < rep.size(); ++i) acc[i] += rep[i].hoyer / kSeeds;
  }
  const auto& bb = mean[Method::batch_bridgeout];
  std::size_t top = 0;
  std::string detail;
  for (std::size_t i = 0; i < bb.size(); ++i) {
    const bool best = bb[i] > mean[Method::weight_dropout][i] && bb[i] > mean[Method::none][i];
    top += best;
    detail += " conv" + std::to_string(i + 1) + " " + fmt(bb[i], 3) + "/" +
              fmt(mean[Method::weight_dropout][i], 3) + "/" + fmt(mean[Method::none][i], 3);
  }
  return {4 * top >= 3 * bb.size(),
          std::to_string(top) + "/" + std::to_string(bb.size()) + " layers (bb/do/bp)" + detail};
}

Outcome resnet_directional() {
  auto cfg = mnist_config("tiny_resnet", kResnetWidths, kWork / "resnet");
  cfg["train.batch_size"] = kResnetBatch;
  return directional(train_runs(cfg), false);
}

Outcome overhead() {
  const auto& train = mnist_splits().train;
  bool ok = true;
  std::string detail;
  for (std::size_t width : {1024, 2048}) {
    const auto layers = nn::mlp_layers(train.example_shape(), train.classes, {width, width});
    std::vector<reg::PerturbationConfig> configs(2);
    configs[0].method = Method::weight_dropout;
    configs[1].method = Method::batch_bridgeout;
    train::TrainConfig base;
    base.batch_size = 128;
    base.lr = 0.01;
    const auto rows = metrics::regularizer_overhead_bench(layers, train, configs, 3, base);
    const double ratio = rows[1].seconds_per_epoch / rows[0].seconds_per_epoch;
    ok = ok && ratio <= 1.5;
    detail += " width " + std::to_string(width) + ": " + fmt(rows[1].seconds_per_epoch, 3) + " vs " +
              fmt(rows[0].seconds_per_epoch, 3) + " s (x" + fmt(ratio, 3) + ")";
  }
  return {ok, detail};
}

// Parameters of a tiny_vgg whose conv i keeps c[i] filters, counted from
// the layer recipe: conv weight+bias, four batchnorm vectors, classifier.
std::size_t vgg_closed_form(const std::vector<std::size_t>& c, std::size_t in_channels,
                            std::size_t spatial, std::size_t classes) {
  std::size_t total = 0, prev = in_channels;
  for (std::size_t k : c) {
    total += prev * k * 9 + k + 4 * k;
    prev = k;
  }
  return total + prev * spatial * classes + classes;
}

Outcome accounting() {
  const auto& runs = vgg_runs();
  const auto& test = mnist_splits().test;
  const auto widths = exp::parse_sizes(kVggWidths);
  const auto& any = runs.graphs.begin()->second;
  std::size_t spatial = 0;
  const auto shapes = nn::infer_shapes(any.layers, any.input_shape);
  for (std::size_t i = 0; i < any.layers.size(); ++i) {
    if (any.layers[i].kind == nn::LayerKind::flatten) spatial = shapes[i - 1][2] * shapes[i - 1][3];
  }
  bool ok = spatial > 0;
  std::string detail;
  for (Method m : kMethods) {
    const auto& g = runs.graphs.at({1, m});
    const auto norms = prune::filter_l2_norms(g);
    const auto base = metrics::cost_report(g, test, 3);
    for (int tenth = 0; tenth <= 9; ++tenth) {
      std::vector<std::size_t> kept;
      for (std::size_t w : widths) kept.push_back(w - (w * tenth) / 10);
      const std::size_t expected = vgg_closed_form(kept, 1, spatial, 10);
      const auto spec = prune::select_filters(norms, tenth / 10.0, prune::PruneMode::remove);
      const auto pg = prune::structural_remove(g, spec);
      const auto cr = metrics::cost_report(pg, test, 3, &base);
      std::size_t stored = 0;
      for (const auto& [name, t] : pg.params) stored += t.numel();
      const bool counts = cr.params == expected && stored == expected && cr.memory_bytes == 4 * expected;
      ok = ok && counts;
      if (!counts) {
        detail += " count mismatch at " + std::to_string(tenth * 10) + "%: expected " +
                  std::to_string(expected) + ", stored " + std::to_string(stored) + ", reported " +
                  std::to_string(cr.params) + ";";
      }
      if (tenth == 0 && cr.compression != 1.0) {
        ok = false;
        detail += " compression at 0% is " + fmt(cr.compression, 17) + ";";
      }
      if (tenth == 9) {
        const double acc = metrics::accuracy(pg, test);
        ok = ok && std::abs(acc - 0.1) <= 0.02;
        detail += std::string(" ") + label(m) + " 90%: " + std::to_string(cr.params) + " params, acc " +
                  fmt(acc, 3) + ";";
      }
    }
  }
  return {ok, detail};
}

std::map<std::string, std::string> checkpoint_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".ckpt") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[e.path().filename().string()] = ss.str();
  }
  return out;
}

Outcome determinism() {
  const fs::path root = kWork / "determinism";
  fs::remove_all(root);
  auto cfg_for = [&](const std::string& dir, const std::string& epochs) {
    auto cfg = mnist_config("tiny_vgg", kVggWidths, root / dir);
    cfg["train.epochs"] = epochs;
    cfg["train.batch_size"] = kVggBatch;
    return cfg;
  };
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  exp::cmd_train(cfg_for("a", "3"), 1, false);
  exp::cmd_train(cfg_for("b", "3"), 1, false);
  exp::cmd_train(cfg_for("straight", "4"), 1, false);
  exp::cmd_train(cfg_for("resumed", "2"), 1, false);
  exp::cmd_train(cfg_for("resumed", "4"), 1, true);
  std::cout.rdbuf(old);
  const auto a = checkpoint_bytes(root / "a"), b = checkpoint_bytes(root / "b");
  const auto s = checkpoint_bytes(root / "straight"), r = checkpoint_bytes(root / "resumed");
  const bool same_run = a.size() == 3 && a == b;
  const bool same_resume = s.size() == 3 && s == r;
  return {same_run && same_resume, std::string("repeat run ") + (same_run ? "identical" : "DIFFERS") +
                                       ", resume 2+2 vs 4 " + (same_resume ? "identical" : "DIFFERS")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  exp::tune_allocator();
  const std::vector<Criterion> all = {
      {1, "bridgeout perturbation is unbiased", unbiased_perturbation},
      {2, "gradient check on tiny_vgg, all regularizers", gradient_check},
      {3, "Hoyer measure exactness", hoyer_exactness},
      {4, "zero/remove pruning equivalence", zero_remove_equivalence},
      {5, "tiny_vgg pruning robustness ordering", vgg_directional},
      {6, "tiny_vgg per-layer sparsity ordering", vgg_sparsity},
      {7, "tiny_resnet pruning robustness ordering", resnet_directional},
      {8, "regularizer time overhead", overhead},
      {9, "pruned model cost accounting", accounting},
      {10, "training determinism and resume", determinism},
  };
  std::vector<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.push_back(std::atoi(argv[i]));
  fs::create_directories(kWork);
  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.id) == wanted.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << ": " << c.name << " ["
              << fmt(secs, 3) << " s] " << o.detail << std::endl;
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
