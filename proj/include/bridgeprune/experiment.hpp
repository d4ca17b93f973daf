#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bridgeprune/checkpoint.hpp"
#include "bridgeprune/data.hpp"
#include "bridgeprune/prune.hpp"
#include "bridgeprune/train.hpp"

namespace bridgeprune::exp {

/// Flat key -> value map with dotted keys.
using ConfigMap = std::map<std::string, std::string>;

/// Every recognised key with its default value.
const ConfigMap& default_config();

/// Parses `key = value` lines; `#` starts a comment. Unknown keys throw
/// ConfigError naming the key (and line).
ConfigMap parse_config(const std::string& text);
ConfigMap load_config_file(const std::string& path);

/// Sets `key` after checking it is known.
void set_key(ConfigMap& cfg, const std::string& key, const std::string& value);

/// Defaults overlaid with `overrides`, validated.
ConfigMap resolve_config(const ConfigMap& overrides);

/// FNV-1a over the sorted key=value lines, excluding `seed` and `out`.
std::string config_hash(const ConfigMap& cfg);

struct ExperimentConfig {
  std::string model = "tiny_vgg";
  std::vector<std::size_t> widths;  // empty: model defaults
  std::string data_format = "idx";
  std::string data_images;
  std::string data_labels;
  std::vector<std::string> data_paths;
  std::size_t data_subset = 0;
  std::size_t test_per_class = 100;
  std::size_t synth_n = 600;
  std::size_t synth_classes = 3;
  std::size_t synth_size = 8;
  double synth_noise = 0.1;
  train::TrainConfig train;
  std::vector<reg::PerturbationConfig> grid;
  std::vector<double> fractions;
  prune::PruneMode prune_mode = prune::PruneMode::zero;
  std::size_t repetitions = 3;
  std::size_t retrain_epochs = 30;
  std::vector<std::size_t> bench_widths;
  std::size_t bench_epochs = 3;
  double bench_lr = 0.01;
  std::string out = "runs";
};

ExperimentConfig to_experiment(const ConfigMap& cfg);

/// Comma-separated list helpers.
std::vector<double> parse_doubles(const std::string& s);
std::vector<std::size_t> parse_sizes(const std::string& s);

/// Train and test splits, normalized with train statistics.
struct Splits {
  data::Dataset train;
  data::Dataset test;
};
Splits load_splits(const ExperimentConfig& cfg);

std::vector<nn::LayerSpec> build_layers(const ExperimentConfig& cfg, const Shape& example_shape,
                                        std::size_t classes);

/// "<method>_s<seed>"
std::string run_stem(reg::Method method, std::uint64_t seed);

struct TrainOutcome {
  std::string checkpoint;
  std::vector<train::CurveRow> curve;
};

/// Trains one (method, seed) cell and writes <stem>.ckpt, <stem>_curve.csv
/// and <stem>_timing.csv under cfg.out. With `resume`, continues from an
/// existing checkpoint of the same config.
TrainOutcome train_cell(const ConfigMap& cfg_map, const reg::PerturbationConfig& pert,
                        const Splits& splits, bool resume);

struct SweepRow {
  std::string method;
  double fraction = 0.0;
  double accuracy = 0.0;
  std::size_t params = 0;
  double memory_mb = 0.0;
  std::size_t macs = 0;
  double runtime_s = 0.0;
  double compression = 1.0;
  double speedup = 1.0;
};

/// Prunes `graph` at each fraction, evaluates and costs it. In remove mode
/// the pruned graphs are returned through `pruned` when non-null.
std::vector<SweepRow> prune_sweep(const nn::Graph<float>& graph, const std::string& method,
                                  const data::Dataset& test, const std::vector<double>& fractions,
                                  prune::PruneMode mode, std::size_t repetitions,
                                  std::vector<nn::Graph<float>>* pruned = nullptr);

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);
void write_curve_csv(const std::string& path, const std::vector<train::CurveRow>& rows);

/// Subcommands. Each returns normally on success and throws bridgeprune
/// errors otherwise.
void cmd_train(const ConfigMap& cfg, std::size_t jobs, bool resume);
void cmd_prune(const ConfigMap& cfg, const std::vector<std::string>& checkpoints);
void cmd_retrain(const ConfigMap& cfg, const std::string& checkpoint);
void cmd_report(const ConfigMap& cfg, const std::string& run_dir);
/// Returns true when every mode passes.
bool cmd_gradcheck(const ConfigMap& cfg);
void cmd_bench(const ConfigMap& cfg);

/// Process exit code for an exception: 2 config, 3 format, 4 numeric,
/// 5 unsupported structure, 1 anything else.
int exit_code_for(const std::exception& e);

/// Allocator settings that keep large tensor buffers out of mmap.
void tune_allocator();

}  // namespace bridgeprune::exp
