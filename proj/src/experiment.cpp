#include "bridgeprune/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <malloc.h>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "bridgeprune/metrics.hpp"

namespace bridgeprune::exp {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

std::size_t to_size(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  try {
    std::size_t used = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

bool to_bool(const ConfigMap& c, const std::string& key) {
  const std::string& v = c.at(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

std::string method_label(reg::Method m) {
  switch (m) {
    case reg::Method::none: return "backprop";
    case reg::Method::weight_dropout: return "dropout";
    case reg::Method::batch_bridgeout: return "batch_bridgeout";
  }
  return "?";
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) {
    fs::create_directories(parent);
  }
  ckpt::write_file_atomic(path, text);
}

// Config stored in a checkpoint: everything except the output location.
ConfigMap stored_config(const ConfigMap& cfg) {
  ConfigMap c = cfg;
  c.erase("out");
  return c;
}

template <typename T>
TrainOutcome train_cell_impl(const ConfigMap& cfg_map, const ExperimentConfig& cfg,
                             const reg::PerturbationConfig& pert, const Splits& splits,
                             bool resume) {
  train::TrainConfig tc = cfg.train;
  tc.perturbation = pert;
  tc.validate();
  const std::string stem = run_stem(pert.method, tc.seed);
  fs::create_directories(cfg.out);
  const std::string ckpt_path = (fs::path(cfg.out) / (stem + ".ckpt")).string();
  const std::string curve_path = (fs::path(cfg.out) / (stem + "_curve.csv")).string();
  const std::string timing_path = (fs::path(cfg.out) / (stem + "_timing.csv")).string();

  ConfigMap stored = stored_config(cfg_map);
  stored["reg.method"] = reg::to_string(pert.method);

  ckpt::Checkpoint<T> ck;
  train::TrainerState<T> state = train::make_trainer_state<T>(tc);
  std::vector<train::CurveRow> rows;
  bool resumed = false;
  if (resume && fs::exists(ckpt_path)) {
    ck = ckpt::load_checkpoint<T>(ckpt_path);
    ConfigMap prev = ck.config;
    prev.erase("train.epochs");
    ConfigMap now = stored;
    now.erase("train.epochs");
    if (prev != now) throw ConfigError("cannot resume '" + ckpt_path + "': config differs");
    state.optimizer = ck.optimizer;
    state.regularizer.rng.set_state(ck.rng_state);
    state.epoch = ck.epoch;
    resumed = true;
    // earlier rows of the curve
    std::ifstream in(curve_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line) && rows.size() < ck.epoch) {
      std::stringstream ss(line);
      train::CurveRow r;
      char comma = 0;
      ss >> r.epoch >> comma >> r.train_loss >> comma >> r.val_loss >> comma >> r.train_acc >>
          comma >> r.val_acc >> comma >> r.lr;
      rows.push_back(r);
    }
  } else {
    ck.graph = nn::init_graph<T>(build_layers(cfg, splits.train.example_shape(),
                                              splits.train.classes),
                                 splits.train.example_shape(), tc.seed);
  }
  ck.config = stored;
  ck.meta["method"] = method_label(pert.method);
  ck.meta["seed"] = std::to_string(tc.seed);
  ck.meta["config_hash"] = config_hash(cfg_map);

  std::string timing = "epoch,seconds\n";
  if (resumed && fs::exists(timing_path)) {
    std::ifstream in(timing_path);
    std::string line;
    std::getline(in, line);
    for (std::size_t i = 0; i < ck.epoch && std::getline(in, line); ++i) timing += line + "\n";
  }
  auto save = [&]() {
    ck.optimizer = state.optimizer;
    ck.epoch = state.epoch;
    ck.rng_state = state.regularizer.rng.state();
    ckpt::save_checkpoint(ckpt_path, ck);
    write_curve_csv(curve_path, rows);
    write_text(timing_path, timing);
  };
  train::fit(ck.graph, splits.train, &splits.test, tc, state, [&](const train::CurveRow& r) {
    rows.push_back(r);
    timing += std::to_string(r.epoch) + "," + fmt(r.seconds) + "\n";
    save();
  });
  save();
  return {ckpt_path, rows};
}

template <typename T>
std::vector<train::CurveRow> retrain_graph(nn::Graph<T>& graph, const train::TrainConfig& tc,
                                           const Splits& splits) {
  auto state = train::make_trainer_state<T>(tc);
  return train::fit(graph, splits.train, &splits.test, tc, state);
}

}  // namespace

const ConfigMap& default_config() {
  static const ConfigMap defaults = {
      {"model", "tiny_vgg"},
      {"model.widths", ""},
      {"data.format", "idx"},
      {"data.images", "data/mnist5k/images-idx3-ubyte"},
      {"data.labels", "data/mnist5k/labels-idx1-ubyte"},
      {"data.paths", ""},
      {"data.subset", "0"},
      {"data.test_per_class", "100"},
      {"data.synth_n", "600"},
      {"data.synth_classes", "3"},
      {"data.synth_size", "8"},
      {"data.synth_noise", "0.1"},
      {"train.epochs", "30"},
      {"train.batch_size", "128"},
      {"train.lr", "0.1"},
      {"train.lr_decay", "0.98"},
      {"train.momentum", "0.9"},
      {"train.weight_decay", "0.0005"},
      {"train.numeric", "f32"},
      {"train.deterministic", "true"},
      {"seed", "1"},
      {"reg.methods", "backprop,dropout,batch_bridgeout"},
      {"reg.method", ""},
      {"reg.p", "0.3"},
      {"reg.q", "1.5"},
      {"reg.gamma", "0.75"},
      {"reg.grad_mode", "straight_through"},
      {"reg.epsilon_q", "1e-8"},
      {"prune.fractions", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"},
      {"prune.mode", "zero"},
      {"prune.repetitions", "3"},
      {"retrain.epochs", "30"},
      {"bench.widths", "1024,2048"},
      {"bench.epochs", "3"},
      {"bench.lr", "0.01"},
      {"out", "runs"},
  };
  return defaults;
}

void set_key(ConfigMap& cfg, const std::string& key, const std::string& value) {
  if (!default_config().count(key)) throw ConfigError("unknown config key '" + key + "'");
  cfg[key] = value;
}

ConfigMap parse_config(const std::string& text) {
  ConfigMap out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!default_config().count(key)) {
      throw ConfigError("unknown config key '" + key + "' (line " + std::to_string(lineno) + ")");
    }
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

ConfigMap resolve_config(const ConfigMap& overrides) {
  ConfigMap c = default_config();
  for (const auto& [k, v] : overrides) set_key(c, k, v);
  to_experiment(c);  // validates
  return c;
}

std::string config_hash(const ConfigMap& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [k, v] : cfg) {
    if (k == "seed" || k == "out") continue;
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    ConfigMap tmp{{"value", item}};
    out.push_back(to_double(tmp, "value"));
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) {
    ConfigMap tmp{{"value", item}};
    out.push_back(to_size(tmp, "value"));
  }
  return out;
}

ExperimentConfig to_experiment(const ConfigMap& c_in) {
  ConfigMap c = default_config();
  for (const auto& [k, v] : c_in) set_key(c, k, v);
  ExperimentConfig e;
  e.model = c["model"];
  if (e.model != "tiny_vgg" && e.model != "tiny_resnet" && e.model != "mlp") {
    throw ConfigError("model must be tiny_vgg, tiny_resnet or mlp, got '" + e.model + "'");
  }
  e.widths = parse_sizes(c["model.widths"]);
  e.data_format = c["data.format"];
  if (e.data_format != "idx" && e.data_format != "cifar" && e.data_format != "synth") {
    throw ConfigError("data.format must be idx, cifar or synth");
  }
  e.data_images = c["data.images"];
  e.data_labels = c["data.labels"];
  e.data_paths = split_list(c["data.paths"]);
  e.data_subset = to_size(c, "data.subset");
  e.test_per_class = to_size(c, "data.test_per_class");
  e.synth_n = to_size(c, "data.synth_n");
  e.synth_classes = to_size(c, "data.synth_classes");
  e.synth_size = to_size(c, "data.synth_size");
  e.synth_noise = to_double(c, "data.synth_noise");

  e.train.epochs = to_size(c, "train.epochs");
  e.train.batch_size = to_size(c, "train.batch_size");
  e.train.lr = to_double(c, "train.lr");
  e.train.lr_decay = to_double(c, "train.lr_decay");
  e.train.momentum = to_double(c, "train.momentum");
  e.train.weight_decay = to_double(c, "train.weight_decay");
  const std::string numeric = c["train.numeric"];
  if (numeric == "f32") {
    e.train.numeric = train::NumericMode::f32;
  } else if (numeric == "f64") {
    e.train.numeric = train::NumericMode::f64;
  } else {
    throw ConfigError("train.numeric must be f32 or f64");
  }
  e.train.deterministic = to_bool(c, "train.deterministic");
  e.train.seed = to_size(c, "seed");

  reg::PerturbationConfig base;
  base.p = to_double(c, "reg.p");
  base.q = to_double(c, "reg.q");
  base.gamma = to_double(c, "reg.gamma");
  base.grad_mode = reg::grad_mode_from_string(c["reg.grad_mode"]);
  base.epsilon_q = to_double(c, "reg.epsilon_q");
  const std::string methods = c["reg.method"].empty() ? c["reg.methods"] : c["reg.method"];
  for (const auto& m : split_list(methods)) {
    reg::PerturbationConfig pc = base;
    pc.method = reg::method_from_string(m);
    pc.validate();
    e.grid.push_back(pc);
  }
  if (e.grid.empty()) throw ConfigError("reg.methods must list at least one method");
  e.train.perturbation = e.grid.front();
  e.train.validate();

  e.fractions = parse_doubles(c["prune.fractions"]);
  for (double f : e.fractions) {
    if (!(f >= 0.0 && f < 1.0)) throw ConfigError("prune fractions must lie in [0,1)");
  }
  e.prune_mode = prune::prune_mode_from_string(c["prune.mode"]);
  e.repetitions = to_size(c, "prune.repetitions");
  if (e.repetitions < 3) throw ConfigError("prune.repetitions must be >= 3");
  e.retrain_epochs = to_size(c, "retrain.epochs");
  e.bench_widths = parse_sizes(c["bench.widths"]);
  e.bench_epochs = to_size(c, "bench.epochs");
  e.bench_lr = to_double(c, "bench.lr");
  if (!(e.bench_lr > 0.0)) throw ConfigError("bench.lr must be positive");
  e.out = c["out"];
  return e;
}

Splits load_splits(const ExperimentConfig& cfg) {
  data::Dataset full;
  if (cfg.data_format == "idx") {
    full = data::load_idx(cfg.data_images, cfg.data_labels);
    if (cfg.data_subset) full = data::balanced_subset(full, cfg.data_subset);
  } else if (cfg.data_format == "cifar") {
    if (cfg.data_paths.empty()) throw ConfigError("data.paths is empty for cifar");
    full = data::load_cifar_bin(cfg.data_paths, cfg.data_subset);
  } else {
    data::SynthOptions so;
    so.height = so.width = cfg.synth_size;
    so.noise = cfg.synth_noise;
    full = data::synth_dataset(cfg.synth_n, cfg.synth_classes, 0x5e7, so);
  }
  auto [tr, te] = data::split_per_class(full, cfg.test_per_class);
  const auto norm = data::compute_normalization(tr);
  data::normalize(tr, norm);
  data::normalize(te, norm);
  return {std::move(tr), std::move(te)};
}

std::vector<nn::LayerSpec> build_layers(const ExperimentConfig& cfg, const Shape& example_shape,
                                        std::size_t classes) {
  return nn::model_layers(cfg.model, example_shape, classes, cfg.widths);
}

std::string run_stem(reg::Method method, std::uint64_t seed) {
  return method_label(method) + "_s" + std::to_string(seed);
}

TrainOutcome train_cell(const ConfigMap& cfg_map, const reg::PerturbationConfig& pert,
                        const Splits& splits, bool resume) {
  const ExperimentConfig cfg = to_experiment(cfg_map);
  if (cfg.train.numeric == train::NumericMode::f64) {
    return train_cell_impl<double>(cfg_map, cfg, pert, splits, resume);
  }
  return train_cell_impl<float>(cfg_map, cfg, pert, splits, resume);
}

std::vector<SweepRow> prune_sweep(const nn::Graph<float>& graph, const std::string& method,
                                  const data::Dataset& test, const std::vector<double>& fractions,
                                  prune::PruneMode mode, std::size_t repetitions,
                                  std::vector<nn::Graph<float>>* pruned) {
  if (mode == prune::PruneMode::remove && nn::has_residual(graph.layers)) {
    throw UnsupportedStructureError("remove mode is not supported for residual models");
  }
  const auto norms = prune::filter_l2_norms(graph);
  const metrics::CostReport base = metrics::cost_report(graph, test, repetitions);
  std::vector<SweepRow> rows;
  for (double f : fractions) {
    const prune::PruneSpec spec = prune::select_filters(norms, f, mode);
    const nn::Graph<float> g = mode == prune::PruneMode::zero ? prune::zero_prune(graph, spec)
                                                              : prune::structural_remove(graph, spec);
    const metrics::CostReport cr = metrics::cost_report(g, test, repetitions, &base);
    SweepRow r;
    r.method = method;
    r.fraction = f;
    r.accuracy = metrics::accuracy(g, test);
    r.params = cr.params;
    r.memory_mb = static_cast<double>(cr.memory_bytes) / (1024.0 * 1024.0);
    r.macs = cr.macs;
    r.runtime_s = cr.runtime_s;
    r.compression = cr.compression;
    r.speedup = cr.speedup;
    rows.push_back(r);
    if (pruned) pruned->push_back(g);
  }
  return rows;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::string s = "method,fraction,accuracy,params,memory_mb,macs,runtime_s,compression,speedup\n";
  for (const auto& r : rows) {
    s += r.method + "," + fmt(r.fraction) + "," + fmt(r.accuracy) + "," + std::to_string(r.params) +
         "," + fmt(r.memory_mb) + "," + std::to_string(r.macs) + "," + fmt(r.runtime_s) + "," +
         fmt(r.compression) + "," + fmt(r.speedup) + "\n";
  }
  write_text(path, s);
}

void write_curve_csv(const std::string& path, const std::vector<train::CurveRow>& rows) {
  std::string s = "epoch,train_loss,val_loss,train_acc,val_acc,lr\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss,
                  r.val_loss, r.train_acc, r.val_acc, r.lr);
    s += buf;
  }
  write_text(path, s);
}

void cmd_train(const ConfigMap& cfg_map, std::size_t jobs, bool resume) {
  const ExperimentConfig cfg = to_experiment(cfg_map);
  const Splits splits = load_splits(cfg);
  if (jobs <= 1 || cfg.grid.size() == 1) {
    for (const auto& pc : cfg.grid) {
      const auto out = train_cell(cfg_map, pc, splits, resume);
      std::cout << out.checkpoint << "\n";
    }
    return;
  }
  // one worker process per (method) cell, at most `jobs` at a time
  std::vector<pid_t> running;
  int failed = 0;
  auto reap_one = [&]() {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid < 0) return;
    running.erase(std::remove(running.begin(), running.end(), pid), running.end());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      failed = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    }
  };
  for (const auto& pc : cfg.grid) {
    while (running.size() >= jobs) reap_one();
    std::cout.flush();
    const pid_t pid = ::fork();
    if (pid < 0) throw std::runtime_error("fork failed");
    if (pid == 0) {
      int code = 0;
      try {
        const auto out = train_cell(cfg_map, pc, splits, resume);
        std::cout << out.checkpoint << "\n";
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        code = exit_code_for(e);
      }
      std::cout.flush();
      ::_exit(code);
    }
    running.push_back(pid);
  }
  while (!running.empty()) reap_one();
  if (failed == 2) throw ConfigError("a training worker failed");
  if (failed == 3) throw FormatError("a training worker failed");
  if (failed == 4) throw NumericError("a training worker failed");
  if (failed != 0) throw std::runtime_error("a training worker failed");
}

void cmd_prune(const ConfigMap& cfg_map, const std::vector<std::string>& checkpoints) {
  if (checkpoints.empty()) throw ConfigError("prune needs at least one checkpoint");
  for (const auto& path : checkpoints) {
    const auto ck = ckpt::load_checkpoint<float>(path);
    ConfigMap data_cfg = cfg_map;
    for (const auto& [k, v] : ck.config) {
      if (k.rfind("data.", 0) == 0) data_cfg[k] = v;
    }
    const ExperimentConfig cfg = to_experiment(data_cfg);
    const Splits splits = load_splits(cfg);
    const std::string method = ck.meta.count("method") ? ck.meta.at("method") : "unknown";
    std::vector<nn::Graph<float>> pruned;
    const auto rows = prune_sweep(ck.graph, method, splits.test, cfg.fractions, cfg.prune_mode,
                                  cfg.repetitions,
                                  cfg.prune_mode == prune::PruneMode::remove ? &pruned : nullptr);
    const std::string stem = fs::path(path).stem().string();
    fs::create_directories(cfg.out);
    const std::string csv = (fs::path(cfg.out) / (stem + "_sweep_" +
                                                  prune::to_string(cfg.prune_mode) + ".csv"))
                                .string();
    write_sweep_csv(csv, rows);
    std::cout << csv << "\n";
    for (std::size_t i = 0; i < pruned.size(); ++i) {
      ckpt::Checkpoint<float> out;
      out.graph = pruned[i];
      out.config = ck.config;
      out.meta = ck.meta;
      out.meta["prune_mode"] = "remove";
      out.meta["prune_fraction"] = fmt(cfg.fractions[i]);
      out.rng_state = ck.rng_state;
      out.epoch = ck.epoch;
      char name[64];
      std::snprintf(name, sizeof name, "_pruned%02d.ckpt",
                    static_cast<int>(std::lround(cfg.fractions[i] * 100)));
      const std::string p = (fs::path(cfg.out) / (stem + name)).string();
      ckpt::save_checkpoint(p, out);
      std::cout << p << "\n";
    }
  }
}

void cmd_retrain(const ConfigMap& cfg_map, const std::string& checkpoint) {
  auto ck = ckpt::load_checkpoint<float>(checkpoint);
  const auto mode = ck.meta.find("prune_mode");
  if (mode == ck.meta.end() || mode->second != "remove") {
    throw ConfigError("retrain needs a structurally removed checkpoint (prune --mode remove); '" +
                      checkpoint + "' is not one");
  }
  ConfigMap merged = cfg_map;
  for (const auto& [k, v] : ck.config) {
    if (k.rfind("data.", 0) == 0) merged[k] = v;
  }
  const ExperimentConfig cfg = to_experiment(merged);
  const Splits splits = load_splits(cfg);
  train::TrainConfig tc = cfg.train;
  tc.perturbation = reg::PerturbationConfig{};
  tc.epochs = cfg.retrain_epochs;

  const double pruned_acc = metrics::accuracy(ck.graph, splits.test);
  nn::Graph<float> retrained = ck.graph;
  const auto curve = retrain_graph(retrained, tc, splits);
  nn::Graph<float> scratch =
      nn::init_graph<float>(ck.graph.layers, ck.graph.input_shape, tc.seed);
  const auto scratch_curve = retrain_graph(scratch, tc, splits);

  const std::string stem = fs::path(checkpoint).stem().string();
  fs::create_directories(cfg.out);
  ckpt::Checkpoint<float> out;
  out.graph = retrained;
  out.config = ck.config;
  out.meta = ck.meta;
  out.meta["retrain_epochs"] = std::to_string(tc.epochs);
  out.epoch = tc.epochs;
  ckpt::save_checkpoint((fs::path(cfg.out) / (stem + "_retrained.ckpt")).string(), out);
  write_curve_csv((fs::path(cfg.out) / (stem + "_retrain_curve.csv")).string(), curve);
  write_curve_csv((fs::path(cfg.out) / (stem + "_scratch_curve.csv")).string(), scratch_curve);
  std::string summary = "variant,fraction,accuracy\n";
  const std::string frac = ck.meta.count("prune_fraction") ? ck.meta.at("prune_fraction") : "";
  summary += "pruned," + frac + "," + fmt(pruned_acc) + "\n";
  summary += "retrained," + frac + "," + fmt(metrics::accuracy(retrained, splits.test)) + "\n";
  summary += "scratch," + frac + "," + fmt(metrics::accuracy(scratch, splits.test)) + "\n";
  const std::string summary_path = (fs::path(cfg.out) / (stem + "_retrain.csv")).string();
  write_text(summary_path, summary);
  std::cout << summary_path << "\n";
}

void cmd_report(const ConfigMap& cfg_map, const std::string& run_dir) {
  struct Run {
    std::string path;
    std::string method;
    ckpt::Checkpoint<float> ck;
  };
  std::vector<Run> runs;
  std::vector<std::string> skipped;
  if (!fs::is_directory(run_dir)) throw ConfigError("'" + run_dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    try {
      auto ck = ckpt::load_checkpoint<float>(f.string());
      if (ck.meta.count("prune_mode") || ck.meta.count("retrain_epochs")) continue;
      const std::string method = ck.meta.count("method") ? ck.meta.at("method") : "unknown";
      runs.push_back({f.string(), method, std::move(ck)});
    } catch (const FormatError& e) {
      skipped.push_back(f.string() + " (" + e.what() + ")");
    }
  }
  for (const auto& s : skipped) std::cerr << "warning: skipped " << s << "\n";
  if (runs.empty()) throw ConfigError("no trained checkpoints found in '" + run_dir + "'");

  // per (method, layer): averages over seeds
  std::map<std::string, std::map<std::string, std::vector<double>>> hoyer;
  std::map<std::string, std::map<std::string, std::vector<std::vector<double>>>> curves;
  std::map<std::string, std::map<double, std::vector<double>>> acc;
  std::vector<std::string> layer_order;
  ConfigMap merged = cfg_map;
  for (const auto& [k, v] : runs.front().ck.config) {
    if (k.rfind("data.", 0) == 0) merged[k] = v;
  }
  const ExperimentConfig cfg = to_experiment(merged);
  const Splits splits = load_splits(cfg);
  for (const auto& r : runs) {
    for (const auto& s : metrics::sparsity_report(r.ck.graph)) {
      if (std::find(layer_order.begin(), layer_order.end(), s.layer) == layer_order.end()) {
        layer_order.push_back(s.layer);
      }
      hoyer[r.method][s.layer].push_back(s.hoyer);
    }
    const auto norms = prune::filter_l2_norms(r.ck.graph);
    for (const auto& c : metrics::sorted_norm_curve(norms)) {
      curves[r.method][c.layer].push_back(c.norms);
    }
    for (double f : cfg.fractions) {
      const auto spec = prune::select_filters(norms, f, prune::PruneMode::zero);
      acc[r.method][f].push_back(metrics::accuracy(prune::zero_prune(r.ck.graph, spec), splits.test));
    }
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  const fs::path out = run_dir;
  std::string sp = "layer,method,hoyer\n";
  for (const auto& layer : layer_order) {
    for (const auto& [method, per_layer] : hoyer) {
      if (per_layer.count(layer)) sp += layer + "," + method + "," + fmt(mean(per_layer.at(layer))) + "\n";
    }
  }
  write_text((out / "sparsity_per_layer.csv").string(), sp);

  std::string nc = "layer,method,rank_fraction,l2_norm\n";
  for (const auto& layer : layer_order) {
    for (const auto& [method, per_layer] : curves) {
      if (!per_layer.count(layer)) continue;
      const auto& seeds = per_layer.at(layer);
      const std::size_t n = seeds.front().size();
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> v;
        for (const auto& s : seeds) v.push_back(s[i]);
        const double rank = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
        nc += layer + "," + method + "," + fmt(rank) + "," + fmt(mean(v)) + "\n";
      }
    }
  }
  write_text((out / "norm_curves.csv").string(), nc);

  std::string av = "method,fraction,accuracy\n";
  for (const auto& [method, per_f] : acc) {
    for (const auto& [f, v] : per_f) av += method + "," + fmt(f) + "," + fmt(mean(v)) + "\n";
  }
  write_text((out / "accuracy_vs_pruning.csv").string(), av);

  std::string ov = "method,seconds_per_epoch\n";
  std::map<std::string, std::vector<double>> per_method;
  for (const auto& r : runs) {
    fs::path timing = r.path;
    timing.replace_extension();
    timing += "_timing.csv";
    std::ifstream in(timing);
    if (!in) {
      std::cerr << "warning: no timing file for " << r.path << "\n";
      continue;
    }
    std::string line;
    std::getline(in, line);
    std::vector<double> secs;
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma != std::string::npos) secs.push_back(std::stod(line.substr(comma + 1)));
    }
    if (secs.empty()) continue;
    std::nth_element(secs.begin(), secs.begin() + static_cast<std::ptrdiff_t>(secs.size() / 2),
                     secs.end());
    per_method[r.method].push_back(secs[secs.size() / 2]);
  }
  for (const auto& [method, v] : per_method) ov += method + "," + fmt(mean(v)) + "\n";
  write_text((out / "overhead.csv").string(), ov);
  for (const char* f : {"sparsity_per_layer.csv", "norm_curves.csv", "accuracy_vs_pruning.csv",
                        "overhead.csv"}) {
    std::cout << (out / f).string() << "\n";
  }
}

bool cmd_gradcheck(const ConfigMap& cfg_map) {
  const ExperimentConfig cfg = to_experiment(cfg_map);
  // a small tiny_vgg on 8x8 inputs, float64 throughout
  const Shape in{1, 8, 8};
  const auto layers = nn::tiny_vgg_layers(in, 3, {4, 4, 8, 8});
  data::SynthOptions so;
  const auto ds = data::synth_dataset(6, 3, cfg.train.seed, so);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
  const Tensor<double> x = data::gather_images<double>(ds, idx);
  const std::vector<int> y = data::gather_labels(ds, idx);
  bool all = true;
  for (auto method : {reg::Method::none, reg::Method::weight_dropout, reg::Method::batch_bridgeout}) {
    auto g = nn::init_graph<double>(layers, in, cfg.train.seed);
    reg::PerturbationConfig pc = cfg.grid.front();
    pc.method = method;
    pc.grad_mode = reg::GradMode::straight_through;
    reg::RegularizerState<double> rs(mix_seed(cfg.train.seed, 0x7e6));
    reg::begin_minibatch(g, pc, rs);
    nn::GradCheckOptions opt;
    opt.step = 1e-5;
    const auto rep = nn::grad_check(g, x, std::span<const int>(y), opt);
    reg::end_minibatch(g, pc, rs, {});
    double worst = 0.0;
    for (const auto& p : rep.params) worst = std::max(worst, p.max_relative_error);
    std::cout << method_label(method) << " max_relative_error=" << fmt(worst)
              << (rep.passed() ? " PASS" : " FAIL") << "\n";
    for (const auto& f : rep.failing) std::cout << "  failing: " << f << "\n";
    all = all && rep.passed();
  }
  return all;
}

void cmd_bench(const ConfigMap& cfg_map) {
  const ExperimentConfig cfg = to_experiment(cfg_map);
  const Splits splits = load_splits(cfg);
  std::string csv = "width,method,seconds_per_epoch,ratio_to_dropout\n";
  for (std::size_t width : cfg.bench_widths) {
    const auto layers =
        nn::mlp_layers(splits.train.example_shape(), splits.train.classes, {width, width});
    std::vector<reg::PerturbationConfig> configs;
    for (auto m : {reg::Method::none, reg::Method::weight_dropout, reg::Method::batch_bridgeout}) {
      reg::PerturbationConfig pc = cfg.grid.front();
      pc.method = m;
      configs.push_back(pc);
    }
    train::TrainConfig base = cfg.train;
    base.lr = cfg.bench_lr;
    const auto rows =
        metrics::regularizer_overhead_bench(layers, splits.train, configs, cfg.bench_epochs, base);
    double dropout = 0.0;
    for (const auto& r : rows) {
      if (r.method == reg::Method::weight_dropout) dropout = r.seconds_per_epoch;
    }
    for (const auto& r : rows) {
      csv += std::to_string(width) + "," + method_label(r.method) + "," + fmt(r.seconds_per_epoch) +
             "," + fmt(dropout > 0 ? r.seconds_per_epoch / dropout : 0.0) + "\n";
    }
  }
  fs::create_directories(cfg.out);
  const std::string path = (fs::path(cfg.out) / "overhead_bench.csv").string();
  write_text(path, csv);
  std::cout << csv;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const PruneSpecError*>(&e)) return 2;
  if (dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  if (dynamic_cast<const UnsupportedStructureError*>(&e)) return 5;
  return 1;
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

}  // namespace bridgeprune::exp
