// bridgeprune: train / prune / retrain / report / gradcheck / bench
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bridgeprune/experiment.hpp"

using namespace bridgeprune;

namespace {

struct Common {
  std::string config;
  std::string seed;
  std::string out;
  std::string mode;
  std::string fractions;
  std::size_t jobs = 1;
  bool deterministic = true;
  bool resume = false;
  std::vector<std::string> positional;
};

// Splits `--key=value` pairs for known config keys out of argv.
std::vector<std::string> take_overrides(int argc, char** argv, exp::ConfigMap& overrides) {
  std::vector<std::string> rest;
  rest.emplace_back(argv[0]);
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    const auto eq = arg.find('=');
    if (arg.rfind("--", 0) == 0 && eq != std::string::npos) {
      const std::string key = arg.substr(2, eq - 2);
      if (key.find('.') != std::string::npos || exp::default_config().count(key)) {
        if (key != "seed" && key != "out" && key != "config" && key != "mode" &&
            key != "fractions" && key != "jobs" && key != "deterministic") {
          exp::set_key(overrides, key, arg.substr(eq + 1));
          continue;
        }
      }
    }
    rest.push_back(arg);
  }
  return rest;
}

exp::ConfigMap build_config(const Common& c, const exp::ConfigMap& overrides) {
  exp::ConfigMap cfg;
  if (!c.config.empty()) cfg = exp::load_config_file(c.config);
  for (const auto& [k, v] : overrides) cfg[k] = v;
  if (!c.seed.empty()) cfg["seed"] = c.seed;
  if (!c.out.empty()) cfg["out"] = c.out;
  if (!c.mode.empty()) cfg["prune.mode"] = c.mode;
  if (!c.fractions.empty()) cfg["prune.fractions"] = c.fractions;
  cfg["train.deterministic"] = c.deterministic ? "true" : "false";
  return exp::resolve_config(cfg);
}

}  // namespace

int main(int argc, char** argv) {
  exp::tune_allocator();
  exp::ConfigMap overrides;
  std::vector<std::string> args;
  try {
    args = take_overrides(argc, argv, overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exp::exit_code_for(e);
  }

  CLI::App app{"Batch Bridgeout training, filter pruning and reporting"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "flat key = value config file");
    sub->add_option("--seed", c.seed, "random seed");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--deterministic", c.deterministic, "deterministic mode (true/false)");
  };
  auto* train = app.add_subcommand("train", "train one checkpoint per regularizer");
  add_common(train);
  train->add_option("--jobs", c.jobs, "parallel worker processes");
  train->add_flag("--resume", c.resume, "continue from existing checkpoints");

  auto* prune = app.add_subcommand("prune", "prune sweep over filter fractions");
  add_common(prune);
  prune->add_option("--mode", c.mode, "zero or remove")->check(CLI::IsMember({"zero", "remove"}));
  prune->add_option("--fractions", c.fractions, "comma-separated fractions in [0,1)");
  prune->add_option("checkpoints", c.positional, "checkpoint files")->required();

  auto* retrain = app.add_subcommand("retrain", "retrain a removed checkpoint plus a scratch baseline");
  add_common(retrain);
  retrain->add_option("checkpoint", c.positional, "pruned checkpoint")->required()->expected(1);

  auto* report = app.add_subcommand("report", "figure data CSVs for a run directory");
  add_common(report);
  report->add_option("run_dir", c.positional, "directory with checkpoints")->required()->expected(1);

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck);

  auto* bench = app.add_subcommand("bench", "regularizer overhead benchmark");
  add_common(bench);

  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), const_cast<char**>(cargs.data()));
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const exp::ConfigMap cfg = build_config(c, overrides);
    if (*train) {
      exp::cmd_train(cfg, c.jobs, c.resume);
    } else if (*prune) {
      exp::cmd_prune(cfg, c.positional);
    } else if (*retrain) {
      exp::cmd_retrain(cfg, c.positional.front());
    } else if (*report) {
      exp::cmd_report(cfg, c.positional.front());
    } else if (*gradcheck) {
      return exp::cmd_gradcheck(cfg) ? 0 : 4;
    } else if (*bench) {
      exp::cmd_bench(cfg);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exp::exit_code_for(e);
  }
  return 0;
}
