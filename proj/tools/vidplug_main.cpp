// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "vidplug/config.hpp"
#include "vidplug/errors.hpp"
#include "vidplug/experiments.hpp"

using namespace vidplug;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("config", c.config, "preset name or INI file")->required();
  cmd->add_option("--set", c.overrides, "override one key: section.key=value (repeatable)");
  cmd->add_option("--out", c.out_dir, "shorthand for --set output.dir=DIR");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  for (const std::string& o : c.overrides) apply_override(cfg, o);
  if (!c.out_dir.empty()) cfg.output.dir = c.out_dir;
  cfg.validate();
  return cfg;
}

std::string eval_record(const EvalResult& r) {
  return fmt::format(R"({{"record":"eval","split":"val","loss":{},"metric":"{}","value":{}}})", r.loss,
                     to_string(r.metric), r.value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Plug-in adapters for frozen video transformers: train, evaluate, account, check, ablate."};
  app.require_subcommand(1);

  Common train_opts, eval_opts, params_opts, grad_opts, ablate_opts, config_opts;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "train plugins on synthetic data; writes metrics, checkpoint, summary");
  add_common(train, train_opts);
  train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "val-split metric of a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file (default: output.dir/output.checkpoint)");

  bool params_json = false;
  auto* params = app.add_subcommand("params", "parameter and FLOP accounting without allocating weights");
  add_common(params, params_opts);
  params->add_flag("--json", params_json, "print only the structured record");

  std::string corrupt;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every plugin op at 64-bit precision");
  add_common(grad, grad_opts);
  grad->add_option("--corrupt", corrupt, "test fixture: scale the backward of this op by 1.01");

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "train each variant of one ablation axis and tabulate");
  add_common(ablate, ablate_opts);
  ablate->add_option("--axis", axis, "c1 | a1 (caa-blocks) | b1 (adapters-on-caa) | fusion")->required();

  bool keys = false;
  auto* config = app.add_subcommand("config", "print the resolved config in canonical form");
  config->add_option("config", config_opts.config, "preset name or INI file");
  config->add_option("--set", config_opts.overrides, "override one key: section.key=value (repeatable)");
  config->add_flag("--keys", keys, "list every accepted key with its meaning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_code::ok : exit_code::config;
  }

  try {
    if (*train) {
      const ExperimentConfig cfg = resolve(train_opts);
      const TrainArtifacts a = cmd_train(cfg, quiet ? nullptr : &std::cerr);
      std::ifstream summary(a.summary);
      std::cout << summary.rdbuf();
    } else if (*eval) {
      const ExperimentConfig cfg = resolve(eval_opts);
      const std::filesystem::path ckpt = checkpoint.empty() ? cfg.output.checkpoint_path() : std::filesystem::path(checkpoint);
      const std::string record = eval_record(cmd_eval(cfg, ckpt));
      std::filesystem::create_directories(cfg.output.dir);
      std::ofstream(std::filesystem::path(cfg.output.dir) / "eval.json") << record << '\n';
      std::cout << record << '\n';
    } else if (*params) {
      const ParamReport r = cmd_params(resolve(params_opts));
      if (!params_json) std::cout << r.to_table();
      std::cout << r.to_json() << '\n';
    } else if (*grad) {
      const std::vector<GradCheckRow> rows = cmd_gradcheck(resolve(grad_opts), corrupt);
      std::cout << gradcheck_table(rows);
      for (const GradCheckRow& r : rows) {
        if (!r.pass) return exit_code::failure;
      }
    } else if (*ablate) {
      const AblationTable t = cmd_ablate(resolve(ablate_opts), axis, &std::cerr);
      std::cout << t.to_table();
    } else if (*config) {
      if (keys) {
        for (const ConfigKey& k : config_keys()) std::cout << fmt::format("{}.{:<22} {}\n", k.section, k.key, k.doc);
      } else {
        if (config_opts.config.empty()) throw ConfigError("config needs a preset name or INI file", "config");
        std::cout << serialize_config(resolve(config_opts));
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << fmt::format("config error [{}]: {}\n", e.key(), e.what());
    return exit_code::config;
  } catch (const DivergenceError& e) {
    std::cerr << fmt::format("diverged: {}\n", e.what());
    return exit_code::divergence;
  } catch (const CompatibilityError& e) {
    std::cerr << fmt::format("incompatible checkpoint: {}\n", e.what());
    return exit_code::compatibility;
  } catch (const std::exception& e) {
    std::cerr << fmt::format("error: {}\n", e.what());
    return exit_code::failure;
  }
  return exit_code::ok;
}
