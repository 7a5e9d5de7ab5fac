// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vidplug/config.hpp"
#include "vidplug/training.hpp"

namespace vidplug {

/// Process exit codes of the command-line tool.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int divergence = 3;
inline constexpr int compatibility = 4;
}  // namespace exit_code

struct TrainArtifacts {
  TrainHistory history;
  ParamReport report;
  std::filesystem::path metrics, checkpoint, summary;
};

/// Generates the dataset, trains, and writes metrics (one JSON object per
/// epoch and split, epoch 0 holding the pre-training val pass), the last good
/// checkpoint after every epoch, and a final summary object. Everything is a
/// function of the config alone. Progress lines go to `log` when given.
TrainArtifacts cmd_train(const ExperimentConfig& c, std::ostream* log = nullptr);

/// Val-split metric of a checkpoint. CompatibilityError when the checkpoint
/// does not belong to the config.
EvalResult cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint);

/// Shape-only accounting with the FLOP estimate filled in.
ParamReport cmd_params(const ExperimentConfig& c);

struct GradCheckRow {
  std::string op;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool pass = false;
};
inline constexpr double kGradCheckTolerance = 1e-6;

/// Names in the order cmd_gradcheck reports them.
const std::vector<std::string>& gradcheck_ops();
/// Central-difference check of every plugin op at 64-bit precision with
/// sizes taken from the config. Inputs are redrawn until no ReLU argument lies
/// within 1e-3 of its kink and every gate sits inside (0, 1). `corrupt` names
/// one op whose backward is deliberately scaled by 1.01, for testing the check.
std::vector<GradCheckRow> cmd_gradcheck(const ExperimentConfig& c, const std::string& corrupt = "");
std::string gradcheck_table(const std::vector<GradCheckRow>& rows);

struct AblationRow {
  std::string variant;
  std::string definition;  // overrides applied to the base config
  std::size_t backbone_params = 0;  // frozen backbone tensors only
  std::size_t trainable_params = 0;
  double ratio_percent = 0.0;
  Metric metric = Metric::top1;
  double initial_value = 0.0;
  double final_value = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;

  std::string to_json() const;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationRow> rows;
  std::string to_table() const;
};

/// Supported axes: c1, a1 (alias caa-blocks), b1 (alias adapters-on-caa), fusion.
const std::vector<std::string>& ablation_axes();

struct AblationVariant {
  std::string name;
  std::vector<std::string> overrides;  // "section.key=value"
};
/// Variant definitions of one axis. ConfigError for an unknown axis or a base
/// config that cannot host it.
std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base, const std::string& axis);

/// Trains every variant under the base config's seeds, sequentially. Axis b1
/// trains the plain CAA variant first and starts the wrapped variant from its
/// trained tensors. Writes ablation-<axis>.jsonl into the output directory.
AblationTable cmd_ablate(const ExperimentConfig& base, const std::string& axis, std::ostream* log = nullptr);

}  // namespace vidplug
