// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vidplug/backbone.hpp"
#include "vidplug/model.hpp"
#include "vidplug/synth.hpp"
#include "vidplug/tensor.hpp"
#include "vidplug/training.hpp"

namespace vidplug {

struct DataConfig {
  TaskKind task = TaskKind::window_pattern;
  double video_noise = 0.3;
  double modality_snr = 4.0;
  std::size_t train_size = 512;
  std::size_t val_size = 128;
  std::uint64_t seed = 0;
};

struct OutputConfig {
  std::string dir = "runs/toy";
  std::string metrics = "metrics.jsonl";
  std::string checkpoint = "model.ckpt";
  std::string summary = "summary.json";
  CheckpointKind checkpoint_kind = CheckpointKind::full;

  std::filesystem::path metrics_path() const { return std::filesystem::path(dir) / metrics; }
  std::filesystem::path checkpoint_path() const { return std::filesystem::path(dir) / checkpoint; }
  std::filesystem::path summary_path() const { return std::filesystem::path(dir) / summary; }
};

/// Everything one command needs. Video shape and class count live in the
/// backbone section, side modalities in the plugins section; the data section
/// only holds generator settings.
struct ExperimentConfig {
  BackboneConfig backbone = toy_config();
  PluginConfig plugins;
  std::uint64_t plugin_seed = 7;
  TrainConfig training;
  Precision precision = Precision::f64;
  DataConfig data;
  OutputConfig output;

  /// Generator spec derived from all sections.
  SyntheticSpec data_spec() const;
  /// Model, training and output checks. Throws ConfigError naming "section.key".
  void validate() const;
  /// Generator checks, needed only by commands that build datasets.
  void validate_data() const;
};

/// Documented key of the grammar.
struct ConfigKey {
  std::string section;
  std::string key;
  std::string doc;
};
/// Every accepted key, in serialization order.
const std::vector<ConfigKey>& config_keys();

/// Parses INI text. Unknown sections or keys, duplicates and malformed values
/// throw ConfigError naming "section.key". A root-level `preset = name` line
/// starts from that preset; otherwise from the defaults. Validates the result.
ExperimentConfig parse_config(const std::string& text);
/// A preset name or a path to an INI file.
ExperimentConfig load_config(const std::string& name_or_path);
/// Canonical text with every key; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& c);
/// Applies "section.key=value" without validating.
void apply_override(ExperimentConfig& c, const std::string& assignment);
/// Sets one key from its text form without validating.
void set_config_value(ExperimentConfig& c, const std::string& dotted_key, const std::string& value);
std::string get_config_value(const ExperimentConfig& c, const std::string& dotted_key);

/// toy, xor, swin-b-shape-account, ablation-c1, ablation-a1.
ExperimentConfig preset(const std::string& name);
const std::vector<std::string>& preset_names();

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace vidplug
