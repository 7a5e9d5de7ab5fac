// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vidplug/model.hpp"
#include "vidplug/tensor.hpp"

namespace vidplug {

enum class TaskKind : std::uint8_t { window_pattern, cross_modal, regression };
const char* to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

enum class Split : std::uint8_t { train = 0, val = 1 };

struct SyntheticSpec {
  std::array<std::size_t, 4> video_shape{8, 16, 16, 3};  // (T, H, W, C)
  std::size_t num_classes = 4;  // number of targets for regression
  TaskKind kind = TaskKind::window_pattern;
  std::vector<ModalitySpec> modalities;
  double video_noise = 0.3;  // standard deviation of additive pixel noise
  std::size_t train_size = 512;
  std::size_t val_size = 128;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

struct Sample {
  Tensor video;                         // (T, H, W, C)
  std::vector<ModalityStream> streams;  // in spec order
  std::size_t label = 0;                // class index (classification tasks)
  std::vector<double> targets;          // regression targets
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> val;
  const std::vector<Sample>& split(Split s) const { return s == Split::train ? train : val; }
};

/// One sample; its randomness depends only on (seed, split, index).
Sample make_sample(const SyntheticSpec& spec, Split split, std::size_t index);

Dataset gen_window_pattern_task(const SyntheticSpec& spec);
Dataset gen_crossmodal_task(const SyntheticSpec& spec);
Dataset gen_regression_task(const SyntheticSpec& spec);
/// Dispatches on spec.kind.
Dataset generate(const SyntheticSpec& spec);

/// Generator-side decoders: recover the label (or targets) from a sample by the
/// generating rule. Exact on noise-free data.
std::size_t decode_window_pattern(const SyntheticSpec& spec, const Sample& s);
std::size_t decode_crossmodal(const SyntheticSpec& spec, const Sample& s);
std::vector<double> decode_regression(const SyntheticSpec& spec, const Sample& s);

/// Binary container: magic, version, spec as JSON, then per-sample records.
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Stable text form of a spec (JSON), also used for digests.
std::string spec_to_json(const SyntheticSpec& spec);
SyntheticSpec spec_from_json(const std::string& text);

}  // namespace vidplug
