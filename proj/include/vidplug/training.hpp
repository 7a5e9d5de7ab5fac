// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vidplug/errors.hpp"
#include "vidplug/model.hpp"
#include "vidplug/synth.hpp"

namespace vidplug {

// ---------------------------------------------------------------------------
// Parameter groups and accounting

struct ParamGroup {
  std::string name;
  std::vector<NamedTensor> members;
  bool trainable = false;
  double lr_mult = 1.0;
  double wd_mult = 1.0;
  std::size_t count() const;
};

/// Groups in canonical order; every model tensor lands in exactly one group.
std::vector<ParamGroup> param_groups(const Model& m);

/// Plugin mode, then audits the partition. Throws ContractError if any
/// backbone tensor still requires a gradient.
void freeze_backbone(Model& m);

struct GroupCount {
  std::string name;
  std::size_t count = 0;
  bool trainable = false;
};

struct ParamReport {
  std::vector<GroupCount> groups;  // canonical order, empty groups omitted
  std::size_t backbone_total = 0;  // backbone + head: the 100% reference
  std::size_t trainable_total = 0;
  double ratio_percent = 0.0;      // trainable_total / backbone_total
  std::uint64_t macs = 0;          // multiply-accumulates per forward
  std::vector<std::string> assumptions;

  std::size_t group(const std::string& name) const;
  /// One line-delimited structured record.
  std::string to_json() const;
  /// Human-readable table.
  std::string to_table() const;
};

/// Counts the allocated tensors of an instantiated model; trainable means
/// requires_grad.
ParamReport count_params(const Model& m);
/// Shape-only: closed-form counts from configs, nothing allocated. Agrees with
/// the instantiated count exactly.
ParamReport count_params(const BackboneConfig& b, const PluginConfig& p, TrainMode mode = TrainMode::plugins);

/// Analytic multiply-accumulates of one forward pass (matmul, attention, conv).
std::uint64_t estimate_flops(const BackboneConfig& b, const PluginConfig& p);

// ---------------------------------------------------------------------------
// Optimization

/// Linear warmup over the first warmup_steps, then cosine decay to zero.
struct Schedule {
  double base_lr = 1.5e-3;
  std::size_t total_steps = 1;
  std::size_t warmup_steps = 0;

  static Schedule cosine_with_warmup(double base_lr, std::size_t total_steps, double warmup_fraction);
  /// Learning rate for 0-based step t.
  double lr_at(std::size_t t) const;
  std::string describe() const;
};

/// Scales a base rate tuned at batch size 2 by the affine rule (3 + b) / 5,
/// which passes through 1.5e-3 at b = 2 and 1.8e-3 at b = 3.
double scale_lr_for_batch(double base_lr, std::size_t batch_size);

struct AdamWConfig {
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  struct Moments {
    std::vector<double> m, v;
  };
  std::map<std::string, Moments> moments;  // trainable tensors only
  std::uint64_t step = 0;
  double base_lr = 0.0;
  AdamWConfig config;
  std::string schedule;
};

/// Adaptive moments with decoupled decay; parameter update order:
/// p -= lr*wd*p, then p -= lr * m_hat / (sqrt(v_hat) + eps).
class AdamW {
 public:
  AdamW(const Model& model, AdamWConfig cfg = {}, double base_lr = 1.5e-3);
  /// Tensors whose requires_grad is set, in model order.
  AdamW(std::vector<NamedTensor> params, AdamWConfig cfg = {}, double base_lr = 1.5e-3);

  /// Applies one update with learning rate `lr`. A tensor without a gradient is
  /// treated as having a zero gradient. Throws NumericError naming the first
  /// tensor with a non-finite gradient; no parameter changes in that case.
  void step(double lr);
  void zero_grad();

  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  OptimizerState state_;
};

// ---------------------------------------------------------------------------
// Checkpoints

enum class CheckpointKind : std::uint8_t { full = 0, plugins = 1 };

/// Stable 64-bit digest of every backbone setting that determines its weights.
std::uint64_t backbone_digest(const BackboneConfig& b);

/// Layout: "VPCK", version, kind, backbone digest, seed, tensor records
/// (name, shape, precision, little-endian raw elements), optional optimizer
/// moments, then an FNV-1a digest of all preceding bytes.
void save_checkpoint(const Model& m, const std::filesystem::path& path,
                     CheckpointKind kind = CheckpointKind::full, const OptimizerState* opt = nullptr,
                     std::uint64_t seed = 0);

/// Restores tensors into a model built from the matching configs. Validates the
/// whole file before touching the model. Throws FormatError on corrupt or
/// truncated input and CompatibilityError on digest or layout mismatch.
/// Returns the stored seed.
std::uint64_t load_checkpoint(Model& m, const std::filesystem::path& path, OptimizerState* opt = nullptr);

// ---------------------------------------------------------------------------
// Training and evaluation

enum class Metric : std::uint8_t { top1, map, mse };
const char* to_string(Metric m);
Metric parse_metric(const std::string& s);
Metric default_metric(TaskHead head);
/// Whether a larger metric value is better.
bool higher_is_better(Metric m);

struct EvalResult {
  double loss = 0.0;
  Metric metric = Metric::top1;
  double value = 0.0;
};

/// Dropout-free pass over `samples`. Throws ConfigError when the metric does
/// not fit the model's task head.
EvalResult evaluate(const Model& m, const std::vector<Sample>& samples, Metric metric);
EvalResult evaluate(const Model& m, const std::vector<Sample>& samples);

struct TrainConfig {
  double lr = 1.5e-3;
  bool lr_batch_scaling = true;
  AdamWConfig adamw;
  double warmup_fraction = 0.05;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs
  std::size_t patience = 6;   // 0: never stop early
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::plugins;
  std::optional<Metric> metric;  // default follows the task head
  bool record_wall_time = false;

  double effective_lr() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  Metric metric = Metric::top1;
  double value = 0.0;
  std::size_t trainable_params = 0;
  std::optional<double> wall_seconds;

  std::string to_json() const;
};

struct TrainHistory {
  EvalResult initial_val;          // before the first update
  std::vector<EpochRecord> records;  // train then val, per epoch
  std::size_t steps = 0;
  bool early_stopped = false;
  EvalResult final_val;
};

/// Raised when the training loss or a gradient becomes non-finite. The model
/// holds the parameters of the last completed epoch.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainHooks {
  /// Called once with the val pass before the first update.
  std::function<void(const EvalResult& initial_val)> on_start;
  /// Called after every optimizer step with (step, lr, batch loss).
  std::function<void(std::size_t, double, double)> on_step;
  /// Called after each epoch's records are complete.
  std::function<void(const EpochRecord& train, const EpochRecord& val)> on_epoch;
  /// Where the last good checkpoint goes; empty: none written.
  std::filesystem::path checkpoint;
  CheckpointKind checkpoint_kind = CheckpointKind::full;
};

TrainHistory train_loop(Model& m, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Batch loss for the model's task head; labels/targets come from the samples.
Tensor batch_loss(const Model& m, const std::vector<const Sample*>& batch, bool training, CounterRng* rng,
                  Tensor* outputs = nullptr);

}  // namespace vidplug
