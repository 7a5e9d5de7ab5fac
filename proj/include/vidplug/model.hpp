// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vidplug/backbone.hpp"
#include "vidplug/plugins.hpp"

namespace vidplug {

enum class AdapterSite : std::uint8_t { mlp, attention, both };
const char* to_string(AdapterSite s);
AdapterSite parse_adapter_site(const std::string& s);

struct ModalitySpec {
  std::string name;
  std::size_t dim = 8;
  std::size_t steps = 16;
  double snr = 4.0;  // synthetic data only: signal amplitude over noise sd
};

/// A side input: features (steps, dim), matched to a ModalitySpec by name.
struct ModalityStream {
  std::string name;
  Tensor features;
};

struct PluginConfig {
  bool mhva = true;
  std::size_t mhva_groups = 0;  // 0: min(windows, mhva_group_cap)
  std::size_t mhva_group_cap = 8;
  std::vector<double> r_ratio{0.25};  // one value, or one per stage
  AdapterSite adapter_site = AdapterSite::mlp;
  bool learnable_scale = true;
  double scale_init = 1.0;
  double fixed_scale = 4.0;  // used when learnable_scale is off
  bool scaled_parallel_only = false;  // forces one group

  bool prefix = true;
  std::size_t prefix_length = 16;
  std::size_t prefix_dim = 0;  // 0: min(64, d/8)
  bool prefix_tanh = false;
  double gate_init = 0.0;

  bool caa = false;
  std::vector<ModalitySpec> modalities;
  std::vector<bool> caa_stages;  // empty: every stage hosts CAA
  std::size_t pool_kernel = 3;
  bool fusion = true;
  bool fusion_scaled = false;
  bool late_fusion = false;
  std::string late_fusion_at;  // "stage.layer", 1-based; empty: last layer of last stage
  bool adapters_on_caa = false;

  double adapter_dropout = 0.1;
  double prefix_dropout = 0.05;
  bool train_head = true;

  bool any_side_path() const { return (caa || late_fusion) && !modalities.empty(); }
  /// Everything off: the bare backbone.
  static PluginConfig none();
};

/// What one backbone layer hosts.
struct LayerPlan {
  std::size_t stage = 0;
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t windows = 0;
  std::size_t r = 0;
  std::size_t groups_attention = 0;  // 0: no MHVA on attention
  std::size_t groups_mlp = 0;        // 0: no MHVA on MLP
  std::size_t prefix_length = 0;     // 0: no prefix
  std::size_t prefix_dim = 0;
  bool caa = false;
  bool late_fusion = false;
  bool has_plugin() const {
    return groups_attention || groups_mlp || prefix_length || caa || late_fusion;
  }
};

struct PlacementPlan {
  std::vector<LayerPlan> layers;  // stage-major
  std::size_t temporal_steps = 0;  // T' shared by all stages
  std::size_t caa_adapter_r(std::size_t dim) const { return dim >= 16 ? dim / 16 : 1; }
};

/// Resolves placement rules; throws ConfigError on unsatisfiable settings.
PlacementPlan resolve_placement(const BackboneConfig& bcfg, const PluginConfig& pcfg);

/// Parameter groups. Everything in "backbone" is frozen in plugin mode.
namespace group {
inline constexpr const char* backbone = "backbone";
inline constexpr const char* head = "head";
inline constexpr const char* mhva = "mhva";
inline constexpr const char* prefix = "prefix";
inline constexpr const char* caa = "caa";
inline constexpr const char* fusion = "fusion";
inline constexpr const char* late_fusion = "late_fusion";
inline constexpr const char* caa_adapter = "caa_adapter";
}  // namespace group

struct NamedTensor {
  std::string name;
  std::string group;
  Tensor tensor;
};

enum class TrainMode : std::uint8_t { plugins, full };

/// Plugin mode trains every group except the backbone; the head follows
/// train_head and a CAA wrapped by adapters stays frozen. Full mode trains all.
bool group_trainable(const PluginConfig& p, const std::string& group, TrainMode mode);

class Model {
 public:
  Model(BackboneConfig bcfg, PluginConfig pcfg, std::uint64_t plugin_seed = 7);

  /// Logits or regression targets for one sample. Dropout is active only when
  /// `training` and an rng is supplied.
  Tensor forward(const Tensor& video, const std::vector<ModalityStream>& streams = {},
                 bool training = false, CounterRng* rng = nullptr) const;

  const Backbone& backbone() const { return backbone_; }
  const BackboneConfig& backbone_config() const { return backbone_.config(); }
  const PluginConfig& plugin_config() const { return pcfg_; }
  const PlacementPlan& plan() const { return plan_; }

  /// Every tensor, stable order: backbone, head, then plugins by layer.
  std::vector<NamedTensor> parameters() const;
  /// Whether a group trains in the given mode.
  bool group_trainable(const std::string& group, TrainMode mode) const;
  /// Sets requires_grad on every tensor according to its group.
  void apply_train_mode(TrainMode mode);

  /// Plugin modules hosted at (stage, layer).
  struct LayerModules;
  const LayerModules& modules(std::size_t stage, std::size_t layer) const;

 private:
  Backbone backbone_;
  PluginConfig pcfg_;
  PlacementPlan plan_;
  std::vector<std::vector<LayerModules>> modules_;
  std::vector<Tensor> pool_w_, pool_b_;
  std::vector<Tensor> align_;  // per stage
  std::vector<NamedTensor> plugin_params_;
};

struct Model::LayerModules {
  LayerPlan plan;
  std::optional<MHVAParams> mhva_attention;
  std::optional<MHVAParams> mhva_mlp;
  std::optional<PrefixParams> prefix;
  std::vector<CAAParams> caa;  // one per modality (CAA or late fusion)
  std::optional<FusionParams> fusion;
  std::vector<FrozenCAA> frozen;
  std::vector<AdapterParams> caa_adapters;
};

}  // namespace vidplug
