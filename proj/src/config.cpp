// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "vidplug/errors.hpp"

namespace vidplug {
namespace {

namespace pt = boost::property_tree;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

// ---------------------------------------------------------------------------
// Value codecs. Every codec throws ConfigError carrying the dotted key.

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError(fmt::format("{}: cannot parse '{}' as {}", key, value, expected), key);
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "a non-negative integer");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "an unsigned integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out)) {
    bad(key, v, "a finite number");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad(key, v, "true or false");
}

std::string from_double(double v) { return fmt::format("{}", v); }
std::string from_bool(bool v) { return v ? "true" : "false"; }

template <class T>
std::string join(const T& items) {
  std::string out;
  for (const auto& x : items) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, double>) {
      out += from_double(x);
    } else {
      out += fmt::format("{}", x);
    }
  }
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const std::string& s : split(v, ',')) out.push_back(to_size(key, s));
  if (out.empty()) bad(key, v, "a comma-separated integer list");
  return out;
}

template <std::size_t N>
std::array<std::size_t, N> to_array(const std::string& key, const std::string& v) {
  const auto xs = to_sizes(key, v);
  if (xs.size() != N) bad(key, v, N == 3 ? "three integers" : "four integers");
  std::array<std::size_t, N> out{};
  std::copy(xs.begin(), xs.end(), out.begin());
  return out;
}

template <class F>
auto with_key(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError& e) {
    throw ConfigError(e.what(), key);
  }
}

// name:DIMxSTEPS, comma-separated.
std::vector<ModalitySpec> to_modalities(const std::string& key, const std::string& v) {
  std::vector<ModalitySpec> out;
  for (const std::string& item : split(v, ',')) {
    const auto colon = item.find(':');
    const auto x = item.find('x', colon == std::string::npos ? 0 : colon);
    if (colon == std::string::npos || colon == 0 || x == std::string::npos) bad(key, item, "name:DIMxSTEPS");
    ModalitySpec m;
    m.name = item.substr(0, colon);
    m.dim = to_size(key, item.substr(colon + 1, x - colon - 1));
    m.steps = to_size(key, item.substr(x + 1));
    out.push_back(std::move(m));
  }
  return out;
}

std::string from_modalities(const std::vector<ModalitySpec>& ms) {
  std::string out;
  for (const ModalitySpec& m : ms) out += fmt::format("{}{}:{}x{}", out.empty() ? "" : ",", m.name, m.dim, m.steps);
  return out;
}

Precision to_precision(const std::string& key, const std::string& v) {
  if (v == "f32") return Precision::f32;
  if (v == "f64") return Precision::f64;
  bad(key, v, "f32 or f64");
}

// ---------------------------------------------------------------------------
// Key registry

struct KeyDef {
  ConfigKey doc;
  std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define VP_SIZE(sec, name, field, text)                                                                       \
  KeyDef {                                                                                                   \
    {sec, #name, text}, [](ExperimentConfig& c, const std::string& k, const std::string& v) { field = to_size(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(field); }                                       \
  }
#define VP_U64(sec, name, field, text)                                                                        \
  KeyDef {                                                                                                   \
    {sec, #name, text}, [](ExperimentConfig& c, const std::string& k, const std::string& v) { field = to_u64(k, v); }, \
        [](const ExperimentConfig& c) { return std::to_string(field); }                                       \
  }
#define VP_DOUBLE(sec, name, field, text)                                                                       \
  KeyDef {                                                                                                     \
    {sec, #name, text}, [](ExperimentConfig& c, const std::string& k, const std::string& v) { field = to_double(k, v); }, \
        [](const ExperimentConfig& c) { return from_double(field); }                                            \
  }
#define VP_BOOL(sec, name, field, text)                                                                       \
  KeyDef {                                                                                                   \
    {sec, #name, text}, [](ExperimentConfig& c, const std::string& k, const std::string& v) { field = to_bool(k, v); }, \
        [](const ExperimentConfig& c) { return from_bool(field); }                                            \
  }
#define VP_STRING(sec, name, field, text)                                                                \
  KeyDef {                                                                                              \
    {sec, #name, text}, [](ExperimentConfig& c, const std::string&, const std::string& v) { field = v; }, \
        [](const ExperimentConfig& c) { return std::string(field); }                                     \
  }

const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> keys = [] {
    std::vector<KeyDef> k;
    // backbone
    k.push_back({{"backbone", "input_shape", "T,H,W,C of one video"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.input_shape = to_array<4>(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.input_shape); }});
    k.push_back({{"backbone", "patch_size", "temporal,height,width patch extent"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.patch_size = to_array<3>(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.patch_size); }});
    k.push_back({{"backbone", "stage_depths", "layers per stage"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.stage_depths = to_sizes(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.stage_depths); }});
    k.push_back({{"backbone", "stage_dims", "embedding width per stage"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.stage_dims = to_sizes(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.stage_dims); }});
    k.push_back({{"backbone", "heads", "attention heads per stage"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.heads_per_stage = to_sizes(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.heads_per_stage); }});
    k.push_back({{"backbone", "window_size", "temporal,height,width window extent"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.window_size = to_array<3>(key, v);
                 },
                 [](const ExperimentConfig& c) { return join(c.backbone.window_size); }});
    k.push_back(VP_DOUBLE("backbone", mlp_ratio, c.backbone.mlp_ratio, "MLP hidden width over embedding width"));
    k.push_back(VP_SIZE("backbone", num_classes, c.backbone.num_classes,
                        "output width: classes, labels or regression targets"));
    k.push_back({{"backbone", "task_head", "classification | multilabel | regression"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.task_head = with_key(key, [&] { return parse_task_head(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.backbone.task_head)); }});
    k.push_back({{"backbone", "pos_embed", "absolute | none"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.backbone.pos_embed = with_key(key, [&] { return parse_pos_embed(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.backbone.pos_embed)); }});
    k.push_back(VP_U64("backbone", seed, c.backbone.seed, "seed of the frozen weights"));

    // plugins
    k.push_back(VP_BOOL("plugins", mhva, c.plugins.mhva, "multi-head vision adapters on"));
    k.push_back(VP_SIZE("plugins", mhva_groups, c.plugins.mhva_groups,
                        "window groups m; 0 picks min(windows, mhva_group_cap)"));
    k.push_back(VP_SIZE("plugins", mhva_group_cap, c.plugins.mhva_group_cap, "upper bound for automatic m"));
    k.push_back({{"plugins", "r_ratio", "bottleneck width over layer width; one value or one per stage"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.plugins.r_ratio.clear();
                   for (const std::string& s : split(v, ',')) c.plugins.r_ratio.push_back(to_double(key, s));
                   if (c.plugins.r_ratio.empty()) bad(key, v, "a number list");
                 },
                 [](const ExperimentConfig& c) { return join(c.plugins.r_ratio); }});
    k.push_back({{"plugins", "adapter_site", "mlp | attention | both"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.plugins.adapter_site = with_key(key, [&] { return parse_adapter_site(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.plugins.adapter_site)); }});
    k.push_back(VP_BOOL("plugins", learnable_scale, c.plugins.learnable_scale,
                        "false fixes the adapter scale at fixed_scale"));
    k.push_back(VP_DOUBLE("plugins", scale_init, c.plugins.scale_init, "initial learnable adapter scale"));
    k.push_back(VP_DOUBLE("plugins", fixed_scale, c.plugins.fixed_scale, "adapter scale when not learnable"));
    k.push_back(VP_BOOL("plugins", scaled_parallel_only, c.plugins.scaled_parallel_only,
                        "forces one window group (a plain scaled parallel adapter)"));
    k.push_back(VP_BOOL("plugins", prefix, c.plugins.prefix, "low-rank prefix tuning on"));
    k.push_back(VP_SIZE("plugins", prefix_length, c.plugins.prefix_length, "prefix count L"));
    k.push_back(VP_SIZE("plugins", prefix_dim, c.plugins.prefix_dim, "prefix embedding width d_p; 0 picks min(64, d/8)"));
    k.push_back(VP_BOOL("plugins", prefix_tanh, c.plugins.prefix_tanh, "tanh instead of ReLU in prefix generation"));
    k.push_back(VP_DOUBLE("plugins", gate_init, c.plugins.gate_init, "initial prefix gate, clamped to [0,1]"));
    k.push_back(VP_BOOL("plugins", caa, c.plugins.caa, "cross-attention adapters on"));
    k.push_back({{"plugins", "modalities", "side streams as name:DIMxSTEPS, comma-separated"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.plugins.modalities = to_modalities(key, v);
                 },
                 [](const ExperimentConfig& c) { return from_modalities(c.plugins.modalities); }});
    k.push_back({{"plugins", "caa_stages", "per-stage CAA mask such as 1,0,1,1; all keeps every stage"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.plugins.caa_stages.clear();
                   if (v == "all") return;
                   for (std::size_t x : to_sizes(key, v)) {
                     if (x > 1) bad(key, v, "a 0/1 mask");
                     c.plugins.caa_stages.push_back(x == 1);
                   }
                 },
                 [](const ExperimentConfig& c) {
                   if (c.plugins.caa_stages.empty()) return std::string("all");
                   std::vector<int> bits(c.plugins.caa_stages.begin(), c.plugins.caa_stages.end());
                   return join(bits);
                 }});
    k.push_back(VP_SIZE("plugins", pool_kernel, c.plugins.pool_kernel, "temporal pooling kernel width"));
    k.push_back(VP_BOOL("plugins", fusion, c.plugins.fusion, "attention fusion over modality adapters"));
    k.push_back(VP_BOOL("plugins", fusion_scaled, c.plugins.fusion_scaled, "divide fusion scores by sqrt(width)"));
    k.push_back(VP_BOOL("plugins", late_fusion, c.plugins.late_fusion, "single cross-attention at one late layer"));
    k.push_back({{"plugins", "late_fusion_at", "stage.layer, 1-based; last picks the final layer"},
                 [](ExperimentConfig& c, const std::string&, const std::string& v) {
                   c.plugins.late_fusion_at = v == "last" ? "" : v;
                 },
                 [](const ExperimentConfig& c) {
                   return c.plugins.late_fusion_at.empty() ? std::string("last") : c.plugins.late_fusion_at;
                 }});
    k.push_back(VP_BOOL("plugins", adapters_on_caa, c.plugins.adapters_on_caa,
                        "freeze the CAA and train small adapters around it"));
    k.push_back(VP_DOUBLE("plugins", adapter_dropout, c.plugins.adapter_dropout, "dropout on adapter bottlenecks"));
    k.push_back(VP_DOUBLE("plugins", prefix_dropout, c.plugins.prefix_dropout, "dropout on prefix hidden units"));
    k.push_back(VP_BOOL("plugins", train_head, c.plugins.train_head, "the task head trains with the plugins"));
    k.push_back(VP_U64("plugins", seed, c.plugin_seed, "seed of plugin initialization"));

    // training
    k.push_back(VP_DOUBLE("training", lr, c.training.lr, "base learning rate"));
    k.push_back(VP_BOOL("training", lr_batch_scaling, c.training.lr_batch_scaling,
                        "scale lr by (3 + batch_size) / 5"));
    k.push_back(VP_DOUBLE("training", weight_decay, c.training.adamw.weight_decay, "decoupled weight decay"));
    k.push_back(VP_DOUBLE("training", beta1, c.training.adamw.beta1, "first-moment decay"));
    k.push_back(VP_DOUBLE("training", beta2, c.training.adamw.beta2, "second-moment decay"));
    k.push_back(VP_DOUBLE("training", eps, c.training.adamw.eps, "denominator floor"));
    k.push_back(VP_DOUBLE("training", warmup_fraction, c.training.warmup_fraction, "share of steps in linear warmup"));
    k.push_back(VP_SIZE("training", batch_size, c.training.batch_size, "samples per step"));
    k.push_back(VP_SIZE("training", epochs, c.training.epochs, "passes over the training split"));
    k.push_back(VP_SIZE("training", max_steps, c.training.max_steps, "step cap; 0 means epochs decide"));
    k.push_back(VP_SIZE("training", patience, c.training.patience,
                        "epochs without val improvement before stopping; 0 never stops"));
    k.push_back(VP_U64("training", seed, c.training.seed, "seed of shuffling and dropout"));
    k.push_back({{"training", "mode", "plugins | full"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   if (v == "plugins") {
                     c.training.mode = TrainMode::plugins;
                   } else if (v == "full") {
                     c.training.mode = TrainMode::full;
                   } else {
                     bad(key, v, "plugins or full");
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.training.mode == TrainMode::plugins ? "plugins" : "full");
                 }});
    k.push_back({{"training", "metric", "auto | top1 | map | mse; auto follows the task head"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   if (v == "auto") {
                     c.training.metric.reset();
                   } else {
                     c.training.metric = with_key(key, [&] { return parse_metric(v); });
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return c.training.metric ? std::string(to_string(*c.training.metric)) : std::string("auto");
                 }});
    k.push_back({{"training", "precision", "f64 | f32 arithmetic"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.precision = to_precision(key, v);
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.precision)); }});
    k.push_back(VP_BOOL("training", record_wall_time, c.training.record_wall_time,
                        "store wall_seconds in metrics (breaks byte-identical reruns)"));

    // data
    k.push_back({{"data", "task", "window-pattern | cross-modal | regression"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   c.data.task = with_key(key, [&] { return parse_task_kind(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.data.task)); }});
    k.push_back(VP_DOUBLE("data", video_noise, c.data.video_noise, "video noise standard deviation"));
    k.push_back(VP_DOUBLE("data", modality_snr, c.data.modality_snr, "side-stream signal over noise sd"));
    k.push_back(VP_SIZE("data", train_size, c.data.train_size, "training samples"));
    k.push_back(VP_SIZE("data", val_size, c.data.val_size, "validation samples"));
    k.push_back(VP_U64("data", seed, c.data.seed, "generator seed"));

    // output
    k.push_back(VP_STRING("output", dir, c.output.dir, "directory for all artifacts"));
    k.push_back(VP_STRING("output", metrics, c.output.metrics, "line-delimited JSON records, relative to dir"));
    k.push_back(VP_STRING("output", checkpoint, c.output.checkpoint, "checkpoint file, relative to dir"));
    k.push_back(VP_STRING("output", summary, c.output.summary, "final JSON summary, relative to dir"));
    k.push_back({{"output", "checkpoint_kind", "full | plugins"},
                 [](ExperimentConfig& c, const std::string& key, const std::string& v) {
                   if (v == "full") {
                     c.output.checkpoint_kind = CheckpointKind::full;
                   } else if (v == "plugins") {
                     c.output.checkpoint_kind = CheckpointKind::plugins;
                   } else {
                     bad(key, v, "full or plugins");
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(c.output.checkpoint_kind == CheckpointKind::full ? "full" : "plugins");
                 }});
    return k;
  }();
  return keys;
}

#undef VP_SIZE
#undef VP_U64
#undef VP_DOUBLE
#undef VP_BOOL
#undef VP_STRING

const KeyDef& find_key(const std::string& dotted) {
  for (const KeyDef& k : registry()) {
    if (k.doc.section + "." + k.doc.key == dotted) return k;
  }
  throw ConfigError(fmt::format("unknown config key '{}'", dotted), dotted);
}

bool known_section(const std::string& s) {
  return std::any_of(registry().begin(), registry().end(), [&](const KeyDef& k) { return k.doc.section == s; });
}

// ---------------------------------------------------------------------------
// Presets

ExperimentConfig toy_preset() {
  ExperimentConfig c;
  c.training.lr = 1.5e-3;
  c.training.lr_batch_scaling = false;
  c.training.epochs = 4;
  c.training.max_steps = 200;
  c.training.patience = 0;
  c.data.seed = 3;
  c.output.dir = "runs/toy";
  return c;
}

ExperimentConfig xor_preset() {
  ExperimentConfig c;
  c.backbone.num_classes = 2;
  c.plugins.caa = true;
  c.plugins.modalities = {{"m0", 8, 16}};
  c.training.lr = 3e-3;
  c.training.lr_batch_scaling = false;
  c.training.epochs = 7;
  c.training.max_steps = 400;
  c.training.patience = 0;
  c.data.task = TaskKind::cross_modal;
  c.data.val_size = 256;
  c.data.seed = 5;
  c.output.dir = "runs/xor";
  return c;
}

ExperimentConfig swin_preset() {
  ExperimentConfig c;
  c.backbone = swin_b_shape_config();
  c.plugins.modalities = {{"audio", 1024, 16}, {"flow", 1024, 16}};
  c.data.task = TaskKind::cross_modal;
  c.output.dir = "runs/swin-b-shape";
  return c;
}

ExperimentConfig ablation_c1_preset() {
  ExperimentConfig c = toy_preset();
  c.data.train_size = 256;
  c.data.val_size = 128;
  c.training.epochs = 3;
  c.training.max_steps = 0;
  c.output.dir = "runs/ablation-c1";
  return c;
}

ExperimentConfig ablation_a1_preset() {
  ExperimentConfig c = xor_preset();
  c.plugins.modalities = {{"m0", 8, 16}, {"m1", 8, 16}};
  c.data.train_size = 256;
  c.data.val_size = 128;
  c.training.epochs = 3;
  c.training.max_steps = 0;
  c.output.dir = "runs/ablation-a1";
  return c;
}

}  // namespace

SyntheticSpec ExperimentConfig::data_spec() const {
  SyntheticSpec s;
  s.video_shape = backbone.input_shape;
  s.num_classes = backbone.num_classes;
  s.kind = data.task;
  s.modalities = plugins.modalities;
  for (ModalitySpec& m : s.modalities) m.snr = data.modality_snr;
  s.video_noise = data.video_noise;
  s.train_size = data.train_size;
  s.val_size = data.val_size;
  s.seed = data.seed;
  return s;
}

void ExperimentConfig::validate_data() const {
  data_spec().validate();
  if (data.modality_snr <= 0.0) throw ConfigError("data.modality_snr must be positive", "data.modality_snr");
  if (data.train_size == 0) throw ConfigError("data.train_size must be positive", "data.train_size");
  if (data.val_size == 0) throw ConfigError("data.val_size must be positive", "data.val_size");
  if ((data.task == TaskKind::regression) != (backbone.task_head == TaskHead::regression)) {
    throw ConfigError(fmt::format("task {} does not fit head {}", to_string(data.task), to_string(backbone.task_head)),
                      "data.task");
  }
}

void ExperimentConfig::validate() const {
  backbone.validate();
  resolve_placement(backbone, plugins);
  const Metric metric = training.metric.value_or(default_metric(backbone.task_head));
  const bool regression = backbone.task_head == TaskHead::regression;
  if ((metric == Metric::mse) != regression || (metric == Metric::top1 && backbone.task_head != TaskHead::classification)) {
    throw ConfigError(fmt::format("metric {} does not fit head {}", to_string(metric), to_string(backbone.task_head)),
                      "training.metric");
  }
  if (training.lr < 0.0) throw ConfigError("training.lr must be non-negative", "training.lr");
  if (training.batch_size == 0) throw ConfigError("training.batch_size must be positive", "training.batch_size");
  if (training.epochs == 0) throw ConfigError("training.epochs must be positive", "training.epochs");
  if (training.warmup_fraction < 0.0 || training.warmup_fraction >= 1.0) {
    throw ConfigError("training.warmup_fraction must be in [0, 1)", "training.warmup_fraction");
  }
  if (training.adamw.beta1 < 0.0 || training.adamw.beta1 >= 1.0) {
    throw ConfigError("training.beta1 must be in [0, 1)", "training.beta1");
  }
  if (training.adamw.beta2 < 0.0 || training.adamw.beta2 >= 1.0) {
    throw ConfigError("training.beta2 must be in [0, 1)", "training.beta2");
  }
  if (training.adamw.eps <= 0.0) throw ConfigError("training.eps must be positive", "training.eps");
  for (const auto& [key, p] : {std::pair{"plugins.adapter_dropout", plugins.adapter_dropout},
                               std::pair{"plugins.prefix_dropout", plugins.prefix_dropout}}) {
    if (p < 0.0 || p >= 1.0) throw ConfigError(fmt::format("{} must be in [0, 1)", key), key);
  }
  for (const auto& [key, v] : {std::pair{"output.metrics", output.metrics}, std::pair{"output.checkpoint", output.checkpoint},
                               std::pair{"output.summary", output.summary}, std::pair{"output.dir", output.dir}}) {
    if (v.empty()) throw ConfigError(fmt::format("{} must not be empty", key), key);
  }
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const KeyDef& k : registry()) out.push_back(k.doc);
    return out;
  }();
  return keys;
}

void set_config_value(ExperimentConfig& c, const std::string& dotted_key, const std::string& value) {
  const KeyDef& k = find_key(dotted_key);
  k.set(c, dotted_key, trim(value));
}

std::string get_config_value(const ExperimentConfig& c, const std::string& dotted_key) {
  return find_key(dotted_key).get(c);
}

void apply_override(ExperimentConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(fmt::format("override '{}' is not section.key=value", assignment), trim(assignment));
  }
  set_config_value(c, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(fmt::format("config line {}: {}", e.line(), e.message()), "");
  }
  ExperimentConfig c;
  // Root keys first: only `preset` is accepted there.
  for (const auto& [key, node] : tree) {
    if (!node.empty()) continue;
    if (key != "preset") throw ConfigError(fmt::format("unknown root key '{}'", key), key);
    c = preset(trim(node.data()));
  }
  for (const auto& [section, node] : tree) {
    if (node.empty()) continue;
    if (!known_section(section)) throw ConfigError(fmt::format("unknown config section '[{}]'", section), section);
    for (const auto& [key, leaf] : node) set_config_value(c, section + "." + key, leaf.data());
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& name_or_path) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) {
    ExperimentConfig c = preset(name_or_path);
    c.validate();
    return c;
  }
  std::ifstream in(name_or_path);
  if (!in) throw ConfigError(fmt::format("no preset or readable config file named '{}'", name_or_path), "");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string serialize_config(const ExperimentConfig& c) {
  std::string out;
  std::string section;
  for (const KeyDef& k : registry()) {
    if (k.doc.section != section) {
      out += fmt::format("{}[{}]\n", section.empty() ? "" : "\n", k.doc.section);
      section = k.doc.section;
    }
    out += fmt::format("{} = {}\n", k.doc.key, k.get(c));
  }
  return out;
}

ExperimentConfig preset(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "xor") return xor_preset();
  if (name == "swin-b-shape-account") return swin_preset();
  if (name == "ablation-c1") return ablation_c1_preset();
  if (name == "ablation-a1") return ablation_a1_preset();
  throw ConfigError(fmt::format("unknown preset '{}'", name), "preset");
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"toy", "xor", "swin-b-shape-account", "ablation-c1", "ablation-a1"};
  return names;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

}  // namespace vidplug
