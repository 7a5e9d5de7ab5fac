// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vidplug/rng.hpp"
#include "vidplug/tensor.hpp"

namespace vidplug {

using Extent3 = std::array<std::size_t, 3>;  // (t, h, w)

enum class TaskHead : std::uint8_t { classification, multilabel, regression };
enum class PosEmbed : std::uint8_t { absolute, none };

const char* to_string(TaskHead h);
TaskHead parse_task_head(const std::string& s);
const char* to_string(PosEmbed p);
PosEmbed parse_pos_embed(const std::string& s);

struct BackboneConfig {
  std::array<std::size_t, 4> input_shape{8, 16, 16, 3};  // (T, H, W, C)
  Extent3 patch_size{2, 4, 4};
  std::vector<std::size_t> stage_depths{1, 1, 2, 1};
  std::vector<std::size_t> stage_dims{16, 32, 64, 128};
  std::vector<std::size_t> heads_per_stage{1, 2, 4, 8};
  Extent3 window_size{2, 2, 2};
  double mlp_ratio = 4.0;
  std::size_t num_classes = 4;  // number of targets for regression
  TaskHead task_head = TaskHead::classification;
  PosEmbed pos_embed = PosEmbed::absolute;
  std::uint64_t seed = 1;  // stands in for pretrained weights

  std::size_t embed_dim() const { return stage_dims.at(0); }
  std::size_t num_stages() const { return stage_depths.size(); }
  std::size_t mlp_hidden(std::size_t stage) const;

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Desk-scale default: four stages, dims [16,32,64,128], window (2,2,2).
BackboneConfig toy_config();

/// Video Swin-B architecture shape for accounting only.
BackboneConfig swin_b_shape_config();

/// Window bookkeeping for one stage. Grid extents are padded up to multiples of
/// the (clamped) window; padded slots carry index -1.
struct WindowLayout {
  Extent3 grid{};
  Extent3 window{};
  Extent3 padded{};
  std::size_t num_windows = 0;
  std::size_t tokens_per_window = 0;
  std::vector<std::int64_t> partition;  // window slot -> token row, or -1
  std::vector<std::int64_t> reverse;    // token row -> window slot
  bool has_padding() const { return padded != grid; }
  std::size_t num_tokens() const { return grid[0] * grid[1] * grid[2]; }
};

WindowLayout make_window_layout(const Extent3& grid, const Extent3& window);

/// Token embeddings (N, C) in row-major (t, h, w) order.
struct TokenGrid {
  Tensor tokens;
  Extent3 grid{};
};

/// (N, C) -> (windows, tokens_per_window, C); padded slots are zero rows.
Tensor window_partition(const Tensor& tokens, const WindowLayout& layout);
/// Inverse of window_partition; padded slots are dropped.
Tensor window_reverse(const Tensor& windows, const WindowLayout& layout);

struct StageGeometry {
  Extent3 grid{};
  std::size_t dim = 0;
  std::size_t heads = 0;
  std::size_t depth = 0;
  WindowLayout layout;
};

std::vector<StageGeometry> stage_geometry(const BackboneConfig& cfg);

struct LayerParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct MergeParams {
  Tensor ln_g, ln_b;
  Tensor w;  // (4C, 2C), no bias
};

/// Per-layer extension points. Default implementations leave the block unchanged.
class BlockPlugin {
 public:
  virtual ~BlockPlugin() = default;
  /// Receives per-head query q and attention output h, both (windows, heads,
  /// tokens_per_window, head_dim); returns the replacement for h.
  virtual Tensor attend(const Tensor& q, const Tensor& h) { (void)q; return h; }
  /// Branch added in parallel to attention; input is the normed attention input (N, C).
  virtual Tensor attention_branch(const Tensor& x_norm, const WindowLayout& layout) {
    (void)x_norm; (void)layout; return {};
  }
  /// Branch added in parallel to the MLP; input is the normed MLP input (N, C).
  virtual Tensor mlp_branch(const Tensor& x_norm, const WindowLayout& layout) {
    (void)x_norm; (void)layout; return {};
  }
};

/// Returns the plugin for (stage, layer) or nullptr.
using PluginLookup = std::function<BlockPlugin*(std::size_t stage, std::size_t layer)>;

class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<StageGeometry>& geometry() const { return geometry_; }

  /// (T, H, W, C) video -> tokens of stage 1.
  TokenGrid patch_embed(const Tensor& video) const;

  /// Video -> pooled, normed features of the last stage, (C_last).
  Tensor features(const Tensor& video, const PluginLookup& plugins = {}) const;
  /// Features -> logits/targets.
  Tensor head(const Tensor& features) const;
  Tensor forward(const Tensor& video, const PluginLookup& plugins = {}) const;

  const LayerParams& layer(std::size_t stage, std::size_t index) const {
    return layers_.at(stage).at(index);
  }

  /// Every backbone tensor except the task head, with stable names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  /// Task head tensors.
  std::vector<std::pair<std::string, Tensor>> named_head_parameters() const;

  void set_trainable(bool on);
  void set_head_trainable(bool on);

 private:
  BackboneConfig cfg_;
  std::vector<StageGeometry> geometry_;
  std::vector<std::int64_t> patch_index_;
  Tensor patch_w_, patch_b_, patch_ln_g_, patch_ln_b_, pos_;
  std::vector<std::vector<LayerParams>> layers_;
  std::vector<MergeParams> merges_;
  std::vector<std::vector<std::int64_t>> merge_index_;
  Tensor norm_g_, norm_b_, head_w_, head_b_;
};

/// Per-window multi-head attention over windows (nW, S, C). `key_mask` is
/// undefined or (nW, 1, 1, S) with 0 for real and a large negative value for
/// padded keys. Scores are divided by sqrt(head_dim).
Tensor windowed_mhsa(const Tensor& windows, const LayerParams& p, std::size_t heads,
                     const Tensor& key_mask, BlockPlugin* plugin);

/// Pre-norm block: x += attn(LN x) [+ attention branch]; x += mlp(LN x) [+ mlp branch].
Tensor transformer_block(const Tensor& x, const WindowLayout& layout, const LayerParams& p,
                         std::size_t heads, BlockPlugin* plugin);

/// (nW, 1, 1, S) additive key mask for a padded layout, or undefined.
Tensor key_mask(const WindowLayout& layout);

}  // namespace vidplug
