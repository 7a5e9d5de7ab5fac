// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/backbone.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "vidplug/errors.hpp"
#include "vidplug/ops.hpp"

namespace vidplug {

namespace {

constexpr double kMaskedScore = -1e9;

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

Tensor normal_tensor(const Shape& shape, CounterRng& rng, double sd) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(shape, std::move(v));
}

// Weight (in, out) with fan-in scaled entries.
Tensor fan_in_weight(std::size_t in, std::size_t out, CounterRng& rng) {
  return normal_tensor({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor small_bias(std::size_t n, CounterRng& rng) { return normal_tensor({n}, rng, 0.02); }

// Rows (2i, 2j), (2i+1, 2j), (2i, 2j+1), (2i+1, 2j+1) per merged token.
std::vector<std::int64_t> merge_index(const Extent3& grid) {
  const auto [t, h, w] = grid;
  const std::size_t h2 = ceil_div(h, 2), w2 = ceil_div(w, 2);
  std::vector<std::int64_t> idx;
  idx.reserve(t * h2 * w2 * 4);
  const std::size_t dh[4] = {0, 1, 0, 1};
  const std::size_t dw[4] = {0, 0, 1, 1};
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t i = 0; i < h2; ++i)
      for (std::size_t j = 0; j < w2; ++j)
        for (int q = 0; q < 4; ++q) {
          const std::size_t y = 2 * i + dh[q], x = 2 * j + dw[q];
          idx.push_back(y < h && x < w ? static_cast<std::int64_t>((a * h + y) * w + x) : -1);
        }
  return idx;
}

}  // namespace

const char* to_string(TaskHead h) {
  switch (h) {
    case TaskHead::classification: return "classification";
    case TaskHead::multilabel: return "multilabel";
    case TaskHead::regression: return "regression";
  }
  return "?";
}

TaskHead parse_task_head(const std::string& s) {
  if (s == "classification") return TaskHead::classification;
  if (s == "multilabel") return TaskHead::multilabel;
  if (s == "regression") return TaskHead::regression;
  throw ConfigError(fmt::format("unknown task head '{}'", s), "backbone.task_head");
}

const char* to_string(PosEmbed p) { return p == PosEmbed::absolute ? "absolute" : "none"; }

PosEmbed parse_pos_embed(const std::string& s) {
  if (s == "absolute") return PosEmbed::absolute;
  if (s == "none") return PosEmbed::none;
  throw ConfigError(fmt::format("unknown position embedding '{}'", s), "backbone.pos_embed");
}

std::size_t BackboneConfig::mlp_hidden(std::size_t stage) const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(stage_dims.at(stage))));
}

void BackboneConfig::validate() const {
  if (stage_depths.empty()) throw ConfigError("at least one stage required", "backbone.stage_depths");
  if (stage_dims.size() != stage_depths.size()) {
    throw ConfigError(fmt::format("{} stage dims for {} stages", stage_dims.size(),
                                  stage_depths.size()),
                      "backbone.stage_dims");
  }
  if (heads_per_stage.size() != stage_depths.size()) {
    throw ConfigError(fmt::format("{} head counts for {} stages", heads_per_stage.size(),
                                  stage_depths.size()),
                      "backbone.heads_per_stage");
  }
  for (std::size_t s = 0; s < stage_dims.size(); ++s) {
    if (stage_depths[s] == 0) throw ConfigError("stage depth must be >= 1", "backbone.stage_depths");
    if (heads_per_stage[s] == 0 || stage_dims[s] % heads_per_stage[s] != 0) {
      throw ConfigError(fmt::format("stage {} dim {} not divisible by {} heads", s + 1,
                                    stage_dims[s], heads_per_stage[s]),
                        "backbone.heads_per_stage");
    }
    if (s > 0 && stage_dims[s] != 2 * stage_dims[s - 1]) {
      throw ConfigError(fmt::format("stage {} dim {} is not double the previous {}", s + 1,
                                    stage_dims[s], stage_dims[s - 1]),
                        "backbone.stage_dims");
    }
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch_size[a] == 0) throw ConfigError("patch extents must be >= 1", "backbone.patch_size");
    if (window_size[a] == 0) throw ConfigError("window extents must be >= 1", "backbone.window_size");
  }
  for (std::size_t e : input_shape) {
    if (e == 0) throw ConfigError("input extents must be >= 1", "backbone.input_shape");
  }
  if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive", "backbone.mlp_ratio");
  if (num_classes == 0) throw ConfigError("num_classes must be >= 1", "backbone.num_classes");
}

BackboneConfig toy_config() { return BackboneConfig{}; }

BackboneConfig swin_b_shape_config() {
  BackboneConfig c;
  c.input_shape = {32, 224, 224, 3};
  c.patch_size = {2, 4, 4};
  c.stage_depths = {2, 2, 18, 2};
  c.stage_dims = {128, 256, 512, 1024};
  c.heads_per_stage = {4, 8, 16, 32};
  c.window_size = {16, 7, 7};
  c.mlp_ratio = 4.0;
  c.num_classes = 400;
  c.pos_embed = PosEmbed::none;
  return c;
}

WindowLayout make_window_layout(const Extent3& grid, const Extent3& window) {
  WindowLayout L;
  L.grid = grid;
  std::size_t counts[3];
  for (std::size_t a = 0; a < 3; ++a) {
    L.window[a] = std::min(window[a], grid[a]);
    counts[a] = ceil_div(grid[a], L.window[a]);
    L.padded[a] = counts[a] * L.window[a];
  }
  L.num_windows = counts[0] * counts[1] * counts[2];
  L.tokens_per_window = L.window[0] * L.window[1] * L.window[2];
  L.partition.assign(L.num_windows * L.tokens_per_window, -1);
  L.reverse.assign(L.num_tokens(), -1);
  std::size_t slot = 0;
  for (std::size_t wt = 0; wt < counts[0]; ++wt)
    for (std::size_t wh = 0; wh < counts[1]; ++wh)
      for (std::size_t ww = 0; ww < counts[2]; ++ww)
        for (std::size_t t = 0; t < L.window[0]; ++t)
          for (std::size_t h = 0; h < L.window[1]; ++h)
            for (std::size_t w = 0; w < L.window[2]; ++w, ++slot) {
              const std::size_t gt = wt * L.window[0] + t;
              const std::size_t gh = wh * L.window[1] + h;
              const std::size_t gw = ww * L.window[2] + w;
              if (gt >= grid[0] || gh >= grid[1] || gw >= grid[2]) continue;
              const std::size_t row = (gt * grid[1] + gh) * grid[2] + gw;
              L.partition[slot] = static_cast<std::int64_t>(row);
              L.reverse[row] = static_cast<std::int64_t>(slot);
            }
  return L;
}

Tensor window_partition(const Tensor& tokens, const WindowLayout& layout) {
  if (tokens.dim() != 2 || tokens.size(0) != layout.num_tokens()) {
    throw DimensionError(fmt::format("window_partition: tokens {} do not fit grid of {} tokens",
                                     to_string(tokens.shape()), layout.num_tokens()));
  }
  return ops::reshape(ops::take_rows(tokens, layout.partition),
                      {layout.num_windows, layout.tokens_per_window, tokens.size(1)});
}

Tensor window_reverse(const Tensor& windows, const WindowLayout& layout) {
  if (windows.dim() != 3 || windows.size(0) != layout.num_windows ||
      windows.size(1) != layout.tokens_per_window) {
    throw DimensionError(fmt::format("window_reverse: {} does not match {} windows of {}",
                                     to_string(windows.shape()), layout.num_windows,
                                     layout.tokens_per_window));
  }
  const std::size_t c = windows.size(2);
  return ops::take_rows(ops::reshape(windows, {layout.num_windows * layout.tokens_per_window, c}),
                        layout.reverse);
}

std::vector<StageGeometry> stage_geometry(const BackboneConfig& cfg) {
  cfg.validate();
  std::vector<StageGeometry> out;
  Extent3 grid{ceil_div(cfg.input_shape[0], cfg.patch_size[0]),
               ceil_div(cfg.input_shape[1], cfg.patch_size[1]),
               ceil_div(cfg.input_shape[2], cfg.patch_size[2])};
  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    if (s > 0) grid = {grid[0], ceil_div(grid[1], 2), ceil_div(grid[2], 2)};
    StageGeometry g;
    g.grid = grid;
    g.dim = cfg.stage_dims[s];
    g.heads = cfg.heads_per_stage[s];
    g.depth = cfg.stage_depths[s];
    g.layout = make_window_layout(grid, cfg.window_size);
    out.push_back(std::move(g));
  }
  return out;
}

Tensor key_mask(const WindowLayout& layout) {
  if (!layout.has_padding()) return {};
  std::vector<double> m(layout.partition.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = layout.partition[i] < 0 ? kMaskedScore : 0.0;
  return Tensor::from({layout.num_windows, 1, 1, layout.tokens_per_window}, std::move(m));
}

Tensor windowed_mhsa(const Tensor& windows, const LayerParams& p, std::size_t heads,
                     const Tensor& mask, BlockPlugin* plugin) {
  if (windows.dim() != 3) {
    throw DimensionError(fmt::format("windowed_mhsa: expected (windows, tokens, C), got {}",
                                     to_string(windows.shape())));
  }
  const std::size_t nw = windows.size(0), s = windows.size(1), c = windows.size(2);
  if (heads == 0 || c % heads != 0) {
    throw DimensionError(fmt::format("windowed_mhsa: {} channels over {} heads", c, heads));
  }
  const std::size_t dh = c / heads;
  auto split_heads = [&](const Tensor& t) {
    return ops::permute(ops::reshape(t, {nw, s, heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = split_heads(ops::linear(windows, p.wq, p.bq));
  Tensor k = split_heads(ops::linear(windows, p.wk, p.bk));
  Tensor v = split_heads(ops::linear(windows, p.wv, p.bv));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = ops::add(scores, mask);
  Tensor h = ops::matmul(ops::softmax(scores, 3), v);
  if (plugin != nullptr) h = plugin->attend(q, h);
  Tensor merged = ops::reshape(ops::permute(h, {0, 2, 1, 3}), {nw, s, c});
  return ops::linear(merged, p.wo, p.bo);
}

Tensor transformer_block(const Tensor& x, const WindowLayout& layout, const LayerParams& p,
                         std::size_t heads, BlockPlugin* plugin) {
  Tensor xn = ops::layer_norm(x, p.ln1_g, p.ln1_b);
  Tensor attn = window_reverse(
      windowed_mhsa(window_partition(xn, layout), p, heads, key_mask(layout), plugin), layout);
  Tensor y = ops::add(x, attn);
  if (plugin != nullptr) {
    Tensor branch = plugin->attention_branch(xn, layout);
    if (branch.defined()) y = ops::add(y, branch);
  }
  Tensor yn = ops::layer_norm(y, p.ln2_g, p.ln2_b);
  Tensor mlp = ops::linear(ops::gelu(ops::linear(yn, p.w1, p.b1)), p.w2, p.b2);
  Tensor out = ops::add(y, mlp);
  if (plugin != nullptr) {
    Tensor branch = plugin->mlp_branch(yn, layout);
    if (branch.defined()) out = ops::add(out, branch);
  }
  return out;
}

Backbone::Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  geometry_ = stage_geometry(cfg_);
  CounterRng root(cfg_.seed, 0xBAC4B0E);
  std::uint64_t label = 0;
  auto next = [&]() { return root.fork(++label); };

  const auto [T, H, W, C] = cfg_.input_shape;
  const auto [pt, ph, pw] = cfg_.patch_size;
  const Extent3 g0 = geometry_[0].grid;
  for (std::size_t a = 0; a < g0[0]; ++a)
    for (std::size_t b = 0; b < g0[1]; ++b)
      for (std::size_t c = 0; c < g0[2]; ++c)
        for (std::size_t dt = 0; dt < pt; ++dt)
          for (std::size_t dy = 0; dy < ph; ++dy)
            for (std::size_t dx = 0; dx < pw; ++dx) {
              const std::size_t t = a * pt + dt, y = b * ph + dy, x = c * pw + dx;
              patch_index_.push_back(t < T && y < H && x < W
                                         ? static_cast<std::int64_t>((t * H + y) * W + x)
                                         : -1);
            }

  const std::size_t d0 = cfg_.embed_dim();
  {
    CounterRng r = next();
    patch_w_ = fan_in_weight(pt * ph * pw * C, d0, r);
    patch_b_ = small_bias(d0, r);
    patch_ln_g_ = Tensor::ones({d0});
    patch_ln_b_ = Tensor::zeros({d0});
    if (cfg_.pos_embed == PosEmbed::absolute) {
      pos_ = normal_tensor({g0[0] * g0[1] * g0[2], d0}, r, 0.02);
    }
  }
  layers_.resize(cfg_.num_stages());
  for (std::size_t s = 0; s < cfg_.num_stages(); ++s) {
    const std::size_t d = cfg_.stage_dims[s];
    const std::size_t hidden = cfg_.mlp_hidden(s);
    if (s > 0) {
      CounterRng r = next();
      const std::size_t dp = cfg_.stage_dims[s - 1];
      merges_.push_back({Tensor::ones({4 * dp}), Tensor::zeros({4 * dp}), fan_in_weight(4 * dp, d, r)});
      merge_index_.push_back(merge_index(geometry_[s - 1].grid));
    }
    for (std::size_t l = 0; l < cfg_.stage_depths[s]; ++l) {
      CounterRng r = next();
      LayerParams p;
      p.ln1_g = Tensor::ones({d});
      p.ln1_b = Tensor::zeros({d});
      p.wq = fan_in_weight(d, d, r);
      p.bq = small_bias(d, r);
      p.wk = fan_in_weight(d, d, r);
      p.bk = small_bias(d, r);
      p.wv = fan_in_weight(d, d, r);
      p.bv = small_bias(d, r);
      p.wo = fan_in_weight(d, d, r);
      p.bo = small_bias(d, r);
      p.ln2_g = Tensor::ones({d});
      p.ln2_b = Tensor::zeros({d});
      p.w1 = fan_in_weight(d, hidden, r);
      p.b1 = small_bias(hidden, r);
      p.w2 = fan_in_weight(hidden, d, r);
      p.b2 = small_bias(d, r);
      layers_[s].push_back(std::move(p));
    }
  }
  const std::size_t dl = cfg_.stage_dims.back();
  CounterRng r = next();
  norm_g_ = Tensor::ones({dl});
  norm_b_ = Tensor::zeros({dl});
  head_w_ = normal_tensor({dl, cfg_.num_classes}, r, 0.02);
  head_b_ = Tensor::zeros({cfg_.num_classes});
}

TokenGrid Backbone::patch_embed(const Tensor& video) const {
  const auto [T, H, W, C] = cfg_.input_shape;
  if (video.dim() != 4) {
    throw DimensionError(fmt::format("patch_embed: expected (T, H, W, C), got {}",
                                     to_string(video.shape())));
  }
  if (video.size(3) != C) {
    throw ConfigError(fmt::format("video has {} channels, config expects {}", video.size(3), C),
                      "backbone.input_shape");
  }
  if (video.size(0) != T || video.size(1) != H || video.size(2) != W) {
    throw DimensionError(fmt::format("patch_embed: video {} does not match configured input ({}, {}, {}, {})",
                                     to_string(video.shape()), T, H, W, C));
  }
  const Extent3 g = geometry_[0].grid;
  const std::size_t n = g[0] * g[1] * g[2];
  const std::size_t per = patch_index_.size() / n;
  Tensor rows = ops::take_rows(ops::reshape(video, {T * H * W, C}), patch_index_);
  Tensor x = ops::linear(ops::reshape(rows, {n, per * C}), patch_w_, patch_b_);
  x = ops::layer_norm(x, patch_ln_g_, patch_ln_b_);
  if (pos_.defined()) x = ops::add(x, pos_);
  return {x, g};
}

Tensor Backbone::features(const Tensor& video, const PluginLookup& plugins) const {
  Tensor x = patch_embed(video).tokens;
  for (std::size_t s = 0; s < cfg_.num_stages(); ++s) {
    if (s > 0) {
      const MergeParams& m = merges_[s - 1];
      const std::size_t cprev = cfg_.stage_dims[s - 1];
      const std::size_t n = geometry_[s].layout.num_tokens();
      Tensor cat = ops::reshape(ops::take_rows(x, merge_index_[s - 1]), {n, 4 * cprev});
      x = ops::matmul(ops::layer_norm(cat, m.ln_g, m.ln_b), m.w);
    }
    const StageGeometry& g = geometry_[s];
    for (std::size_t l = 0; l < g.depth; ++l) {
      BlockPlugin* plugin = plugins ? plugins(s, l) : nullptr;
      x = transformer_block(x, g.layout, layers_[s][l], g.heads, plugin);
    }
  }
  return ops::mean_axis(ops::layer_norm(x, norm_g_, norm_b_), 0);
}

Tensor Backbone::head(const Tensor& features) const { return ops::linear(features, head_w_, head_b_); }

Tensor Backbone::forward(const Tensor& video, const PluginLookup& plugins) const {
  return head(features(video, plugins));
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{
      {"patch.w", patch_w_}, {"patch.b", patch_b_}, {"patch.ln_g", patch_ln_g_}, {"patch.ln_b", patch_ln_b_}};
  if (pos_.defined()) out.emplace_back("patch.pos", pos_);
  for (std::size_t s = 0; s < layers_.size(); ++s) {
    if (s > 0) {
      const MergeParams& m = merges_[s - 1];
      const std::string pre = fmt::format("merge{}.", s);
      out.emplace_back(pre + "ln_g", m.ln_g);
      out.emplace_back(pre + "ln_b", m.ln_b);
      out.emplace_back(pre + "w", m.w);
    }
    for (std::size_t l = 0; l < layers_[s].size(); ++l) {
      const LayerParams& p = layers_[s][l];
      const std::string pre = fmt::format("stage{}.layer{}.", s, l);
      const std::pair<const char*, const Tensor*> fields[] = {
          {"ln1_g", &p.ln1_g}, {"ln1_b", &p.ln1_b}, {"wq", &p.wq}, {"bq", &p.bq},
          {"wk", &p.wk},       {"bk", &p.bk},       {"wv", &p.wv}, {"bv", &p.bv},
          {"wo", &p.wo},       {"bo", &p.bo},       {"ln2_g", &p.ln2_g}, {"ln2_b", &p.ln2_b},
          {"w1", &p.w1},       {"b1", &p.b1},       {"w2", &p.w2}, {"b2", &p.b2}};
      for (const auto& [name, t] : fields) out.emplace_back(pre + name, *t);
    }
  }
  out.emplace_back("norm.g", norm_g_);
  out.emplace_back("norm.b", norm_b_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_head_parameters() const {
  return {{"head.w", head_w_}, {"head.b", head_b_}};
}

void Backbone::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
}

void Backbone::set_head_trainable(bool on) {
  for (auto& [name, t] : named_head_parameters()) t.set_requires_grad(on);
}

}  // namespace vidplug
