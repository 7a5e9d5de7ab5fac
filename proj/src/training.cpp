// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "binio.hpp"
#include "vidplug/errors.hpp"
#include "vidplug/losses.hpp"
#include "vidplug/ops.hpp"

namespace vidplug {

namespace {

const char* const kGroupOrder[] = {group::backbone, group::head,   group::mhva,        group::prefix,
                                   group::caa,      group::fusion, group::late_fusion, group::caa_adapter};

constexpr char kCheckpointMagic[4] = {'V', 'P', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool is_reference_group(const std::string& g) { return g == group::backbone || g == group::head; }

void finish_report(ParamReport& r) {
  r.backbone_total = 0;
  r.trainable_total = 0;
  for (const GroupCount& g : r.groups) {
    if (is_reference_group(g.name)) r.backbone_total += g.count;
    if (g.trainable) r.trainable_total += g.count;
  }
  r.ratio_percent = r.backbone_total == 0
                        ? 0.0
                        : 100.0 * static_cast<double>(r.trainable_total) / static_cast<double>(r.backbone_total);
}

std::vector<std::string> placement_assumptions(const BackboneConfig& b, const PluginConfig& p) {
  std::vector<std::string> a;
  a.push_back("backbone total includes the task head; the head trains with the plugins when train_head is on");
  a.push_back(fmt::format("position embedding: {}", to_string(b.pos_embed)));
  if (p.mhva) {
    a.push_back(fmt::format("MHVA on the {} sublayer of every layer; groups = {}", to_string(p.adapter_site),
                            p.scaled_parallel_only ? std::string("1")
                            : p.mhva_groups        ? std::to_string(p.mhva_groups)
                                                   : fmt::format("min(windows, {})", p.mhva_group_cap)));
    std::string ratios;
    for (double r : p.r_ratio) ratios += fmt::format("{}{}", ratios.empty() ? "" : ",", r);
    a.push_back(fmt::format("bottleneck r = round(ratio * d), ratio = {}; adapters have no biases; scale {}",
                            ratios, p.learnable_scale ? "learnable (1 per adapter)" : "fixed"));
  }
  if (p.prefix) {
    a.push_back(fmt::format("prefix on every layer: L = {}, d_p = {}, generator hidden d_p/4, gate per head",
                            p.prefix_length, p.prefix_dim ? std::to_string(p.prefix_dim) : "min(64, d/8)"));
  }
  if (p.any_side_path()) {
    std::string mods;
    for (const ModalitySpec& m : p.modalities) mods += fmt::format("{}{}:{}", mods.empty() ? "" : ", ", m.name, m.dim);
    a.push_back(fmt::format("side modalities ({}) pooled by a full Conv1d, kernel {}", mods, p.pool_kernel));
    if (p.caa) {
      a.push_back("CAA on every layer of stages with depth <= 4, otherwise on the first two and last two layers");
    } else {
      a.push_back("late fusion at the last layer of the last stage only");
    }
    a.push_back(p.fusion ? "fusion in bottleneck space: W_Q, W_K (r x r) and a shared W_V (r x d) per CAA layer"
                         : "no fusion: each CAA keeps its own up-projection and scale");
  }
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Groups and accounting

std::size_t ParamGroup::count() const {
  std::size_t n = 0;
  for (const NamedTensor& t : members) n += t.tensor.numel();
  return n;
}

std::vector<ParamGroup> param_groups(const Model& m) {
  std::vector<ParamGroup> out;
  const std::vector<NamedTensor> params = m.parameters();
  for (const char* name : kGroupOrder) {
    ParamGroup g;
    g.name = name;
    for (const NamedTensor& t : params) {
      if (t.group == name) g.members.push_back(t);
    }
    if (g.members.empty()) continue;
    g.trainable = std::all_of(g.members.begin(), g.members.end(),
                              [](const NamedTensor& t) { return t.tensor.requires_grad(); });
    out.push_back(std::move(g));
  }
  return out;
}

void freeze_backbone(Model& m) {
  m.apply_train_mode(TrainMode::plugins);
  for (const NamedTensor& t : m.parameters()) {
    const bool want = m.group_trainable(t.group, TrainMode::plugins);
    if (t.tensor.requires_grad() != want) {
      throw ContractError(fmt::format("freeze audit failed on {} (group {})", t.name, t.group));
    }
  }
}

std::size_t ParamReport::group(const std::string& name) const {
  for (const GroupCount& g : groups) {
    if (g.name == name) return g.count;
  }
  return 0;
}

std::string ParamReport::to_json() const {
  nlohmann::ordered_json j;
  j["backbone_total"] = backbone_total;
  j["trainable_total"] = trainable_total;
  j["ratio_percent"] = ratio_percent;
  j["macs"] = macs;
  j["groups"] = nlohmann::ordered_json::object();
  for (const GroupCount& g : groups) j["groups"][g.name] = {{"count", g.count}, {"trainable", g.trainable}};
  j["assumptions"] = assumptions;
  return j.dump();
}

std::string ParamReport::to_table() const {
  std::string out = fmt::format("{:<14} {:>14} {:>10}\n", "group", "params", "trainable");
  for (const GroupCount& g : groups) {
    out += fmt::format("{:<14} {:>14} {:>10}\n", g.name, g.count, g.trainable ? "yes" : "no");
  }
  out += fmt::format("{:<14} {:>14}\n", "backbone", backbone_total);
  out += fmt::format("{:<14} {:>14}\n", "trainable", trainable_total);
  out += fmt::format("{:<14} {:>13.2f}%\n", "ratio", ratio_percent);
  out += fmt::format("{:<14} {:>14.3f} G\n", "MACs/forward", static_cast<double>(macs) * 1e-9);
  for (const std::string& a : assumptions) out += "  * " + a + "\n";
  return out;
}

ParamReport count_params(const Model& m) {
  ParamReport r;
  const std::vector<NamedTensor> params = m.parameters();
  for (const char* name : kGroupOrder) {
    GroupCount g{name, 0, false};
    bool any = false;
    for (const NamedTensor& t : params) {
      if (t.group != name) continue;
      any = true;
      g.count += t.tensor.numel();
      g.trainable = g.trainable || t.tensor.requires_grad();
    }
    if (any) r.groups.push_back(g);
  }
  finish_report(r);
  r.trainable_total = 0;
  for (const NamedTensor& t : params) {
    if (t.tensor.requires_grad()) r.trainable_total += t.tensor.numel();
  }
  r.ratio_percent = r.backbone_total == 0 ? 0.0
                                          : 100.0 * static_cast<double>(r.trainable_total) /
                                                static_cast<double>(r.backbone_total);
  r.macs = estimate_flops(m.backbone_config(), m.plugin_config());
  r.assumptions = placement_assumptions(m.backbone_config(), m.plugin_config());
  return r;
}

ParamReport count_params(const BackboneConfig& b, const PluginConfig& p, TrainMode mode) {
  b.validate();
  const PlacementPlan plan = resolve_placement(b, p);
  const std::vector<StageGeometry> geo = stage_geometry(b);
  std::map<std::string, std::size_t> n;

  const std::size_t c_in = b.input_shape[3];
  const std::size_t patch = b.patch_size[0] * b.patch_size[1] * b.patch_size[2] * c_in;
  const std::size_t d0 = b.stage_dims[0];
  std::size_t& bb = n[group::backbone];
  bb += patch * d0 + d0 + 2 * d0;
  if (b.pos_embed == PosEmbed::absolute) bb += geo[0].grid[0] * geo[0].grid[1] * geo[0].grid[2] * d0;
  for (std::size_t s = 0; s < b.num_stages(); ++s) {
    const std::size_t d = b.stage_dims[s], h = b.mlp_hidden(s);
    if (s > 0) {
      const std::size_t pd = b.stage_dims[s - 1];
      bb += 2 * 4 * pd + 4 * pd * d;
    }
    bb += b.stage_depths[s] * (4 * (d * d + d) + 4 * d + d * h + h + h * d + d);
  }
  const std::size_t dl = b.stage_dims.back();
  bb += 2 * dl;
  n[group::head] = dl * b.num_classes + b.num_classes;

  const std::size_t nmod = p.any_side_path() ? p.modalities.size() : 0;
  const char* side = p.late_fusion ? group::late_fusion : group::caa;
  for (std::size_t m = 0; m < nmod; ++m) {
    const std::size_t dm = p.modalities[m].dim;
    n[side] += p.pool_kernel * dm * dm + dm;
  }
  for (const LayerPlan& lp : plan.layers) {
    const std::size_t d = lp.dim, r = lp.r;
    for (std::size_t groups : {lp.groups_attention, lp.groups_mlp}) {
      if (groups) n[group::mhva] += groups * 2 * d * r + (p.learnable_scale ? 1 : 0);
    }
    if (lp.prefix_length) {
      const std::size_t dp = lp.prefix_dim, hid = std::max<std::size_t>(1, dp / 4);
      n[group::prefix] += lp.prefix_length * dp + dp * hid + hid + hid * d + d + lp.heads;
    }
    if (!(lp.caa || lp.late_fusion) || nmod == 0) continue;
    const char* grp = lp.late_fusion ? group::late_fusion : group::caa;
    for (std::size_t m = 0; m < nmod; ++m) {
      n[grp] += p.modalities[m].dim * r + r;
      if (!p.fusion) n[grp] += r * d + 1;
      if (p.adapters_on_caa) {
        n[grp] += d * r;
        const std::size_t ra = plan.caa_adapter_r(d);
        n[group::caa_adapter] += 2 * d * ra + 1;
      }
    }
    if (p.fusion) n[group::fusion] += 2 * r * r + r * d;
  }

  ParamReport rep;
  for (const char* name : kGroupOrder) {
    const auto it = n.find(name);
    if (it == n.end() || it->second == 0) continue;
    rep.groups.push_back({name, it->second, group_trainable(p, name, mode)});
  }
  finish_report(rep);
  rep.macs = estimate_flops(b, p);
  rep.assumptions = placement_assumptions(b, p);
  return rep;
}

std::uint64_t estimate_flops(const BackboneConfig& b, const PluginConfig& p) {
  using u64 = std::uint64_t;
  b.validate();
  const PlacementPlan plan = resolve_placement(b, p);
  const std::vector<StageGeometry> geo = stage_geometry(b);
  const u64 patch = b.patch_size[0] * b.patch_size[1] * b.patch_size[2] * b.input_shape[3];
  const u64 tprime = plan.temporal_steps;
  const std::size_t nmod = p.any_side_path() ? p.modalities.size() : 0;

  u64 macs = static_cast<u64>(geo[0].layout.num_tokens()) * patch * b.stage_dims[0];
  for (std::size_t m = 0; m < nmod; ++m) {
    const u64 dm = p.modalities[m].dim;
    macs += tprime * p.pool_kernel * dm * dm;
  }
  for (std::size_t s = 0; s < geo.size(); ++s) {
    const StageGeometry& g = geo[s];
    const u64 d = g.dim, tokens = g.layout.num_tokens();
    const u64 nw = g.layout.num_windows, tpw = g.layout.tokens_per_window, padded = nw * tpw;
    if (s > 0) macs += tokens * 4 * b.stage_dims[s - 1] * d;
    for (const LayerPlan& lp : plan.layers) {
      if (lp.stage != s) continue;
      const u64 r = lp.r;
      macs += 4 * padded * d * d;         // q, k, v, output projections
      macs += 2 * nw * tpw * tpw * d;     // scores and weighted values over all heads
      macs += 2 * tokens * d * b.mlp_hidden(s);
      if (lp.groups_attention) macs += 2 * padded * d * r;
      if (lp.groups_mlp) macs += 2 * padded * d * r;
      if (lp.prefix_length) {
        const u64 len = lp.prefix_length, dp = lp.prefix_dim, hid = std::max<u64>(1, dp / 4);
        macs += len * dp * hid + len * hid * d + 2 * len * d * d + 2 * padded * len * d;
      }
      if (!(lp.caa || lp.late_fusion) || nmod == 0) continue;
      for (std::size_t m = 0; m < nmod; ++m) {
        const u64 dm = p.modalities[m].dim;
        macs += tprime * dm * r + 2 * tokens * tprime * r;
        if (!lp.late_fusion) macs += tprime * tokens * r;  // temporal alignment of values
        if (p.adapters_on_caa) {
          macs += tokens * d * r + 2 * tokens * d * plan.caa_adapter_r(d);
        }
        if (!p.fusion) macs += tokens * r * d;
      }
      if (p.fusion) macs += tokens * r * r + nmod * (tokens * r * r + tokens * r + tokens * r * d);
    }
  }
  macs += static_cast<u64>(b.stage_dims.back()) * b.num_classes;
  return macs;
}

// ---------------------------------------------------------------------------
// Optimization

Schedule Schedule::cosine_with_warmup(double base_lr, std::size_t total_steps, double warmup_fraction) {
  Schedule s;
  s.base_lr = base_lr;
  s.total_steps = std::max<std::size_t>(1, total_steps);
  s.warmup_steps = static_cast<std::size_t>(std::lround(warmup_fraction * static_cast<double>(s.total_steps)));
  return s;
}

double Schedule::lr_at(std::size_t t) const {
  if (t < warmup_steps) return base_lr * static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
  const std::size_t span = std::max<std::size_t>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(t - warmup_steps) / static_cast<double>(span));
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string Schedule::describe() const {
  return fmt::format("cosine(base={}, total={}, warmup={})", base_lr, total_steps, warmup_steps);
}

double scale_lr_for_batch(double base_lr, std::size_t batch_size) {
  return base_lr * (3.0 + static_cast<double>(batch_size)) / 5.0;
}

namespace {

std::vector<NamedTensor> trainable_of(const Model& m) {
  std::vector<NamedTensor> out;
  for (const NamedTensor& t : m.parameters()) {
    if (t.tensor.requires_grad()) out.push_back(t);
  }
  return out;
}

}  // namespace

AdamW::AdamW(const Model& model, AdamWConfig cfg, double base_lr) : AdamW(trainable_of(model), cfg, base_lr) {}

AdamW::AdamW(std::vector<NamedTensor> params, AdamWConfig cfg, double base_lr) {
  for (NamedTensor& t : params) {
    if (!t.tensor.requires_grad()) continue;
    state_.moments[t.name] = {std::vector<double>(t.tensor.numel(), 0.0),
                              std::vector<double>(t.tensor.numel(), 0.0)};
    params_.push_back(std::move(t));
  }
  state_.config = cfg;
  state_.base_lr = base_lr;
}

void AdamW::step(double lr) {
  for (const NamedTensor& t : params_) {
    if (!t.tensor.has_grad()) continue;
    for (double g : t.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError(fmt::format("non-finite gradient in {}", t.name));
    }
  }
  const AdamWConfig& c = state_.config;
  const double step = static_cast<double>(++state_.step);
  const double bc1 = 1.0 - std::pow(c.beta1, step);
  const double bc2 = 1.0 - std::pow(c.beta2, step);
  for (NamedTensor& t : params_) {
    auto& mom = state_.moments.at(t.name);
    auto p = t.tensor.mutable_data();
    const bool has = t.tensor.has_grad();
    const auto g = has ? t.tensor.grad() : std::span<const double>{};
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      p[i] *= 1.0 - lr * c.weight_decay;
      mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
      mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
      const double denom = std::sqrt(mom.v[i]) / std::sqrt(bc2) + c.eps;
      p[i] -= (lr / bc1) * mom.m[i] / denom;
    }
    round_to(p, t.tensor.precision());
  }
}

void AdamW::zero_grad() {
  for (NamedTensor& t : params_) t.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t backbone_digest(const BackboneConfig& b) {
  std::string s = fmt::format("in={},{},{},{};patch={},{},{};depths=", b.input_shape[0], b.input_shape[1],
                              b.input_shape[2], b.input_shape[3], b.patch_size[0], b.patch_size[1],
                              b.patch_size[2]);
  for (std::size_t v : b.stage_depths) s += fmt::format("{},", v);
  s += ";dims=";
  for (std::size_t v : b.stage_dims) s += fmt::format("{},", v);
  s += ";heads=";
  for (std::size_t v : b.heads_per_stage) s += fmt::format("{},", v);
  s += fmt::format(";window={},{},{};mlp={:a};classes={};head={};pos={};seed={}", b.window_size[0],
                   b.window_size[1], b.window_size[2], b.mlp_ratio, b.num_classes, to_string(b.task_head),
                   to_string(b.pos_embed), b.seed);
  return fnv1a(s);
}

void save_checkpoint(const Model& m, const std::filesystem::path& path, CheckpointKind kind,
                     const OptimizerState* opt, std::uint64_t seed) {
  binio::Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(backbone_digest(m.backbone_config()));
  w.u64(seed);
  std::vector<NamedTensor> records;
  for (const NamedTensor& t : m.parameters()) {
    if (kind == CheckpointKind::plugins && t.group == group::backbone) continue;
    records.push_back(t);
  }
  w.u64(records.size());
  for (const NamedTensor& t : records) {
    w.str(t.name);
    const Shape& shape = t.tensor.shape();
    w.u64(shape.size());
    for (std::size_t e : shape) w.u64(e);
    const Precision prec = t.tensor.precision();
    w.u8(static_cast<std::uint8_t>(prec));
    for (double v : t.tensor.data()) {
      if (prec == Precision::f32) {
        const float f = static_cast<float>(v);
        w.bytes(&f, 4);
      } else {
        w.f64(v);
      }
    }
  }
  w.u8(opt != nullptr ? 1 : 0);
  if (opt != nullptr) {
    w.u64(opt->step);
    w.f64(opt->base_lr);
    w.f64(opt->config.weight_decay);
    w.f64(opt->config.beta1);
    w.f64(opt->config.beta2);
    w.f64(opt->config.eps);
    w.str(opt->schedule);
    w.u64(opt->moments.size());
    for (const auto& [name, mom] : opt->moments) {
      w.str(name);
      w.f64s(mom.m);
      w.f64s(mom.v);
    }
  }
  w.u64(fnv1a(w.buffer()));
  w.save(path);
}

std::uint64_t load_checkpoint(Model& m, const std::filesystem::path& path, OptimizerState* opt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  const std::string bytes(std::istreambuf_iterator<char>(in), {});
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, kCheckpointMagic)) {
    throw FormatError("not a checkpoint: bad magic");
  }
  if (bytes.size() < 4 + 4 + 8) throw FormatError("truncated checkpoint");
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  const std::string body = bytes.substr(0, bytes.size() - 8);
  if (fnv1a(body) != stored_sum) throw FormatError("checkpoint checksum mismatch (truncated or corrupt)");

  binio::Reader r(body);
  char magic[4];
  r.bytes(magic, 4);
  if (const std::uint32_t v = r.u32(); v != kCheckpointVersion) {
    throw FormatError(fmt::format("unsupported checkpoint version {}", v));
  }
  const std::uint8_t kind_raw = r.u8();
  if (kind_raw > 1) throw FormatError("unknown checkpoint kind");
  const auto kind = static_cast<CheckpointKind>(kind_raw);
  const std::uint64_t digest = r.u64();
  const std::uint64_t seed = r.u64();
  if (digest != backbone_digest(m.backbone_config())) {
    throw CompatibilityError(fmt::format("checkpoint backbone digest {:016x} does not match config digest {:016x}",
                                         digest, backbone_digest(m.backbone_config())));
  }

  std::map<std::string, std::pair<Shape, std::vector<double>>> records;
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint64_t rank = r.u64();
    if (rank > 8) throw FormatError("tensor rank out of range");
    Shape shape(rank);
    for (std::size_t& e : shape) e = r.u64();
    const std::uint8_t prec = r.u8();
    if (prec != 4 && prec != 8) throw FormatError("unknown tensor precision");
    const std::size_t n = numel(shape);
    if (n > r.size()) throw FormatError("truncated checkpoint");
    std::vector<double> values(n);
    for (double& v : values) {
      if (prec == 4) {
        float f;
        r.bytes(&f, 4);
        v = f;
      } else {
        v = r.f64();
      }
    }
    records[std::move(name)] = {std::move(shape), std::move(values)};
  }
  OptimizerState loaded_opt;
  const bool has_opt = r.u8() != 0;
  if (has_opt) {
    loaded_opt.step = r.u64();
    loaded_opt.base_lr = r.f64();
    loaded_opt.config.weight_decay = r.f64();
    loaded_opt.config.beta1 = r.f64();
    loaded_opt.config.beta2 = r.f64();
    loaded_opt.config.eps = r.f64();
    loaded_opt.schedule = r.str();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      OptimizerState::Moments mom;
      mom.m = r.f64s();
      mom.v = r.f64s();
      loaded_opt.moments[std::move(name)] = std::move(mom);
    }
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint");

  // Validate every target before writing any of them.
  std::vector<NamedTensor> targets;
  for (const NamedTensor& t : m.parameters()) {
    if (kind == CheckpointKind::plugins && t.group == group::backbone) continue;
    const auto it = records.find(t.name);
    if (it == records.end()) throw CompatibilityError("checkpoint lacks tensor " + t.name);
    if (it->second.first != t.tensor.shape()) {
      throw CompatibilityError(fmt::format("tensor {}: checkpoint shape {} vs model {}", t.name,
                                           to_string(it->second.first), to_string(t.tensor.shape())));
    }
    targets.push_back(t);
  }
  if (targets.size() != records.size()) throw CompatibilityError("checkpoint holds tensors the model lacks");
  for (NamedTensor& t : targets) {
    const std::vector<double>& src = records.at(t.name).second;
    std::copy(src.begin(), src.end(), t.tensor.mutable_data().begin());
  }
  if (opt != nullptr && has_opt) *opt = std::move(loaded_opt);
  return seed;
}

// ---------------------------------------------------------------------------
// Training and evaluation

const char* to_string(Metric m) {
  switch (m) {
    case Metric::top1:
      return "top1";
    case Metric::map:
      return "map";
    case Metric::mse:
      return "mse";
  }
  return "?";
}

Metric parse_metric(const std::string& s) {
  if (s == "top1") return Metric::top1;
  if (s == "map") return Metric::map;
  if (s == "mse") return Metric::mse;
  throw ConfigError(fmt::format("unknown metric '{}'", s), "training.metric");
}

Metric default_metric(TaskHead head) {
  switch (head) {
    case TaskHead::classification:
      return Metric::top1;
    case TaskHead::multilabel:
      return Metric::map;
    case TaskHead::regression:
      return Metric::mse;
  }
  return Metric::top1;
}

bool higher_is_better(Metric m) { return m != Metric::mse; }

namespace {

void check_metric(TaskHead head, Metric metric) {
  const bool ok = metric == Metric::mse ? head == TaskHead::regression : head != TaskHead::regression;
  if (!ok || (metric == Metric::top1 && head != TaskHead::classification)) {
    throw ConfigError(fmt::format("metric {} does not fit a {} head", to_string(metric), to_string(head)),
                      "training.metric");
  }
}

std::vector<ModalityStream> streams_for(const Model& m, const Sample& s) {
  const PluginConfig& p = m.plugin_config();
  std::vector<ModalityStream> out;
  if (!p.any_side_path()) return out;
  for (const ModalitySpec& spec : p.modalities) {
    const auto it = std::find_if(s.streams.begin(), s.streams.end(),
                                 [&](const ModalityStream& x) { return x.name == spec.name; });
    if (it == s.streams.end()) {
      throw ConfigError(fmt::format("dataset has no stream for modality '{}'", spec.name), "plugins.modalities");
    }
    out.push_back(*it);
  }
  return out;
}

Tensor one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  std::vector<double> v(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw DataError(fmt::format("label {} out of range", labels[i]));
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor::from({labels.size(), classes}, std::move(v));
}

Tensor targets_of(const std::vector<const Sample*>& batch, std::size_t k) {
  std::vector<double> v;
  v.reserve(batch.size() * k);
  for (const Sample* s : batch) {
    if (s->targets.size() != k) {
      throw DataError(fmt::format("sample has {} targets, head predicts {}", s->targets.size(), k));
    }
    v.insert(v.end(), s->targets.begin(), s->targets.end());
  }
  return Tensor::from({batch.size(), k}, std::move(v));
}

double metric_value(Metric metric, const Tensor& outputs, const std::vector<const Sample*>& batch) {
  const std::size_t k = outputs.size(1);
  std::vector<std::size_t> labels;
  for (const Sample* s : batch) labels.push_back(s->label);
  switch (metric) {
    case Metric::top1:
      return top1_accuracy(outputs, labels);
    case Metric::map:
      return mean_average_precision(outputs, one_hot(labels, k));
    case Metric::mse:
      return mse(outputs, targets_of(batch, k)).item();
  }
  return 0.0;
}

}  // namespace

Tensor batch_loss(const Model& m, const std::vector<const Sample*>& batch, bool training, CounterRng* rng,
                  Tensor* outputs) {
  if (batch.empty()) throw ContractError("batch_loss on an empty batch");
  const std::size_t k = m.backbone_config().num_classes;
  std::vector<Tensor> rows;
  rows.reserve(batch.size());
  for (const Sample* s : batch) {
    rows.push_back(ops::reshape(m.forward(s->video, streams_for(m, *s), training, rng), {1, k}));
  }
  Tensor out = rows.size() == 1 ? rows[0] : ops::concat(rows, 0);
  if (outputs != nullptr) *outputs = out;
  std::vector<std::size_t> labels;
  for (const Sample* s : batch) labels.push_back(s->label);
  switch (m.backbone_config().task_head) {
    case TaskHead::classification:
      return cross_entropy(out, labels);
    case TaskHead::multilabel:
      return binary_cross_entropy_with_logits(out, one_hot(labels, k));
    case TaskHead::regression:
      return mse(out, targets_of(batch, k));
  }
  return {};
}

EvalResult evaluate(const Model& m, const std::vector<Sample>& samples, Metric metric) {
  check_metric(m.backbone_config().task_head, metric);
  if (samples.empty()) throw ContractError("evaluate on an empty split");
  NoGradGuard no_grad;
  std::vector<const Sample*> all;
  for (const Sample& s : samples) all.push_back(&s);
  Tensor outputs;
  EvalResult r;
  r.loss = batch_loss(m, all, false, nullptr, &outputs).item();
  r.metric = metric;
  r.value = metric_value(metric, outputs, all);
  return r;
}

EvalResult evaluate(const Model& m, const std::vector<Sample>& samples) {
  return evaluate(m, samples, default_metric(m.backbone_config().task_head));
}

double TrainConfig::effective_lr() const { return lr_batch_scaling ? scale_lr_for_batch(lr, batch_size) : lr; }

std::string EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["split"] = split;
  j["loss"] = loss;
  j["metric"] = to_string(metric);
  j["value"] = value;
  j["trainable_param_count"] = trainable_params;
  j["wall_seconds"] = wall_seconds ? nlohmann::ordered_json(*wall_seconds) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

namespace {

struct Snapshot {
  std::vector<std::vector<double>> values;
  static Snapshot take(const std::vector<NamedTensor>& params) {
    Snapshot s;
    for (const NamedTensor& t : params) s.values.push_back(t.tensor.to_vector());
    return s;
  }
  void restore(std::vector<NamedTensor>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(values[i].begin(), values[i].end(), params[i].tensor.mutable_data().begin());
    }
  }
};

std::vector<std::size_t> permutation(std::size_t n, CounterRng rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace

TrainHistory train_loop(Model& m, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  if (data.train.empty() || data.val.empty()) throw ContractError("train_loop needs train and val samples");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1", "training.batch_size");
  if (cfg.mode == TrainMode::full) {
    m.apply_train_mode(TrainMode::full);
  } else {
    freeze_backbone(m);
  }
  const Metric metric = cfg.metric.value_or(default_metric(m.backbone_config().task_head));
  check_metric(m.backbone_config().task_head, metric);

  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps != 0) total = std::min(total, cfg.max_steps);
  const Schedule sched = Schedule::cosine_with_warmup(cfg.effective_lr(), total, cfg.warmup_fraction);

  AdamW opt(m, cfg.adamw, sched.base_lr);
  opt.state().schedule = sched.describe();
  std::vector<NamedTensor> trainable = opt.params();
  std::size_t trainable_count = 0;
  for (const NamedTensor& t : trainable) trainable_count += t.tensor.numel();

  const auto start = std::chrono::steady_clock::now();
  auto wall = [&]() -> std::optional<double> {
    if (!cfg.record_wall_time) return std::nullopt;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  TrainHistory hist;
  hist.initial_val = evaluate(m, data.val, metric);
  hist.final_val = hist.initial_val;
  if (hooks.on_start) hooks.on_start(hist.initial_val);
  double best = hist.initial_val.value;
  std::size_t since_best = 0;
  Snapshot good = Snapshot::take(trainable);
  const CounterRng shuffle_root(cfg.seed, 0x5348);
  const std::uint64_t dropout_key = derive_key(cfg.seed, 0xD80F);

  for (std::size_t epoch = 1; epoch <= cfg.epochs && hist.steps < total; ++epoch) {
    const std::vector<std::size_t> order = permutation(n, shuffle_root.fork(epoch));
    double loss_sum = 0.0;
    std::vector<Tensor> outs;
    std::vector<const Sample*> seen;
    for (std::size_t b0 = 0; b0 < n && hist.steps < total; b0 += cfg.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t i = b0; i < std::min(n, b0 + cfg.batch_size); ++i) batch.push_back(&data.train[order[i]]);
      CounterRng drop_rng(dropout_key, hist.steps);
      opt.zero_grad();
      Tensor out;
      double lv = 0.0;
      const double lr = sched.lr_at(hist.steps);
      try {
        Tensor loss = batch_loss(m, batch, true, &drop_rng, &out);
        lv = loss.item();
        if (!std::isfinite(lv)) throw NumericError(fmt::format("training loss became {}", lv));
        loss.backward();
        opt.step(lr);
      } catch (const NumericError& e) {
        good.restore(trainable);
        throw DivergenceError(fmt::format("{} at step {}", e.what(), hist.steps));
      }
      ++hist.steps;
      if (hooks.on_step) hooks.on_step(hist.steps, lr, lv);
      loss_sum += lv * static_cast<double>(batch.size());
      outs.push_back(out.detach());
      seen.insert(seen.end(), batch.begin(), batch.end());
    }
    opt.zero_grad();

    EpochRecord tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.loss = loss_sum / static_cast<double>(seen.size());
    tr.metric = metric;
    tr.value = metric_value(metric, outs.size() == 1 ? outs[0] : ops::concat(outs, 0), seen);
    tr.trainable_params = trainable_count;
    const EvalResult ev = evaluate(m, data.val, metric);
    EpochRecord va = tr;
    va.split = "val";
    va.loss = ev.loss;
    va.value = ev.value;
    tr.wall_seconds = va.wall_seconds = wall();
    hist.records.push_back(tr);
    hist.records.push_back(va);
    hist.final_val = ev;
    good = Snapshot::take(trainable);
    if (!hooks.checkpoint.empty()) {
      save_checkpoint(m, hooks.checkpoint, hooks.checkpoint_kind, &opt.state(), cfg.seed);
    }
    if (hooks.on_epoch) hooks.on_epoch(tr, va);

    const bool improved = higher_is_better(metric) ? ev.value > best : ev.value < best;
    if (improved) {
      best = ev.value;
      since_best = 0;
    } else if (cfg.patience != 0 && ++since_best >= cfg.patience) {
      hist.early_stopped = true;
      break;
    }
  }
  return hist;
}

}  // namespace vidplug
