// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "vidplug/errors.hpp"
#include "vidplug/ops.hpp"

namespace vidplug {

namespace {

Tensor kaiming(std::size_t in, std::size_t out, CounterRng& rng) {
  std::vector<double> v(in * out);
  const double sd = std::sqrt(2.0 / static_cast<double>(in));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from({in, out}, std::move(v));
}

Tensor gaussian(const Shape& shape, CounterRng& rng, double sd) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(shape, std::move(v));
}

// Averaging taps on the diagonal: each output channel starts as the mean of
// its own channel over the kernel window.
Tensor averaging_kernel(std::size_t k, std::size_t d) {
  std::vector<double> v(k * d * d, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t c = 0; c < d; ++c) v[(j * d + c) * d + c] = 1.0 / static_cast<double>(k);
  return Tensor::from({k, d, d}, std::move(v));
}

std::pair<std::size_t, std::size_t> parse_stage_layer(const std::string& s) {
  const auto dot = s.find('.');
  try {
    if (dot == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    const std::size_t a = std::stoul(s.substr(0, dot), &used);
    if (used != dot) throw std::invalid_argument(s);
    const std::string rest = s.substr(dot + 1);
    const std::size_t b = std::stoul(rest, &used);
    if (used != rest.size() || a == 0 || b == 0) throw std::invalid_argument(s);
    return {a - 1, b - 1};
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("expected 'stage.layer' (1-based), got '{}'", s),
                      "plugins.late_fusion_at");
  }
}

void check_probability(double p, const char* key) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError(fmt::format("{} must lie in [0, 1), got {}", key, p), key);
}

struct ForwardState {
  std::vector<Tensor> pooled;
  const std::vector<Tensor>* align = nullptr;
  bool training = false;
  CounterRng* rng = nullptr;
  double adapter_dropout = 0.0;
  double prefix_dropout = 0.0;
};

class LayerPlugin final : public BlockPlugin {
 public:
  LayerPlugin(const Model::LayerModules& m, const ForwardState& st, AdapterSite site)
      : m_(m), st_(st), side_on_attention_(site == AdapterSite::attention && m.mhva_attention) {}

  Tensor attend(const Tensor& q, const Tensor& h) override {
    if (!m_.prefix) return h;
    const PrefixKV kv = prefix_generate(*m_.prefix, drop(st_.prefix_dropout));
    return prefix_apply(q, h, kv, m_.prefix->gate);
  }

  Tensor attention_branch(const Tensor& xn, const WindowLayout& layout) override {
    if (!m_.mhva_attention) return {};
    return branch(xn, layout, &*m_.mhva_attention, side_on_attention_);
  }

  Tensor mlp_branch(const Tensor& xn, const WindowLayout& layout) override {
    return branch(xn, layout, m_.mhva_mlp ? &*m_.mhva_mlp : nullptr, !side_on_attention_);
  }

 private:
  DropoutSpec drop(double p) const { return {p, st_.rng, st_.training && st_.rng != nullptr}; }

  Tensor branch(const Tensor& xn, const WindowLayout& layout, const MHVAParams* mhva, bool host_side) {
    Tensor delta, bottleneck;
    if (mhva != nullptr) {
      MHVAOutput o = mhva_forward(window_partition(xn, layout), *mhva, drop(st_.adapter_dropout));
      delta = window_reverse(o.delta, layout);
      bottleneck = window_reverse(o.bottleneck, layout);
    }
    if (host_side && (m_.plan.caa || m_.plan.late_fusion)) {
      Tensor side = side_path(xn, bottleneck);
      delta = delta.defined() ? ops::add(delta, side) : side;
    }
    return delta;
  }

  Tensor side_path(const Tensor& xn, const Tensor& bottleneck) {
    const Tensor& align = (*st_.align)[m_.plan.stage];
    Tensor total;
    auto accumulate = [&total](const Tensor& t) { total = total.defined() ? ops::add(total, t) : t; };
    if (!m_.frozen.empty()) {
      for (std::size_t n = 0; n < m_.frozen.size(); ++n) {
        accumulate(adapters_on_caa(xn, st_.pooled[n], align, m_.frozen[n], m_.caa_adapters[n]));
      }
      return total;
    }
    std::vector<Tensor> contexts;
    for (std::size_t n = 0; n < m_.caa.size(); ++n) {
      CAAOutput o = m_.plan.late_fusion ? late_fusion_cross_attention(bottleneck, st_.pooled[n], m_.caa[n])
                                        : caa_forward(bottleneck, st_.pooled[n], align, m_.caa[n]);
      contexts.push_back(o.context);
      if (!m_.fusion) accumulate(o.delta);
    }
    if (m_.fusion) return adapter_fusion(bottleneck, contexts, *m_.fusion).output;
    return total;
  }

  const Model::LayerModules& m_;
  const ForwardState& st_;
  bool side_on_attention_;
};

}  // namespace

const char* to_string(AdapterSite s) {
  switch (s) {
    case AdapterSite::mlp: return "mlp";
    case AdapterSite::attention: return "attention";
    case AdapterSite::both: return "both";
  }
  return "?";
}

AdapterSite parse_adapter_site(const std::string& s) {
  if (s == "mlp") return AdapterSite::mlp;
  if (s == "attention") return AdapterSite::attention;
  if (s == "both") return AdapterSite::both;
  throw ConfigError(fmt::format("unknown adapter site '{}'", s), "plugins.adapter_site");
}

PluginConfig PluginConfig::none() {
  PluginConfig p;
  p.mhva = false;
  p.prefix = false;
  p.caa = false;
  p.fusion = false;
  return p;
}

PlacementPlan resolve_placement(const BackboneConfig& bcfg, const PluginConfig& p) {
  const std::vector<StageGeometry> geo = stage_geometry(bcfg);
  const std::size_t stages = geo.size();
  if (p.r_ratio.size() != 1 && p.r_ratio.size() != stages) {
    throw ConfigError(fmt::format("r_ratio needs 1 or {} values, got {}", stages, p.r_ratio.size()),
                      "plugins.r_ratio");
  }
  for (double r : p.r_ratio) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError(fmt::format("r_ratio {} outside (0, 1]", r), "plugins.r_ratio");
  }
  if (!p.caa_stages.empty() && p.caa_stages.size() != stages) {
    throw ConfigError(fmt::format("caa_stages needs {} entries, got {}", stages, p.caa_stages.size()),
                      "plugins.caa_stages");
  }
  if (p.mhva_group_cap == 0) throw ConfigError("mhva_group_cap must be >= 1", "plugins.mhva_group_cap");
  if (p.prefix && p.prefix_length == 0) throw ConfigError("prefix_length must be >= 1", "plugins.prefix_length");
  if (p.pool_kernel == 0) throw ConfigError("pool_kernel must be >= 1", "plugins.pool_kernel");
  check_probability(p.adapter_dropout, "plugins.adapter_dropout");
  check_probability(p.prefix_dropout, "plugins.prefix_dropout");
  if ((p.caa || p.late_fusion) && p.modalities.empty()) {
    throw ConfigError("cross-attention requested without any modality", "plugins.modalities");
  }
  if (p.caa && p.late_fusion) {
    throw ConfigError("late fusion replaces the per-layer CAA; enable only one", "plugins.late_fusion");
  }
  if ((p.caa || p.late_fusion) && !p.mhva && !p.adapters_on_caa) {
    throw ConfigError("cross-attention reads the MHVA bottleneck; enable mhva", "plugins.mhva");
  }
  if (p.adapters_on_caa && !p.caa) {
    throw ConfigError("adapters_on_caa wraps an existing CAA; enable caa", "plugins.adapters_on_caa");
  }
  if (p.adapters_on_caa && p.fusion) {
    throw ConfigError("adapters_on_caa wraps per-modality CAA outputs; disable fusion", "plugins.fusion");
  }
  std::set<std::string> names;
  for (const ModalitySpec& m : p.modalities) {
    if (m.name.empty() || !names.insert(m.name).second) {
      throw ConfigError(fmt::format("modality names must be unique and non-empty ('{}')", m.name),
                        "plugins.modalities");
    }
    if (m.dim == 0 || m.steps == 0) {
      throw ConfigError(fmt::format("modality '{}' needs dim and steps >= 1", m.name), "plugins.modalities");
    }
  }
  std::size_t late_stage = stages - 1, late_layer = geo.back().depth - 1;
  if (p.late_fusion && !p.late_fusion_at.empty()) {
    const auto [s, l] = parse_stage_layer(p.late_fusion_at);
    if (s != late_stage || l != late_layer) {
      throw ConfigError(fmt::format("late fusion is only supported at the last layer of the last stage "
                                    "({}.{}), got {}", late_stage + 1, late_layer + 1, p.late_fusion_at),
                        "plugins.late_fusion_at");
    }
  }

  PlacementPlan plan;
  plan.temporal_steps = geo[0].grid[0];
  for (std::size_t s = 0; s < stages; ++s) {
    const StageGeometry& g = geo[s];
    const double ratio = p.r_ratio.size() == 1 ? p.r_ratio[0] : p.r_ratio[s];
    for (std::size_t l = 0; l < g.depth; ++l) {
      LayerPlan lp;
      lp.stage = s;
      lp.layer = l;
      lp.dim = g.dim;
      lp.heads = g.heads;
      lp.windows = g.layout.num_windows;
      lp.r = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ratio * static_cast<double>(g.dim))));
      if (p.mhva) {
        std::size_t m = p.scaled_parallel_only ? 1
                        : p.mhva_groups != 0   ? p.mhva_groups
                                               : std::min(lp.windows, p.mhva_group_cap);
        if (m > lp.windows) {
          throw ConfigError(fmt::format("stage {} has {} windows, cannot host {} MHVA groups", s + 1,
                                        lp.windows, m),
                            "plugins.mhva_groups");
        }
        if (p.adapter_site != AdapterSite::mlp) lp.groups_attention = m;
        if (p.adapter_site != AdapterSite::attention) lp.groups_mlp = m;
      }
      if (p.prefix) {
        lp.prefix_length = p.prefix_length;
        lp.prefix_dim = p.prefix_dim != 0 ? p.prefix_dim : std::max<std::size_t>(1, std::min<std::size_t>(64, g.dim / 8));
      }
      const bool stage_on = p.caa_stages.empty() || p.caa_stages[s];
      const bool edge = g.depth <= 4 || l < 2 || l + 2 >= g.depth;
      lp.caa = p.caa && stage_on && edge;
      lp.late_fusion = p.late_fusion && s == late_stage && l == late_layer;
      plan.layers.push_back(lp);
    }
  }
  return plan;
}

Model::Model(BackboneConfig bcfg, PluginConfig pcfg, std::uint64_t plugin_seed)
    : backbone_(std::move(bcfg)), pcfg_(std::move(pcfg)) {
  plan_ = resolve_placement(backbone_.config(), pcfg_);
  const auto& geo = backbone_.geometry();
  const std::size_t nmod = pcfg_.any_side_path() ? pcfg_.modalities.size() : 0;
  CounterRng root(plugin_seed, 0x9106);
  auto reg = [this](const std::string& name, const char* grp, const Tensor& t) {
    plugin_params_.push_back({name, grp, t});
  };

  for (std::size_t n = 0; n < nmod; ++n) {
    const ModalitySpec& m = pcfg_.modalities[n];
    const std::string pre = fmt::format("pool.{}.", m.name);
    const char* grp = pcfg_.late_fusion ? group::late_fusion : group::caa;
    pool_w_.push_back(averaging_kernel(pcfg_.pool_kernel, m.dim));
    pool_b_.push_back(Tensor::zeros({m.dim}));
    reg(pre + "w", grp, pool_w_.back());
    reg(pre + "b", grp, pool_b_.back());
  }
  for (const StageGeometry& g : geo) align_.push_back(temporal_mean_matrix(g.grid[0], g.grid[1], g.grid[2]));

  modules_.resize(geo.size());
  for (const LayerPlan& lp : plan_.layers) {
    LayerModules mod;
    mod.plan = lp;
    CounterRng rng = root.fork(lp.stage * 1000 + lp.layer);
    const std::string pre = fmt::format("stage{}.layer{}.", lp.stage, lp.layer);
    const std::size_t d = lp.dim, r = lp.r;

    auto make_mhva = [&](std::size_t groups, const std::string& tag) {
      MHVAParams m;
      for (std::size_t g = 0; g < groups; ++g) {
        m.w_down.push_back(kaiming(d, r, rng));
        m.w_up.push_back(Tensor::zeros({r, d}));
        reg(fmt::format("{}{}.w_down{}", pre, tag, g), group::mhva, m.w_down.back());
        reg(fmt::format("{}{}.w_up{}", pre, tag, g), group::mhva, m.w_up.back());
      }
      if (pcfg_.learnable_scale) {
        m.scale = Tensor::full({1}, pcfg_.scale_init);
        reg(pre + tag + ".scale", group::mhva, m.scale);
      } else {
        m.scale = Tensor::full({1}, pcfg_.fixed_scale);
      }
      return m;
    };
    if (lp.groups_attention) mod.mhva_attention = make_mhva(lp.groups_attention, "mhva_attn");
    if (lp.groups_mlp) mod.mhva_mlp = make_mhva(lp.groups_mlp, "mhva");

    if (lp.prefix_length) {
      const LayerParams& host = backbone_.layer(lp.stage, lp.layer);
      const std::size_t dp = lp.prefix_dim, hid = std::max<std::size_t>(1, dp / 4);
      PrefixParams pp;
      pp.embedding = gaussian({lp.prefix_length, dp}, rng, 1.0);
      pp.w_down = kaiming(dp, hid, rng);
      pp.b_down = Tensor::zeros({hid});
      pp.w_up = Tensor::zeros({hid, d});
      pp.b_up = Tensor::zeros({d});
      pp.gate = Tensor::full({lp.heads}, pcfg_.gate_init);
      pp.tanh_generation = pcfg_.prefix_tanh;
      pp.wk = host.wk;
      pp.wv = host.wv;
      reg(pre + "prefix.embedding", group::prefix, pp.embedding);
      reg(pre + "prefix.w_down", group::prefix, pp.w_down);
      reg(pre + "prefix.b_down", group::prefix, pp.b_down);
      reg(pre + "prefix.w_up", group::prefix, pp.w_up);
      reg(pre + "prefix.b_up", group::prefix, pp.b_up);
      reg(pre + "prefix.gate", group::prefix, pp.gate);
      mod.prefix = std::move(pp);
    }

    if (lp.caa || lp.late_fusion) {
      const char* grp = lp.late_fusion ? group::late_fusion : group::caa;
      const bool fused = pcfg_.fusion;
      for (std::size_t n = 0; n < nmod; ++n) {
        const ModalitySpec& m = pcfg_.modalities[n];
        const std::string cpre = fmt::format("{}caa{}.", pre, n);
        CAAParams c;
        c.w_key = kaiming(m.dim, r, rng);
        c.b_key = Tensor::zeros({r});
        reg(cpre + "w_key", grp, c.w_key);
        reg(cpre + "b_key", grp, c.b_key);
        if (!fused) {
          c.w_up = Tensor::zeros({r, d});
          c.scale = Tensor::full({1}, 1.0);
          reg(cpre + "w_up", grp, c.w_up);
          reg(cpre + "scale", grp, c.scale);
        }
        if (pcfg_.adapters_on_caa) {
          FrozenCAA f;
          f.w_down = kaiming(d, r, rng);
          reg(cpre + "w_down", grp, f.w_down);
          f.caa = c;
          const std::size_t ra = plan_.caa_adapter_r(d);
          AdapterParams a{kaiming(d, ra, rng), Tensor::zeros({ra, d}), Tensor::full({1}, pcfg_.scale_init)};
          const std::string apre = fmt::format("{}caa_adapter{}.", pre, n);
          reg(apre + "w_down", group::caa_adapter, a.w_down);
          reg(apre + "w_up", group::caa_adapter, a.w_up);
          reg(apre + "scale", group::caa_adapter, a.scale);
          mod.frozen.push_back(std::move(f));
          mod.caa_adapters.push_back(std::move(a));
        }
        mod.caa.push_back(std::move(c));
      }
      if (fused && nmod > 0) {
        FusionParams fp;
        fp.w_q = gaussian({r, r}, rng, 1.0 / std::sqrt(static_cast<double>(r)));
        fp.w_k = gaussian({r, r}, rng, 1.0 / std::sqrt(static_cast<double>(r)));
        fp.w_v = Tensor::zeros({r, d});
        fp.scaled = pcfg_.fusion_scaled;
        reg(pre + "fusion.w_q", group::fusion, fp.w_q);
        reg(pre + "fusion.w_k", group::fusion, fp.w_k);
        reg(pre + "fusion.w_v", group::fusion, fp.w_v);
        mod.fusion = std::move(fp);
      }
    }
    modules_[lp.stage].push_back(std::move(mod));
  }
  apply_train_mode(TrainMode::plugins);
}

const Model::LayerModules& Model::modules(std::size_t stage, std::size_t layer) const {
  return modules_.at(stage).at(layer);
}

Tensor Model::forward(const Tensor& video, const std::vector<ModalityStream>& streams, bool training,
                      CounterRng* rng) const {
  ForwardState st;
  st.align = &align_;
  st.training = training;
  st.rng = rng;
  st.adapter_dropout = pcfg_.adapter_dropout;
  st.prefix_dropout = pcfg_.prefix_dropout;
  if (!pcfg_.any_side_path()) {
    if (!streams.empty()) {
      throw ConfigError("side streams supplied but no cross-attention adapter is configured", "plugins.caa");
    }
  } else {
    for (std::size_t n = 0; n < pcfg_.modalities.size(); ++n) {
      const ModalitySpec& m = pcfg_.modalities[n];
      if (n >= streams.size() || streams[n].name != m.name) {
        throw ConfigError(fmt::format("no stream supplied for modality '{}'", m.name), "plugins.modalities");
      }
      const Tensor& f = streams[n].features;
      if (f.dim() != 2 || f.size(1) != m.dim) {
        throw DimensionError(fmt::format("modality '{}' expects (steps, {}), got {}", m.name, m.dim,
                                         to_string(f.shape())));
      }
      st.pooled.push_back(modality_temporal_pool(f, plan_.temporal_steps, pool_w_[n], pool_b_[n]));
    }
    if (streams.size() != pcfg_.modalities.size()) {
      throw ConfigError(fmt::format("{} streams supplied for {} modalities", streams.size(),
                                    pcfg_.modalities.size()),
                        "plugins.modalities");
    }
  }
  std::vector<std::vector<LayerPlugin>> plugs(modules_.size());
  for (std::size_t s = 0; s < modules_.size(); ++s) {
    plugs[s].reserve(modules_[s].size());
    for (const LayerModules& m : modules_[s]) plugs[s].emplace_back(m, st, pcfg_.adapter_site);
  }
  return backbone_.forward(video, [&](std::size_t s, std::size_t l) -> BlockPlugin* {
    return modules_[s][l].plan.has_plugin() ? &plugs[s][l] : nullptr;
  });
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  for (auto& [name, t] : backbone_.named_parameters()) out.push_back({name, group::backbone, t});
  for (auto& [name, t] : backbone_.named_head_parameters()) out.push_back({name, group::head, t});
  out.insert(out.end(), plugin_params_.begin(), plugin_params_.end());
  return out;
}

bool group_trainable(const PluginConfig& p, const std::string& grp, TrainMode mode) {
  if (mode == TrainMode::full) return true;
  if (grp == group::backbone) return false;
  if (grp == group::head) return p.train_head;
  if (grp == group::caa) return !p.adapters_on_caa;
  return true;
}

bool Model::group_trainable(const std::string& grp, TrainMode mode) const {
  return vidplug::group_trainable(pcfg_, grp, mode);
}

void Model::apply_train_mode(TrainMode mode) {
  for (NamedTensor& p : parameters()) p.tensor.set_requires_grad(group_trainable(p.group, mode));
}

}  // namespace vidplug
