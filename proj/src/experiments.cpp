// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vidplug/errors.hpp"
#include "vidplug/gradcheck.hpp"
#include "vidplug/ops.hpp"
#include "vidplug/plugins.hpp"

namespace vidplug {
namespace {

using ojson = nlohmann::ordered_json;

std::ofstream open_out(const std::filesystem::path& p) {
  if (!p.parent_path().empty()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write {}", p.string()));
  return out;
}

ojson eval_json(const EvalResult& r) {
  ojson j;
  j["loss"] = r.loss;
  j["metric"] = to_string(r.metric);
  j["value"] = r.value;
  return j;
}

Metric metric_of(const ExperimentConfig& c) {
  return c.training.metric.value_or(default_metric(c.backbone.task_head));
}

std::vector<Sample> val_split(const SyntheticSpec& spec) {
  std::vector<Sample> out;
  out.reserve(spec.val_size);
  for (std::size_t i = 0; i < spec.val_size; ++i) out.push_back(make_sample(spec, Split::val, i));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// train / eval / params

TrainArtifacts cmd_train(const ExperimentConfig& c, std::ostream* log) {
  c.validate();
  c.validate_data();
  PrecisionScope scope(c.precision);
  const Dataset data = generate(c.data_spec());
  Model model(c.backbone, c.plugins, c.plugin_seed);

  TrainArtifacts a;
  a.metrics = c.output.metrics_path();
  a.checkpoint = c.output.checkpoint_path();
  a.summary = c.output.summary_path();
  std::ofstream metrics = open_out(a.metrics);

  TrainConfig tc = c.training;
  TrainHooks hooks;
  hooks.checkpoint = a.checkpoint;
  hooks.checkpoint_kind = c.output.checkpoint_kind;
  std::size_t trainable = 0;
  hooks.on_start = [&](const EvalResult& initial) {
    trainable = count_params(model).trainable_total;
    EpochRecord r;
    r.split = "val";
    r.loss = initial.loss;
    r.metric = initial.metric;
    r.value = initial.value;
    r.trainable_params = trainable;
    metrics << r.to_json() << '\n' << std::flush;
    if (log) *log << fmt::format("epoch 0  val loss {:.4f} {} {:.4f}\n", r.loss, to_string(r.metric), r.value);
  };
  hooks.on_epoch = [&](const EpochRecord& tr, const EpochRecord& va) {
    metrics << tr.to_json() << '\n' << va.to_json() << '\n' << std::flush;
    if (log) {
      *log << fmt::format("epoch {}  train loss {:.4f} {} {:.4f}  val loss {:.4f} {} {:.4f}\n", tr.epoch, tr.loss,
                          to_string(tr.metric), tr.value, va.loss, to_string(va.metric), va.value);
    }
  };
  a.history = train_loop(model, data, tc, hooks);
  a.report = count_params(model);

  double best = a.history.initial_val.value;
  for (const EpochRecord& r : a.history.records) {
    if (r.split == "val") best = higher_is_better(r.metric) ? std::max(best, r.value) : std::min(best, r.value);
  }
  ojson s;
  s["record"] = "summary";
  s["steps"] = a.history.steps;
  s["epochs_completed"] = a.history.records.size() / 2;
  s["early_stopped"] = a.history.early_stopped;
  s["initial_val"] = eval_json(a.history.initial_val);
  s["final_val"] = eval_json(a.history.final_val);
  s["best_val_value"] = best;
  s["trainable_param_count"] = a.report.trainable_total;
  s["backbone_param_count"] = a.report.backbone_total;
  s["ratio_percent"] = a.report.ratio_percent;
  s["checkpoint"] = a.checkpoint.string();
  s["checkpoint_kind"] = c.output.checkpoint_kind == CheckpointKind::full ? "full" : "plugins";
  s["backbone_digest"] = fmt::format("{:016x}", backbone_digest(c.backbone));
  s["config"] = serialize_config(c);
  open_out(a.summary) << s.dump() << '\n';
  return a;
}

EvalResult cmd_eval(const ExperimentConfig& c, const std::filesystem::path& checkpoint) {
  c.validate();
  c.validate_data();
  PrecisionScope scope(c.precision);
  Model model(c.backbone, c.plugins, c.plugin_seed);
  load_checkpoint(model, checkpoint);
  return evaluate(model, val_split(c.data_spec()), metric_of(c));
}

ParamReport cmd_params(const ExperimentConfig& c) {
  c.validate();
  ParamReport r = count_params(c.backbone, c.plugins, c.training.mode);
  r.macs = estimate_flops(c.backbone, c.plugins);
  return r;
}

// ---------------------------------------------------------------------------
// gradcheck

namespace {

Tensor corrupt_backward(const Tensor& y) {
  return Tensor::make_result("corrupt_backward", y.shape(), y.to_vector(), {y}, [y](TensorImpl& o) {
    TensorImpl* py = y.impl();
    if (!py->requires_grad) return;
    py->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) py->grad[i] += 1.01 * o.grad[i];
  });
}

struct GradCase {
  std::vector<Tensor> inputs;
  TensorFn f;
  /// Arguments of every ReLU, evaluated at the inputs.
  std::function<std::vector<Tensor>()> relu_args;
};

struct Sizes {
  std::size_t d, r, heads, groups, prefix_len, prefix_dim, mdim, msteps, kernel;
  bool tanh;
};

Sizes sizes_from(const ExperimentConfig& c) {
  Sizes s{};
  s.d = c.backbone.embed_dim();
  s.r = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.d) * c.plugins.r_ratio.at(0))));
  s.heads = c.backbone.heads_per_stage.at(0);
  s.groups = std::clamp<std::size_t>(c.plugins.mhva_groups ? c.plugins.mhva_groups : 2, 1, 4);
  s.prefix_len = std::clamp<std::size_t>(c.plugins.prefix_length, 1, 4);
  s.prefix_dim = c.plugins.prefix_dim ? c.plugins.prefix_dim : 8;
  s.mdim = c.plugins.modalities.empty() ? 6 : std::min<std::size_t>(c.plugins.modalities[0].dim, 16);
  s.msteps = c.plugins.modalities.empty() ? 5 : std::min<std::size_t>(c.plugins.modalities[0].steps, 8);
  s.kernel = std::max<std::size_t>(1, std::min(c.plugins.pool_kernel, s.msteps));
  s.tanh = c.plugins.prefix_tanh;
  return s;
}

Tensor draw(const Shape& shape, CounterRng& rng, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(shape, std::move(v), true);
}

Tensor draw_uniform(const Shape& shape, CounterRng& rng, double lo, double hi) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(shape, std::move(v), true);
}

Tensor frozen(const Tensor& t) { return t.detach(); }

constexpr std::size_t kTokensT = 2, kTokensH = 2, kTokensW = 1;  // N = 4 tokens over T' = 2 steps

GradCase make_case(const std::string& op, const Sizes& z, CounterRng& rng) {
  const std::size_t n = kTokensT * kTokensH * kTokensW;
  const Tensor align = temporal_mean_matrix(kTokensT, kTokensH, kTokensW);
  GradCase gc;
  if (op == "adapter_forward") {
    gc.inputs = {draw({n, z.d}, rng), draw({z.d, z.r}, rng), draw({z.r, z.d}, rng), draw({1}, rng)};
    gc.f = [](const std::vector<Tensor>& in) { return adapter_forward(in[0], {in[1], in[2], in[3]}); };
    gc.relu_args = [in = gc.inputs] { return std::vector<Tensor>{ops::matmul(in[0], in[1])}; };
  } else if (op == "mhva_forward") {
    const std::size_t windows = 4, tpw = 3;
    gc.inputs.push_back(draw({windows, tpw, z.d}, rng));
    for (std::size_t g = 0; g < z.groups; ++g) gc.inputs.push_back(draw({z.d, z.r}, rng));
    for (std::size_t g = 0; g < z.groups; ++g) gc.inputs.push_back(draw({z.r, z.d}, rng));
    gc.inputs.push_back(draw({1}, rng));
    const std::size_t m = z.groups;
    auto params = [m](const std::vector<Tensor>& in) {
      MHVAParams p;
      p.w_down.assign(in.begin() + 1, in.begin() + 1 + static_cast<std::ptrdiff_t>(m));
      p.w_up.assign(in.begin() + 1 + static_cast<std::ptrdiff_t>(m), in.begin() + 1 + static_cast<std::ptrdiff_t>(2 * m));
      p.scale = in.back();
      return p;
    };
    gc.f = [params](const std::vector<Tensor>& in) { return mhva_forward(in[0], params(in)).delta; };
    gc.relu_args = [in = gc.inputs, params, windows, m] {
      std::vector<Tensor> out;
      const auto parts = ops::split(in[0], 0, window_groups(windows, m));
      const MHVAParams p = params(in);
      for (std::size_t g = 0; g < m; ++g) out.push_back(ops::matmul(parts[g], p.w_down[g]));
      return out;
    };
  } else if (op == "prefix_generate+apply") {
    const std::size_t hid = std::max<std::size_t>(1, z.prefix_dim / 4), dh = std::max<std::size_t>(1, z.d / z.heads);
    const std::size_t d = dh * z.heads;
    const Tensor wk = frozen(draw({d, d}, rng)), wv = frozen(draw({d, d}, rng));
    gc.inputs = {draw({z.prefix_len, z.prefix_dim}, rng), draw({z.prefix_dim, hid}, rng), draw({hid}, rng),
                 draw({hid, d}, rng, 0.5), draw({d}, rng, 0.5), draw_uniform({z.heads}, rng, 0.1, 0.9),
                 draw({z.heads, 3, dh}, rng), draw({z.heads, 3, dh}, rng)};
    const bool tanh = z.tanh;
    auto params = [wk, wv, tanh](const std::vector<Tensor>& in) {
      PrefixParams p;
      p.embedding = in[0];
      p.w_down = in[1];
      p.b_down = in[2];
      p.w_up = in[3];
      p.b_up = in[4];
      p.gate = in[5];
      p.tanh_generation = tanh;
      p.wk = wk;
      p.wv = wv;
      return p;
    };
    gc.f = [params](const std::vector<Tensor>& in) {
      const PrefixParams p = params(in);
      return prefix_apply(in[6], in[7], prefix_generate(p), p.gate);
    };
    gc.relu_args = [in = gc.inputs, tanh] {
      return tanh ? std::vector<Tensor>{} : std::vector<Tensor>{ops::linear(in[0], in[1], in[2])};
    };
  } else if (op == "modality_temporal_pool") {
    gc.inputs = {draw({z.msteps, z.mdim}, rng), draw({z.kernel, z.mdim, z.mdim}, rng, 0.5), draw({z.mdim}, rng)};
    gc.f = [](const std::vector<Tensor>& in) { return modality_temporal_pool(in[0], kTokensT, in[1], in[2]); };
  } else if (op == "caa_forward") {
    gc.inputs = {draw({n, z.r}, rng), draw({kTokensT, z.mdim}, rng), draw({z.mdim, z.r}, rng), draw({z.r}, rng),
                 draw({z.r, z.d}, rng), draw({1}, rng)};
    gc.f = [align](const std::vector<Tensor>& in) {
      return caa_forward(in[0], in[1], align, {in[2], in[3], in[4], in[5]}).delta;
    };
  } else if (op == "adapter_fusion") {
    gc.inputs = {draw({n, z.r}, rng), draw({n, z.r}, rng), draw({n, z.r}, rng),
                 draw({z.r, z.r}, rng), draw({z.r, z.r}, rng), draw({z.r, z.d}, rng)};
    gc.f = [](const std::vector<Tensor>& in) {
      return adapter_fusion(in[0], {in[1], in[2]}, {in[3], in[4], in[5]}).output;
    };
  } else if (op == "late_fusion_cross_attention") {
    gc.inputs = {draw({n, z.r}, rng), draw({kTokensT, z.mdim}, rng), draw({z.mdim, z.r}, rng), draw({z.r}, rng),
                 draw({z.r, z.d}, rng), draw({1}, rng)};
    gc.f = [](const std::vector<Tensor>& in) {
      return late_fusion_cross_attention(in[0], in[1], {in[2], in[3], in[4], in[5]}).delta;
    };
  } else if (op == "adapters_on_caa") {
    const std::size_t ra = std::max<std::size_t>(1, z.d / 16);
    FrozenCAA fc;
    fc.w_down = frozen(draw({z.d, z.r}, rng));
    fc.caa = {frozen(draw({z.mdim, z.r}, rng)), frozen(draw({z.r}, rng)), frozen(draw({z.r, z.d}, rng)),
              frozen(draw({1}, rng))};
    gc.inputs = {draw({n, z.d}, rng), draw({kTokensT, z.mdim}, rng), draw({z.d, ra}, rng), draw({ra, z.d}, rng),
                 draw({1}, rng)};
    gc.f = [fc, align](const std::vector<Tensor>& in) {
      return adapters_on_caa(in[0], in[1], align, fc, {in[2], in[3], in[4]});
    };
    gc.relu_args = [in = gc.inputs, fc, align] {
      const Tensor b = ops::matmul(in[0], fc.w_down);
      const Tensor caa_out = caa_forward(ops::relu(b), in[1], align, fc.caa).delta;
      return std::vector<Tensor>{b, ops::matmul(caa_out, in[2])};
    };
  } else {
    throw ConfigError(fmt::format("unknown gradcheck op '{}'", op), "corrupt");
  }
  return gc;
}

double min_abs(const std::vector<Tensor>& ts) {
  double m = std::numeric_limits<double>::infinity();
  for (const Tensor& t : ts)
    for (double v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

}  // namespace

const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops{"adapter_forward",        "mhva_forward",   "prefix_generate+apply",
                                            "modality_temporal_pool", "caa_forward",    "adapter_fusion",
                                            "late_fusion_cross_attention", "adapters_on_caa"};
  return ops;
}

std::vector<GradCheckRow> cmd_gradcheck(const ExperimentConfig& c, const std::string& corrupt) {
  c.validate();
  const auto& names = gradcheck_ops();
  if (!corrupt.empty() && std::find(names.begin(), names.end(), corrupt) == names.end()) {
    throw ConfigError(fmt::format("unknown gradcheck op '{}'", corrupt), "corrupt");
  }
  PrecisionScope scope(Precision::f64);
  const Sizes z = sizes_from(c);
  std::vector<GradCheckRow> rows;
  for (std::size_t i = 0; i < names.size(); ++i) {
    GradCase gc;
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt == 1000) throw NumericError(fmt::format("{}: no sample away from ReLU kinks", names[i]));
      CounterRng rng(derive_key(c.plugin_seed, 0x6763 + i), attempt);
      gc = make_case(names[i], z, rng);
      if (!gc.relu_args) break;
      NoGradGuard guard;
      if (min_abs(gc.relu_args()) > 1e-3) break;
    }
    TensorFn f = gc.f;
    if (names[i] == corrupt) f = [inner = gc.f](const std::vector<Tensor>& in) { return corrupt_backward(inner(in)); };
    const GradCheckResult r = grad_check(f, gc.inputs);
    rows.push_back({names[i], r.max_rel_error, r.checked, r.max_rel_error < kGradCheckTolerance});
  }
  return rows;
}

std::string gradcheck_table(const std::vector<GradCheckRow>& rows) {
  std::string out = fmt::format("{:<30} {:>14} {:>8}  {}\n", "op", "max_rel_error", "checked", "result");
  for (const GradCheckRow& r : rows) {
    out += fmt::format("{:<30} {:>14.3e} {:>8}  {}\n", r.op, r.max_rel_error, r.checked, r.pass ? "pass" : "FAIL");
  }
  return out;
}

// ---------------------------------------------------------------------------
// ablations

std::string AblationRow::to_json() const {
  ojson j;
  j["variant"] = variant;
  j["definition"] = definition;
  j["backbone_param_count"] = backbone_params;
  j["trainable_param_count"] = trainable_params;
  j["ratio_percent"] = ratio_percent;
  j["metric"] = to_string(metric);
  j["initial_value"] = initial_value;
  j["final_value"] = final_value;
  j["final_loss"] = final_loss;
  j["steps"] = steps;
  return j.dump();
}

std::string AblationTable::to_table() const {
  std::string out = fmt::format("axis {}\n{:<24} {:>10} {:>10} {:>8} {:>8} {:>10} {:>10}  {}\n", axis, "variant",
                                "backbone", "trainable", "ratio%", "metric", "initial", "final", "definition");
  for (const AblationRow& r : rows) {
    out += fmt::format("{:<24} {:>10} {:>10} {:>8.2f} {:>8} {:>10.4f} {:>10.4f}  {}\n", r.variant, r.backbone_params,
                       r.trainable_params, r.ratio_percent, to_string(r.metric), r.initial_value, r.final_value,
                       r.definition.empty() ? "(base)" : r.definition);
  }
  return out;
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"c1", "a1", "caa-blocks", "b1", "adapters-on-caa", "fusion"};
  return axes;
}

std::vector<AblationVariant> ablation_variants(const ExperimentConfig& base, const std::string& axis) {
  const bool side = base.plugins.caa && !base.plugins.modalities.empty();
  auto need_side = [&] {
    if (!side) {
      throw ConfigError(fmt::format("ablation axis {} needs plugins.caa = true and at least one modality", axis),
                        "plugins.caa");
    }
  };
  if (axis == "c1") {
    const std::vector<std::string> common{"plugins.mhva=true", "plugins.prefix=true"};
    auto with = [&](std::vector<std::string> extra) {
      extra.insert(extra.begin(), common.begin(), common.end());
      return extra;
    };
    return {{"scaled-parallel+pt", with({"plugins.scaled_parallel_only=true"})},
            {"mhva+pt", with({})},
            {"mhva+pt fixed-scale", with({"plugins.learnable_scale=false"})},
            {"mhva+pt tanh-prefix", with({"plugins.prefix_tanh=true"})}};
  }
  if (axis == "a1" || axis == "caa-blocks") {
    need_side();
    const std::size_t stages = base.backbone.num_stages();
    std::vector<AblationVariant> out;
    std::vector<std::string> all(stages, "1");
    auto mask = [](const std::vector<std::string>& bits) {
      std::string s;
      for (const std::string& b : bits) s += (s.empty() ? "" : ",") + b;
      return "plugins.caa_stages=" + s;
    };
    out.push_back({"caa all stages", {mask(all)}});
    for (std::size_t k = 0; k < stages; ++k) {
      std::vector<std::string> bits = all;
      bits[k] = "0";
      out.push_back({fmt::format("caa -stage{}", k + 1), {mask(bits)}});
    }
    return out;
  }
  if (axis == "b1" || axis == "adapters-on-caa") {
    need_side();
    return {{"caa", {"plugins.fusion=false", "plugins.adapters_on_caa=false"}},
            {"caa+adapters", {"plugins.fusion=false", "plugins.adapters_on_caa=true"}}};
  }
  if (axis == "fusion") {
    need_side();
    return {{"fusion on", {"plugins.fusion=true"}}, {"fusion off", {"plugins.fusion=false"}}};
  }
  throw ConfigError(fmt::format("unknown ablation axis '{}'", axis), "axis");
}

namespace {

// Copies every plugin or head tensor whose name and shape match. A wrapped
// CAA's own down-projection starts from the bottleneck it was trained behind:
// the first MHVA down-projection of the same layer.
void transfer_plugins(const Model& from, Model& to) {
  std::map<std::string, Tensor> src;
  for (const NamedTensor& t : from.parameters()) {
    if (t.group != group::backbone) src.emplace(t.name, t.tensor);
  }
  for (NamedTensor& t : to.parameters()) {
    if (t.group == group::backbone) continue;
    std::string name = t.name;
    const auto caa = name.find(".caa");
    if (t.group == group::caa && caa != std::string::npos && name.ends_with(".w_down")) {
      name = name.substr(0, caa) + ".mhva.w_down0";
    }
    const auto it = src.find(name);
    if (it == src.end() || it->second.shape() != t.tensor.shape()) continue;
    std::copy(it->second.data().begin(), it->second.data().end(), t.tensor.mutable_data().begin());
  }
}

}  // namespace

AblationTable cmd_ablate(const ExperimentConfig& base, const std::string& axis, std::ostream* log) {
  base.validate();
  base.validate_data();
  const std::vector<AblationVariant> variants = ablation_variants(base, axis);
  std::vector<ExperimentConfig> configs;
  for (const AblationVariant& v : variants) {
    ExperimentConfig c = base;
    for (const std::string& o : v.overrides) apply_override(c, o);
    c.validate();
    configs.push_back(std::move(c));
  }
  PrecisionScope scope(base.precision);
  const Dataset data = generate(base.data_spec());
  AblationTable table{axis, {}};
  std::optional<Model> previous;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const ExperimentConfig& c = configs[i];
    Model model(c.backbone, c.plugins, c.plugin_seed);
    if (c.plugins.adapters_on_caa && previous) transfer_plugins(*previous, model);
    const TrainHistory h = train_loop(model, data, c.training);
    const ParamReport rep = count_params(model);
    AblationRow row;
    row.variant = variants[i].name;
    for (const std::string& o : variants[i].overrides) row.definition += (row.definition.empty() ? "" : " ") + o;
    row.backbone_params = rep.group(group::backbone);
    row.trainable_params = rep.trainable_total;
    row.ratio_percent = rep.ratio_percent;
    row.metric = h.final_val.metric;
    row.initial_value = h.initial_val.value;
    row.final_value = h.final_val.value;
    row.final_loss = h.final_val.loss;
    row.steps = h.steps;
    if (log) *log << fmt::format("{:<24} {} {:.4f} -> {:.4f}\n", row.variant, to_string(row.metric), row.initial_value,
                                 row.final_value);
    table.rows.push_back(std::move(row));
    previous.emplace(std::move(model));
  }
  std::ofstream out = open_out(std::filesystem::path(base.output.dir) / fmt::format("ablation-{}.jsonl", axis));
  for (const AblationRow& r : table.rows) out << r.to_json() << '\n';
  return table;
}

}  // namespace vidplug
