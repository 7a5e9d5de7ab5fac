// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

// Runs the ten acceptance checks and prints one PASS/FAIL line each.
// Exit status is 0 only when every check passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "oracle/naive_model.hpp"
#include "vidplug/config.hpp"
#include "vidplug/experiments.hpp"
#include "vidplug/ops.hpp"
#include "vidplug/plugins.hpp"
#include "vidplug/synth.hpp"
#include "vidplug/training.hpp"

using namespace vidplug;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::optional<double> limit_seconds;
  std::function<Outcome()> run;
};

// ---------------------------------------------------------------------------
// Helpers

Tensor rnd(const Shape& shape, std::uint64_t seed, double sd = 1.0) {
  CounterRng rng(seed);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(shape, std::move(v));
}

PluginConfig mhva_pt_caa(std::size_t modalities, bool fusion) {
  PluginConfig p;
  p.caa = true;
  p.fusion = fusion;
  for (std::size_t m = 0; m < modalities; ++m) p.modalities.push_back({"m" + std::to_string(m), 6, 10});
  return p;
}

std::vector<ModalityStream> streams_for(const PluginConfig& p, std::uint64_t seed) {
  std::vector<ModalityStream> out;
  for (std::size_t m = 0; m < p.modalities.size(); ++m) {
    out.push_back({p.modalities[m].name, rnd({p.modalities[m].steps, p.modalities[m].dim}, seed + m)});
  }
  return out;
}

// Gates land strictly inside (0, 1) so every prefix branch contributes.
void randomize_plugins(Model& m, std::uint64_t seed) {
  CounterRng rng(seed);
  for (NamedTensor& p : m.parameters()) {
    if (p.group == group::backbone || p.group == group::head) continue;
    const bool gate = p.name.find("gate") != std::string::npos;
    for (double& v : p.tensor.mutable_data()) v = gate ? rng.uniform(0.1, 0.9) : rng.normal(0.0, 0.3);
  }
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool same_bytes(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vidplug_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// 1. Plugged model at init equals the bare backbone.

Outcome identity_at_init() {
  const BackboneConfig b = toy_config();
  const PluginConfig p = mhva_pt_caa(2, true);
  const Model bare(b, PluginConfig::none());
  const Model plugged(b, p);
  NoGradGuard ng;
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Tensor video = rnd({8, 16, 16, 3}, 1000 + i);
    const auto streams = streams_for(p, 5000 + 10 * i);
    worst = std::max(worst, max_abs_diff(plugged.forward(video, streams).to_vector(), bare.forward(video).to_vector()));
  }
  return {worst < 1e-6, fmt::format("max |logit diff| {:.3e} over 100 inputs (limit 1e-6)", worst)};
}

// ---------------------------------------------------------------------------
// 2. Fifty optimizer steps leave every backbone byte untouched.

Outcome freeze_purity() {
  const ExperimentConfig c = preset("xor");
  Model m(c.backbone, c.plugins, c.plugin_seed);
  std::vector<std::vector<double>> before;
  for (const NamedTensor& t : m.parameters()) {
    if (t.group == group::backbone) before.push_back(t.tensor.to_vector());
  }
  SyntheticSpec s = c.data_spec();
  s.train_size = 100;
  s.val_size = 8;
  TrainConfig cfg = c.training;
  cfg.lr = 1e-2;
  cfg.batch_size = 2;
  cfg.epochs = 10;
  cfg.max_steps = 50;
  const TrainHistory h = train_loop(m, generate(s), cfg);
  std::size_t i = 0, changed = 0, tensors = 0;
  for (const NamedTensor& t : m.parameters()) {
    if (t.group != group::backbone) continue;
    ++tensors;
    if (!same_bytes(t.tensor.to_vector(), before[i++])) ++changed;
  }
  return {h.steps == 50 && changed == 0 && tensors == before.size(),
          fmt::format("{} steps, {} of {} backbone tensors changed", h.steps, changed, tensors)};
}

// ---------------------------------------------------------------------------
// 3. Finite-difference check of every plugin op.

Outcome gradient_fidelity() {
  const std::vector<std::string> required{"adapter_forward", "mhva_forward", "prefix_generate+apply", "caa_forward",
                                          "adapter_fusion",  "late_fusion_cross_attention", "adapters_on_caa"};
  const std::vector<GradCheckRow> rows = cmd_gradcheck(preset("toy"));
  bool ok = true;
  double worst = 0.0;
  for (const std::string& op : required) {
    const auto it = std::find_if(rows.begin(), rows.end(), [&](const GradCheckRow& r) { return r.op == op; });
    if (it == rows.end()) return {false, "missing row " + op};
  }
  for (const GradCheckRow& r : rows) {
    ok = ok && r.pass && r.max_rel_error < 1e-6 && r.checked > 0;
    worst = std::max(worst, r.max_rel_error);
  }
  return {ok, fmt::format("{} ops, worst relative error {:.3e} (limit 1e-6)", rows.size(), worst)};
}

// ---------------------------------------------------------------------------
// 4. Reductions hold exactly.

Outcome reduction_equivalences() {
  const std::size_t d = 8, r = 3;
  const Tensor x = rnd({4, 6, d}, 21);
  AdapterParams a{rnd({d, r}, 22), rnd({r, d}, 23), Tensor::from({1}, {1.7})};
  MHVAParams mh{{a.w_down}, {a.w_up}, a.scale};
  const bool mhva_ok = same_bytes(mhva_forward(x, mh).delta.to_vector(), adapter_forward(x, a).to_vector());

  const Tensor query = rnd({12, r}, 24), z = rnd({12, 5}, 25);
  FusionParams f{rnd({r, 4}, 26), rnd({5, 4}, 27), rnd({5, d}, 28)};
  const bool fusion_ok = same_bytes(adapter_fusion(query, {z}, f).output.to_vector(), ops::matmul(z, f.w_v).to_vector());

  const std::size_t heads = 2, tokens = 7, hd = 4;
  const Tensor q = rnd({3, heads, tokens, hd}, 29), h = rnd({3, heads, tokens, hd}, 30);
  const PrefixKV kv{rnd({5, heads * hd}, 31), rnd({5, heads * hd}, 32)};
  const bool prefix_ok =
      same_bytes(prefix_apply(q, h, kv, Tensor::from({heads}, {0.0, 0.0})).to_vector(), h.to_vector());

  return {mhva_ok && fusion_ok && prefix_ok,
          fmt::format("mhva(1 group)==adapter {}, fusion(N=1)==z*W_V {}, prefix(gate 0)==h {}", mhva_ok, fusion_ok,
                      prefix_ok)};
}

// ---------------------------------------------------------------------------
// 5. Parameter bookkeeping on the Swin-B shape.

Outcome parameter_bookkeeping() {
  const ExperimentConfig c = preset("swin-b-shape-account");
  const ParamReport base = count_params(c.backbone, c.plugins);

  PluginConfig two = c.plugins;
  two.caa = true;
  const ParamReport with_two = count_params(c.backbone, two);

  PluginConfig one = two;
  one.modalities.resize(1);
  one.fusion = false;
  const ParamReport with_one = count_params(c.backbone, one);
  const double single = static_cast<double>(with_one.group(group::caa));

  const double backbone = static_cast<double>(base.backbone_total);
  const bool b_ok = std::abs(backbone / 88e6 - 1.0) <= 0.03;
  const bool r1_ok = base.ratio_percent >= 10.0 && base.ratio_percent <= 16.0;
  const bool r2_ok = with_two.ratio_percent >= 18.0 && with_two.ratio_percent <= 27.0;
  const bool s_ok = std::abs(single / 5.8e6 - 1.0) <= 0.20;
  const bool a_ok = !base.assumptions.empty() && !with_two.assumptions.empty();
  return {b_ok && r1_ok && r2_ok && s_ok && a_ok,
          fmt::format("backbone {} (88M +-3%), mhva+pt {:.2f}% [10,16], +2 caa {:.2f}% [18,27], "
                      "single caa {} (5.8M +-20%), {} assumptions",
                      base.backbone_total, base.ratio_percent, with_two.ratio_percent, with_one.group(group::caa),
                      base.assumptions.size())};
}

// ---------------------------------------------------------------------------
// 6. Analytic MACs against the instrumented counter.

Outcome flop_estimator() {
  std::vector<PluginConfig> configs{PluginConfig::none(), PluginConfig{}, mhva_pt_caa(2, true)};
  double worst = 0.0;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    Model m(toy_config(), configs[i]);
    randomize_plugins(m, 40 + i);
    const auto streams = configs[i].any_side_path() ? streams_for(configs[i], 50) : std::vector<ModalityStream>{};
    NoGradGuard ng;
    ops::reset_mac_count();
    m.forward(rnd({8, 16, 16, 3}, 60 + i), streams);
    const double counted = static_cast<double>(ops::mac_count());
    const double estimated = static_cast<double>(estimate_flops(toy_config(), configs[i]));
    worst = std::max(worst, std::abs(estimated / counted - 1.0));
  }
  const ExperimentConfig swin = preset("swin-b-shape-account");
  const double swin_macs = static_cast<double>(estimate_flops(swin.backbone, PluginConfig::none()));
  const double order = swin_macs / 616e9;
  const bool ok = worst <= 0.05 && order >= 0.1 && order <= 10.0;
  return {ok, fmt::format("toy worst deviation {:.2f}% (limit 5%), swin-b backbone {:.1f} G MACs vs 616 G ({:.2f}x)",
                          100.0 * worst, swin_macs / 1e9, order)};
}

// ---------------------------------------------------------------------------
// 7. Independent loop-based forward.

Outcome oracle_equivalence() {
  const PluginConfig p = mhva_pt_caa(2, true);
  Model m(toy_config(), p);
  randomize_plugins(m, 70);
  NoGradGuard ng;
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Tensor video = rnd({8, 16, 16, 3}, 80 + i);
    const auto streams = streams_for(p, 90 + 10 * i);
    std::vector<std::vector<double>> raw;
    for (const ModalityStream& s : streams) raw.push_back(s.features.to_vector());
    worst = std::max(worst, max_abs_diff(m.forward(video, streams).to_vector(),
                                         oracle::naive_forward(m, video.to_vector(), raw)));
  }
  return {worst < 1e-5, fmt::format("max |diff| {:.3e} over 10 inputs (limit 1e-5)", worst)};
}

// ---------------------------------------------------------------------------
// 8. Training moves the metrics.

struct RunResult {
  TrainHistory history;
  Dataset data;
};

RunResult train_preset(const ExperimentConfig& c) {
  Dataset data = generate(c.data_spec());
  Model m(c.backbone, c.plugins, c.plugin_seed);
  TrainHistory h = train_loop(m, data, c.training);
  return {std::move(h), std::move(data)};
}

Outcome learning_signal() {
  const ExperimentConfig toy = preset("toy");
  const RunResult w = train_preset(toy);
  std::map<std::size_t, std::size_t> counts;
  for (const Sample& s : w.data.val) ++counts[s.label];
  std::size_t majority = 0;
  for (const auto& [label, n] : counts) majority = std::max(majority, n);
  const double baseline = static_cast<double>(majority) / static_cast<double>(w.data.val.size());
  const double l0 = w.history.initial_val.loss, l1 = w.history.final_val.loss;
  const bool window_ok = w.data.train.size() == 512 && w.history.steps <= 200 && l1 <= 0.5 * l0 &&
                         w.history.final_val.value > baseline;

  ExperimentConfig xor_on = preset("xor");
  ExperimentConfig xor_off = xor_on;
  xor_off.plugins.caa = false;
  const double acc_on = train_preset(xor_on).history.final_val.value;
  const double acc_off = train_preset(xor_off).history.final_val.value;
  const bool xor_ok = acc_on >= 0.70 && std::abs(acc_off - 0.5) <= 0.05;

  return {window_ok && xor_ok,
          fmt::format("window: val loss {:.4f} -> {:.4f} in {} steps, acc {:.3f} vs majority {:.3f}; "
                      "xor: caa {:.3f} (>= 0.70), no caa {:.3f} (0.50 +- 0.05)",
                      l0, l1, w.history.steps, w.history.final_val.value, baseline, acc_on, acc_off)};
}

// ---------------------------------------------------------------------------
// 9. Determinism and round trips.

Outcome determinism() {
  std::vector<std::string> metrics;
  for (const char* tag : {"a", "b"}) {
    ExperimentConfig c = preset("toy");
    c.data.train_size = 32;
    c.data.val_size = 8;
    c.training.epochs = 2;
    c.training.max_steps = 0;
    c.output.dir = scratch(std::string("det_") + tag).string();
    metrics.push_back(slurp(cmd_train(c).metrics));
  }
  const bool metrics_ok = !metrics[0].empty() && metrics[0] == metrics[1];

  const PluginConfig p = mhva_pt_caa(2, true);
  Model a(toy_config(), p);
  randomize_plugins(a, 100);
  const Tensor video = rnd({8, 16, 16, 3}, 101);
  const auto streams = streams_for(p, 102);
  const fs::path ckpt = scratch("ckpt") / "model.ckpt";
  save_checkpoint(a, ckpt);
  Model b(toy_config(), p, 12345);
  load_checkpoint(b, ckpt);
  const bool ckpt_ok = same_bytes(a.forward(video, streams).to_vector(), b.forward(video, streams).to_vector());

  SyntheticSpec s = preset("xor").data_spec();
  s.train_size = 40;
  s.val_size = 10;
  const Dataset d1 = generate(s), d2 = generate(s);
  bool data_ok = d1.train.size() == d2.train.size() && d1.val.size() == d2.val.size();
  for (Split split : {Split::train, Split::val}) {
    for (std::size_t i = 0; data_ok && i < d1.split(split).size(); ++i) {
      const Sample &x = d1.split(split)[i], &y = d2.split(split)[i];
      data_ok = x.label == y.label && same_bytes(x.video.to_vector(), y.video.to_vector()) &&
                x.streams.size() == y.streams.size();
      for (std::size_t m = 0; data_ok && m < x.streams.size(); ++m) {
        data_ok = same_bytes(x.streams[m].features.to_vector(), y.streams[m].features.to_vector());
      }
    }
  }
  const fs::path dir = scratch("data");
  save_dataset(d1, dir / "a.bin");
  save_dataset(d2, dir / "b.bin");
  data_ok = data_ok && slurp(dir / "a.bin") == slurp(dir / "b.bin");

  return {metrics_ok && ckpt_ok && data_ok,
          fmt::format("metrics files identical {}, checkpoint forward identical {}, regenerated data identical {}",
                      metrics_ok, ckpt_ok, data_ok)};
}

// ---------------------------------------------------------------------------
// 10. Ablation tables have the expected rows and a shared frozen backbone.

Outcome ablation_harness() {
  struct Expect {
    std::string preset, axis;
    std::vector<std::string> variants;
  };
  std::vector<std::string> a1{"caa all stages"};
  for (std::size_t k = 1; k <= preset("ablation-a1").backbone.num_stages(); ++k) {
    a1.push_back(fmt::format("caa -stage{}", k));
  }
  const std::vector<Expect> tables{
      {"ablation-c1", "c1", {"scaled-parallel+pt", "mhva+pt", "mhva+pt fixed-scale", "mhva+pt tanh-prefix"}},
      {"ablation-a1", "a1", a1},
      {"ablation-a1", "b1", {"caa", "caa+adapters"}},
  };
  bool ok = true;
  std::vector<std::string> parts;
  std::optional<std::size_t> frozen;
  for (const Expect& e : tables) {
    ExperimentConfig c = preset(e.preset);
    c.output.dir = scratch("ablate_" + e.axis).string();
    const AblationTable t = cmd_ablate(c, e.axis);
    bool rows_ok = t.rows.size() == e.variants.size();
    for (std::size_t i = 0; rows_ok && i < t.rows.size(); ++i) {
      rows_ok = t.rows[i].variant == e.variants[i] && !t.rows[i].definition.empty() && t.rows[i].steps > 0 &&
                t.rows[i].trainable_params > 0;
    }
    bool same = rows_ok;
    for (const AblationRow& r : t.rows) {
      if (!frozen) frozen = r.backbone_params;
      same = same && r.backbone_params == *frozen;
    }
    ok = ok && rows_ok && same;
    parts.push_back(fmt::format("{} {} rows{}", e.axis, t.rows.size(), rows_ok && same ? "" : " MISMATCH"));
  }
  return {ok, fmt::format("{}; frozen backbone {} in every row", fmt::join(parts, ", "), frozen.value_or(0))};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  const std::vector<Criterion> criteria{
      {1, "identity-at-init", 60.0, identity_at_init},
      {2, "freeze-purity", 120.0, freeze_purity},
      {3, "gradient-fidelity", 300.0, gradient_fidelity},
      {4, "reduction-equivalences", std::nullopt, reduction_equivalences},
      {5, "parameter-bookkeeping", 10.0, parameter_bookkeeping},
      {6, "flop-estimator", std::nullopt, flop_estimator},
      {7, "oracle-equivalence", std::nullopt, oracle_equivalence},
      {8, "learning-signal", 600.0, learning_signal},
      {9, "determinism-round-trips", std::nullopt, determinism},
      {10, "ablation-harness", std::nullopt, ablation_harness},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, fmt::format("exception: {}", e.what())};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt::format("{:.1f}s", secs);
    if (c.limit_seconds) {
      timing += fmt::format(" of {:.0f}s", *c.limit_seconds);
      if (secs > *c.limit_seconds) {
        o.pass = false;
        o.detail += "; over time limit";
      }
    }
    if (!o.pass) ++failures;
    std::cout << fmt::format("{} {:>2} {:<24} {} [{}]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail, timing)
              << std::flush;
  }
  return failures == 0 ? 0 : 1;
}
