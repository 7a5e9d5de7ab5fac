// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/plugins.hpp"

#include <cmath>

#include <fmt/format.h>

#include "vidplug/errors.hpp"
#include "vidplug/ops.hpp"

namespace vidplug {

namespace {

Tensor maybe_dropout(const Tensor& x, const DropoutSpec& drop) {
  if (!drop.training || drop.p == 0.0) return x;
  if (drop.rng == nullptr) throw ContractError("dropout in training mode needs an rng");
  return ops::dropout(x, drop.p, *drop.rng, true);
}

void require_rank(const Tensor& x, std::size_t rank, const char* op, const char* what) {
  if (x.dim() != rank) {
    throw DimensionError(fmt::format("{}: {} must have rank {}, got {}", op, what, rank,
                                     to_string(x.shape())));
  }
}

// Rowwise inner product of (N, a) matrices -> (N, 1).
Tensor row_dot(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.size(0), k = a.size(1);
  return ops::reshape(ops::matmul(ops::mul(a, b), Tensor::ones({k})), {n, 1});
}

// (L, d) -> (heads, L, d/heads).
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t l = x.size(0), d = x.size(1);
  return ops::permute(ops::reshape(x, {l, heads, d / heads}), {1, 0, 2});
}

}  // namespace

Tensor adapter_forward(const Tensor& x, const AdapterParams& p, const DropoutSpec& drop) {
  Tensor b = maybe_dropout(ops::relu(ops::matmul(x, p.w_down)), drop);
  return ops::mul(ops::matmul(b, p.w_up), p.scale);
}

std::vector<std::size_t> window_groups(std::size_t windows, std::size_t groups) {
  if (groups == 0 || groups > windows) {
    throw ConfigError(fmt::format("cannot split {} windows into {} groups", windows, groups),
                      "plugins.mhva_groups");
  }
  std::vector<std::size_t> sizes(groups, windows / groups);
  sizes.back() += windows % groups;
  return sizes;
}

MHVAOutput mhva_forward(const Tensor& x, const MHVAParams& p, const DropoutSpec& drop) {
  require_rank(x, 3, "mhva_forward", "x");
  const std::vector<std::size_t> sizes = window_groups(x.size(0), p.groups());
  const std::vector<Tensor> parts = ops::split(x, 0, sizes);
  std::vector<Tensor> deltas, bottlenecks;
  for (std::size_t g = 0; g < parts.size(); ++g) {
    Tensor b = ops::relu(ops::matmul(parts[g], p.w_down[g]));
    bottlenecks.push_back(b);
    deltas.push_back(ops::matmul(maybe_dropout(b, drop), p.w_up[g]));
  }
  return {ops::mul(ops::concat(deltas, 0), p.scale), ops::concat(bottlenecks, 0)};
}

PrefixKV prefix_generate(const PrefixParams& p, const DropoutSpec& drop) {
  Tensor hidden = ops::linear(p.embedding, p.w_down, p.b_down);
  hidden = p.tanh_generation ? ops::tanh(hidden) : ops::relu(hidden);
  Tensor c = maybe_dropout(ops::linear(hidden, p.w_up, p.b_up), drop);
  return {ops::matmul(c, p.wk), ops::matmul(c, p.wv)};
}

Tensor prefix_apply(const Tensor& q, const Tensor& h, const PrefixKV& kv, const Tensor& gate) {
  if (q.dim() < 3 || q.shape() != h.shape()) {
    throw DimensionError(fmt::format("prefix_apply: q {} and h {} must match (..., heads, tokens, dh)",
                                     to_string(q.shape()), to_string(h.shape())));
  }
  const std::size_t heads = q.size(q.dim() - 3);
  if (gate.numel() != heads) {
    throw DimensionError(fmt::format("prefix_apply: {} gates for {} heads", gate.numel(), heads));
  }
  Tensor pk = split_heads(kv.pk, heads);  // (H, L, dh)
  Tensor pv = split_heads(kv.pv, heads);
  Tensor attn = ops::softmax(ops::matmul(q, ops::transpose(pk)), q.dim() - 1);
  Tensor delta = ops::matmul(attn, pv);
  Tensor lambda = ops::reshape(ops::clamp_straight_through(gate, 0.0, 1.0), {heads, 1, 1});
  Tensor keep = ops::add_scalar(ops::scale(lambda, -1.0), 1.0);
  return ops::add(ops::mul(keep, h), ops::mul(lambda, delta));
}

Tensor modality_temporal_pool(const Tensor& features, std::size_t target_steps, const Tensor& kernel,
                              const Tensor& bias) {
  if (target_steps < 1) throw ConfigError("temporal pooling target must be >= 1", "plugins.modalities");
  if (features.dim() < 1 || features.size(0) < 1) {
    throw DataError(fmt::format("modality stream needs >= 1 step, got {}", to_string(features.shape())));
  }
  const auto starts = ops::adaptive_starts(features.size(0), target_steps, kernel.size(0));
  return ops::conv1d_at(features, kernel, starts, bias);
}

Tensor temporal_mean_matrix(std::size_t t, std::size_t h, std::size_t w) {
  const std::size_t per = h * w;
  std::vector<double> a(t * t * per, 0.0);
  const double v = 1.0 / static_cast<double>(per);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < per; ++j) a[i * t * per + i * per + j] = v;
  return Tensor::from({t, t * per}, std::move(a));
}

Tensor cross_attention_context(const Tensor& q, const Tensor& k, const Tensor& v) {
  require_rank(q, 2, "cross_attention", "query");
  require_rank(k, 2, "cross_attention", "keys");
  const double r = static_cast<double>(q.size(1));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(r));
  return ops::matmul(ops::softmax(scores, 1), v);
}

CAAOutput caa_forward(const Tensor& bottleneck, const Tensor& pooled, const Tensor& align,
                      const CAAParams& p) {
  require_rank(bottleneck, 2, "caa_forward", "bottleneck");
  if (align.size(1) != bottleneck.size(0) || align.size(0) != pooled.size(0)) {
    throw DimensionError(fmt::format("caa_forward: alignment {} does not map {} tokens onto {} steps",
                                     to_string(align.shape()), bottleneck.size(0), pooled.size(0)));
  }
  Tensor keys = ops::linear(pooled, p.w_key, p.b_key);
  Tensor values = ops::matmul(align, bottleneck);
  CAAOutput out;
  out.context = cross_attention_context(bottleneck, keys, values);
  if (p.w_up.defined()) out.delta = ops::mul(ops::matmul(out.context, p.w_up), p.scale);
  return out;
}

FusionOutput adapter_fusion(const Tensor& query, const std::vector<Tensor>& z, const FusionParams& p) {
  if (z.empty()) throw ContractError("adapter_fusion needs at least one modality output");
  for (const Tensor& zn : z) {
    if (zn.shape() != z[0].shape()) {
      throw DimensionError(fmt::format("adapter_fusion: modality outputs {} and {} differ",
                                       to_string(z[0].shape()), to_string(zn.shape())));
    }
  }
  Tensor qp = ops::matmul(query, p.w_q);
  std::vector<Tensor> scores;
  scores.reserve(z.size());
  for (const Tensor& zn : z) scores.push_back(row_dot(qp, ops::matmul(zn, p.w_k)));
  Tensor logits = ops::concat(scores, 1);
  if (p.scaled) logits = ops::scale(logits, 1.0 / std::sqrt(static_cast<double>(p.w_q.size(1))));
  FusionOutput out;
  out.weights = ops::softmax(logits, 1);
  for (std::size_t n = 0; n < z.size(); ++n) {
    Tensor term = ops::mul(ops::slice(out.weights, 1, n, 1), ops::matmul(z[n], p.w_v));
    out.output = n == 0 ? term : ops::add(out.output, term);
  }
  return out;
}

CAAOutput late_fusion_cross_attention(const Tensor& query, const Tensor& pooled, const CAAParams& p) {
  Tensor kv = ops::linear(pooled, p.w_key, p.b_key);
  CAAOutput out;
  out.context = cross_attention_context(query, kv, kv);
  if (p.w_up.defined()) out.delta = ops::mul(ops::matmul(out.context, p.w_up), p.scale);
  return out;
}

Tensor adapters_on_caa(const Tensor& x, const Tensor& pooled, const Tensor& align, const FrozenCAA& frozen,
                       const AdapterParams& adapter) {
  for (const Tensor* t : {&frozen.w_down, &frozen.caa.w_key, &frozen.caa.b_key, &frozen.caa.w_up,
                          &frozen.caa.scale}) {
    if (t->defined() && t->requires_grad()) {
      throw ConfigError("adapters_on_caa requires a frozen cross-attention adapter",
                        "plugins.adapters_on_caa");
    }
  }
  if (!frozen.caa.w_up.defined()) {
    throw ConfigError("adapters_on_caa needs a CAA with its own output projection",
                      "plugins.adapters_on_caa");
  }
  Tensor bottleneck = ops::relu(ops::matmul(x, frozen.w_down));
  Tensor caa_out = caa_forward(bottleneck, pooled, align, frozen.caa).delta;
  return ops::add(caa_out, adapter_forward(caa_out, adapter));
}

}  // namespace vidplug
