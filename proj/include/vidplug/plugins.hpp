// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "vidplug/rng.hpp"
#include "vidplug/tensor.hpp"

namespace vidplug {

/// Bias-free bottleneck pair with a scalar scale.
struct AdapterParams {
  Tensor w_down;  // (d, r)
  Tensor w_up;    // (r, d), zero at init
  Tensor scale;   // (1)
};

/// One bottleneck pair per window group, one shared scale.
struct MHVAParams {
  std::vector<Tensor> w_down;  // m × (d, r)
  std::vector<Tensor> w_up;    // m × (r, d)
  Tensor scale;                // (1)
  std::size_t groups() const { return w_down.size(); }
};

struct PrefixParams {
  Tensor embedding;           // E, (L, d_p)
  Tensor w_down, b_down;      // (d_p, d_p/4), (d_p/4)
  Tensor w_up, b_up;          // (d_p/4, d), (d); zero at init
  Tensor gate;                // (heads); lambda = clamp(gate, 0, 1)
  bool tanh_generation = false;
  Tensor wk, wv;              // host layer's frozen key/value weights
};

/// Key path and output path of one cross-attention adapter.
struct CAAParams {
  Tensor w_key, b_key;  // (D_m, r), (r)
  Tensor w_up;          // (r, d), zero at init; undefined when fusion owns the output
  Tensor scale;         // (1); undefined when fusion owns the output
};

struct FusionParams {
  Tensor w_q;  // (r, a)
  Tensor w_k;  // (r_z, a)
  Tensor w_v;  // (r_z, d), zero at init
  bool scaled = false;
};

/// Frozen CAA reused with its own down-projection, wrapped by a small adapter.
struct FrozenCAA {
  Tensor w_down;  // (d, r)
  CAAParams caa;
};

struct DropoutSpec {
  double p = 0.0;
  CounterRng* rng = nullptr;
  bool training = false;
};

/// s · (ReLU(x·W_down)·W_up).
Tensor adapter_forward(const Tensor& x, const AdapterParams& p, const DropoutSpec& drop = {});

struct MHVAOutput {
  Tensor delta;       // same shape as x
  Tensor bottleneck;  // (windows, tokens_per_window, r), before dropout
};

/// Contiguous group sizes over `windows`; the remainder joins the last group.
std::vector<std::size_t> window_groups(std::size_t windows, std::size_t groups);

/// x (windows, tokens_per_window, d) split along windows into p.groups() parts,
/// one adapter each, concatenated and scaled once.
MHVAOutput mhva_forward(const Tensor& x, const MHVAParams& p, const DropoutSpec& drop = {});

struct PrefixKV {
  Tensor pk;  // (L, d)
  Tensor pv;  // (L, d)
};

/// C = up(act(down(E))), P_k = C·W_k, P_v = C·W_v.
PrefixKV prefix_generate(const PrefixParams& p, const DropoutSpec& drop = {});

/// q, h: (..., heads, tokens, head_dim). Returns (1-λ)h + λ·softmax(q·P_kᵀ)·P_v
/// per head, λ = clamp(gate) broadcast per head.
Tensor prefix_apply(const Tensor& q, const Tensor& h, const PrefixKV& kv, const Tensor& gate);

/// features (steps, D) -> (target_steps, D) by 1-d convolution at adaptive
/// starts. kernel is (k) shared or (k, D, D) full.
Tensor modality_temporal_pool(const Tensor& features, std::size_t target_steps, const Tensor& kernel,
                              const Tensor& bias = {});

/// (T', N) averaging matrix: row t averages the tokens at temporal index t.
Tensor temporal_mean_matrix(std::size_t t, std::size_t h, std::size_t w);

/// softmax(q·kᵀ / sqrt(r))·v for q (N, r), k (T', r), v (T', r).
Tensor cross_attention_context(const Tensor& q, const Tensor& k, const Tensor& v);

/// Cross-attention adapter. Q = V = bottleneck (N, r); keys from the pooled
/// modality (T', D_m); values aligned to key steps via `align` (T', N).
/// Returns the context (N, r) and, when p.w_up is defined, the projected delta.
struct CAAOutput {
  Tensor context;
  Tensor delta;
};
CAAOutput caa_forward(const Tensor& bottleneck, const Tensor& pooled, const Tensor& align,
                      const CAAParams& p);

struct FusionOutput {
  Tensor output;   // (N, d)
  Tensor weights;  // (N, modalities); rows sum to 1
};

/// score_n = <q·W_Q, z_n·W_K> per token, α = softmax over n, o = Σ α_n z_n·W_V.
FusionOutput adapter_fusion(const Tensor& query, const std::vector<Tensor>& z, const FusionParams& p);

/// Cross-attention with K = V = projected modality (T', r) and Q = query (N, r).
CAAOutput late_fusion_cross_attention(const Tensor& query, const Tensor& pooled, const CAAParams& p);

/// Frozen CAA driven by x (N, d) through its own down-projection, plus an
/// adapter over the CAA output. Throws ConfigError if any CAA tensor trains.
Tensor adapters_on_caa(const Tensor& x, const Tensor& pooled, const Tensor& align, const FrozenCAA& frozen,
                       const AdapterParams& adapter);

}  // namespace vidplug
