// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vidplug/rng.hpp"
#include "vidplug/tensor.hpp"

namespace vidplug::ops {

// --- linear algebra ---------------------------------------------------------

/// Matrix product with numpy semantics: 1-d operands are promoted, leading
/// batch dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

/// x·w + b for x (..., in), w (in, out), optional b (out).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

// --- elementwise (broadcasting) --------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);

/// Forward clamps to [lo, hi]; backward passes the gradient through unchanged.
Tensor clamp_straight_through(const Tensor& x, double lo, double hi);

/// Inverted dropout. Identity when !training or p == 0. Survivors are scaled
/// by 1/(1-p). Throws ConfigError unless 0 <= p < 1.
Tensor dropout(const Tensor& x, double p, CounterRng& rng, bool training);

// --- normalization / attention ---------------------------------------------

/// Softmax along `axis` with subtract-max stabilization. NaN input raises
/// NumericError.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gamma/beta (shape (C)).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// --- structural --------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);

/// Gathers slices along axis 0. Index -1 yields a zero slice (padding).
Tensor take_rows(const Tensor& x, std::span<const std::int64_t> index);

/// 1-d convolution over the leading (time) axis of x (L, C) or (L).
///
/// kernel (k): one tap vector shared by every channel.
/// kernel (k, C_in, C_out): full convolution; bias (C_out) optional.
/// Output row i reads rows starts[i] + j, clamped into [0, L).
Tensor conv1d_at(const Tensor& x, const Tensor& kernel, std::span<const std::size_t> starts,
                 const Tensor& bias = {});
/// Valid convolution with a fixed stride: floor((L-k)/stride)+1 rows.
Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride, const Tensor& bias = {});

/// Window starts that map `steps` rows onto exactly `target` rows for a kernel of
/// width k: start_i = floor(i * (steps - k) / (target - 1)), clamped at 0.
std::vector<std::size_t> adaptive_starts(std::size_t steps, std::size_t target, std::size_t k);

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean along one axis, removing it.
Tensor mean_axis(const Tensor& x, std::size_t axis);

// --- instrumentation -------------------------------------------------------

/// Multiply-accumulates executed by matmul/conv1d on this thread.
std::uint64_t mac_count();
void reset_mac_count();

}  // namespace vidplug::ops
