// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vidplug/tensor.hpp"

namespace vidplug {

/// Mean cross-entropy of logits (C) or (B, C) against class indices, using
/// log-sum-exp. Label out of range raises DataError.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Mean binary cross-entropy with logits against {0,1} targets of the same shape.
Tensor binary_cross_entropy_with_logits(const Tensor& logits, const Tensor& targets);

/// Mean squared error.
Tensor mse(const Tensor& pred, const Tensor& target);

/// Fraction of rows of logits (B, C) whose first argmax equals the label.
double top1_accuracy(const Tensor& logits, std::span<const std::size_t> labels);

/// Mean over classes (with at least one positive) of average precision. scores
/// and labels are (N, K); labels must be 0/1.
double mean_average_precision(const Tensor& scores, const Tensor& labels);

}  // namespace vidplug
