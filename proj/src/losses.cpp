// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "vidplug/errors.hpp"
#include "vidplug/ops.hpp"

namespace vidplug {

namespace {

// Interprets (C) as a single row.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& logits, const char* op) {
  if (logits.dim() == 1) return {1, logits.size(0)};
  if (logits.dim() == 2) return {logits.size(0), logits.size(1)};
  throw DimensionError(fmt::format("{}: logits must be (C) or (B, C), got {}", op,
                                   to_string(logits.shape())));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const auto [rows, cols] = rows_cols(logits, "cross_entropy");
  if (labels.size() != rows) {
    throw DimensionError(fmt::format("cross_entropy: {} labels for {} rows", labels.size(), rows));
  }
  for (std::size_t l : labels) {
    if (l >= cols) throw DataError(fmt::format("label {} out of range for {} classes", l, cols));
  }
  const auto& x = logits.data();
  auto probs = std::make_shared<std::vector<double>>(x.size());
  auto lab = std::make_shared<std::vector<std::size_t>>(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) (*probs)[r * cols + c] = std::exp(row[c] - lse);
    loss += lse - row[(*lab)[r]];
  }
  loss /= static_cast<double>(rows);
  return Tensor::make_result("cross_entropy", Shape{}, {loss}, {logits},
                             [logits, probs, lab, rows, cols](TensorImpl& o) {
                               TensorImpl* p = logits.impl();
                               if (!p->requires_grad) return;
                               p->ensure_grad();
                               const double g = o.grad[0] / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const double target = c == (*lab)[r] ? 1.0 : 0.0;
                                   p->grad[r * cols + c] += g * ((*probs)[r * cols + c] - target);
                                 }
                               }
                             });
}

Tensor binary_cross_entropy_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError(fmt::format("bce: logits {} vs targets {}", to_string(logits.shape()),
                                     to_string(targets.shape())));
  }
  const auto& x = logits.data();
  const auto& y = targets.data();
  for (double v : y) {
    if (v != 0.0 && v != 1.0) throw DataError("bce: targets must be 0/1");
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    // max(x,0) - x*y + log(1 + exp(-|x|))
    loss += std::max(x[i], 0.0) - x[i] * y[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const double n = static_cast<double>(std::max<std::size_t>(x.size(), 1));
  loss /= n;
  return Tensor::make_result("bce_with_logits", Shape{}, {loss}, {logits},
                             [logits, targets, n](TensorImpl& o) {
                               TensorImpl* p = logits.impl();
                               if (!p->requires_grad) return;
                               p->ensure_grad();
                               const auto& y = targets.data();
                               for (std::size_t i = 0; i < p->data.size(); ++i) {
                                 const double s = 1.0 / (1.0 + std::exp(-p->data[i]));
                                 p->grad[i] += o.grad[0] * (s - y[i]) / n;
                               }
                             });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError(fmt::format("mse: prediction {} vs target {}", to_string(pred.shape()),
                                     to_string(target.shape())));
  }
  return ops::mean(ops::square(ops::sub(pred, target)));
}

double top1_accuracy(const Tensor& logits, std::span<const std::size_t> labels) {
  const auto [rows, cols] = rows_cols(logits, "top1_accuracy");
  if (labels.size() != rows) {
    throw DimensionError(fmt::format("top1_accuracy: {} labels for {} rows", labels.size(), rows));
  }
  if (rows == 0) return 0.0;
  const auto& x = logits.data();
  std::size_t hits = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw DataError(fmt::format("label {} out of range", labels[r]));
    const double* row = x.data() + r * cols;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
    hits += best == labels[r] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

double mean_average_precision(const Tensor& scores, const Tensor& labels) {
  if (scores.shape() != labels.shape() || scores.dim() != 2) {
    throw DimensionError(fmt::format("mAP: scores {} vs labels {} (need matching (N, K))",
                                     to_string(scores.shape()), to_string(labels.shape())));
  }
  const std::size_t n = scores.size(0);
  const std::size_t k = scores.size(1);
  const auto& s = scores.data();
  const auto& y = labels.data();
  for (double v : y) {
    if (v != 0.0 && v != 1.0) throw DataError("mAP: labels must be 0/1");
  }
  double total_ap = 0.0;
  std::size_t classes = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s[a * k + c] > s[b * k + c]; });
    std::size_t positives = 0;
    double ap = 0.0;
    for (std::size_t rank = 0; rank < n; ++rank) {
      if (y[order[rank] * k + c] == 1.0) {
        ++positives;
        ap += static_cast<double>(positives) / static_cast<double>(rank + 1);
      }
    }
    if (positives == 0) continue;
    total_ap += ap / static_cast<double>(positives);
    ++classes;
  }
  return classes == 0 ? 0.0 : total_ap / static_cast<double>(classes);
}

}  // namespace vidplug
