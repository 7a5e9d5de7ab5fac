// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "vidplug/tensor.hpp"

namespace vidplug {

/// Function under test. Non-scalar outputs are reduced with fixed pseudo-random
/// weights before differentiation, so every output component participates.
using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t input = 0;  // input holding the worst component
  std::size_t index = 0;  // flat index of that component
  std::size_t checked = 0;
};

/// Compares the reverse sweep against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every component of every input that
/// requires grad. Error per component is |analytic - numeric| / max(1, |numeric|).
/// All inputs must be 64-bit; ContractError otherwise.
GradCheckResult grad_check(const TensorFn& f, const std::vector<Tensor>& inputs, double eps = 1e-6);

/// Single-input convenience overload returning only the max relative error.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-6);

}  // namespace vidplug
