// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "vidplug/errors.hpp"
#include "vidplug/ops.hpp"
#include "vidplug/rng.hpp"

namespace vidplug {

namespace {

// Weighted difference of two outputs, taken per component so that components
// the probe does not touch cancel exactly.
double weighted_difference(const std::vector<double>& u, const std::vector<double>& d,
                           const std::vector<double>& w) {
  double total = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) total += w[i] * (u[i] - d[i]);
  return total;
}

std::vector<double> reduction_weights(std::size_t n) {
  CounterRng rng(0x6AD5C0DEULL);
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(0.5, 1.5);
  return w;
}

}  // namespace

GradCheckResult grad_check(const TensorFn& f, const std::vector<Tensor>& inputs, double eps) {
  for (const Tensor& in : inputs) {
    if (in.precision() != Precision::f64) {
      throw ContractError("grad_check requires 64-bit inputs");
    }
  }
  PrecisionScope scope(Precision::f64);

  // Analytic pass on private leaf copies.
  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& in : inputs) leaves.push_back(in.clone());
  Tensor y = f(leaves);
  const std::vector<double> w = reduction_weights(y.numel());
  Tensor loss = ops::sum(ops::mul(y, Tensor::from(y.shape(), w)));
  loss.backward();

  GradCheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const std::vector<double> analytic =
        leaves[k].has_grad() ? std::vector<double>(leaves[k].grad().begin(), leaves[k].grad().end())
                             : std::vector<double>(leaves[k].numel(), 0.0);
    NoGradGuard no_grad;
    std::vector<Tensor> probe;
    probe.reserve(inputs.size());
    for (const Tensor& in : inputs) probe.push_back(in.detach());
    auto values = probe[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      // Divide by the step actually taken so representation error cancels.
      const double hi = saved + eps;
      const double lo = saved - eps;
      values[i] = hi;
      const std::vector<double> up = f(probe).to_vector();
      values[i] = lo;
      const std::vector<double> down = f(probe).to_vector();
      values[i] = saved;
      const double numeric = weighted_difference(up, down, w) / (hi - lo);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++result.checked;
      if (err > result.max_rel_error || std::isnan(err)) {
        result.max_rel_error = std::isnan(err) ? INFINITY : err;
        result.input = k;
        result.index = i;
      }
    }
  }
  return result;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  return grad_check([&f](const std::vector<Tensor>& in) { return f(in[0]); }, {leaf}, eps)
      .max_rel_error;
}

}  // namespace vidplug
