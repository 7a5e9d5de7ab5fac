// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "vidplug/errors.hpp"

namespace vidplug {

namespace {

thread_local Precision tl_precision = Precision::f64;
thread_local bool tl_grad_enabled = true;

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) { return fmt::format("({})", fmt::join(shape, ", ")); }

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision default_precision() { return tl_precision; }
void set_default_precision(Precision p) { tl_precision = p; }

PrecisionScope::PrecisionScope(Precision p) : saved_(tl_precision) { tl_precision = p; }
PrecisionScope::~PrecisionScope() { tl_precision = saved_; }

bool grad_enabled() { return tl_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = saved_; }

void round_to(std::span<double> values, Precision p) {
  if (p != Precision::f32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::ones(const Shape& shape, bool requires_grad) {
  return full(shape, 1.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(vidplug::numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != vidplug::numel(shape)) {
    throw DimensionError(fmt::format("{} values do not fill shape {}", values.size(),
                                     to_string(shape)));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  impl->precision = tl_precision;
  round_to(impl->data, impl->precision);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from(Shape{}, {value}, requires_grad);
}

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from({n, n}, std::move(v));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError(fmt::format("axis {} out of range for shape {}", axis,
                                     to_string(impl_->shape)));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
Precision Tensor::precision() const { return impl_->precision; }
std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
  if (impl_->grad_fn) throw ContractError("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

std::vector<double> Tensor::to_vector() const { return impl_->data; }

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ContractError(fmt::format("item() on tensor of shape {}", to_string(impl_->shape)));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = impl_->shape;
  if (index.size() != s.size()) throw DimensionError("index rank does not match tensor rank");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn && !on) throw ContractError("cannot clear requires_grad on a non-leaf");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const { vidplug::backward(*this); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->precision = impl_->precision;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::to(Precision p) const {
  Tensor t = detach();
  t.impl_->precision = p;
  round_to(t.impl_->data, p);
  return t;
}

Tensor Tensor::make_result(const std::string& op, Shape shape, std::vector<double> values,
                           const std::vector<Tensor>& inputs,
                           std::function<void(TensorImpl& out)> backward_fn) {
  Precision p = inputs.empty() ? tl_precision : inputs.front().precision();
  bool needs_grad = false;
  for (const Tensor& in : inputs) {
    if (in.precision() != p) {
      throw ContractError(fmt::format("{}: mixed precision inputs ({} and {})", op,
                                      to_string(p), to_string(in.precision())));
    }
    needs_grad = needs_grad || in.requires_grad();
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->precision = p;
  round_to(impl->data, p);
  if (needs_grad && tl_grad_enabled) {
    impl->requires_grad = true;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node->inputs.push_back(in.impl_);
    node->backward = std::move(backward_fn);
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
  Tape tape;
  std::unordered_set<const TensorImpl*> seen;
  // Iterative post-order DFS; a node is appended after all of its inputs.
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl(), 0);
  seen.insert(root.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(node);
    stack.pop_back();
  }
  return tape;
}

std::ptrdiff_t Tape::position(const TensorImpl* node) const {
  auto it = std::find(order_.begin(), order_.end(), node);
  return it == order_.end() ? -1 : std::distance(order_.begin(), it);
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1 || !loss.shape().empty()) {
    throw ContractError(fmt::format("backward() needs a scalar loss, got shape {}",
                                    loss.defined() ? to_string(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) return;
  Tape tape = Tape::record(loss);
  TensorImpl* root = loss.impl();
  root->ensure_grad();
  root->grad[0] += 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    node->ensure_grad();
    node->grad_fn->backward(*node);
  }
  for (TensorImpl* node : order) {
    if (node->grad_fn) node->grad.clear();
  }
}

}  // namespace vidplug
