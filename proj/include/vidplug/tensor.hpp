// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vidplug {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Element precision of a computation graph. Storage is always double; in
/// f32 mode every produced value is rounded to the nearest float, so results
/// match single-precision storage and serialize losslessly as 4-byte floats.
enum class Precision : std::uint8_t { f32 = 4, f64 = 8 };

const char* to_string(Precision p);

/// Precision given to newly created tensors on this thread.
Precision default_precision();
void set_default_precision(Precision p);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

/// Whether operations record themselves for the reverse sweep on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// Rounds in place to the representable set of `p`.
void round_to(std::span<double> values, Precision p);

struct TensorImpl;

/// One recorded operation: its inputs and the closure that pushes the output
/// gradient back into them. The closure receives the output node.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  Precision precision = Precision::f64;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  /// Adds `g` to grad[i], allocating the buffer on first use.
  void accumulate(std::size_t i, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[i] += g;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

/// Dense row-major n-d array with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage. Use clone() for a
/// deep copy and detach() to drop the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  Precision precision() const;

  std::span<const double> data() const;
  /// Writable view. Only valid on graph leaves; parameters are updated this way.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Reverse sweep from this scalar.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  /// Copy rounded into another precision, detached.
  Tensor to(Precision p) const;

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared_impl() const noexcept { return impl_; }

  /// Creates the output of an operation. Attaches `backward` as grad_fn when
  /// grad mode is on and any input requires a gradient.
  static Tensor make_result(const std::string& op, Shape shape, std::vector<double> values,
                            const std::vector<Tensor>& inputs,
                            std::function<void(TensorImpl& out)> backward);

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of the operations reachable from a loss, inputs first.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<TensorImpl*>& nodes() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }
  /// Index in the tape of a node, or -1.
  std::ptrdiff_t position(const TensorImpl* node) const;

 private:
  std::vector<TensorImpl*> order_;
};

/// Reverse sweep: loss must be a scalar. Leaves that require grad accumulate
/// into their grad buffer; intermediate buffers are released afterwards.
void backward(const Tensor& loss);

}  // namespace vidplug
