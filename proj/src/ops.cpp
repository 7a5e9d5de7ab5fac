// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#include "vidplug/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "vidplug/errors.hpp"

namespace vidplug::ops {

namespace {

thread_local std::uint64_t tl_macs = 0;

// Index maps from a broadcast output back into each operand.
struct BroadcastMap {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

BroadcastMap broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastMap m;
  if (a == b) {
    m.out = a;
    m.same = true;
    return m;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  m.out.assign(rank, 1);
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    const std::size_t axis = rank - 1 - r;
    const std::size_t da = r < a.size() ? a[a.size() - 1 - r] : 1;
    const std::size_t db = r < b.size() ? b[b.size() - 1 - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(fmt::format("{}: shapes {} and {} do not broadcast", op, to_string(a),
                                       to_string(b)));
    }
    m.out[axis] = std::max(da, db);
    sa[axis] = da == 1 ? 0 : stride_a;
    sb[axis] = db == 1 ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  const std::size_t n = numel(m.out);
  m.ia.resize(n);
  m.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    m.ia[i] = oa;
    m.ib[i] = ob;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      oa += sa[axis];
      ob += sb[axis];
      if (idx[axis] < m.out[axis]) break;
      oa -= sa[axis] * idx[axis];
      ob -= sb[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  return m;
}

template <class F, class GA, class GB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, GA ga, GB gb) {
  auto map = std::make_shared<BroadcastMap>(broadcast(a.shape(), b.shape(), name));
  const auto& ad = a.data();
  const auto& bd = b.data();
  const std::size_t n = numel(map->out);
  std::vector<double> out(n);
  if (map->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[i], bd[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[map->ia[i]], bd[map->ib[i]]);
  }
  Shape shape = map->out;
  return Tensor::make_result(name, std::move(shape), std::move(out), {a, b},
                             [a, b, map, ga, gb](TensorImpl& o) {
                               TensorImpl* pa = a.impl();
                               TensorImpl* pb = b.impl();
                               const std::size_t n = o.data.size();
                               for (std::size_t i = 0; i < n; ++i) {
                                 const std::size_t ia = map->same ? i : map->ia[i];
                                 const std::size_t ib = map->same ? i : map->ib[i];
                                 const double x = pa->data[ia];
                                 const double y = pb->data[ib];
                                 if (pa->requires_grad) pa->accumulate(ia, o.grad[i] * ga(x, y));
                                 if (pb->requires_grad) pb->accumulate(ib, o.grad[i] * gb(x, y));
                               }
                             });
}

// `d(x, y)` is the derivative given input x and output y.
template <class F, class D>
Tensor unary_op(const char* name, const Tensor& x, F f, D d) {
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return Tensor::make_result(name, x.shape(), std::move(out), {x}, [x, d](TensorImpl& o) {
    TensorImpl* px = x.impl();
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o.data.size(); ++i) {
      px->grad[i] += o.grad[i] * d(px->data[i], o.data[i]);
    }
  });
}

// Decomposes shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.dim()) {
    throw DimensionError(fmt::format("{}: axis {} invalid for shape {}", op, axis,
                                     to_string(x.shape())));
  }
}

// Row-major (n×k)·(k×m) accumulated into c.
void gemm_acc(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
              std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

std::uint64_t mac_count() { return tl_macs; }
void reset_mac_count() { tl_macs = 0; }

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a_in, const Tensor& b_in) {
  if (a_in.dim() == 0 || b_in.dim() == 0) {
    throw DimensionError(fmt::format("matmul: scalar operand ({} x {})", to_string(a_in.shape()),
                                     to_string(b_in.shape())));
  }
  if (a_in.dim() == 1) {
    Tensor r = matmul(reshape(a_in, {1, a_in.size(0)}), b_in);
    Shape s = r.shape();
    s.erase(s.end() - 2);
    return reshape(r, s);
  }
  if (b_in.dim() == 1) {
    Tensor r = matmul(a_in, reshape(b_in, {b_in.size(0), 1}));
    Shape s = r.shape();
    s.pop_back();
    return reshape(r, s);
  }
  const Shape& as = a_in.shape();
  const Shape& bs = b_in.shape();
  const std::size_t n = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t k2 = bs[bs.size() - 2];
  const std::size_t m = bs.back();
  if (k != k2) {
    throw DimensionError(fmt::format("matmul: inner extents differ for {} x {}", to_string(as),
                                     to_string(bs)));
  }
  Shape batch_a(as.begin(), as.end() - 2);
  Shape batch_b(bs.begin(), bs.end() - 2);
  BroadcastMap bmap;
  try {
    bmap = broadcast(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError(fmt::format("matmul: batch dims of {} and {} do not broadcast",
                                     to_string(as), to_string(bs)));
  }
  const std::size_t batches = numel(bmap.out);
  if (bmap.same) {
    bmap.ia.resize(batches);
    bmap.ib.resize(batches);
    std::iota(bmap.ia.begin(), bmap.ia.end(), 0);
    std::iota(bmap.ib.begin(), bmap.ib.end(), 0);
  }
  auto map = std::make_shared<BroadcastMap>(std::move(bmap));
  std::vector<double> out(batches * n * m, 0.0);
  const double* ad = a_in.data().data();
  const double* bd = b_in.data().data();
  for (std::size_t i = 0; i < batches; ++i) {
    gemm_acc(ad + map->ia[i] * n * k, bd + map->ib[i] * k * m, out.data() + i * n * m, n, k, m);
  }
  tl_macs += static_cast<std::uint64_t>(batches) * n * k * m;
  Shape shape = map->out;
  shape.push_back(n);
  shape.push_back(m);
  return Tensor::make_result(
      "matmul", std::move(shape), std::move(out), {a_in, b_in},
      [a_in, b_in, map, n, k, m](TensorImpl& o) {
        TensorImpl* pa = a_in.impl();
        TensorImpl* pb = b_in.impl();
        const std::size_t batches = map->ia.size();
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        for (std::size_t bi = 0; bi < batches; ++bi) {
          const double* g = o.grad.data() + bi * n * m;
          const double* A = pa->data.data() + map->ia[bi] * n * k;
          const double* B = pb->data.data() + map->ib[bi] * k * m;
          if (pa->requires_grad) {
            double* gA = pa->grad.data() + map->ia[bi] * n * k;
            // gA += g · Bᵀ
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                double acc = 0.0;
                const double* brow = B + p * m;
                const double* grow = g + i * m;
                for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                gA[i * k + p] += acc;
              }
            }
          }
          if (pb->requires_grad) {
            double* gB = pb->grad.data() + map->ib[bi] * k * m;
            // gB += Aᵀ · g
            for (std::size_t i = 0; i < n; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                if (av == 0.0) continue;
                const double* grow = g + i * m;
                double* gbrow = gB + p * m;
                for (std::size_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
              }
            }
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add(y, b) : y;
}

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double s) {
  return unary_op(
      "scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      "add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  // Subgradient at 0 is 0.
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp_straight_through(const Tensor& x, double lo, double hi) {
  return unary_op(
      "clamp_st", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [](double, double) { return 1.0; });
}

Tensor dropout(const Tensor& x, double p, CounterRng& rng, bool training) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError(fmt::format("dropout probability {} outside [0, 1)", p));
  }
  if (!training || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (double& m : *mask) m = rng.uniform() < p ? 0.0 : keep;
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * (*mask)[i];
  return Tensor::make_result("dropout", x.shape(), std::move(out), {x}, [x, mask](TensorImpl& o) {
    TensorImpl* px = x.impl();
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis);
  const auto& xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double v = xd[base + j * s.inner];
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
        mx = std::max(mx, v);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xd[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  return Tensor::make_result("softmax", x.shape(), std::move(out), {x}, [x, s](TensorImpl& o) {
    TensorImpl* px = x.impl();
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t ou = 0; ou < s.outer; ++ou) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = ou * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t i = base + j * s.inner;
          dot += o.grad[i] * o.data[i];
        }
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t i = base + j * s.inner;
          px->grad[i] += o.data[i] * (o.grad[i] - dot);
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError(fmt::format("layer_norm: affine shapes {} / {} do not match input {}",
                                     to_string(gamma.shape()), to_string(beta.shape()),
                                     to_string(x.shape())));
  }
  const std::size_t rows = x.numel() / c;
  const auto& xd = x.data();
  const auto& gd = gamma.data();
  const auto& bd = beta.data();
  std::vector<double> out(xd.size());
  // Saved per-row normalized values and inverse std for the reverse sweep.
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = gd[j] * h + bd[j];
    }
  }
  return Tensor::make_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, rows, c](TensorImpl& o) {
        TensorImpl* px = x.impl();
        TensorImpl* pg = gamma.impl();
        TensorImpl* pb = beta.impl();
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        std::vector<double> dxhat(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = o.grad.data() + r * c;
          const double* h = xhat->data() + r * c;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            if (pg->requires_grad) pg->grad[j] += g[j] * h[j];
            if (pb->requires_grad) pb->grad[j] += g[j];
            dxhat[j] = g[j] * pg->data[j];
            mean_d += dxhat[j];
            mean_dh += dxhat[j] * h[j];
          }
          if (!px->requires_grad) continue;
          mean_d /= static_cast<double>(c);
          mean_dh /= static_cast<double>(c);
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < c; ++j) {
            px->grad[r * c + j] += is * (dxhat[j] - mean_d - h[j] * mean_dh);
          }
        }
      });
}

// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError(fmt::format("reshape: {} cannot become {}", to_string(x.shape()),
                                     to_string(shape)));
  }
  return Tensor::make_result("reshape", shape, x.to_vector(), {x}, [x](TensorImpl& o) {
    TensorImpl* px = x.impl();
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < o.grad.size(); ++i) px->grad[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const Shape& s = x.shape();
  if (order.size() != s.size()) {
    throw DimensionError(fmt::format("permute: order of rank {} for shape {}", order.size(),
                                     to_string(s)));
  }
  std::vector<bool> used(s.size(), false);
  for (std::size_t a : order) {
    if (a >= s.size() || used[a]) throw DimensionError("permute: order is not a permutation");
    used[a] = true;
  }
  const std::size_t rank = s.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[order[i]];
    step[i] = in_stride[order[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      off += step[axis];
      if (idx[axis] < out_shape[axis]) break;
      off -= step[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  const auto& xd = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*src)[i]];
  return Tensor::make_result("permute", std::move(out_shape), std::move(out), {x},
                             [x, src](TensorImpl& o) {
                               TensorImpl* px = x.impl();
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                 px->grad[(*src)[i]] += o.grad[i];
                               }
                             });
}

Tensor transpose(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("transpose: needs rank >= 2");
  std::vector<std::size_t> order(x.dim());
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[x.dim() - 1], order[x.dim() - 2]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(x, axis, "slice");
  if (start + length > x.size(axis)) {
    throw DimensionError(fmt::format("slice: [{}, {}) exceeds axis {} of {}", start,
                                     start + length, axis, to_string(x.shape())));
  }
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(s.outer * length * s.inner);
  const auto& xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return Tensor::make_result("slice", std::move(out_shape), std::move(out), {x},
                             [x, s, start, length](TensorImpl& o) {
                               TensorImpl* px = x.impl();
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::size_t ou = 0; ou < s.outer; ++ou) {
                                 const double* g = o.grad.data() + ou * length * s.inner;
                                 double* dst =
                                     px->grad.data() + (ou * s.extent + start) * s.inner;
                                 for (std::size_t i = 0; i < length * s.inner; ++i) dst[i] += g[i];
                               }
                             });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: empty list");
  const Shape& ref = parts.front().shape();
  check_axis(parts.front(), axis, "concat");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) {
      throw DimensionError(fmt::format("concat: ragged shapes {} and {} on axis {}",
                                       to_string(ref), to_string(s), axis));
    }
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const AxisSplit os = split_axis(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(at);
    const std::size_t len = p.size(axis);
    const auto& pd = p.data();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pd.begin() + o * len * os.inner, len * os.inner,
                  out.begin() + (o * total + at) * os.inner);
    }
    at += len;
  }
  return Tensor::make_result("concat", std::move(out_shape), std::move(out), parts,
                             [parts, offsets, os, total, axis](TensorImpl& o) {
                               for (std::size_t k = 0; k < parts.size(); ++k) {
                                 TensorImpl* pp = parts[k].impl();
                                 if (!pp->requires_grad) continue;
                                 pp->ensure_grad();
                                 const std::size_t len = pp->shape[axis];
                                 for (std::size_t ou = 0; ou < os.outer; ++ou) {
                                   const double* g =
                                       o.grad.data() + (ou * total + offsets[k]) * os.inner;
                                   double* dst = pp->grad.data() + ou * len * os.inner;
                                   for (std::size_t i = 0; i < len * os.inner; ++i) dst[i] += g[i];
                                 }
                               }
                             });
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  check_axis(x, axis, "split");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (total != x.size(axis)) {
    throw DimensionError(fmt::format("split: parts sum to {} but axis {} of {} has {}", total,
                                     axis, to_string(x.shape()), x.size(axis)));
  }
  std::vector<Tensor> out;
  out.reserve(sizes.size());
  std::size_t at = 0;
  for (std::size_t len : sizes) {
    out.push_back(slice(x, axis, at, len));
    at += len;
  }
  return out;
}

Tensor take_rows(const Tensor& x, std::span<const std::int64_t> index) {
  if (x.dim() == 0) throw DimensionError("take_rows: scalar input");
  const std::size_t rows = x.size(0);
  const std::size_t width = x.numel() / std::max<std::size_t>(rows, 1);
  for (std::int64_t i : index) {
    if (i < -1 || (i >= 0 && static_cast<std::size_t>(i) >= rows)) {
      throw DimensionError(fmt::format("take_rows: index {} outside {} rows", i, rows));
    }
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(index.begin(), index.end());
  Shape out_shape = x.shape();
  out_shape[0] = idx->size();
  std::vector<double> out(idx->size() * width, 0.0);
  const auto& xd = x.data();
  for (std::size_t r = 0; r < idx->size(); ++r) {
    const std::int64_t src = (*idx)[r];
    if (src < 0) continue;
    std::copy_n(xd.begin() + static_cast<std::size_t>(src) * width, width,
                out.begin() + r * width);
  }
  return Tensor::make_result("take_rows", std::move(out_shape), std::move(out), {x},
                             [x, idx, width](TensorImpl& o) {
                               TensorImpl* px = x.impl();
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::size_t r = 0; r < idx->size(); ++r) {
                                 const std::int64_t src = (*idx)[r];
                                 if (src < 0) continue;
                                 double* dst = px->grad.data() + static_cast<std::size_t>(src) * width;
                                 const double* g = o.grad.data() + r * width;
                                 for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
                               }
                             });
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> adaptive_starts(std::size_t steps, std::size_t target, std::size_t k) {
  if (target < 1) throw ConfigError("adaptive_starts: target must be >= 1");
  std::vector<std::size_t> starts(target, 0);
  if (target == 1 || steps <= k) return starts;
  const std::size_t span = steps - k;
  for (std::size_t i = 0; i < target; ++i) starts[i] = i * span / (target - 1);
  return starts;
}

Tensor conv1d_at(const Tensor& x_in, const Tensor& kernel, std::span<const std::size_t> starts_in,
                 const Tensor& bias) {
  const bool vector_input = x_in.dim() == 1;
  if (x_in.dim() != 1 && x_in.dim() != 2) {
    throw DimensionError(fmt::format("conv1d: input must be (L) or (L, C), got {}",
                                     to_string(x_in.shape())));
  }
  const std::size_t len = x_in.size(0);
  const std::size_t cin = vector_input ? 1 : x_in.size(1);
  if (len == 0) throw DimensionError("conv1d: empty input");
  const bool shared = kernel.dim() == 1;
  if (!shared && (kernel.dim() != 3 || kernel.size(1) != cin)) {
    throw DimensionError(fmt::format("conv1d: kernel {} incompatible with input {}",
                                     to_string(kernel.shape()), to_string(x_in.shape())));
  }
  const std::size_t k = kernel.size(0);
  const std::size_t cout = shared ? cin : kernel.size(2);
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError(fmt::format("conv1d: bias {} for {} output channels",
                                     to_string(bias.shape()), cout));
  }
  auto starts = std::make_shared<std::vector<std::size_t>>(starts_in.begin(), starts_in.end());
  const std::size_t rows = starts->size();
  auto src_row = [len](std::size_t s, std::size_t j) { return std::min(s + j, len - 1); };
  const auto& xd = x_in.data();
  const auto& kd = kernel.data();
  std::vector<double> out(rows * cout, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double* orow = out.data() + i * cout;
    for (std::size_t j = 0; j < k; ++j) {
      const double* xrow = xd.data() + src_row((*starts)[i], j) * cin;
      if (shared) {
        for (std::size_t c = 0; c < cin; ++c) orow[c] += kd[j] * xrow[c];
      } else {
        const double* kj = kd.data() + j * cin * cout;
        for (std::size_t c = 0; c < cin; ++c) {
          const double xv = xrow[c];
          const double* kr = kj + c * cout;
          for (std::size_t o = 0; o < cout; ++o) orow[o] += xv * kr[o];
        }
      }
    }
    if (bias.defined()) {
      for (std::size_t o = 0; o < cout; ++o) orow[o] += bias.data()[o];
    }
  }
  tl_macs += static_cast<std::uint64_t>(rows) * k * (shared ? cin : cin * cout);
  Shape out_shape = vector_input && cout == 1 ? Shape{rows} : Shape{rows, cout};
  std::vector<Tensor> inputs{x_in, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor::make_result(
      "conv1d", std::move(out_shape), std::move(out), inputs,
      [x_in, kernel, bias, starts, k, cin, cout, shared, src_row](TensorImpl& o) {
        TensorImpl* px = x_in.impl();
        TensorImpl* pk = kernel.impl();
        TensorImpl* pb = bias.defined() ? bias.impl() : nullptr;
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        if (pb && pb->requires_grad) pb->ensure_grad();
        for (std::size_t i = 0; i < starts->size(); ++i) {
          const double* g = o.grad.data() + i * cout;
          if (pb && pb->requires_grad) {
            for (std::size_t c = 0; c < cout; ++c) pb->grad[c] += g[c];
          }
          for (std::size_t j = 0; j < k; ++j) {
            const std::size_t r = src_row((*starts)[i], j);
            const double* xrow = px->data.data() + r * cin;
            if (shared) {
              for (std::size_t c = 0; c < cin; ++c) {
                if (pk->requires_grad) pk->grad[j] += g[c] * xrow[c];
                if (px->requires_grad) px->grad[r * cin + c] += g[c] * pk->data[j];
              }
            } else {
              for (std::size_t c = 0; c < cin; ++c) {
                const double* kr = pk->data.data() + (j * cin + c) * cout;
                double gx = 0.0;
                for (std::size_t oc = 0; oc < cout; ++oc) {
                  if (pk->requires_grad) pk->grad[(j * cin + c) * cout + oc] += g[oc] * xrow[c];
                  gx += g[oc] * kr[oc];
                }
                if (px->requires_grad) px->grad[r * cin + c] += gx;
              }
            }
          }
        }
      });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride, const Tensor& bias) {
  if (stride == 0) throw ConfigError("conv1d: stride must be >= 1");
  if (x.dim() == 0 || kernel.dim() == 0) throw DimensionError("conv1d: scalar operand");
  const std::size_t len = x.size(0);
  const std::size_t k = kernel.size(0);
  if (k > len) {
    throw DimensionError(fmt::format("conv1d: kernel width {} exceeds input length {}", k, len));
  }
  const std::size_t rows = (len - k) / stride + 1;
  std::vector<std::size_t> starts(rows);
  for (std::size_t i = 0; i < rows; ++i) starts[i] = i * stride;
  return conv1d_at(x, kernel, starts, bias);
}

// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result("sum", Shape{}, {total}, {x}, [x](TensorImpl& o) {
    TensorImpl* px = x.impl();
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (double& g : px->grad) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(std::max<std::size_t>(x.numel(), 1));
  return scale(sum(x), 1.0 / n);
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "mean_axis");
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto& xd = x.data();
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.extent; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += xd[(o * s.extent + j) * s.inner + in] * inv;
      }
    }
  }
  return Tensor::make_result("mean_axis", std::move(out_shape), std::move(out), {x},
                             [x, s, inv](TensorImpl& o) {
                               TensorImpl* px = x.impl();
                               if (!px->requires_grad) return;
                               px->ensure_grad();
                               for (std::size_t ou = 0; ou < s.outer; ++ou) {
                                 for (std::size_t j = 0; j < s.extent; ++j) {
                                   for (std::size_t in = 0; in < s.inner; ++in) {
                                     px->grad[(ou * s.extent + j) * s.inner + in] +=
                                         o.grad[ou * s.inner + in] * inv;
                                   }
                                 }
                               }
                             });
}

}  // namespace vidplug::ops
