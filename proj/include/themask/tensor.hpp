#pragma once

// Dense double-precision tensors with define-by-run reverse-mode autodiff.
//
// Every op returns a new Tensor. When any input requires a gradient, the
// result keeps its inputs alive together with a closure that pushes the
// result's gradient back into them; backward() walks that graph once in
// reverse topological order. Graphs are confined to one thread.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "themask/errors.hpp"

namespace themask {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// C[M x N] += op(A)[M x K] * op(B)[K x N]; a transposed operand is stored
// with its dimensions swapped.
inline void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N,
                 std::size_t K, const double* A, const double* B, double* C) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      double* crow = C + i * N;
      for (std::size_t p = 0; p < K; ++p) {
        const double a = A[i * K + p];
        if (a == 0.0) continue;
        const double* brow = B + p * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      const double* arow = A + i * K;
      for (std::size_t j = 0; j < N; ++j) {
        const double* brow = B + j * K;
        double s = 0.0;
        for (std::size_t p = 0; p < K; ++p) s += arow[p] * brow[p];
        C[i * N + j] += s;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t p = 0; p < K; ++p) {
      const double* brow = B + p * N;
      for (std::size_t i = 0; i < M; ++i) {
        const double a = A[p * M + i];
        if (a == 0.0) continue;
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  } else {
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < K; ++p) s += A[p * M + i] * B[j * K + p];
        C[i * N + j] += s;
      }
    }
  }
}

}  // namespace detail

class Tensor {
 public:
  using Backward = std::function<void(detail::Node&)>;

  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    detail::require_finite(values, "from_data");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  /// Extension point for ops: wraps `values` as the result of `op` over
  /// `inputs`. The backward closure receives the result node; its grad is
  /// populated and it must accumulate into the grad_buffer() of every input
  /// that requires a gradient.
  static Tensor make_op(Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs, Backward backward,
                        const char* op, bool check_finite = true) {
    if (check_finite) detail::require_finite(values, op);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->op = op;
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->requires_grad = true;
    }
    if (node->requires_grad) {
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
    return node_->shape[axis];
  }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  double at(std::size_t flat_index) const { return node_->value.at(flat_index); }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return !node_->backward && node_->inputs.empty(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  /// Accumulated gradient; all zeros when nothing has been accumulated.
  std::vector<double> grad() const {
    if (has_grad()) return node_->grad;
    return std::vector<double>(numel(), 0.0);
  }

  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from_data(shape(), node_->value, false); }

  /// In-place access for optimizers; only leaves may be mutated.
  std::span<double> mutable_data() {
    if (!is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->value;
  }

  const detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Backward sweep

/// Fills dRoot/dLeaf into every requires-grad leaf reachable from `root`.
/// Leaf gradients accumulate across calls; interior gradients are reset.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward() needs a scalar root");
  }
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  auto* start = root.node_ptr().get();
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (node->backward) node->grad.assign(node->value.size(), 0.0);
  }
  start->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy rules, trailing alignment)

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                           " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Maps each flat output index to the flat index of `in`. Empty result means
// identity.
inline std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& in) {
  if (out == in) return {};
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t flat = 0;
  for (std::size_t k = 0; k < n; ++k) {
    map[k] = flat;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      flat += stride[d];
      if (idx[d] < out[d]) break;
      flat -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  return map;
}

template <class Forward, class PartialA, class PartialB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Forward f,
                 PartialA da, PartialB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  auto map_a = std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, a.shape()));
  auto map_b = std::make_shared<std::vector<std::size_t>>(broadcast_map(out_shape, b.shape()));
  const std::size_t n = shape_numel(out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  const bool ida = map_a->empty();
  const bool idb = map_b->empty();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[ida ? i : (*map_a)[i]], bv[idb ? i : (*map_b)[i]]);
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {a, b},
      [map_a, map_b, da, db](Node& self) {
        Node& A = *self.inputs[0];
        Node& B = *self.inputs[1];
        const bool ia = map_a->empty();
        const bool ib = map_b->empty();
        const std::size_t n = self.value.size();
        if (A.requires_grad) {
          auto& ga = A.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ja = ia ? i : (*map_a)[i];
            const std::size_t jb = ib ? i : (*map_b)[i];
            ga[ja] += self.grad[i] * da(A.value[ja], B.value[jb], self.value[i]);
          }
        }
        if (B.requires_grad) {
          auto& gb = B.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ja = ia ? i : (*map_a)[i];
            const std::size_t jb = ib ? i : (*map_b)[i];
            gb[jb] += self.grad[i] * db(A.value[ja], B.value[jb], self.value[i]);
          }
        }
      },
      op);
}

template <class Forward, class Partial>
Tensor unary_op(const Tensor& x, const char* op, Forward f, Partial dx) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_op(
      x.shape(), std::move(out), {x},
      [dx](Node& self) {
        Node& X = *self.inputs[0];
        auto& g = X.grad_buffer();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          g[i] += self.grad[i] * dx(X.value[i], self.value[i]);
        }
      },
      op);
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op(
      x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op(
      x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, "relu", [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

/// x * Phi(x) with Phi the standard normal CDF; smooth everywhere.
inline Tensor gelu(const Tensor& x) {
  return detail::unary_op(
      x, "gelu", [](double v) { return 0.5 * v * std::erfc(-v * M_SQRT1_2); },
      [](double v, double) {
        return 0.5 * std::erfc(-v * M_SQRT1_2) + v * std::exp(-0.5 * v * v) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
      });
}

/// Gradient is zero where the input was clipped.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_op(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v < lo || v > hi) ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  return Tensor::make_op(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        detail::Node& A = *self.inputs[0];
        detail::Node& B = *self.inputs[1];
        if (A.requires_grad) {
          detail::gemm(false, true, m, k, n, self.grad.data(), B.value.data(),
                       A.grad_buffer().data());
        }
        if (B.requires_grad) {
          detail::gemm(true, false, k, n, m, A.value.data(), self.grad.data(),
                       B.grad_buffer().data());
        }
      },
      "matmul");
}

/// a * b^T without materializing the transpose; a [m x k], b [n x k].
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(m * n, 0.0);
  detail::gemm(false, true, m, n, k, a.data().data(), b.data().data(), out.data());
  return Tensor::make_op(
      {m, n}, std::move(out), {a, b},
      [m, k, n](detail::Node& self) {
        detail::Node& A = *self.inputs[0];
        detail::Node& B = *self.inputs[1];
        if (A.requires_grad) {
          detail::gemm(false, false, m, k, n, self.grad.data(), B.value.data(),
                       A.grad_buffer().data());
        }
        if (B.requires_grad) {
          detail::gemm(true, false, n, k, m, self.grad.data(), A.value.data(),
                       B.grad_buffer().data());
        }
      },
      "matmul_nt");
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  return Tensor::make_op(
      std::move(shape), std::move(values), {x},
      [](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape", false);
}

/// Generalized transpose: output axis i is input axis axes[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axis count mismatch");
  std::vector<bool> used(r, false);
  for (auto a : axes) {
    if (a >= r || used[a]) throw DimensionError("permute: invalid axis list");
    used[a] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r), src_stride(r);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = s;
    s *= x.dim(i);
  }
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(axes[i]);
    src_stride[i] = in_stride[axes[i]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t flat = 0;
    for (std::size_t k = 0; k < n; ++k) {
      (*src)[k] = flat;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        flat += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        flat -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<double> out(n);
  const auto xv = x.data();
  for (std::size_t k = 0; k < n; ++k) out[k] = xv[(*src)[k]];
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {x},
      [src](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t k = 0; k < src->size(); ++k) g[(*src)[k]] += self.grad[k];
      },
      "permute", false);
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose expects a matrix");
  return permute(x, {1, 0});
}

inline Tensor concat(const std::vector<Tensor>& parts, long axis) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const std::size_t ax = detail::normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && p.dim(d) != out_shape[d]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " +
                             shape_str(parts[0].shape()));
      }
    }
    out_shape[ax] += p.dim(ax);
  }
  const auto split = detail::split_at(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(ax) * split.inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + o * block, block,
                  out.begin() + o * split.len * split.inner + offset * split.inner);
    }
    offset += p.dim(ax);
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), parts,
      [split, offsets, ax](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          detail::Node& P = *self.inputs[k];
          if (!P.requires_grad) continue;
          auto& g = P.grad_buffer();
          const std::size_t block = P.shape[ax] * split.inner;
          for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src =
                self.grad.data() + o * split.len * split.inner + offsets[k] * split.inner;
            double* dst = g.data() + o * block;
            for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
      },
      "concat", false);
}

/// Contiguous slice [start, start+length) along `axis`.
inline Tensor narrow(const Tensor& x, long axis, std::size_t start, std::size_t length) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  if (start + length > x.dim(ax)) {
    throw DimensionError("narrow beyond extent of " + shape_str(x.shape()));
  }
  const auto split = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t block = length * split.inner;
  std::vector<double> out(split.outer * block);
  const auto xv = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.begin() + (o * split.len + start) * split.inner, block,
                out.begin() + o * block);
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {x},
      [split, start, block](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
          double* dst = g.data() + (o * split.len + start) * split.inner;
          const double* src = self.grad.data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      },
      "narrow", false);
}

/// Gathers entries `indices` along `axis` (repeats allowed).
inline Tensor index_select(const Tensor& x, long axis, std::vector<std::size_t> indices) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto split = detail::split_at(x.shape(), ax);
  for (auto i : indices) {
    if (i >= split.len) throw ContractError("index_select: index out of range");
  }
  Shape out_shape = x.shape();
  out_shape[ax] = indices.size();
  const std::size_t m = indices.size();
  std::vector<double> out(split.outer * m * split.inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < m; ++k) {
      std::copy_n(xv.begin() + (o * split.len + indices[k]) * split.inner, split.inner,
                  out.begin() + (o * m + k) * split.inner);
    }
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {x},
      [split, idx](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const std::size_t m = idx->size();
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t k = 0; k < m; ++k) {
            double* dst = g.data() + (o * split.len + (*idx)[k]) * split.inner;
            const double* src = self.grad.data() + (o * m + k) * split.inner;
            for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
          }
        }
      },
      "index_select", false);
}

/// Keeps entries where `mask` is nonzero and replaces the rest with `value`
/// (which may be -inf). No gradient reaches replaced entries.
inline Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  if (mask.size() != x.numel()) {
    throw DimensionError("masked_fill: mask length " + std::to_string(mask.size()) +
                         " vs tensor " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!mask[i]) out[i] = value;
  }
  auto keep = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  return Tensor::make_op(
      x.shape(), std::move(out), {x},
      [keep](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if ((*keep)[i]) g[i] += self.grad[i];
        }
      },
      "masked_fill", false);
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_op(
      {}, {s}, {x},
      [](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
      },
      "sum");
}

inline Tensor sum(const Tensor& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto split = detail::split_at(x.shape(), ax);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  }
  std::vector<double> out(split.outer * split.inner, 0.0);
  const auto xv = x.data();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t l = 0; l < split.len; ++l) {
      const double* src = xv.data() + (o * split.len + l) * split.inner;
      double* dst = out.data() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
    }
  }
  return Tensor::make_op(
      std::move(out_shape), std::move(out), {x},
      [split](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t l = 0; l < split.len; ++l) {
            double* dst = g.data() + (o * split.len + l) * split.inner;
            const double* src = self.grad.data() + o * split.inner;
            for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
          }
        }
      },
      "sum_axis");
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor mean(const Tensor& x, long axis, bool keepdim = false) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(x.dim(ax)));
}

// ---------------------------------------------------------------------------
// Normalizations

/// Max-subtracted softmax along `axis`. -inf entries get weight 0; a slice
/// that is entirely -inf yields all zeros.
inline Tensor softmax(const Tensor& x, long axis) {
  const std::size_t ax = detail::normalize_axis(axis, x.rank());
  const auto split = detail::split_at(x.shape(), ax);
  const auto xv = x.data();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.len * split.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < split.len; ++l) mx = std::max(mx, xv[base + l * split.inner]);
      if (mx == -std::numeric_limits<double>::infinity()) continue;
      double z = 0.0;
      for (std::size_t l = 0; l < split.len; ++l) {
        const double e = std::exp(xv[base + l * split.inner] - mx);
        out[base + l * split.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < split.len; ++l) out[base + l * split.inner] /= z;
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x},
      [split](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const auto& y = self.value;
        const auto& gy = self.grad;
        for (std::size_t o = 0; o < split.outer; ++o) {
          for (std::size_t i = 0; i < split.inner; ++i) {
            const std::size_t base = o * split.len * split.inner + i;
            double dot = 0.0;
            for (std::size_t l = 0; l < split.len; ++l) {
              dot += gy[base + l * split.inner] * y[base + l * split.inner];
            }
            for (std::size_t l = 0; l < split.len; ++l) {
              const std::size_t k = base + l * split.inner;
              g[k] += y[k] * (gy[k] - dot);
            }
          }
        }
      },
      "softmax");
}

/// Normalizes over the last axis, then applies per-channel gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t c = x.dim(x.rank() - 1);
  if (gain.numel() != c || bias.numel() != c) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(c) +
                         " entries");
  }
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [xhat, rstd, c, rows](detail::Node& self) {
        detail::Node& X = *self.inputs[0];
        detail::Node& G = *self.inputs[1];
        detail::Node& B = *self.inputs[2];
        const auto& gy = self.grad;
        if (G.requires_grad) {
          auto& gg = G.grad_buffer();
          for (std::size_t k = 0; k < rows * c; ++k) gg[k % c] += gy[k] * (*xhat)[k];
        }
        if (B.requires_grad) {
          auto& gb = B.grad_buffer();
          for (std::size_t k = 0; k < rows * c; ++k) gb[k % c] += gy[k];
        }
        if (X.requires_grad) {
          auto& gx = X.grad_buffer();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gy[r * c + j] * G.value[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = gy[r * c + j] * G.value[j];
              gx[r * c + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * c + j] * m2);
            }
          }
        }
      },
      "layer_norm");
}

/// x W + b, with b broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace themask
