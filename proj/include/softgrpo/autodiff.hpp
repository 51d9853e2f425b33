#pragma once

// Define-by-run reverse-mode automatic differentiation over small dense
// tensors of doubles. A Graph records every operation applied to its Vars
// in creation order; backward() walks that record once in reverse.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "softgrpo/errors.hpp"

namespace softgrpo::autodiff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. Rank 0 is a scalar.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }
  double item() const {
    if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape));
    return data[0];
  }
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Fault injection for the verification suites: perturbs the matmul backward rule.
namespace testing_hooks {
inline std::atomic<bool> corrupt_matmul_backward{false};
}

class Graph;

// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  double item() const { return value().item(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  // With record == false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(256); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor t) { return add_node(std::move(t), nullptr, false); }

  // Trainable leaf that aliases caller-owned storage; the tensor must outlive the graph.
  Var param(const Tensor& t) { return add_node(Tensor{}, &t, record_); }

  // Read-only leaf aliasing caller-owned storage.
  Var input(const Tensor& t) { return add_node(Tensor{}, &t, false); }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() with respect to this node; zeros if unreachable.
  std::vector<double> grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.empty()) return std::vector<double>(value(v.id).size(), 0.0);
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
    const Tensor& lv = value(loss.id);
    if (lv.rank() != 0) throw ContractError("backward: loss must be a scalar, got " + shape_str(lv.shape));
    if (!record_) throw ContractError("backward: graph was built without recording");
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  // Mutable gradient slot, allocated (zeroed) on first use.
  std::vector<double>& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }
  const std::vector<double>& out_grad(std::size_t id) const { return nodes_[id].grad; }

  Var push(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.graph != this) throw ContractError("operands belong to different graphs");
      rg = rg || nodes_[v.id].requires_grad;
    }
    return add_node(std::move(out), nullptr, rg && record_, rg && record_ ? std::move(fn) : BackwardFn{});
  }
  Var push(Tensor out, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.graph != this) throw ContractError("operands belong to different graphs");
      rg = rg || nodes_[v.id].requires_grad;
    }
    return add_node(std::move(out), nullptr, rg && record_, rg && record_ ? std::move(fn) : BackwardFn{});
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* borrowed = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var add_node(Tensor t, const Tensor* borrowed, bool requires_grad, BackwardFn fn = {}) {
    Node n;
    n.owned = std::move(t);
    n.borrowed = borrowed;
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline bool is_scalar(const Tensor& t) { return t.rank() == 0; }

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape));
}

// Adds g (length of the output) into the gradient of input `in`, summing when `in` was broadcast.
inline void accumulate_broadcast(Graph& g, std::size_t in, std::span<const double> gout, double sign = 1.0) {
  if (!g.requires_grad(in)) return;
  auto& gi = g.grad_buffer(in);
  if (gi.size() == gout.size()) {
    for (std::size_t i = 0; i < gout.size(); ++i) gi[i] += sign * gout[i];
  } else {
    double s = 0.0;
    for (double v : gout) s += v;
    gi[0] += sign * s;
  }
}

inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape == b.shape) return a.shape;
  if (is_scalar(a)) return b.shape;
  if (is_scalar(b)) return a.shape;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

inline double at_bcast(const Tensor& t, std::size_t i) { return t.data.size() == 1 ? t.data[0] : t.data[i]; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(detail::broadcast_shape(A, B, "add"));
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = detail::at_bcast(A, i) + detail::at_bcast(B, i);
  return a.graph->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    detail::accumulate_broadcast(g, ai, go);
    detail::accumulate_broadcast(g, bi, go);
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(detail::broadcast_shape(A, B, "sub"));
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = detail::at_bcast(A, i) - detail::at_bcast(B, i);
  return a.graph->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    detail::accumulate_broadcast(g, ai, go);
    detail::accumulate_broadcast(g, bi, go, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(detail::broadcast_shape(A, B, "mul"));
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = detail::at_bcast(A, i) * detail::at_bcast(B, i);
  return a.graph->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const Tensor& A = g.value(ai);
    const Tensor& B = g.value(bi);
    std::vector<double> tmp(go.size());
    if (g.requires_grad(ai)) {
      for (std::size_t i = 0; i < go.size(); ++i) tmp[i] = go[i] * detail::at_bcast(B, i);
      detail::accumulate_broadcast(g, ai, tmp);
    }
    if (g.requires_grad(bi)) {
      for (std::size_t i = 0; i < go.size(); ++i) tmp[i] = go[i] * detail::at_bcast(A, i);
      detail::accumulate_broadcast(g, bi, tmp);
    }
  });
}

inline Var neg(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = -v;
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    detail::accumulate_broadcast(g, ai, g.out_grad(self), -1.0);
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v *= c;
  return a.graph->push(std::move(out), {a}, [ai = a.id, c](Graph& g, std::size_t self) {
    detail::accumulate_broadcast(g, ai, g.out_grad(self), c);
  });
}

inline Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data) v += c;
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    detail::accumulate_broadcast(g, ai, g.out_grad(self));
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::exp(v);
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& y = g.value(self).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * y[i];
  });
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& x = g.value(ai).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] / x[i];
  });
}

// Pass-through inside [lo, hi], zero gradient where the bound is active.
inline Var clamp(Var a, double lo, double hi) {
  Tensor out = a.value();
  for (double& v : out.data) v = std::clamp(v, lo, hi);
  return a.graph->push(std::move(out), {a}, [ai = a.id, lo, hi](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& x = g.value(ai).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (x[i] >= lo && x[i] <= hi) gi[i] += go[i];
  });
}

// Elementwise minimum; ties route the gradient to the first operand.
inline Var minimum(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape != B.shape) throw DimensionError("minimum: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
  Tensor out(A.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::min(A.data[i], B.data[i]);
  return a.graph->push(std::move(out), {a, b}, [ai = a.id, bi = b.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& x = g.value(ai).data;
    const auto& y = g.value(bi).data;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const std::size_t to = x[i] <= y[i] ? ai : bi;
      if (g.requires_grad(to)) g.grad_buffer(to)[i] += go[i];
    }
  });
}

// Gauss error-function GELU.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& x = g.value(ai).data;
    auto& gi = g.grad_buffer(ai);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      gi[i] += go[i] * (cdf + x[i] * pdf);
    }
  });
}

inline double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma of non-positive value");
  double r = 0.0;
  while (x < 6.0) {
    r -= 1.0 / x;
    x += 1.0;
  }
  const double f = 1.0 / (x * x);
  return r + std::log(x) - 0.5 / x -
         f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))));
}

// log Gamma(x) for x > 0; backward uses digamma.
inline Var lgamma(Var a) {
  Tensor out = a.value();
  for (double& v : out.data) {
    if (!(v > 0.0)) throw DomainError("lgamma of non-positive value");
    v = std::lgamma(v);
  }
  return a.graph->push(std::move(out), {a}, [ai = a.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& x = g.value(ai).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i] * digamma(x[i]);
  });
}

// Sum of same-shape tensors.
inline Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw DimensionError("add_n: no operands");
  Tensor out = xs[0].value();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const Tensor& X = xs[k].value();
    if (X.shape != out.shape) throw DimensionError("add_n: shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += X.data[i];
  }
  std::vector<std::size_t> ids;
  for (const Var& v : xs) ids.push_back(v.id);
  return xs[0].graph->push(std::move(out), xs, [ids = std::move(ids)](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    for (std::size_t id : ids) detail::accumulate_broadcast(g, id, go);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions

inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::require_rank(A, 2, "matmul");
  detail::require_rank(B, 2, "matmul");
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  if (B.rows() != k)
    throw DimensionError("matmul: inner extents differ " + shape_str(A.shape) + " x " + shape_str(B.shape));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = &out.data[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A.data[i * k + p];
      const double* brow = &B.data[p * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return a.graph->push(std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Graph& g, std::size_t self) {
    const auto& gc = g.out_grad(self);
    const auto& A = g.value(ai).data;
    const auto& B = g.value(bi).data;
    if (g.requires_grad(ai)) {
      auto& ga = g.grad_buffer(ai);
      const double fudge = testing_hooks::corrupt_matmul_backward.load() ? 1.01 : 1.0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += gc[i * n + j] * B[p * n + j];
          ga[i * k + p] += fudge * s;
        }
    }
    if (g.requires_grad(bi)) {
      auto& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * gc[i * n + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  const Tensor& A = a.value();
  detail::require_rank(A, 2, "transpose");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = A.data[i * c + j];
  return a.graph->push(std::move(out), {a}, [ai = a.id, r, c](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += go[j * r + i];
  });
}

enum class Reduce { kSum, kMean };

// Reduces one axis away; reducing the only axis of a vector yields a scalar.
inline Var reduce(Reduce op, Var t, std::size_t axis) {
  const Tensor& T = t.value();
  if (axis >= T.rank())
    throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for " + shape_str(T.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= T.shape[i];
  for (std::size_t i = axis + 1; i < T.rank(); ++i) inner *= T.shape[i];
  const std::size_t len = T.shape[axis];
  Shape os;
  for (std::size_t i = 0; i < T.rank(); ++i)
    if (i != axis) os.push_back(T.shape[i]);
  Tensor out(os);
  const double w = (op == Reduce::kMean && len > 0) ? 1.0 / static_cast<double>(len) : 1.0;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out.data[o * inner + i] += T.data[(o * len + l) * inner + i];
  if (w != 1.0)
    for (double& v : out.data) v *= w;
  return t.graph->push(std::move(out), {t}, [ti = t.id, outer, len, inner, w](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(ti);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) gi[(o * len + l) * inner + i] += w * go[o * inner + i];
  });
}

inline Var sum(Var t, std::size_t axis) { return reduce(Reduce::kSum, t, axis); }
inline Var mean(Var t, std::size_t axis) { return reduce(Reduce::kMean, t, axis); }

inline Var sum_all(Var t) {
  const Tensor& T = t.value();
  double s = 0.0;
  for (double v : T.data) s += v;
  return t.graph->push(Tensor::scalar(s), {t}, [ti = t.id](Graph& g, std::size_t self) {
    const double go = g.out_grad(self)[0];
    for (double& v : g.grad_buffer(ti)) v += go;
  });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace detail {

inline void softmax_inplace(std::span<double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double& v : x) {
    v = std::exp(v - mx);
    s += v;
  }
  for (double& v : x) v /= s;
}

inline void log_softmax_inplace(std::span<double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (double& v : x) v -= lse;
}

// Row-wise softmax over the first `width(r)` entries of each row; masked tail is 0.
template <class Width>
Var softmax_rows_impl(Var a, Width width) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t w = width(i);
    std::copy_n(&A.data[i * c], w, &out.data[i * c]);
    softmax_inplace(std::span<double>(&out.data[i * c], w));
  }
  return a.graph->push(std::move(out), {a}, [ai = a.id, r, c, width](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& y = g.value(self).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t w = width(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < w; ++j) dot += go[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < w; ++j) gi[i * c + j] += y[i * c + j] * (go[i * c + j] - dot);
    }
  });
}

}  // namespace detail

inline Var softmax_row(Var logits) {
  const Tensor& L = logits.value();
  detail::require_rank(L, 1, "softmax_row");
  if (L.size() == 0) throw DimensionError("softmax_row: empty input");
  Tensor out = L;
  detail::softmax_inplace(out.data);
  return logits.graph->push(std::move(out), {logits}, [ai = logits.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& y = g.value(self).data;
    auto& gi = g.grad_buffer(ai);
    double dot = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) dot += go[j] * y[j];
    for (std::size_t j = 0; j < y.size(); ++j) gi[j] += y[j] * (go[j] - dot);
  });
}

inline Var log_softmax_row(Var logits) {
  const Tensor& L = logits.value();
  detail::require_rank(L, 1, "log_softmax_row");
  if (L.size() == 0) throw DimensionError("log_softmax_row: empty input");
  Tensor out = L;
  detail::log_softmax_inplace(out.data);
  return logits.graph->push(std::move(out), {logits}, [ai = logits.id](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& y = g.value(self).data;
    auto& gi = g.grad_buffer(ai);
    double s = 0.0;
    for (double v : go) s += v;
    for (std::size_t j = 0; j < y.size(); ++j) gi[j] += go[j] - std::exp(y[j]) * s;
  });
}

// Softmax of every row of a matrix; with `causal`, row i only spans columns 0..i.
inline Var softmax_rows(Var a, bool causal = false) {
  detail::require_rank(a.value(), 2, "softmax_rows");
  const std::size_t c = a.value().cols();
  if (causal) {
    if (a.value().rows() > c) throw DimensionError("softmax_rows: causal mask needs rows <= cols");
    return detail::softmax_rows_impl(a, [](std::size_t i) { return i + 1; });
  }
  return detail::softmax_rows_impl(a, [c](std::size_t) { return c; });
}

inline Var log_softmax_rows(Var a) {
  const Tensor& A = a.value();
  detail::require_rank(A, 2, "log_softmax_rows");
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < r; ++i) detail::log_softmax_inplace(std::span<double>(&out.data[i * c], c));
  return a.graph->push(std::move(out), {a}, [ai = a.id, r, c](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& y = g.value(self).data;
    auto& gi = g.grad_buffer(ai);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += go[i * c + j];
      for (std::size_t j = 0; j < c; ++j) gi[i * c + j] += go[i * c + j] - std::exp(y[i * c + j]) * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout

// Flat gather: out[i] = t.data[indices[i]]; backward scatter-adds.
inline Var select(Var t, std::vector<std::size_t> indices) {
  const Tensor& T = t.value();
  Tensor out({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= T.size()) throw IndexError("select: flat index " + std::to_string(indices[i]) + " out of range");
    out.data[i] = T.data[indices[i]];
  }
  return t.graph->push(std::move(out), {t}, [ti = t.id, idx = std::move(indices)](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(ti);
    for (std::size_t i = 0; i < idx.size(); ++i) gi[idx[i]] += go[i];
  });
}

// Single element as a scalar.
inline Var element(Var t, std::size_t flat_index) {
  const Tensor& T = t.value();
  if (flat_index >= T.size()) throw IndexError("element: index out of range");
  return t.graph->push(Tensor::scalar(T.data[flat_index]), {t}, [ti = t.id, flat_index](Graph& g, std::size_t self) {
    g.grad_buffer(ti)[flat_index] += g.out_grad(self)[0];
  });
}

// Rows `ids` of a matrix, as a [ids.size() x cols] matrix.
inline Var gather_rows(Var m, std::span<const std::size_t> ids) {
  const Tensor& M = m.value();
  detail::require_rank(M, 2, "gather_rows");
  const std::size_t c = M.cols();
  Tensor out({ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= M.rows()) throw IndexError("gather_rows: row " + std::to_string(ids[i]) + " out of range");
    std::copy_n(&M.data[ids[i] * c], c, &out.data[i * c]);
  }
  return m.graph->push(std::move(out), {m},
                       [mi = m.id, c, rows = std::vector<std::size_t>(ids.begin(), ids.end())](Graph& g, std::size_t self) {
                         const auto& go = g.out_grad(self);
                         auto& gi = g.grad_buffer(mi);
                         for (std::size_t i = 0; i < rows.size(); ++i)
                           for (std::size_t j = 0; j < c; ++j) gi[rows[i] * c + j] += go[i * c + j];
                       });
}

// Row `id` of a matrix as a vector.
inline Var row_gather(Var m, std::size_t id) {
  const Tensor& M = m.value();
  detail::require_rank(M, 2, "row_gather");
  if (id >= M.rows()) throw IndexError("row_gather: row " + std::to_string(id) + " out of range");
  const std::size_t c = M.cols();
  Tensor out({c}, std::vector<double>(M.data.begin() + id * c, M.data.begin() + (id + 1) * c));
  return m.graph->push(std::move(out), {m}, [mi = m.id, id, c](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(mi);
    for (std::size_t j = 0; j < c; ++j) gi[id * c + j] += go[j];
  });
}

// w^T * rows: the weighted sum of the k rows of `rows` (k x d) with weights w (k).
inline Var row_weighted_sum(Var rows, Var w) {
  const Tensor& R = rows.value();
  const Tensor& W = w.value();
  detail::require_rank(R, 2, "row_weighted_sum");
  detail::require_rank(W, 1, "row_weighted_sum");
  const std::size_t k = R.rows(), d = R.cols();
  if (W.size() != k || k == 0)
    throw DimensionError("row_weighted_sum: " + std::to_string(W.size()) + " weights for " + std::to_string(k) + " rows");
  Tensor out({d});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out.data[j] += W.data[i] * R.data[i * d + j];
  return rows.graph->push(std::move(out), {rows, w}, [ri = rows.id, wi = w.id, k, d](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    const auto& R = g.value(ri).data;
    const auto& W = g.value(wi).data;
    if (g.requires_grad(ri)) {
      auto& gr = g.grad_buffer(ri);
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < d; ++j) gr[i * d + j] += W[i] * go[j];
    }
    if (g.requires_grad(wi)) {
      auto& gw = g.grad_buffer(wi);
      for (std::size_t i = 0; i < k; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += R[i * d + j] * go[j];
        gw[i] += s;
      }
    }
  });
}

// Stacks equal-length vectors into an [n x d] matrix.
inline Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t d = rows[0].value().size();
  Tensor out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Tensor& r = rows[i].value();
    detail::require_rank(r, 1, "stack_rows");
    if (r.size() != d) throw DimensionError("stack_rows: ragged rows");
    std::copy(r.data.begin(), r.data.end(), &out.data[i * d]);
  }
  std::vector<std::size_t> ids;
  for (const Var& v : rows) ids.push_back(v.id);
  return rows[0].graph->push(std::move(out), rows, [ids = std::move(ids), d](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!g.requires_grad(ids[i])) continue;
      auto& gi = g.grad_buffer(ids[i]);
      for (std::size_t j = 0; j < d; ++j) gi[j] += go[i * d + j];
    }
  });
}

inline Var slice_rows(Var m, std::size_t begin, std::size_t count) {
  const Tensor& M = m.value();
  detail::require_rank(M, 2, "slice_rows");
  if (begin + count > M.rows()) throw IndexError("slice_rows: range exceeds " + shape_str(M.shape));
  const std::size_t c = M.cols();
  Tensor out({count, c},
             std::vector<double>(M.data.begin() + begin * c, M.data.begin() + (begin + count) * c));
  return m.graph->push(std::move(out), {m}, [mi = m.id, begin, c](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(mi);
    for (std::size_t i = 0; i < go.size(); ++i) gi[begin * c + i] += go[i];
  });
}

inline Var slice_cols(Var m, std::size_t begin, std::size_t count) {
  const Tensor& M = m.value();
  detail::require_rank(M, 2, "slice_cols");
  const std::size_t r = M.rows(), c = M.cols();
  if (begin + count > c) throw IndexError("slice_cols: range exceeds " + shape_str(M.shape));
  Tensor out({r, count});
  for (std::size_t i = 0; i < r; ++i) std::copy_n(&M.data[i * c + begin], count, &out.data[i * count]);
  return m.graph->push(std::move(out), {m}, [mi = m.id, begin, count, r, c](Graph& g, std::size_t self) {
    const auto& go = g.out_grad(self);
    auto& gi = g.grad_buffer(mi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) gi[i * c + begin + j] += go[i * count + j];
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const std::size_t r = parts[0].value().rows();
  std::size_t c = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    detail::require_rank(p.value(), 2, "concat_cols");
    if (p.value().rows() != r) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    ids.push_back(p.id);
    c += p.value().cols();
  }
  Tensor out({r, c});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(&P.data[i * widths[k]], widths[k], &out.data[i * c + off]);
    off += widths[k];
  }
  return parts[0].graph->push(std::move(out), parts,
                              [ids = std::move(ids), widths = std::move(widths), r, c](Graph& g, std::size_t self) {
                                const auto& go = g.out_grad(self);
                                std::size_t off = 0;
                                for (std::size_t k = 0; k < ids.size(); ++k) {
                                  if (g.requires_grad(ids[k])) {
                                    auto& gi = g.grad_buffer(ids[k]);
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < widths[k]; ++j)
                                        gi[i * widths[k] + j] += go[i * c + off + j];
                                  }
                                  off += widths[k];
                                }
                              });
}

// Root-mean-square normalization of each row of x, scaled by gamma (length cols).
inline Var rms_norm_rows(Var x, Var gamma, double eps = 1e-6) {
  const Tensor& X = x.value();
  const Tensor& G = gamma.value();
  detail::require_rank(X, 2, "rms_norm_rows");
  const std::size_t r = X.rows(), c = X.cols();
  if (G.rank() != 1 || G.size() != c) throw DimensionError("rms_norm_rows: gamma length mismatch");
  Tensor out({r, c});
  std::vector<double> inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += X.data[i * c + j] * X.data[i * c + j];
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(c) + eps);
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = X.data[i * c + j] * inv[i] * G.data[j];
  }
  return x.graph->push(std::move(out), {x, gamma},
                       [xi = x.id, gi_ = gamma.id, r, c, inv = std::move(inv)](Graph& g, std::size_t self) {
                         const auto& go = g.out_grad(self);
                         const auto& X = g.value(xi).data;
                         const auto& G = g.value(gi_).data;
                         if (g.requires_grad(gi_)) {
                           auto& gg = g.grad_buffer(gi_);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) gg[j] += go[i * c + j] * X[i * c + j] * inv[i];
                         }
                         if (g.requires_grad(xi)) {
                           auto& gx = g.grad_buffer(xi);
                           for (std::size_t i = 0; i < r; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += go[i * c + j] * G[j] * X[i * c + j];
                             const double k = inv[i] * inv[i] * inv[i] * dot / static_cast<double>(c);
                             for (std::size_t j = 0; j < c; ++j)
                               gx[i * c + j] += go[i * c + j] * G[j] * inv[i] - X[i * c + j] * k;
                           }
                         }
                       });
}

// ---------------------------------------------------------------------------
// Gradient checking

// Compares the analytic gradient of f against central differences at x.
// `f(x, grad)` returns f(x) and, when grad is non-null, fills df/dx.
// Returns max_i |analytic - numeric| / max(1, |analytic|, |numeric|).
template <class Fn>
double finite_difference_check(Fn&& f, std::vector<double> x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_difference_check: step must be positive");
  std::vector<double> analytic(x.size(), 0.0);
  f(std::span<const double>(x), &analytic);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(std::span<const double>(x), nullptr);
    x[i] = orig - h;
    const double fm = f(std::span<const double>(x), nullptr);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace softgrpo::autodiff
