#pragma once

// Dense row-major float64 tensors with reverse-mode automatic differentiation.
//
// Every op records a node holding its inputs and a backward closure. The graph
// lives as long as some tensor references it; backward() walks it in reverse
// topological order so each node propagates exactly once per call. Leaf
// gradients accumulate across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dsiv/errors.hpp"
#include "dsiv/rng.hpp"

namespace dsiv {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  std::size_t numel() const { return storage->size(); }
  const double* data() const { return storage->data(); }
  double* data() { return storage->data(); }
  std::vector<double>& ensure_grad() {
    if (grad.size() != numel()) grad.assign(numel(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

struct Node {
  const char* op = "";
  std::vector<ImplPtr> inputs;
  // Reads out.grad and accumulates into inputs that require grad.
  std::function<void(const TensorImpl& out)> backward;
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->storage = std::make_shared<std::vector<double>>(std::move(values));
  }

  static Tensor full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor eye(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.impl_->data()[i * n + i] = 1.0;
    return t;
  }
  static Tensor param(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->numel(); }

  std::span<const double> data() const { return {impl_->data(), impl_->numel()}; }
  std::span<double> mutable_data() { return {impl_->data(), impl_->numel()}; }
  std::vector<double> values() const { return {impl_->storage->begin(), impl_->storage->end()}; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data()[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw DimensionError("index rank mismatch for shape " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      if (i >= impl_->shape[k]) throw DimensionError("index out of range for shape " + shape_str(shape()));
      off = off * impl_->shape[k++] + i;
    }
    return impl_->data()[off];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  bool has_grad() const { return impl_->grad.size() == impl_->numel(); }
  /// Gradient accumulator; empty span when nothing has been accumulated.
  std::span<const double> grad() const {
    if (!has_grad()) return {};
    return {impl_->grad.data(), impl_->grad.size()};
  }
  std::span<double> mutable_grad() { return {impl_->ensure_grad().data(), impl_->numel()}; }
  void zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  /// Same storage, no graph history.
  Tensor detach() const {
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = impl_->shape;
    t.impl_->storage = impl_->storage;
    return t;
  }

  /// Independent copy of the values, no graph history.
  Tensor clone() const { return Tensor(shape(), values()); }

  /// Drops this tensor's link to the graph that produced it.
  void reset_graph() { impl_->grad_fn.reset(); }

  void backward() const;

  const detail::ImplPtr& impl() const { return impl_; }
  static Tensor from_impl(detail::ImplPtr p) {
    Tensor t;
    t.impl_ = std::move(p);
    return t;
  }

 private:
  detail::ImplPtr impl_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      auto* child = fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (auto* n : order)
    if (n->grad_fn) n->grad.assign(n->numel(), 0.0);
  impl_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (!n->grad_fn) continue;
    n->grad_fn->backward(*n);
    if (n != impl_.get()) std::vector<double>().swap(n->grad);
  }
}

namespace detail {

using BackwardFn = std::function<void(const TensorImpl& out)>;

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                          std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values));
  if (grad_mode() && any_requires_grad(inputs)) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto* t : inputs) node->inputs.push_back(t->impl());
    node->backward = std::move(fn);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
  }
  return out;
}

inline Tensor make_result_n(Shape shape, std::vector<double> values, const char* op, const std::vector<Tensor>& inputs,
                            BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values));
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (grad_mode() && any) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(fn);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
  }
  return out;
}

inline std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r)
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D deriv) {
  const auto n = x.numel();
  std::vector<double> out(n);
  const double* xs = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(xs[i]);
  return make_result(x.shape(), std::move(out), op, {&x}, [deriv](const TensorImpl& o) {
    auto& in = *o.grad_fn->inputs[0];
    auto& gx = in.ensure_grad();
    const double* xv = in.data();
    const double* yv = o.data();
    for (std::size_t i = 0; i < o.numel(); ++i) gx[i] += o.grad[i] * deriv(xv[i], yv[i]);
  });
}

// Index maps from each output element to the contributing input elements
// under numpy-style broadcasting.
struct BroadcastPlan {
  Shape out;
  enum class Kind { same, a_scalar, b_scalar, b_suffix, a_suffix, general } kind = Kind::general;
  std::vector<std::size_t> ia, ib;
};

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.kind = BroadcastPlan::Kind::same;
    return p;
  }
  const auto na = shape_numel(a), nb = shape_numel(b);
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const std::size_t eb = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    p.out[i] = std::max(ea, eb);
  }
  const auto nout = shape_numel(p.out);
  if (nb == 1 && na == nout) {
    p.kind = BroadcastPlan::Kind::b_scalar;
    return p;
  }
  if (na == 1 && nb == nout) {
    p.kind = BroadcastPlan::Kind::a_scalar;
    return p;
  }
  auto is_suffix = [](const Shape& longer, const Shape& shorter) {
    if (shorter.size() > longer.size()) return false;
    const auto off = longer.size() - shorter.size();
    std::size_t first = 0;
    while (first < shorter.size() && shorter[first] == 1) ++first;  // leading ones are free
    for (std::size_t i = first; i < shorter.size(); ++i)
      if (shorter[i] != longer[off + i]) return false;
    return true;
  };
  if (na == nout && is_suffix(a, b)) {
    p.kind = BroadcastPlan::Kind::b_suffix;
    return p;
  }
  if (nb == nout && is_suffix(b, a)) {
    p.kind = BroadcastPlan::Kind::a_suffix;
    return p;
  }
  auto strides_for = [&](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
      const auto oi = i + r - s.size();
      st[oi] = s[i] == 1 ? 0 : acc;
      acc *= s[i];
    }
    return st;
  };
  const auto sa = strides_for(a), sb = strides_for(b);
  p.ia.resize(nout);
  p.ib.resize(nout);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < nout; ++k) {
    p.ia[k] = oa;
    p.ib[k] = ob;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < p.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return p;
}

// f(a, b) -> value; da(a, b, y) and db(a, b, y) are the partials.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const auto n = shape_numel(plan->out);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  const std::size_t na = a.numel(), nb = b.numel();
  using K = BroadcastPlan::Kind;
  auto ia = [plan, na](std::size_t k) -> std::size_t {
    switch (plan->kind) {
      case K::same:
      case K::b_scalar:
      case K::b_suffix: return k;
      case K::a_scalar: return 0;
      case K::a_suffix: return k % na;
      default: return plan->ia[k];
    }
  };
  auto ib = [plan, nb](std::size_t k) -> std::size_t {
    switch (plan->kind) {
      case K::same:
      case K::a_scalar:
      case K::a_suffix: return k;
      case K::b_scalar: return 0;
      case K::b_suffix: return k % nb;
      default: return plan->ib[k];
    }
  };
  std::vector<double> out(n);
  if (plan->kind == K::same) {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[k], bv[k]);
  } else if (plan->kind == K::b_suffix) {
    for (std::size_t k = 0; k < n; k += nb)
      for (std::size_t j = 0; j < nb; ++j) out[k + j] = f(av[k + j], bv[j]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[ia(k)], bv[ib(k)]);
  }
  return make_result(plan->out, std::move(out), op, {&a, &b}, [ia, ib, da, db](const TensorImpl& o) {
    auto& A = *o.grad_fn->inputs[0];
    auto& B = *o.grad_fn->inputs[1];
    const double* a_ = A.data();
    const double* b_ = B.data();
    const double* y_ = o.data();
    const std::size_t n_ = o.numel();
    if (A.requires_grad) {
      auto& g = A.ensure_grad();
      for (std::size_t k = 0; k < n_; ++k) {
        const auto i = ia(k), j = ib(k);
        g[i] += o.grad[k] * da(a_[i], b_[j], y_[k]);
      }
    }
    if (B.requires_grad) {
      auto& g = B.ensure_grad();
      for (std::size_t k = 0; k < n_; ++k) {
        const auto i = ia(k), j = ib(k);
        g[j] += o.grad[k] * db(a_[i], b_[j], y_[k]);
      }
    }
  });
}

// C[M,N] (+)= A[M,K] * B[K,N]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const double s = a[p];
      if (s == 0.0) continue;
      const double* b = B + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += s * b[j];
    }
  }
}

// C[M,K] += G[M,N] * B[K,N]^T
inline void gemm_nt(const double* G, const double* B, double* C, std::size_t M, std::size_t N, std::size_t K) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* g = G + i * N;
    double* c = C + i * K;
    for (std::size_t p = 0; p < K; ++p) {
      const double* b = B + p * N;
      double s = 0.0;
      for (std::size_t j = 0; j < N; ++j) s += g[j] * b[j];
      c[p] += s;
    }
  }
}

// C[K,N] += A[M,K]^T * G[M,N]
inline void gemm_tn(const double* A, const double* G, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* g = G + i * N;
    for (std::size_t p = 0; p < K; ++p) {
      const double s = a[p];
      if (s == 0.0) continue;
      double* c = C + p * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += s * g[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, "scale", [c](double v) { return c * v; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary(
      x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(const Tensor& x, double c) { return add_scalar(x, -c); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }
inline Tensor operator+(double c, const Tensor& x) { return add_scalar(x, c); }
inline Tensor operator-(double c, const Tensor& x) { return add_scalar(scale(x, -1.0), c); }

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}
inline Tensor exp(const Tensor& x) {
  return detail::unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& x) {
  for (double v : x.data())
    if (!(v > 0.0)) throw NumericDomainError("log of non-positive value " + std::to_string(v));
  return detail::unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}
inline Tensor sin(const Tensor& x) {
  return detail::unary(
      x, "sin", [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}
inline Tensor cos(const Tensor& x) {
  return detail::unary(
      x, "cos", [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}
inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, "sigmoid",
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}
/// log(sigmoid(x)), stable for large |x|.
inline Tensor log_sigmoid(const Tensor& x) {
  return detail::unary(
      x, "log_sigmoid", [](double v) { return -(std::max(-v, 0.0) + std::log1p(std::exp(-std::abs(v)))); },
      [](double v, double) { return v >= 0.0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v)); });
}
/// Gradient passes only inside [lo, hi].
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary(
      x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

enum class UnaryOp { neg, relu, exp, log, sin, cos, square, sigmoid, tanh };
enum class BinaryOp { add, sub, mul, div };

inline Tensor elementwise(UnaryOp op, const Tensor& x) {
  switch (op) {
    case UnaryOp::neg: return -x;
    case UnaryOp::relu: return relu(x);
    case UnaryOp::exp: return exp(x);
    case UnaryOp::log: return log(x);
    case UnaryOp::sin: return sin(x);
    case UnaryOp::cos: return cos(x);
    case UnaryOp::square: return square(x);
    case UnaryOp::sigmoid: return sigmoid(x);
    case UnaryOp::tanh: return tanh(x);
  }
  throw ContractError("unknown unary op");
}

inline Tensor elementwise(BinaryOp op, const Tensor& x, const Tensor& y) {
  switch (op) {
    case BinaryOp::add: return add(x, y);
    case BinaryOp::sub: return sub(x, y);
    case BinaryOp::mul: return mul(x, y);
    case BinaryOp::div: return div(x, y);
  }
  throw ContractError("unknown binary op");
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

/// a[..., m, k] x b[k, n] -> [..., m, n], or batched a[B..., m, k] x b[B..., k, n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError("matmul needs rank >= 2, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  if (k != kb)
    throw DimensionError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::size_t batch = 1;
  bool shared_rhs = b.rank() == 2;
  if (!shared_rhs) {
    if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw DimensionError("matmul batch extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.dim(i);
  }
  const std::size_t rows = shared_rhs ? a.numel() / k : m;
  std::vector<double> out(shape_numel(out_shape), 0.0);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  if (shared_rhs) {
    detail::gemm_nn(av, bv, out.data(), rows, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s)
      detail::gemm_nn(av + s * m * k, bv + s * k * n, out.data() + s * m * n, m, k, n);
  }
  return detail::make_result(out_shape, std::move(out), "matmul", {&a, &b},
                             [shared_rhs, batch, rows, m, k, n](const detail::TensorImpl& o) {
                               auto& A = *o.grad_fn->inputs[0];
                               auto& B = *o.grad_fn->inputs[1];
                               const double* g = o.grad.data();
                               if (shared_rhs) {
                                 if (A.requires_grad) detail::gemm_nt(g, B.data(), A.ensure_grad().data(), rows, n, k);
                                 if (B.requires_grad) detail::gemm_tn(A.data(), g, B.ensure_grad().data(), rows, k, n);
                                 return;
                               }
                               for (std::size_t s = 0; s < batch; ++s) {
                                 if (A.requires_grad)
                                   detail::gemm_nt(g + s * m * n, B.data() + s * k * n,
                                                   A.ensure_grad().data() + s * m * k, m, n, k);
                                 if (B.requires_grad)
                                   detail::gemm_tn(A.data() + s * m * k, g + s * m * n,
                                                   B.ensure_grad().data() + s * k * n, m, k, n);
                               }
                             });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  Shape s = x.shape();
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  const std::size_t batch = x.numel() / (r * c);
  std::vector<double> out(x.numel());
  const double* xv = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = xv[b * r * c + i * c + j];
  return detail::make_result(s, std::move(out), "transpose", {&x}, [batch, r, c](const detail::TensorImpl& o) {
    auto& in = *o.grad_fn->inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return detail::make_result(std::move(shape), x.values(), "reshape", {&x}, [](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < o.numel(); ++i) g[i] += o.grad[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, long axis_in) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const auto axis = detail::normalize_axis(axis_in, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw DimensionError("concat rank mismatch: " + shape_str(p.shape()));
    for (std::size_t d = 0; d < p.rank(); ++d)
      if (d != axis && p.dim(d) != parts[0].dim(d))
        throw DimensionError("concat extent mismatch: " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    out_shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis) * split.inner;
    const double* pv = p.data().data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy(pv + o * len, pv + (o + 1) * len, out.begin() + o * split.len * split.inner + off * split.inner);
    off += p.dim(axis);
  }
  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return detail::make_result_n(out_shape, std::move(out), "concat", parts,
                               [split, offsets, lens](const detail::TensorImpl& o) {
                                 for (std::size_t q = 0; q < lens.size(); ++q) {
                                   auto& in = *o.grad_fn->inputs[q];
                                   if (!in.requires_grad) continue;
                                   auto& g = in.ensure_grad();
                                   const std::size_t len = lens[q] * split.inner;
                                   for (std::size_t oi = 0; oi < split.outer; ++oi) {
                                     const double* src = o.grad.data() + oi * split.len * split.inner +
                                                         offsets[q] * split.inner;
                                     double* dst = g.data() + oi * len;
                                     for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                                   }
                                 }
                               });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, long axis_in, std::size_t begin, std::size_t end) {
  const auto axis = detail::normalize_axis(axis_in, x.rank());
  if (begin >= end || end > x.dim(axis))
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t len = (end - begin) * split.inner;
  std::vector<double> out(shape_numel(out_shape));
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy(xv + o * split.len * split.inner + begin * split.inner,
              xv + o * split.len * split.inner + begin * split.inner + len, out.begin() + o * len);
  return detail::make_result(out_shape, std::move(out), "slice", {&x}, [split, begin, len](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    for (std::size_t oi = 0; oi < split.outer; ++oi) {
      double* dst = g.data() + oi * split.len * split.inner + begin * split.inner;
      const double* src = o.grad.data() + oi * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max };

/// Reduces `axis` away (the result drops that axis; a rank-1 input gives a scalar).
inline Tensor reduce(ReduceOp op, const Tensor& x, long axis_in) {
  const auto axis = detail::normalize_axis(axis_in, x.rank());
  const auto split = detail::split_at(x.shape(), axis);
  if (split.len == 0) throw DimensionError("reduction over empty axis");
  Shape out_shape;
  for (std::size_t d = 0; d < x.rank(); ++d)
    if (d != axis) out_shape.push_back(x.dim(d));
  std::vector<double> out(split.outer * split.inner, op == ReduceOp::max ? -std::numeric_limits<double>::infinity() : 0.0);
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::max) argmax.assign(out.size(), 0);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t l = 0; l < split.len; ++l)
      for (std::size_t i = 0; i < split.inner; ++i) {
        const double v = xv[(o * split.len + l) * split.inner + i];
        auto& dst = out[o * split.inner + i];
        if (op == ReduceOp::max) {
          if (v > dst || l == 0) {
            dst = v;
            argmax[o * split.inner + i] = l;
          }
        } else {
          dst += v;
        }
      }
  if (op == ReduceOp::mean)
    for (auto& v : out) v /= static_cast<double>(split.len);
  const char* name = op == ReduceOp::sum ? "sum" : op == ReduceOp::mean ? "mean" : "max";
  return detail::make_result(out_shape, std::move(out), name, {&x},
                             [op, split, argmax = std::move(argmax)](const detail::TensorImpl& o) {
                               auto& g = o.grad_fn->inputs[0]->ensure_grad();
                               const double w = op == ReduceOp::mean ? 1.0 / static_cast<double>(split.len) : 1.0;
                               for (std::size_t oi = 0; oi < split.outer; ++oi)
                                 for (std::size_t i = 0; i < split.inner; ++i) {
                                   const double go = o.grad[oi * split.inner + i];
                                   if (op == ReduceOp::max) {
                                     g[(oi * split.len + argmax[oi * split.inner + i]) * split.inner + i] += go;
                                   } else {
                                     for (std::size_t l = 0; l < split.len; ++l)
                                       g[(oi * split.len + l) * split.inner + i] += go * w;
                                   }
                                 }
                             });
}

inline Tensor sum(const Tensor& x, long axis) { return reduce(ReduceOp::sum, x, axis); }
inline Tensor mean(const Tensor& x, long axis) { return reduce(ReduceOp::mean, x, axis); }
inline Tensor max(const Tensor& x, long axis) { return reduce(ReduceOp::max, x, axis); }

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor& x) { return reduce(ReduceOp::sum, reshape(x, {x.numel()}), 0); }
inline Tensor mean(const Tensor& x) { return reduce(ReduceOp::mean, reshape(x, {x.numel()}), 0); }

// ---------------------------------------------------------------------------
// Neural-network primitives

/// Softmax along `axis`, max-subtracted. -inf entries get exactly zero weight.
inline Tensor softmax(const Tensor& x, long axis_in = -1) {
  const auto axis = detail::normalize_axis(axis_in, x.rank());
  const auto split = detail::split_at(x.shape(), axis);
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < x.numel(); ++i)
    if (std::isnan(xv[i])) throw NumericDomainError("softmax input contains NaN");
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < split.outer; ++o)
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.len * split.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < split.len; ++l) mx = std::max(mx, xv[base + l * split.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < split.len; ++l) {
        const double e = std::exp(xv[base + l * split.inner] - mx);
        out[base + l * split.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < split.len; ++l) out[base + l * split.inner] /= z;
    }
  return detail::make_result(x.shape(), std::move(out), "softmax", {&x}, [split](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    const double* y = o.data();
    for (std::size_t oi = 0; oi < split.outer; ++oi)
      for (std::size_t i = 0; i < split.inner; ++i) {
        const std::size_t base = oi * split.len * split.inner + i;
        double dot = 0.0;
        for (std::size_t l = 0; l < split.len; ++l) dot += o.grad[base + l * split.inner] * y[base + l * split.inner];
        for (std::size_t l = 0; l < split.len; ++l) {
          const auto k = base + l * split.inner;
          g[k] += y[k] * (o.grad[k] - dot);
        }
      }
  });
}

/// Sets x[..., i, j] = -inf for j > i (future keys) over the last two axes.
inline Tensor causal_mask(const Tensor& x) {
  if (x.rank() < 2 || x.dim(x.rank() - 1) != x.dim(x.rank() - 2))
    throw DimensionError("causal_mask needs square trailing axes, got " + shape_str(x.shape()));
  const std::size_t t = x.dim(x.rank() - 1);
  const std::size_t batch = x.numel() / (t * t);
  std::vector<double> out = x.values();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) out[(b * t + i) * t + j] = -std::numeric_limits<double>::infinity();
  return detail::make_result(x.shape(), std::move(out), "causal_mask", {&x}, [batch, t](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) g[(b * t + i) * t + j] += o.grad[(b * t + i) * t + j];
  });
}

/// Normalizes over the last axis, then applies gain and bias (both [D]).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");
  const std::size_t d = x.dim(x.rank() - 1);
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm affine params must have " + std::to_string(d) + " elements");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* xv = x.data().data();
  const double* gv = gain.data().data();
  const double* bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (row[i] - mu) * rs;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = gv[i] * h + bv[i];
    }
  }
  return detail::make_result(x.shape(), std::move(out), "layer_norm", {&x, &gain, &bias},
                             [xhat, rstd, rows, d](const detail::TensorImpl& o) {
                               auto& X = *o.grad_fn->inputs[0];
                               auto& G = *o.grad_fn->inputs[1];
                               auto& B = *o.grad_fn->inputs[2];
                               const double* gv_ = G.data();
                               if (G.requires_grad || B.requires_grad) {
                                 auto* gg = G.requires_grad ? G.ensure_grad().data() : nullptr;
                                 auto* gb = B.requires_grad ? B.ensure_grad().data() : nullptr;
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < d; ++i) {
                                     const double go = o.grad[r * d + i];
                                     if (gg) gg[i] += go * (*xhat)[r * d + i];
                                     if (gb) gb[i] += go;
                                   }
                               }
                               if (!X.requires_grad) return;
                               auto& gx = X.ensure_grad();
                               const double inv_d = 1.0 / static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double s1 = 0.0, s2 = 0.0;
                                 for (std::size_t i = 0; i < d; ++i) {
                                   const double dh = o.grad[r * d + i] * gv_[i];
                                   s1 += dh;
                                   s2 += dh * (*xhat)[r * d + i];
                                 }
                                 for (std::size_t i = 0; i < d; ++i) {
                                   const double dh = o.grad[r * d + i] * gv_[i];
                                   gx[r * d + i] += (*rstd)[r] * (dh - inv_d * s1 - (*xhat)[r * d + i] * inv_d * s2);
                                 }
                               }
                             });
}

/// Inverted dropout. Identity in eval mode or at rate 0.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : keep;
  std::vector<double> out(x.numel());
  const double* xv = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return detail::make_result(x.shape(), std::move(out), "dropout", {&x}, [mask](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < o.numel(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
}

/// Running mean over axis 1 of a [B, T, D] tensor: out[b, t] = mean(x[b, 0..t]).
inline Tensor cumulative_mean(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("cumulative_mean expects [B,T,D], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  std::vector<double> out(x.numel());
  const double* xv = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<double> acc(D, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double inv = 1.0 / static_cast<double>(t + 1);
      for (std::size_t k = 0; k < D; ++k) {
        acc[k] += xv[(b * T + t) * D + k];
        out[(b * T + t) * D + k] = acc[k] * inv;
      }
    }
  }
  return detail::make_result(x.shape(), std::move(out), "cumulative_mean", {&x}, [B, T, D](const detail::TensorImpl& o) {
    auto& g = o.grad_fn->inputs[0]->ensure_grad();
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> acc(D, 0.0);
      for (std::size_t t = T; t-- > 0;) {
        const double inv = 1.0 / static_cast<double>(t + 1);
        for (std::size_t k = 0; k < D; ++k) {
          acc[k] += o.grad[(b * T + t) * D + k] * inv;
          g[(b * T + t) * D + k] += acc[k];
        }
      }
    }
  });
}

/// Shifts a [B, T, D] tensor one step later along time, filling position 0 with zeros.
inline Tensor shift_right(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("shift_right expects [B,T,D], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  if (T == 1) return Tensor::zeros(x.shape());
  return concat({Tensor::zeros({B, 1, D}), slice(x, 1, 0, T - 1)}, 1);
}

}  // namespace dsiv
