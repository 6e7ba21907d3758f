#pragma once

// Dense rank<=2 tensors with reverse-mode gradient tracing.
//
// A Tape becomes the thread's active tape for its lifetime. Any primitive
// evaluated while a tape is active, with at least one input that requires a
// gradient, appends its backward closure to that tape. Tape::backward()
// replays the closures in reverse order and clears the tape.
//
// Shapes are {} (scalar), {n} (treated as a 1 x n row) or {rows, cols}.
// Binary elementwise ops broadcast a dimension of extent 1 against the other
// operand, which covers scalar-tensor, row-per-row and column-per-row forms.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace pcon {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
class Tensor;

/// Ordered record of backward closures for one unit of differentiable work.
class Tape {
 public:
  Tape() : previous_(slot()) { slot() = this; }
  ~Tape() {
    if (slot() == this) slot() = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Seeds d(output)/d(output) = 1 and propagates to every traced input.
  template <class T>
  void backward(const Tensor<T>& output);

  static Tape* current() { return slot(); }

 private:
  friend class NoGradGuard;
  static Tape*& slot() {
    thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<std::function<void()>> entries_;
  Tape* previous_;
};

/// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Tape::slot()) { Tape::slot() = nullptr; }
  ~NoGradGuard() { Tape::slot() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<TensorNode<T>>()) { node_->data.assign(1, T(0)); }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape.size() > 2) throw ShapeError("tensors are limited to rank 2, got " + shape_str(shape));
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : Tensor(shape, std::vector<T>(shape_numel(shape), fill), requires_grad) {}

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, std::vector<T>{v}, requires_grad); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no gradient history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Leaf copy of the values that will accumulate a gradient.
  Tensor leaf() const { return Tensor(shape(), node_->data, true); }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <class T>
void Tape::backward(const Tensor<T>& output) {
  if (output.numel() != 1) throw ShapeError("backward() needs a scalar output, got " + shape_str(output.shape()));
  auto node = output.node();
  node->ensure_grad();
  node->grad[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

/// Backward pass on the thread's active tape.
template <class T>
void backward(const Tensor<T>& output) {
  Tape* tape = Tape::current();
  if (!tape) throw std::logic_error("backward() called with no active tape");
  tape->backward(output);
}

namespace detail {

/// Accumulator type: double, or T when T is wider.
template <class T>
using Acc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;

template <class T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <class T>
bool traced(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <class T>
Tensor<T> result(Shape shape, std::vector<T> data, bool requires_grad) {
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

inline void record(std::function<void()> fn) { Tape::current()->record(std::move(fn)); }

struct Dims2 {
  std::size_t r, c;
};

template <class T>
Dims2 dims2(const Tensor<T>& t) {
  return {t.rows(), t.cols()};
}

// Broadcast index plan for binary elementwise ops.
struct Broadcast {
  Dims2 a, b, out;
  Shape shape;

  std::size_t ia(std::size_t i, std::size_t j) const { return (a.r == 1 ? 0 : i) * a.c + (a.c == 1 ? 0 : j); }
  std::size_t ib(std::size_t i, std::size_t j) const { return (b.r == 1 ? 0 : i) * b.c + (b.c == 1 ? 0 : j); }
};

template <class T>
Broadcast plan(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  Broadcast p{dims2(a), dims2(b), {}, {}};
  auto merge = [&](std::size_t x, std::size_t y) -> std::size_t {
    if (x == y || y == 1) return x;
    if (x == 1) return y;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  };
  p.out = {merge(p.a.r, p.b.r), merge(p.a.c, p.b.c)};
  const std::size_t rank = std::max(a.rank(), b.rank());
  if (a.shape() == b.shape()) {
    p.shape = a.shape();
  } else if (rank == 2) {
    p.shape = {p.out.r, p.out.c};
  } else if (rank == 1) {
    p.shape = {p.out.c};
  }
  return p;
}

template <class T, class Fwd, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Da da, Db db) {
  const Broadcast p = plan(a, b, name);
  std::vector<T> out(p.out.r * p.out.c);
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  if (a.numel() == out.size() && b.numel() == out.size()) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(ad[k], bd[k]);
  } else {
    for (std::size_t i = 0; i < p.out.r; ++i)
      for (std::size_t j = 0; j < p.out.c; ++j) out[i * p.out.c + j] = fwd(ad[p.ia(i, j)], bd[p.ib(i, j)]);
  }
  const bool rg = traced<T>({&a, &b});
  Tensor<T> res = result<T>(p.shape, std::move(out), rg);
  if (rg) {
    record([p, an = a.node(), bn = b.node(), on = res.node(), da, db] {
      if (on->grad.empty()) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < p.out.r; ++i) {
        for (std::size_t j = 0; j < p.out.c; ++j) {
          const std::size_t k = i * p.out.c + j;
          const std::size_t ka = p.ia(i, j), kb = p.ib(i, j);
          const T g = on->grad[k];
          if (an->requires_grad) an->grad[ka] += g * da(an->data[ka], bn->data[kb], on->data[k]);
          if (bn->requires_grad) bn->grad[kb] += g * db(an->data[ka], bn->data[kb], on->data[k]);
        }
      }
    });
  }
  return res;
}

template <class T, class Fwd, class Dx>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Dx dx) {
  std::vector<T> out(x.numel());
  const auto& xd = x.node()->data;
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = fwd(xd[k]);
  const bool rg = traced<T>({&x});
  Tensor<T> res = result<T>(x.shape(), std::move(out), rg);
  if (rg) {
    record([xn = x.node(), on = res.node(), dx] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t k = 0; k < on->data.size(); ++k) xn->grad[k] += on->grad[k] * dx(xn->data[k], on->data[k]);
    });
  }
  return res;
}

// Row-major C = alpha * op(A) op(B) + beta * C.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
  const auto ta = trans_a ? CblasTrans : CblasNoTrans;
  const auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, ta, tb, int(m), int(n), int(k), alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
  } else {
    // extended precision is only used by the finite-difference oracle; plain loops suffice
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t p = 0; p < k; ++p) {
          acc += (trans_a ? a[p * lda + i] : a[i * lda + p]) * (trans_b ? b[j * ldb + p] : b[p * ldb + j]);
        }
        c[i * ldc + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * ldc + j]);
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <class T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> operator+(T s, const Tensor<T>& a) { return add(Tensor<T>::scalar(s), a); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> operator-(T s, const Tensor<T>& a) { return sub(Tensor<T>::scalar(s), a); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <class T>
Tensor<T> operator/(T s, const Tensor<T>& a) { return div(Tensor<T>::scalar(s), a); }

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> operator-(const Tensor<T>& x) { return neg(x); }

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T o) { return o; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T o) { return T(1) - o * o; });
}

/// artanh(x) = (log1p(x) - log1p(-x)) / 2. Callers clamp |x| < 1 first.
template <class T>
Tensor<T> arctanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return T(0.5) * (std::log1p(v) - std::log1p(-v)); }, [](T v, T) { return T(1) / (T(1) - v * v); });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary(x, [](T v) { return std::sqrt(v); }, [](T, T o) { return T(0.5) / o; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// Clamp to [lo, hi]; the gradient is zero where the bound is active.
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n);
  detail::gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
  const bool rg = detail::traced<T>({&a, &b});
  Tensor<T> res = detail::result<T>({m, n}, std::move(out), rg);
  if (rg) {
    detail::record([an = a.node(), bn = b.node(), on = res.node(), m, n, k] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm<T>(false, true, m, k, n, T(1), on->grad.data(), n, bn->data.data(), n, T(1), an->grad.data(), k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm<T>(true, false, k, n, m, T(1), an->data.data(), k, on->grad.data(), n, T(1), bn->grad.data(), n);
      }
    });
  }
  return res;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> out(r * c);
  const auto& xd = x.node()->data;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>({c, r}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), r, c] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += on->grad[j * r + i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in at least double precision)

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::Acc<T> s = 0.0;
  for (T v : x.data()) s += detail::Acc<T>(v);
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>({}, {T(s)}, rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node()] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      const T g = on->grad[0];
      for (T& v : xn->grad) v += g;
    });
  }
  return res;
}

/// Sum along an axis: axis 0 gives [1, cols], axis 1 gives [rows, 1].
template <class T>
Tensor<T> sum(const Tensor<T>& x, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("sum: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  const auto& xd = x.node()->data;
  std::vector<detail::Acc<T>> acc(axis == 0 ? c : r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) acc[axis == 0 ? j : i] += detail::Acc<T>(xd[i * c + j]);
  std::vector<T> out(acc.begin(), acc.end());
  const bool rg = detail::traced<T>({&x});
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  Tensor<T> res = detail::result<T>(shape, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), r, c, axis] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += on->grad[axis == 0 ? j : i];
    });
  }
  return res;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return sum(x) * (T(1) / T(x.numel()));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, int axis) {
  const std::size_t n = axis == 0 ? x.rows() : x.cols();
  return sum(x, axis) * (T(1) / T(n));
}

/// Row-wise (axis 1 -> [rows,1]) or column-wise (axis 0 -> [1,cols]) inner product.
template <class T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b, int axis = 1) {
  if (a.shape() != b.shape()) throw ShapeError("dot: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return sum(mul(a, b), axis);
}

/// Euclidean norm along an axis. The gradient at a zero vector is taken as 0.
template <class T>
Tensor<T> l2_norm(const Tensor<T>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("l2_norm: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  const auto& xd = x.node()->data;
  std::vector<double> acc(axis == 0 ? c : r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double v = xd[i * c + j];
      acc[axis == 0 ? j : i] += v * v;
    }
  std::vector<T> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = T(std::sqrt(acc[k]));
  const bool rg = detail::traced<T>({&x});
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  Tensor<T> res = detail::result<T>(shape, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), r, c, axis] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const std::size_t o = axis == 0 ? j : i;
          const T n = on->data[o];
          if (n > T(0)) xn->grad[i * c + j] += on->grad[o] * xn->data[i * c + j] / n;
        }
    });
  }
  return res;
}

/// log(sum(exp(x))) along an axis, shifted by the maximum. Entries equal to
/// -inf contribute nothing and receive zero gradient.
template <class T>
Tensor<T> logsumexp(const Tensor<T>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("logsumexp: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  const std::size_t n_out = axis == 0 ? c : r, n_in = axis == 0 ? r : c;
  auto idx = [=](std::size_t o, std::size_t k) { return axis == 0 ? k * c + o : o * c + k; };
  const auto& xd = x.node()->data;
  std::vector<T> out(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    detail::Acc<T> m = -std::numeric_limits<detail::Acc<T>>::infinity();
    for (std::size_t k = 0; k < n_in; ++k) m = std::max(m, detail::Acc<T>(xd[idx(o, k)]));
    if (!std::isfinite(m)) {
      out[o] = T(m);
      continue;
    }
    detail::Acc<T> s = 0.0;
    for (std::size_t k = 0; k < n_in; ++k) s += std::exp(detail::Acc<T>(xd[idx(o, k)]) - m);
    out[o] = T(m + std::log(s));
  }
  const bool rg = detail::traced<T>({&x});
  Shape shape = axis == 0 ? Shape{1, c} : Shape{r, 1};
  Tensor<T> res = detail::result<T>(shape, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), n_out, n_in, idx] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t o = 0; o < n_out; ++o) {
        const detail::Acc<T> lse = on->data[o];
        if (!std::isfinite(lse)) continue;
        for (std::size_t k = 0; k < n_in; ++k) {
          const std::size_t q = idx(o, k);
          xn->grad[q] += on->grad[o] * T(std::exp(detail::Acc<T>(xn->data[q]) - lse));
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Structural ops

/// Stack rank-2 tensors with equal column counts along rows.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c) throw ShapeError("concat: mismatched part " + shape_str(p.shape()));
    r += p.rows();
    rg = rg || p.requires_grad();
  }
  rg = rg && Tape::current() != nullptr;
  std::vector<T> out;
  out.reserve(r * c);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> res = detail::result<T>({r, c}, std::move(out), rg);
  if (rg) {
    std::vector<detail::NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    detail::record([nodes, on = res.node()] {
      if (on->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t k = 0; k < n->data.size(); ++k) n->grad[k] += on->grad[offset + k];
        }
        offset += n->data.size();
      }
    });
  }
  return res;
}

/// Gather rows by index (indices may repeat).
template <class T>
Tensor<T> index_rows(const Tensor<T>& x, std::vector<std::size_t> rows) {
  if (x.rank() != 2) throw ShapeError("index_rows needs a rank-2 tensor");
  const std::size_t c = x.cols();
  std::vector<T> out(rows.size() * c);
  const auto& xd = x.node()->data;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("index_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(xd.begin() + std::ptrdiff_t(rows[i] * c), c, out.begin() + std::ptrdiff_t(i * c));
  }
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>({rows.size(), c}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), rows = std::move(rows), c] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) xn->grad[rows[i] * c + j] += on->grad[i * c + j];
    });
  }
  return res;
}

/// Rows [begin, end).
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows()) throw ShapeError("slice: bad row range");
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return index_rows(x, std::move(rows));
}

template <class U, class T>
Tensor<U> cast(const Tensor<T>& x) {
  if constexpr (std::is_same_v<U, T>) {
    return x;
  } else {
    std::vector<U> out(x.data().begin(), x.data().end());
    const bool rg = detail::traced<T>({&x});
    Tensor<U> res(x.shape(), std::move(out), rg);
    if (rg) {
      detail::record([xn = x.node(), on = res.node()] {
        if (on->grad.empty()) return;
        xn->ensure_grad();
        for (std::size_t k = 0; k < on->grad.size(); ++k) xn->grad[k] += T(on->grad[k]);
      });
    }
    return res;
  }
}

// ---------------------------------------------------------------------------
// Fused helpers used by the geometry and model code

/// D[i][j] = |x_i - x_j|^2 computed from coordinate differences, so that
/// coincident rows give exactly zero.
template <class T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("pairwise_sq_dist needs a rank-2 tensor");
  const std::size_t n = x.rows(), d = x.cols();
  const auto& xd = x.node()->data;
  std::vector<T> out(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      detail::Acc<T> s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const detail::Acc<T> diff = detail::Acc<T>(xd[i * d + k]) - detail::Acc<T>(xd[j * d + k]);
        s += diff * diff;
      }
      out[i * n + j] = out[j * n + i] = T(s);
    }
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>({n, n}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), n, d] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) continue;
          const T g = T(2) * (on->grad[i * n + j] + on->grad[j * n + i]);
          if (g == T(0)) continue;
          for (std::size_t k = 0; k < d; ++k) xn->grad[i * d + k] += g * (xn->data[i * d + k] - xn->data[j * d + k]);
        }
    });
  }
  return res;
}

/// Rescale every row whose norm exceeds max_norm onto the sphere of that
/// radius; rows inside are passed through unchanged.
template <class T>
Tensor<T> clip_row_norm(const Tensor<T>& x, T max_norm) {
  if (x.rank() != 2) throw ShapeError("clip_row_norm needs a rank-2 tensor");
  const std::size_t r = x.rows(), c = x.cols();
  const auto& xd = x.node()->data;
  std::vector<T> out(xd);
  std::vector<T> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    detail::Acc<T> s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += detail::Acc<T>(xd[i * c + j]) * detail::Acc<T>(xd[i * c + j]);
    norms[i] = T(std::sqrt(s));
    if (norms[i] > max_norm) {
      const T scale = max_norm / norms[i];
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= scale;
    }
  }
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>(x.shape(), std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), norms = std::move(norms), r, c, max_norm] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const T* g = &on->grad[i * c];
        T* gx = &xn->grad[i * c];
        if (norms[i] <= max_norm) {
          for (std::size_t j = 0; j < c; ++j) gx[j] += g[j];
          continue;
        }
        // y = m x / |x|  =>  dy/dx = (m/|x|) (I - u u^T), u = x/|x|
        const T n = norms[i];
        detail::Acc<T> gu = 0.0;
        for (std::size_t j = 0; j < c; ++j) gu += detail::Acc<T>(g[j]) * detail::Acc<T>(xn->data[i * c + j]) / n;
        for (std::size_t j = 0; j < c; ++j) {
          const T u = xn->data[i * c + j] / n;
          gx[j] += max_norm / n * (g[j] - T(gu) * u);
        }
      }
    });
  }
  return res;
}

/// 3x3 convolution, stride 1, zero padding 1. x is [batch, cin*h*w] in
/// channel-planar order, weight is [cout, cin*9], bias is [1, cout].
/// Output is [batch, cout*h*w].
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t cin,
                  std::size_t h, std::size_t w) {
  const std::size_t batch = x.rows(), cout = weight.rows(), hw = h * w, kk = cin * 9;
  if (x.cols() != cin * hw || weight.cols() != kk || bias.numel() != cout) {
    throw ShapeError("conv3x3: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(weight.shape()));
  }
  // im2col per image: cols[kk][hw]
  auto im2col = [=](const T* img, T* cols) {
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          T* row = cols + ((ci * 3 + std::size_t(dy + 1)) * 3 + std::size_t(dx + 1)) * hw;
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
              const long sy = long(y) + dy, sx = long(xx) + dx;
              row[y * w + xx] = (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(w))
                                    ? T(0)
                                    : img[ci * hw + std::size_t(sy) * w + std::size_t(sx)];
            }
        }
  };
  std::vector<T> out(batch * cout * hw);
  std::vector<T> cols(kk * hw);
  const auto& xd = x.node()->data;
  const auto& wd = weight.node()->data;
  const auto& bd = bias.node()->data;
  for (std::size_t b = 0; b < batch; ++b) {
    im2col(&xd[b * cin * hw], cols.data());
    T* o = &out[b * cout * hw];
    for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * hw, hw, bd[co]);
    detail::gemm<T>(false, false, cout, hw, kk, T(1), wd.data(), kk, cols.data(), hw, T(1), o, hw);
  }
  const bool rg = detail::traced<T>({&x, &weight, &bias});
  Tensor<T> res = detail::result<T>({batch, cout * hw}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), wn = weight.node(), bn = bias.node(), on = res.node(), im2col, batch, cout, hw,
                    kk, cin, h, w] {
      if (on->grad.empty()) return;
      std::vector<T> cols(kk * hw), dcols(kk * hw);
      if (wn->requires_grad) wn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b) {
        const T* g = &on->grad[b * cout * hw];
        if (bn->requires_grad) {
          for (std::size_t co = 0; co < cout; ++co) {
            double s = 0.0;
            for (std::size_t p = 0; p < hw; ++p) s += g[co * hw + p];
            bn->grad[co] += T(s);
          }
        }
        if (wn->requires_grad) {
          im2col(&xn->data[b * cin * hw], cols.data());
          detail::gemm<T>(false, true, cout, kk, hw, T(1), g, hw, cols.data(), hw, T(1), wn->grad.data(), kk);
        }
        if (xn->requires_grad) {
          detail::gemm<T>(true, false, kk, hw, cout, T(1), wn->data.data(), kk, g, hw, T(0), dcols.data(), hw);
          T* gx = &xn->grad[b * cin * hw];
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const T* row = dcols.data() + ((ci * 3 + std::size_t(dy + 1)) * 3 + std::size_t(dx + 1)) * hw;
                for (std::size_t y = 0; y < h; ++y)
                  for (std::size_t xx = 0; xx < w; ++xx) {
                    const long sy = long(y) + dy, sx = long(xx) + dx;
                    if (sy < 0 || sx < 0 || sy >= long(h) || sx >= long(w)) continue;
                    gx[ci * hw + std::size_t(sy) * w + std::size_t(sx)] += row[y * w + xx];
                  }
              }
        }
      }
    });
  }
  return res;
}

/// 2x2 average pooling with stride 2 on [batch, c*h*w] channel-planar rows.
template <class T>
Tensor<T> avg_pool2x2(const Tensor<T>& x, std::size_t c, std::size_t h, std::size_t w) {
  if (x.cols() != c * h * w || h % 2 || w % 2) throw ShapeError("avg_pool2x2: bad geometry");
  const std::size_t batch = x.rows(), oh = h / 2, ow = w / 2;
  const std::size_t in_row = c * h * w, out_row = c * oh * ow;
  std::vector<T> out(batch * out_row);
  const auto& xd = x.node()->data;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const T* p = &xd[b * in_row + ch * h * w + 2 * y * w + 2 * xx];
          out[b * out_row + ch * oh * ow + y * ow + xx] = T(0.25) * (p[0] + p[1] + p[w] + p[w + 1]);
        }
  const bool rg = detail::traced<T>({&x});
  Tensor<T> res = detail::result<T>({batch, out_row}, std::move(out), rg);
  if (rg) {
    detail::record([xn = x.node(), on = res.node(), batch, c, h, w, oh, ow, in_row, out_row] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              const T g = T(0.25) * on->grad[b * out_row + ch * oh * ow + y * ow + xx];
              T* p = &xn->grad[b * in_row + ch * h * w + 2 * y * w + 2 * xx];
              p[0] += g;
              p[1] += g;
              p[w] += g;
              p[w + 1] += g;
            }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

template <class T>
constexpr double default_fd_step() {
  return std::is_same_v<T, double> ? 1e-4 : 1e-2;
}

/// Compares the traced gradient of a scalar function against central
/// differences, coordinate by coordinate. Returns the largest relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class T, class F>
double grad_check(F&& f, const Tensor<T>& x, double h = default_fd_step<T>()) {
  Tensor<T> probe = x.leaf();
  {
    Tape tape;
    Tensor<T> y = f(probe);
    if (y.numel() != 1) throw ShapeError("grad_check needs a scalar-valued function, got " + shape_str(y.shape()));
    tape.backward(y);
  }
  std::vector<T> analytic(probe.numel(), T(0));
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<T> shifted(x.data().begin(), x.data().end());
  for (std::size_t k = 0; k < shifted.size(); ++k) {
    const T orig = shifted[k];
    shifted[k] = T(double(orig) + h);
    const double fp = double(f(Tensor<T>(x.shape(), shifted)).item());
    shifted[k] = T(double(orig) - h);
    const double fm = double(f(Tensor<T>(x.shape(), shifted)).item());
    shifted[k] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = double(analytic[k]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

/// Same metric as grad_check, with the central differences evaluated in
/// extended precision. `f` must accept Tensor<T> and Tensor<long double>.
/// The lower rounding floor lets a smaller step shrink truncation error on
/// strongly curved losses.
template <class T, class F>
double grad_check_extended(F&& f, const Tensor<T>& x, double h) {
  using X = long double;
  Tensor<T> probe = x.leaf();
  {
    Tape tape;
    Tensor<T> y = f(probe);
    if (y.numel() != 1) throw ShapeError("grad_check needs a scalar-valued function, got " + shape_str(y.shape()));
    tape.backward(y);
  }
  std::vector<T> analytic(probe.numel(), T(0));
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<X> shifted(x.data().begin(), x.data().end());
  for (std::size_t k = 0; k < shifted.size(); ++k) {
    const X orig = shifted[k];
    shifted[k] = orig + X(h);
    const X fp = f(Tensor<X>(x.shape(), shifted)).item();
    shifted[k] = orig - X(h);
    const X fm = f(Tensor<X>(x.shape(), shifted)).item();
    shifted[k] = orig;
    const double numeric = double((fp - fm) / (2 * X(h)));
    const double a = double(analytic[k]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace pcon
