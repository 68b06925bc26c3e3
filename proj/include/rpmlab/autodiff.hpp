// autodiff.hpp -- reverse-mode automatic differentiation over dense tensors.
//
// A Tape owns every node created during one forward pass; nodes record their
// parents and a backward closure. Node ids grow in creation order, so the
// reverse sweep is a single descending-id pass (every parent precedes its
// consumers). All kernels are single-threaded and iterate in a fixed order,
// which makes whole training runs bit-reproducible.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <utility>
#include <vector>

#include "rpmlab/errors.hpp"
#include "rpmlab/tensor.hpp"

namespace rpmlab {

template <typename T>
class Tape;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily on first contribution
  bool requires_grad = false;
  int64_t id = -1;
  std::function<void(Node<T>&)> backward;
};

template <typename T>
class Value {
 public:
  Value() = default;
  Value(Node<T>* n, Tape<T>* t) : node_(n), tape_(t) {}

  const Tensor<T>& val() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node<T>* node() const { return node_; }
  Tape<T>* tape() const { return tape_; }

  // Zero tensor if nothing flowed back.
  Tensor<T> grad() const {
    if (node_->grad.data.empty()) return Tensor<T>(node_->value.shape);
    return node_->grad;
  }

 private:
  Node<T>* node_ = nullptr;
  Tape<T>* tape_ = nullptr;
};

template <typename T>
class Tape {
 public:
  Value<T> leaf(Tensor<T> v, bool requires_grad = false) {
    Node<T>& n = alloc(std::move(v));
    n.requires_grad = requires_grad && grad_enabled_;
    return Value<T>(&n, this);
  }

  Value<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

  Value<T> make(Tensor<T> v, std::initializer_list<Node<T>*> parents,
                std::function<void(Node<T>&)> bwd) {
    Node<T>& n = alloc(std::move(v));
    if (grad_enabled_) {
      for (Node<T>* p : parents) n.requires_grad = n.requires_grad || p->requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(bwd);
    return Value<T>(&n, this);
  }

  // Seeds a scalar root with gradient one and sweeps ids in reverse.
  void backward(Value<T> root) {
    if (root.numel() != 1) throw ShapeMismatch("backward root must be scalar");
    if (!root.requires_grad()) return;
    ensure_grad(*root.node());
    root.node()->grad[0] = T(1);
    for (int64_t id = root.node()->id; id >= 0; --id) {
      Node<T>& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || n.grad.data.empty() || !n.backward) continue;
      n.backward(n);
    }
  }

  void reset() {
    nodes_.clear();
    ++epoch_;
  }

  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }
  uint64_t epoch() const { return epoch_; }
  size_t size() const { return nodes_.size(); }

  static Tensor<T>& ensure_grad(Node<T>& n) {
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

 private:
  Node<T>& alloc(Tensor<T> v) {
    nodes_.emplace_back();
    Node<T>& n = nodes_.back();
    n.value = std::move(v);
    n.id = static_cast<int64_t>(nodes_.size()) - 1;
    return n;
  }

  std::deque<Node<T>> nodes_;
  uint64_t epoch_ = 1;
  bool grad_enabled_ = true;
};

// ---------------------------------------------------------------------------
// broadcasting machinery
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = ra > rb ? ra : rb;
  Shape out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[static_cast<size_t>(i - (r - ra))];
    int64_t db = i < r - rb ? 1 : b[static_cast<size_t>(i - (r - rb))];
    if (da != db && da != 1 && db != 1)
      throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[static_cast<size_t>(i)] = da > db ? da : db;
  }
  return out;
}

// Strides of `s` viewed through the broadcast output shape (0 on expanded dims).
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  Shape own = row_strides(s);
  int off = static_cast<int>(out.size() - s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != 1 || out[i + static_cast<size_t>(off)] == 1) st[i + static_cast<size_t>(off)] = own[i];
    if (s[i] == 1 && out[i + static_cast<size_t>(off)] != 1) st[i + static_cast<size_t>(off)] = 0;
  }
  return st;
}

// Calls f(linear_out, index_a, index_b) for every output element, with a tight
// inner loop over the trailing dimension.
template <class F>
void for_each_bcast(const Shape& os, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
  int r = static_cast<int>(os.size());
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  int64_t inner = os[static_cast<size_t>(r - 1)];
  int64_t sa_in = sa[static_cast<size_t>(r - 1)], sb_in = sb[static_cast<size_t>(r - 1)];
  int64_t outer = 1;
  for (int i = 0; i < r - 1; ++i) outer *= os[static_cast<size_t>(i)];
  std::vector<int64_t> idx(static_cast<size_t>(r > 1 ? r - 1 : 0), 0);
  int64_t ia = 0, ib = 0, lin = 0;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t ja = ia, jb = ib;
    for (int64_t i = 0; i < inner; ++i, ja += sa_in, jb += sb_in, ++lin) f(lin, ja, jb);
    for (int d = r - 2; d >= 0; --d) {
      idx[static_cast<size_t>(d)]++;
      ia += sa[static_cast<size_t>(d)];
      ib += sb[static_cast<size_t>(d)];
      if (idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      ia -= sa[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      ib -= sb[static_cast<size_t>(d)] * os[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

namespace detail {

template <typename T>
void accumulate_into(Node<T>* p, int64_t at, T v) {
  Tape<T>::ensure_grad(*p);
  p->grad[at] += v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

enum class BinOp { add, sub, mul, divide };

template <typename T>
Value<T> binary_op(Value<T> a, Value<T> b, BinOp op) {
  Tape<T>* tp = a.tape();
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  Shape os = broadcast_shape(av.shape, bv.shape);
  auto sa = broadcast_strides(av.shape, os);
  auto sb = broadcast_strides(bv.shape, os);
  Tensor<T> out(os);
  switch (op) {
    case BinOp::add:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = av[ia] + bv[ib]; });
      break;
    case BinOp::sub:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = av[ia] - bv[ib]; });
      break;
    case BinOp::mul:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = av[ia] * bv[ib]; });
      break;
    case BinOp::divide:
      for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) { out[o] = av[ia] / bv[ib]; });
      break;
  }
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return tp->make(std::move(out), {na, nb}, [na, nb, os, sa, sb, op](Node<T>& n) {
    const Tensor<T>& g = n.grad;
    bool wa = na->requires_grad, wb = nb->requires_grad;
    if (wa) Tape<T>::ensure_grad(*na);
    if (wb) Tape<T>::ensure_grad(*nb);
    switch (op) {
      case BinOp::add:
        for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          if (wa) na->grad[ia] += g[o];
          if (wb) nb->grad[ib] += g[o];
        });
        break;
      case BinOp::sub:
        for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          if (wa) na->grad[ia] += g[o];
          if (wb) nb->grad[ib] -= g[o];
        });
        break;
      case BinOp::mul:
        for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          if (wa) na->grad[ia] += g[o] * nb->value[ib];
          if (wb) nb->grad[ib] += g[o] * na->value[ia];
        });
        break;
      case BinOp::divide:
        for_each_bcast(os, sa, sb, [&](int64_t o, int64_t ia, int64_t ib) {
          T inv = T(1) / nb->value[ib];
          if (wa) na->grad[ia] += g[o] * inv;
          if (wb) nb->grad[ib] -= g[o] * na->value[ia] * inv * inv;
        });
        break;
    }
  });
}

template <typename T>
Value<T> add(Value<T> a, Value<T> b) { return binary_op(a, b, BinOp::add); }
template <typename T>
Value<T> sub(Value<T> a, Value<T> b) { return binary_op(a, b, BinOp::sub); }
template <typename T>
Value<T> mul(Value<T> a, Value<T> b) { return binary_op(a, b, BinOp::mul); }
template <typename T>
Value<T> divide(Value<T> a, Value<T> b) { return binary_op(a, b, BinOp::divide); }

template <typename T>
Value<T> operator+(Value<T> a, Value<T> b) { return add(a, b); }
template <typename T>
Value<T> operator-(Value<T> a, Value<T> b) { return sub(a, b); }
template <typename T>
Value<T> operator*(Value<T> a, Value<T> b) { return mul(a, b); }

template <typename T>
Value<T> add_scalar(Value<T> a, T s) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v += s;
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i) na->grad[i] += n.grad[i];
  });
}

template <typename T>
Value<T> mul_scalar(Value<T> a, T s) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v *= s;
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, s](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i) na->grad[i] += n.grad[i] * s;
  });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> exp_op(Value<T> a) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = std::exp(v);
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i) na->grad[i] += n.grad[i] * n.value[i];
  });
}

template <typename T>
Value<T> sqrt_op(Value<T> a) {
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = std::sqrt(v);
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      na->grad[i] += n.grad[i] * T(0.5) / n.value[i];
  });
}

template <typename T>
Value<T> gelu(Value<T> a) {
  const T inv_sqrt2 = T(0.7071067811865475244);
  Tensor<T> out = a.val();
  for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, inv_sqrt2](Node<T>& n) {
    const T inv_sqrt2pi = T(0.3989422804014326779);
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      T x = na->value[i];
      T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      na->grad[i] += n.grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Value<T> stop_gradient(Value<T> a) {
  return a.tape()->constant(a.val());
}

// ---------------------------------------------------------------------------
// matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= op(A) * op(B); A stored [m,k] or [k,m] when transposed, B
// stored [k,n] or [n,k] when transposed.
template <typename T>
void gemm(const T* A, bool tA, const T* B, bool tB, T* C, int64_t m, int64_t k, int64_t n,
          bool accum) {
  Eigen::Map<const EMat<T>> ma(A, tA ? k : m, tA ? m : k);
  Eigen::Map<const EMat<T>> mb(B, tB ? n : k, tB ? k : n);
  Eigen::Map<EMat<T>> mc(C, m, n);
  if (!tA && !tB) {
    if (accum) mc.noalias() += ma * mb; else mc.noalias() = ma * mb;
  } else if (!tA && tB) {
    if (accum) mc.noalias() += ma * mb.transpose(); else mc.noalias() = ma * mb.transpose();
  } else if (tA && !tB) {
    if (accum) mc.noalias() += ma.transpose() * mb; else mc.noalias() = ma.transpose() * mb;
  } else {
    if (accum) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

}  // namespace detail

// a: [*, m, k]; b: [k, n] (rank 2, shared across the batch) or [*, k, n] with
// the same leading dims as a. trans_b interprets b as [n, k] / [*, n, k].
template <typename T>
Value<T> matmul(Value<T> a, Value<T> b, bool trans_b = false) {
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (av.rank() < 2 || bv.rank() < 2) throw ShapeMismatch("matmul needs rank >= 2");
  int64_t m = av.dim(-2), k = av.dim(-1);
  int64_t kb = trans_b ? bv.dim(-1) : bv.dim(-2);
  int64_t n = trans_b ? bv.dim(-2) : bv.dim(-1);
  if (k != kb)
    throw ShapeMismatch("matmul inner dims " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  bool shared_b = bv.rank() == 2;
  int64_t batch = av.numel() / (m * k);
  if (!shared_b) {
    if (Shape(av.shape.begin(), av.shape.end() - 2) != Shape(bv.shape.begin(), bv.shape.end() - 2))
      throw ShapeMismatch("matmul batch dims " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  }
  Shape os(av.shape.begin(), av.shape.end() - 2);
  os.push_back(m);
  os.push_back(n);
  Tensor<T> out(os);
  if (shared_b) {
    detail::gemm(av.ptr(), false, bv.ptr(), trans_b, out.ptr(), batch * m, k, n, false);
  } else {
    for (int64_t i = 0; i < batch; ++i)
      detail::gemm(av.ptr() + i * m * k, false, bv.ptr() + i * (trans_b ? n * k : k * n), trans_b,
                   out.ptr() + i * m * n, m, k, n, false);
  }
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.tape()->make(std::move(out), {na, nb},
                        [na, nb, m, k, n, batch, shared_b, trans_b](Node<T>& node) {
    const T* g = node.grad.ptr();
    if (na->requires_grad) {
      T* da = Tape<T>::ensure_grad(*na).ptr();
      const T* B = nb->value.ptr();
      if (shared_b) {
        // dA = dC * B^T (or dC * B when b was transposed); flattened rows.
        detail::gemm(g, false, B, !trans_b, da, batch * m, n, k, true);
      } else {
        for (int64_t i = 0; i < batch; ++i)
          detail::gemm(g + i * m * n, false, B + i * (trans_b ? n * k : k * n), !trans_b,
                       da + i * m * k, m, n, k, true);
      }
    }
    if (nb->requires_grad) {
      T* db = Tape<T>::ensure_grad(*nb).ptr();
      const T* A = na->value.ptr();
      if (shared_b) {
        if (!trans_b) {
          detail::gemm(A, true, g, false, db, k, batch * m, n, true);  // dB = A^T dC
        } else {
          detail::gemm(g, true, A, false, db, n, batch * m, k, true);  // dB = dC^T A
        }
      } else {
        for (int64_t i = 0; i < batch; ++i) {
          if (!trans_b)
            detail::gemm(A + i * m * k, true, g + i * m * n, false, db + i * k * n, k, m, n, true);
          else
            detail::gemm(g + i * m * n, true, A + i * m * k, false, db + i * n * k, n, m, k, true);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Value<T> sum_all(Value<T> a) {
  T s = T(0);
  for (const T& v : a.val().data) s += v;
  Node<T>* na = a.node();
  return a.tape()->make(tensor_scalar(s), {na}, [na](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    T g = n.grad[0];
    for (auto& v : na->grad.data) v += g;
  });
}

template <typename T>
Value<T> mean_all(Value<T> a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Value<T> sum_last(Value<T> a, bool keepdim = true) {
  const Tensor<T>& av = a.val();
  int64_t d = av.dim(-1);
  int64_t rows = av.numel() / d;
  Shape os(av.shape.begin(), av.shape.end() - 1);
  if (keepdim) os.push_back(1);
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  for (int64_t r = 0; r < rows; ++r) {
    T s = T(0);
    const T* p = av.ptr() + r * d;
    for (int64_t i = 0; i < d; ++i) s += p[i];
    out[r] = s;
  }
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, d, rows](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t r = 0; r < rows; ++r) {
      T g = n.grad[r];
      T* p = na->grad.ptr() + r * d;
      for (int64_t i = 0; i < d; ++i) p[i] += g;
    }
  });
}

template <typename T>
Value<T> mean_last(Value<T> a, bool keepdim = true) {
  int64_t d = a.val().dim(-1);
  return mul_scalar(sum_last(a, keepdim), T(1) / static_cast<T>(d));
}

// ---------------------------------------------------------------------------
// rowwise softmax family (over the trailing dimension)
// ---------------------------------------------------------------------------

template <typename T>
Value<T> softmax_last(Value<T> a) {
  const Tensor<T>& av = a.val();
  int64_t d = av.dim(-1);
  int64_t rows = av.numel() / d;
  Tensor<T> out(av.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = av.ptr() + r * d;
    T* y = out.ptr() + r * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = x[i] > mx ? x[i] : mx;
    T s = T(0);
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      s += y[i];
    }
    T inv = T(1) / s;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, d, rows](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = n.value.ptr() + r * d;
      const T* g = n.grad.ptr() + r * d;
      T* dx = na->grad.ptr() + r * d;
      T dot = T(0);
      for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (int64_t i = 0; i < d; ++i) dx[i] += (g[i] - dot) * y[i];
    }
  });
}

template <typename T>
Value<T> log_softmax_last(Value<T> a) {
  const Tensor<T>& av = a.val();
  int64_t d = av.dim(-1);
  int64_t rows = av.numel() / d;
  Tensor<T> out(av.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = av.ptr() + r * d;
    T* y = out.ptr() + r * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = x[i] > mx ? x[i] : mx;
    T s = T(0);
    for (int64_t i = 0; i < d; ++i) s += std::exp(x[i] - mx);
    T lse = mx + std::log(s);
    for (int64_t i = 0; i < d; ++i) y[i] = x[i] - lse;
  }
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, d, rows](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = n.value.ptr() + r * d;
      const T* g = n.grad.ptr() + r * d;
      T* dx = na->grad.ptr() + r * d;
      T gsum = T(0);
      for (int64_t i = 0; i < d; ++i) gsum += g[i];
      for (int64_t i = 0; i < d; ++i) dx[i] += g[i] - std::exp(y[i]) * gsum;
    }
  });
}

// ---------------------------------------------------------------------------
// layer normalization over the trailing dimension
// ---------------------------------------------------------------------------

template <typename T>
Value<T> layernorm_last(Value<T> x, Value<T> gain, Value<T> bias, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.val();
  int64_t d = xv.dim(-1);
  int64_t rows = xv.numel() / d;
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeMismatch("layernorm gain/bias must have the feature width");
  Tensor<T> out(xv.shape);
  std::vector<T> mu(static_cast<size_t>(rows)), inv(static_cast<size_t>(rows));
  const T* gp = gain.val().ptr();
  const T* bp = bias.val().ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* px = xv.ptr() + r * d;
    T* py = out.ptr() + r * d;
    T m = T(0);
    for (int64_t i = 0; i < d; ++i) m += px[i];
    m /= static_cast<T>(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) {
      T c = px[i] - m;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T iv = T(1) / std::sqrt(var + eps);
    mu[static_cast<size_t>(r)] = m;
    inv[static_cast<size_t>(r)] = iv;
    for (int64_t i = 0; i < d; ++i) py[i] = (px[i] - m) * iv * gp[i] + bp[i];
  }
  Node<T>* nx = x.node();
  Node<T>* ng = gain.node();
  Node<T>* nb = bias.node();
  return x.tape()->make(std::move(out), {nx, ng, nb},
                        [nx, ng, nb, d, rows, mu = std::move(mu), inv = std::move(inv)](Node<T>& n) {
    bool wx = nx->requires_grad, wg = ng->requires_grad, wb = nb->requires_grad;
    if (wx) Tape<T>::ensure_grad(*nx);
    if (wg) Tape<T>::ensure_grad(*ng);
    if (wb) Tape<T>::ensure_grad(*nb);
    const T* gp = ng->value.ptr();
    for (int64_t r = 0; r < rows; ++r) {
      const T* px = nx->value.ptr() + r * d;
      const T* gy = n.grad.ptr() + r * d;
      T m = mu[static_cast<size_t>(r)], iv = inv[static_cast<size_t>(r)];
      T sum_dxh = T(0), sum_dxh_xh = T(0);
      for (int64_t i = 0; i < d; ++i) {
        T xh = (px[i] - m) * iv;
        T dxh = gy[i] * gp[i];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh;
        if (wg) ng->grad[i] += gy[i] * xh;
        if (wb) nb->grad[i] += gy[i];
      }
      if (wx) {
        T inv_d = T(1) / static_cast<T>(d);
        T* dx = nx->grad.ptr() + r * d;
        for (int64_t i = 0; i < d; ++i) {
          T xh = (px[i] - m) * iv;
          T dxh = gy[i] * gp[i];
          dx[i] += iv * (dxh - sum_dxh * inv_d - xh * sum_dxh_xh * inv_d);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// norm-bounded squash over the trailing dimension:
//   s(v) = (|v|^2 / (1 + |v|^2)) * v / (|v| + eps)
// Fused so the backward stays finite at v = 0 (the true Jacobian there is 0).
// ---------------------------------------------------------------------------

template <typename T>
Value<T> squash_last(Value<T> a, T eps = T(1e-8)) {
  const Tensor<T>& av = a.val();
  int64_t d = av.dim(-1);
  int64_t rows = av.numel() / d;
  Tensor<T> out(av.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const T* v = av.ptr() + r * d;
    T* y = out.ptr() + r * d;
    T ss = T(0);
    for (int64_t i = 0; i < d; ++i) ss += v[i] * v[i];
    T nr = std::sqrt(ss);
    T f = ss / ((T(1) + ss) * (nr + eps));
    for (int64_t i = 0; i < d; ++i) y[i] = f * v[i];
  }
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, d, rows, eps](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t r = 0; r < rows; ++r) {
      const T* v = na->value.ptr() + r * d;
      const T* g = n.grad.ptr() + r * d;
      T* dv = na->grad.ptr() + r * d;
      T ss = T(0), dot = T(0);
      for (int64_t i = 0; i < d; ++i) {
        ss += v[i] * v[i];
        dot += g[i] * v[i];
      }
      T nr = std::sqrt(ss);
      T den = (T(1) + ss) * (nr + eps);
      T f = ss / den;
      // d f / d ss, written so every term vanishes cleanly as ss -> 0
      T fp = (den - ss * (nr + eps) - nr * (T(1) + ss) / T(2)) / (den * den);
      for (int64_t i = 0; i < d; ++i) dv[i] += f * g[i] + T(2) * fp * dot * v[i];
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Value<T> reshape(Value<T> a, Shape s) {
  if (shape_numel(s) != a.numel())
    throw ShapeMismatch("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
  Tensor<T> out(std::move(s), a.val().data);
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t i = 0; i < n.grad.numel(); ++i) na->grad[i] += n.grad[i];
  });
}

template <typename T>
Value<T> permute(Value<T> a, std::vector<int> axes) {
  const Tensor<T>& av = a.val();
  int r = av.rank();
  if (static_cast<int>(axes.size()) != r) throw ShapeMismatch("permute axes rank mismatch");
  Shape os(static_cast<size_t>(r));
  Shape ast = row_strides(av.shape);
  std::vector<int64_t> sa(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    os[static_cast<size_t>(i)] = av.shape[static_cast<size_t>(axes[static_cast<size_t>(i)])];
    sa[static_cast<size_t>(i)] = ast[static_cast<size_t>(axes[static_cast<size_t>(i)])];
  }
  Tensor<T> out(os);
  std::vector<int64_t> zero(static_cast<size_t>(r), 0);
  for_each_bcast(os, sa, zero, [&](int64_t o, int64_t ia, int64_t) { out[o] = av[ia]; });
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, os, sa, zero](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for_each_bcast(os, sa, zero, [&](int64_t o, int64_t ia, int64_t) { na->grad[ia] += n.grad[o]; });
  });
}

template <typename T>
Value<T> broadcast_to(Value<T> a, const Shape& target) {
  const Tensor<T>& av = a.val();
  Shape os = broadcast_shape(av.shape, target);
  if (os != target)
    throw ShapeMismatch("broadcast_to " + shape_str(av.shape) + " -> " + shape_str(target));
  auto sa = broadcast_strides(av.shape, os);
  std::vector<int64_t> zero(os.size(), 0);
  Tensor<T> out(os);
  for_each_bcast(os, sa, zero, [&](int64_t o, int64_t ia, int64_t) { out[o] = av[ia]; });
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, os, sa, zero](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for_each_bcast(os, sa, zero, [&](int64_t o, int64_t ia, int64_t) { na->grad[ia] += n.grad[o]; });
  });
}

// Gather along `axis`; indices may repeat.
template <typename T>
Value<T> index_select(Value<T> a, int axis, std::vector<int64_t> idx) {
  const Tensor<T>& av = a.val();
  int r = av.rank();
  if (axis < 0) axis += r;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= av.shape[static_cast<size_t>(i)];
  int64_t len = av.shape[static_cast<size_t>(axis)];
  for (int64_t j : idx)
    if (j < 0 || j >= len) throw ShapeMismatch("index_select index out of range");
  Shape os = av.shape;
  os[static_cast<size_t>(axis)] = static_cast<int64_t>(idx.size());
  Tensor<T> out(os);
  int64_t ni = static_cast<int64_t>(idx.size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < ni; ++j)
      std::copy_n(av.ptr() + (o * len + idx[static_cast<size_t>(j)]) * inner, inner,
                  out.ptr() + (o * ni + j) * inner);
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na},
                        [na, outer, inner, len, ni, idx = std::move(idx)](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < ni; ++j) {
        const T* g = n.grad.ptr() + (o * ni + j) * inner;
        T* dst = na->grad.ptr() + (o * len + idx[static_cast<size_t>(j)]) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
  });
}

template <typename T>
Value<T> concat(const std::vector<Value<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeMismatch("concat of nothing");
  const Tensor<T>& first = parts[0].val();
  int r = first.rank();
  if (axis < 0) axis += r;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= first.shape[static_cast<size_t>(i)];
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.val().shape;
    for (int i = 0; i < r; ++i)
      if (i != axis && s[static_cast<size_t>(i)] != first.shape[static_cast<size_t>(i)])
        throw ShapeMismatch("concat shape mismatch");
    total += s[static_cast<size_t>(axis)];
  }
  Shape os = first.shape;
  os[static_cast<size_t>(axis)] = total;
  Tensor<T> out(os);
  std::vector<Node<T>*> ps;
  std::vector<int64_t> lens;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t l = p.val().shape[static_cast<size_t>(axis)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.val().ptr() + o * l * inner, l * inner,
                  out.ptr() + (o * total + off) * inner);
    ps.push_back(p.node());
    lens.push_back(l);
    off += l;
  }
  Tape<T>* tp = parts[0].tape();
  Node<T>& n = *tp->make(std::move(out), {}, nullptr).node();
  // concat has a variable parent list; attach requires_grad/backward manually
  bool req = false;
  if (tp->grad_enabled())
    for (Node<T>* p : ps) req = req || p->requires_grad;
  n.requires_grad = req;
  if (req) {
    n.backward = [ps, lens, outer, inner, total](Node<T>& node) {
      int64_t off2 = 0;
      for (size_t pi = 0; pi < ps.size(); ++pi) {
        int64_t l = lens[pi];
        if (ps[pi]->requires_grad) {
          Tape<T>::ensure_grad(*ps[pi]);
          for (int64_t o = 0; o < outer; ++o) {
            const T* g = node.grad.ptr() + (o * total + off2) * inner;
            T* dst = ps[pi]->grad.ptr() + o * l * inner;
            for (int64_t i = 0; i < l * inner; ++i) dst[i] += g[i];
          }
        }
        off2 += l;
      }
    };
  }
  return Value<T>(&n, tp);
}

template <typename T>
Value<T> slice_axis(Value<T> a, int axis, int64_t start, int64_t len) {
  const Tensor<T>& av = a.val();
  int r = av.rank();
  if (axis < 0) axis += r;
  int64_t dim = av.shape[static_cast<size_t>(axis)];
  if (start < 0 || len < 0 || start + len > dim) throw ShapeMismatch("slice out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= av.shape[static_cast<size_t>(i)];
  Shape os = av.shape;
  os[static_cast<size_t>(axis)] = len;
  Tensor<T> out(os);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(av.ptr() + (o * dim + start) * inner, len * inner, out.ptr() + o * len * inner);
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, outer, inner, dim, start, len](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t o = 0; o < outer; ++o) {
      const T* g = n.grad.ptr() + o * len * inner;
      T* dst = na->grad.ptr() + (o * dim + start) * inner;
      for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
    }
  });
}

// out[r] = a[r, idx[r]] for a [R, C]; used to pick per-row targets.
template <typename T>
Value<T> take_per_row(Value<T> a, std::vector<int64_t> idx) {
  const Tensor<T>& av = a.val();
  if (av.rank() != 2) throw ShapeMismatch("take_per_row needs rank 2");
  int64_t rows = av.dim(0), cols = av.dim(1);
  if (static_cast<int64_t>(idx.size()) != rows) throw ShapeMismatch("take_per_row index count");
  Tensor<T> out(Shape{rows});
  for (int64_t r = 0; r < rows; ++r) {
    if (idx[static_cast<size_t>(r)] < 0 || idx[static_cast<size_t>(r)] >= cols)
      throw ShapeMismatch("take_per_row index out of range");
    out[r] = av[r * cols + idx[static_cast<size_t>(r)]];
  }
  Node<T>* na = a.node();
  return a.tape()->make(std::move(out), {na}, [na, rows, cols, idx = std::move(idx)](Node<T>& n) {
    Tape<T>::ensure_grad(*na);
    for (int64_t r = 0; r < rows; ++r)
      na->grad[r * cols + idx[static_cast<size_t>(r)]] += n.grad[r];
  });
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace rpmlab
