#pragma once

// Reverse-mode differentiation over BasicTensor values.
//
// Every op returns a Var whose node records its parents and a closure that
// pushes the output gradient back into them. backward() runs the closures in
// reverse topological order, visiting each node once. Leaf gradients
// accumulate across backward() calls; interior gradients are rebuilt each time.
// A tape is single-threaded: build and differentiate a graph on one thread.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "flood/error.hpp"
#include "flood/kernels.hpp"
#include "flood/tensor.hpp"

namespace flood::ag {

template <typename T>
struct Node {
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  BasicTensor<T>& grad_ref() {
    if (grad.empty()) grad = BasicTensor<T>(value.shape(), T{0});
    return grad;
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// Suspends graph recording on this thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
class Var {
public:
  Var() = default;
  explicit Var(BasicTensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const BasicTensor<T>& value() const { return node_->value; }
  BasicTensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  /// Gradient; zeros of the value's shape if nothing has been accumulated.
  const BasicTensor<T>& grad() const { return node_->grad_ref(); }
  void zero_grad() { node_->grad = BasicTensor<T>{}; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  T item() const {
    if (value().numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return value()[0];
  }

private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(BasicTensor<T> v) {
  return Var<T>(std::move(v), false);
}

template <typename T>
Var<T> parameter(BasicTensor<T> v) {
  return Var<T>(std::move(v), true);
}

namespace detail {

template <typename T>
Var<T> make_op(BasicTensor<T> value, std::vector<Var<T>> parents,
               std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->leaf = false;
  bool req = false;
  for (const auto& p : parents) req = req || p.requires_grad();
  if (req && grad_enabled()) {
    node->requires_grad = true;
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// b either matches a exactly or matches a's trailing dimensions, in which
// case it is repeated over a's leading rows.
inline std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return shape_numel(a);
  if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin()))
    return shape_numel(b);
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

} // namespace detail

/// Differentiates a scalar loss. Each reachable node is visited once.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1)
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (!n->leaf) n->grad = BasicTensor<T>{};
  loss.node()->grad_ref()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a viewed as rows of length k, times b[k x n]. Output keeps a's leading shape.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (b.shape().size() != 2) throw ShapeError("matmul: rhs must be 2-D, got " + shape_str(b.shape()));
  const std::size_t k = a.value().cols();
  if (k != b.shape()[0])
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.value().rows(), n = b.shape()[1];
  Shape out_shape = a.shape();
  out_shape.back() = n;
  BasicTensor<T> out(out_shape);
  kernels::matmul(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  return detail::make_op<T>(std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    const auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      // ga[i, :] += g[i, :] b^T, accumulated along p so the inner loop vectorises.
      auto& ga = pa.grad_ref();
      const auto& bv = pb.value;
      std::vector<double> bt(n * k), acc(k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bv[p * n + j];
      for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          const double* br = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) acc[p] += gij * br[p];
        }
        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += static_cast<T>(acc[p]);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_ref();
      const auto& av = pa.value;
      std::vector<double> acc(k * n, 0.0), grow(n);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) grow[j] = g[i * n + j];
        for (std::size_t p = 0; p < k; ++p) {
          const double a_ip = av[i * k + p];
          double* ar = acc.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) ar[j] += a_ip * grow[j];
        }
      }
      for (std::size_t q = 0; q < k * n; ++q) gb[q] += static_cast<T>(acc[q]);
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// c = a (op) b with b possibly broadcast; da = dc * ca, db = sum(dc * cb).
template <typename T, typename Fwd, typename Da, typename Db>
Var<T> binary(const Var<T>& a, const Var<T>& b, const char* name, Fwd fwd, Da da, Db db) {
  const std::size_t period = broadcast_period(a.shape(), b.shape(), name);
  const auto& av = a.value();
  const auto& bv = b.value();
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i], bv[i % period]);
  return make_op<T>(std::move(out), {a, b}, [period, da, db](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_ref();
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[i] += static_cast<T>(g[i] * da(pa.value[i], pb.value[i % period]));
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_ref();
      std::vector<double> acc(period, 0.0);
      for (std::size_t i = 0; i < g.numel(); ++i)
        acc[i % period] += static_cast<double>(g[i]) * db(pa.value[i], pb.value[i % period]);
      for (std::size_t q = 0; q < period; ++q) gb[q] += static_cast<T>(acc[q]);
    }
  });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.value();
  BasicTensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(av[i]);
  return make_op<T>(std::move(out), {a}, [deriv](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& ga = pa.grad_ref();
    for (std::size_t i = 0; i < ga.numel(); ++i)
      ga[i] += static_cast<T>(self.grad[i] * deriv(pa.value[i], self.value[i]));
  });
}

} // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return 1.0; }, [](T, T) { return 1.0; });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return 1.0; }, [](T, T) { return -1.0; });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return static_cast<double>(y); },
      [](T x, T) { return static_cast<double>(x); });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  return detail::unary<T>(
      a, [s](T x) { return static_cast<T>(x * s); }, [s](T, T) { return s; });
}

/// exp with the input clamped at 30; the gradient is zero above the clamp.
template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return kernels::clamped_exp(x); },
      [](T x, T y) { return x > kernels::kExpClamp ? 0.0 : static_cast<double>(y); });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary<T>(
      a, [](T x) { return kernels::silu(x); },
      [](T x, T) {
        const double s = kernels::sigmoid(static_cast<double>(x));
        return s * (1.0 + x * (1.0 - s));
      });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value(), false);
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last dimension

template <typename T>
Var<T> layer_norm(const Var<T>& a, double eps = 1e-5) {
  const std::size_t n = a.value().cols(), rows = a.value().rows();
  BasicTensor<T> out(a.shape());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r)
    inv[r] = kernels::layer_norm_row(a.value().data().data() + r * n, out.data().data() + r * n, n, eps);
  return detail::make_op<T>(std::move(out), {a}, [n, rows, inv = std::move(inv)](Node<T>& self) {
    auto& ga = self.parents[0]->grad_ref();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[o + j];
        mgy += static_cast<double>(g[o + j]) * y[o + j];
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        ga[o + j] += static_cast<T>(inv[r] * (g[o + j] - mg - y[o + j] * mgy));
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a) {
  if (a.value().empty()) throw ShapeError("softmax over an empty dimension");
  const std::size_t n = a.value().cols(), rows = a.value().rows();
  BasicTensor<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t o = r * n;
    double mx = x[o];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(x[o + j]));
    double s = 0.0;
    std::vector<double> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(std::min(x[o + j] - mx, kernels::kExpClamp));
      s += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[o + j] = static_cast<T>(e[j] / s);
  }
  return detail::make_op<T>(std::move(out), {a}, [n, rows](Node<T>& self) {
    auto& ga = self.parents[0]->grad_ref();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t o = r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[o + j]) * y[o + j];
      for (std::size_t j = 0; j < n; ++j) ga[o + j] += static_cast<T>(y[o + j] * (g[o + j] - dot));
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  double s = 0.0;
  for (T v : a.value().data()) s += v;
  return detail::make_op<T>(BasicTensor<T>::scalar(static_cast<T>(s)), {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->grad_ref();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
  });
}

/// Mean squared difference over all elements.
template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.value().numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    s += d * d;
  }
  return detail::make_op<T>(BasicTensor<T>::scalar(static_cast<T>(s / n)), {a, b}, [n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < n; ++i) {
      const double d = 2.0 * g * (static_cast<double>(pa.value[i]) - pb.value[i]) / static_cast<double>(n);
      if (pa.requires_grad) pa.grad_ref()[i] += static_cast<T>(d);
      if (pb.requires_grad) pb.grad_ref()[i] -= static_cast<T>(d);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  BasicTensor<T> out = a.value().reshaped(std::move(shape));
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& ga = self.parents[0]->grad_ref();
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
  });
}

/// Selects rows (last-dim vectors) of a by index; indices may repeat.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::uint32_t> idx) {
  const std::size_t c = a.value().cols(), r = a.value().rows();
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  for (auto i : idx)
    if (i >= r) throw ShapeError("gather_rows: row " + std::to_string(i) + " out of " + std::to_string(r));
  BasicTensor<T> out({idx.size(), c});
  for (std::size_t q = 0; q < idx.size(); ++q)
    std::copy_n(a.value().data().begin() + idx[q] * c, c, out.data().begin() + q * c);
  return detail::make_op<T>(std::move(out), {a}, [c, idx = std::move(idx)](Node<T>& self) {
    auto& ga = self.parents[0]->grad_ref();
    for (std::size_t q = 0; q < idx.size(); ++q)
      for (std::size_t j = 0; j < c; ++j) ga[idx[q] * c + j] += self.grad[q * c + j];
  });
}

/// Stacks the rows of a over the rows of b.
template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  const std::size_t c = a.value().cols();
  if (b.value().cols() != c)
    throw ShapeError("concat_rows: widths differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t ra = a.value().rows(), rb = b.value().rows();
  BasicTensor<T> out({ra + rb, c});
  std::copy(a.value().data().begin(), a.value().data().end(), out.data().begin());
  std::copy(b.value().data().begin(), b.value().data().end(), out.data().begin() + ra * c);
  return detail::make_op<T>(std::move(out), {a, b}, [ra, rb, c](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.grad_ref();
      for (std::size_t i = 0; i < ra * c; ++i) ga[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_ref();
      for (std::size_t i = 0; i < rb * c; ++i) gb[i] += self.grad[ra * c + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// For each query row, the key rows it may attend to. Keys not listed get zero
/// weight exactly; they never enter the softmax.
using KeyLists = std::vector<std::vector<std::uint32_t>>;

/// Multi-head scaled dot-product attention restricted by per-query key lists.
/// q[N x d], k[M x d], v[M x d] -> [N x d]. A query with an empty list outputs 0.
/// If `weights_out` is given it receives, per head, a dense N x M matrix of
/// post-softmax weights (zero where masked).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const KeyLists& keys,
                 std::size_t heads, std::vector<BasicTensor<T>>* weights_out = nullptr) {
  const std::size_t d = q.value().cols(), nq = q.value().rows(), nk = k.value().rows();
  if (k.value().cols() != d || v.value().cols() != d || v.value().rows() != nk)
    throw ShapeError("attention: q/k/v shapes disagree");
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (keys.size() != nq) throw ShapeError("attention: key lists must have one entry per query");
  for (const auto& list : keys)
    for (auto j : list)
      if (j >= nk) throw ShapeError("attention: key index out of range");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // weights[i][h * |keys[i]| + l]
  std::vector<std::vector<double>> weights(nq);
  BasicTensor<T> out({nq, d}, T{0});
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (weights_out) weights_out->assign(heads, BasicTensor<T>({nq, nk}, T{0}));
  for (std::size_t i = 0; i < nq; ++i) {
    const auto& list = keys[i];
    const std::size_t L = list.size();
    weights[i].assign(heads * L, 0.0);
    if (L == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      double* w = weights[i].data() + h * L;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < L; ++l) {
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c)
          s += static_cast<double>(qv[i * d + c]) * kv[list[l] * d + c];
        w[l] = s * inv_sqrt;
        mx = std::max(mx, w[l]);
      }
      double z = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        w[l] = std::exp(w[l] - mx);
        z += w[l];
      }
      for (std::size_t l = 0; l < L; ++l) w[l] /= z;
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        double acc = 0.0;
        for (std::size_t l = 0; l < L; ++l) acc += w[l] * vv[list[l] * d + c];
        out[i * d + c] = static_cast<T>(acc);
      }
      if (weights_out)
        for (std::size_t l = 0; l < L; ++l) (*weights_out)[h][i * nk + list[l]] = static_cast<T>(w[l]);
    }
  }

  return detail::make_op<T>(
      std::move(out), {q, k, v},
      [keys, weights = std::move(weights), heads, dh, d, inv_sqrt](Node<T>& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        const auto& g = self.grad;
        const std::size_t nq = keys.size();
        const std::size_t nk = pk.value.rows();
        std::vector<double> gq(nq * d, 0.0), gk(nk * d, 0.0), gv(nk * d, 0.0);
        std::vector<double> dw;
        for (std::size_t i = 0; i < nq; ++i) {
          const auto& list = keys[i];
          const std::size_t L = list.size();
          if (L == 0) continue;
          dw.assign(L, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* w = weights[i].data() + h * L;
            double wdot = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
              double s = 0.0;
              for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                const double gi = g[i * d + c];
                s += gi * pv.value[list[l] * d + c];
                gv[list[l] * d + c] += w[l] * gi;
              }
              dw[l] = s;
              wdot += w[l] * s;
            }
            for (std::size_t l = 0; l < L; ++l) {
              const double ds = w[l] * (dw[l] - wdot) * inv_sqrt;
              for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
                gq[i * d + c] += ds * pk.value[list[l] * d + c];
                gk[list[l] * d + c] += ds * pq.value[i * d + c];
              }
            }
          }
        }
        if (pq.requires_grad) {
          auto& ga = pq.grad_ref();
          for (std::size_t x = 0; x < gq.size(); ++x) ga[x] += static_cast<T>(gq[x]);
        }
        if (pk.requires_grad) {
          auto& ga = pk.grad_ref();
          for (std::size_t x = 0; x < gk.size(); ++x) ga[x] += static_cast<T>(gk[x]);
        }
        if (pv.requires_grad) {
          auto& ga = pv.grad_ref();
          for (std::size_t x = 0; x < gv.size(); ++x) ga[x] += static_cast<T>(gv[x]);
        }
      });
}

} // namespace flood::ag
