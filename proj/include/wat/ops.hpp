#pragma once

// Differentiable operations over wat::BasicTensor. Every reduction
// accumulates in a fixed left-to-right order so repeated executions are
// bitwise identical.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wat/tensor.hpp"

namespace wat {

using TokenId = std::int32_t;

namespace detail {

template <class T>
std::size_t norm_axis(const BasicTensor<T>& x, int axis) {
  const int r = static_cast<int>(x.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  return static_cast<std::size_t>(a);
}

struct AxisView {
  std::size_t outer, len, inner;
};

inline AxisView axis_view(const Shape& s, std::size_t a) {
  AxisView v{1, s[a], 1};
  for (std::size_t i = 0; i < a; ++i) v.outer *= s[i];
  for (std::size_t i = a + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class T>
T sigmoid_scalar(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[..., m, k] x w[k, n] -> [..., m, n]. An optional bias[n] is added to
/// every output row.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& a, const BasicTensor<T>& w,
                      const BasicTensor<T>* bias = nullptr) {
  if (w.rank() != 2 || a.rank() < 1 || a.dim(-1) != w.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), rows = a.numel() / k;
  if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != n)) {
    throw DimensionError("bias shape " + shape_str(bias->shape()) + " does not match " +
                         std::to_string(n) + " outputs");
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(rows * n, T(0));
  const T* A = a.data().data();
  const T* W = w.data().data();
  for (std::size_t i = 0; i < rows; ++i) {
    T* o = out.data() + i * n;
    const T* ar = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ar[p];
      const T* wr = W + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * wr[j];
    }
    if (bias != nullptr) {
      const T* b = bias->data().data();
      for (std::size_t j = 0; j < n; ++j) o[j] += b[j];
    }
  }
  auto an = a.node(), wn = w.node();
  detail::NodePtr<T> bn = bias != nullptr ? bias->node() : nullptr;
  return detail::make_result<T>(
      bias ? "linear" : "matmul", std::move(out_shape), std::move(out), {&a, &w, bias},
      [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          if (T* da = detail::grad_sink(an)) {
            const T* Wd = wn->data.data();
            for (std::size_t i = 0; i < rows; ++i) {
              const T* gr = g.data() + i * n;
              T* dr = da + i * k;
              for (std::size_t p = 0; p < k; ++p) {
                const T* wr = Wd + p * n;
                T s = T(0);
                for (std::size_t j = 0; j < n; ++j) s += gr[j] * wr[j];
                dr[p] += s;
              }
            }
          }
          if (T* dw = detail::grad_sink(wn)) {
            const T* Ad = an->data.data();
            for (std::size_t i = 0; i < rows; ++i) {
              const T* gr = g.data() + i * n;
              const T* ar = Ad + i * k;
              for (std::size_t p = 0; p < k; ++p) {
                const T av = ar[p];
                T* dwr = dw + p * n;
                for (std::size_t j = 0; j < n; ++j) dwr[j] += av * gr[j];
              }
            }
          }
          if (T* db = detail::grad_sink(bn)) {
            for (std::size_t i = 0; i < rows; ++i) {
              const T* gr = g.data() + i * n;
              for (std::size_t j = 0; j < n; ++j) db[j] += gr[j];
            }
          }
        };
      });
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return linear(a, b, static_cast<const BasicTensor<T>*>(nullptr));
}

/// Batched product over equal leading dims: a[..., m, k] x b[..., k, n], or
/// with `transpose_b` b is given as [..., n, k].
template <class T>
BasicTensor<T> bmm(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw DimensionError("bmm batch mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw DimensionError("bmm inner mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<T> out(batch * m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t z = 0; z < batch; ++z) {
    const T* Az = A + z * m * k;
    const T* Bz = B + z * k * n;
    T* Oz = out.data() + z * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      T* o = Oz + i * n;
      const T* ar = Az + i * k;
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) {
          const T* br = Bz + j * k;
          T s = T(0);
          for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
          o[j] = s;
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = ar[p];
          const T* br = Bz + p * n;
          for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
        }
      }
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "bmm", std::move(out_shape), std::move(out), {&a, &b}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* da = detail::grad_sink(an);
          T* db = detail::grad_sink(bn);
          const T* Ad = an->data.data();
          const T* Bd = bn->data.data();
          for (std::size_t z = 0; z < batch; ++z) {
            const T* Gz = g.data() + z * m * n;
            const T* Az = Ad + z * m * k;
            const T* Bz = Bd + z * k * n;
            if (da != nullptr) {
              T* dAz = da + z * m * k;
              for (std::size_t i = 0; i < m; ++i) {
                const T* gr = Gz + i * n;
                T* dr = dAz + i * k;
                if (transpose_b) {
                  for (std::size_t j = 0; j < n; ++j) {
                    const T gv = gr[j];
                    const T* br = Bz + j * k;
                    for (std::size_t p = 0; p < k; ++p) dr[p] += gv * br[p];
                  }
                } else {
                  for (std::size_t p = 0; p < k; ++p) {
                    const T* br = Bz + p * n;
                    T s = T(0);
                    for (std::size_t j = 0; j < n; ++j) s += gr[j] * br[j];
                    dr[p] += s;
                  }
                }
              }
            }
            if (db != nullptr) {
              T* dBz = db + z * k * n;
              for (std::size_t i = 0; i < m; ++i) {
                const T* gr = Gz + i * n;
                const T* ar = Az + i * k;
                if (transpose_b) {
                  for (std::size_t j = 0; j < n; ++j) {
                    const T gv = gr[j];
                    T* dbr = dBz + j * k;
                    for (std::size_t p = 0; p < k; ++p) dbr[p] += gv * ar[p];
                  }
                } else {
                  for (std::size_t p = 0; p < k; ++p) {
                    const T av = ar[p];
                    T* dbr = dBz + p * n;
                    for (std::size_t j = 0; j < n; ++j) dbr[j] += av * gr[j];
                  }
                }
              }
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class BinaryOp { add, sub, mul };

/// a (op) b where b's shape equals a's or is a suffix of it (b is repeated
/// along a's leading dims). add and mul also accept a as the suffix.
template <class T>
BasicTensor<T> binary(BinaryOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (op != BinaryOp::sub && a.numel() < b.numel() && detail::is_suffix(a.shape(), b.shape())) {
    return binary(op, b, a);
  }
  if (!detail::is_suffix(b.shape(), a.shape())) {
    throw DimensionError("shapes not broadcastable: " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.numel(), m = b.numel();
  const T* A = a.data().data();
  const T* B = b.data().data();
  std::vector<T> out(n);
  for (std::size_t base = 0; base < n; base += m) {
    for (std::size_t j = 0; j < m; ++j) {
      const T x = A[base + j], y = B[j];
      out[base + j] = op == BinaryOp::add ? x + y : op == BinaryOp::sub ? x - y : x * y;
    }
  }
  auto an = a.node(), bn = b.node();
  const char* name = op == BinaryOp::add ? "add" : op == BinaryOp::sub ? "sub" : "mul";
  return detail::make_result<T>(name, a.shape(), std::move(out), {&a, &b},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    T* da = detail::grad_sink(an);
                                    T* db = detail::grad_sink(bn);
                                    const T* Ad = an->data.data();
                                    const T* Bd = bn->data.data();
                                    for (std::size_t base = 0; base < n; base += m) {
                                      for (std::size_t j = 0; j < m; ++j) {
                                        const T gv = g[base + j];
                                        if (op == BinaryOp::mul) {
                                          if (da) da[base + j] += gv * Bd[j];
                                          if (db) db[j] += gv * Ad[base + j];
                                        } else {
                                          if (da) da[base + j] += gv;
                                          if (db) db[j] += op == BinaryOp::add ? gv : -gv;
                                        }
                                      }
                                    }
                                  };
                                });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(BinaryOp::add, a, b);
}
template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(BinaryOp::sub, a, b);
}
template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(BinaryOp::mul, a, b);
}

namespace detail {

/// Pointwise map whose derivative is expressed through (input, output).
template <class T, class F, class DF>
BasicTensor<T> unary(const char* name, const BasicTensor<T>& x, F f, DF df) {
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
  auto xn = x.node();
  return make_result<T>(name, x.shape(), std::move(out), {&x}, [=](const NodePtr<T>& on) {
    std::weak_ptr<TensorNode<T>> weak_out = on;
    return [=](const std::vector<T>& g) {
      T* dx = grad_sink(xn);
      if (!dx) return;
      auto o = weak_out.lock();
      const T* Xd = xn->data.data();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * df(Xd[i], o->data[i]);
    };
  });
}

}  // namespace detail

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return detail::unary("sigmoid", x, detail::sigmoid_scalar<T>,
                       [](T, T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return detail::unary("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

/// alpha * x + beta.
template <class T>
BasicTensor<T> affine(const BasicTensor<T>& x, double alpha, double beta) {
  const T a = static_cast<T>(alpha), b = static_cast<T>(beta);
  return detail::unary("affine", x, [=](T v) { return a * v + b; }, [=](T, T) { return a; });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, double s) {
  return affine(x, s, 0.0);
}

/// gate * a + (1 - gate) * b, all three the same shape.
template <class T>
BasicTensor<T> gated_blend(const BasicTensor<T>& gate, const BasicTensor<T>& a,
                           const BasicTensor<T>& b) {
  if (gate.shape() != a.shape() || a.shape() != b.shape()) {
    throw DimensionError("gated_blend shapes differ: " + shape_str(gate.shape()) + ", " +
                         shape_str(a.shape()) + ", " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  const T* G = gate.data().data();
  const T* A = a.data().data();
  const T* B = b.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = G[i] * A[i] + (T(1) - G[i]) * B[i];
  auto gn = gate.node(), an = a.node(), bn = b.node();
  return detail::make_result<T>(
      "gated_blend", a.shape(), std::move(out), {&gate, &a, &b}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dg = detail::grad_sink(gn);
          T* da = detail::grad_sink(an);
          T* db = detail::grad_sink(bn);
          const T* Gd = gn->data.data();
          const T* Ad = an->data.data();
          const T* Bd = bn->data.data();
          for (std::size_t i = 0; i < n; ++i) {
            if (dg) dg[i] += g[i] * (Ad[i] - Bd[i]);
            if (da) da[i] += g[i] * Gd[i];
            if (db) db[i] += g[i] * (T(1) - Gd[i]);
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_result<T>("sum", Shape{}, {s}, {&x}, [=](const detail::NodePtr<T>&) {
    return [=](const std::vector<T>& g) {
      if (T* dx = detail::grad_sink(xn)) {
        for (std::size_t i = 0; i < xn->data.size(); ++i) dx[i] += g[0];
      }
    };
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// sum_i weights[i] * x[i], accumulated in double. The gradient checker uses
/// it to project a tensor onto a fixed random direction.
template <class T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& x, std::span<const double> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum needs " + std::to_string(x.numel()) + " weights");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * static_cast<double>(x.data()[i]);
  auto xn = x.node();
  std::vector<double> w(weights.begin(), weights.end());
  return detail::make_result<T>("weighted_sum", Shape{}, {static_cast<T>(s)}, {&x},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    if (T* dx = detail::grad_sink(xn)) {
                                      for (std::size_t i = 0; i < w.size(); ++i)
                                        dx[i] += g[0] * static_cast<T>(w[i]);
                                    }
                                  };
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result<T>("reshape", std::move(shape), x.to_vector(), {&x},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    if (T* dx = detail::grad_sink(xn)) {
                                      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                                    }
                                  };
                                });
}

/// Positions start, start+step, ... (`count` of them) along `axis`.
template <class T>
BasicTensor<T> strided_slice(const BasicTensor<T>& x, int axis, std::size_t start,
                             std::size_t count, std::size_t step = 1) {
  const std::size_t a = detail::norm_axis(x, axis);
  const auto v = detail::axis_view(x.shape(), a);
  if (step == 0 || (count > 0 && start + (count - 1) * step >= v.len)) {
    throw DimensionError("slice [" + std::to_string(start) + " : +" + std::to_string(count) +
                         " step " + std::to_string(step) + "] out of range for axis of length " +
                         std::to_string(v.len));
  }
  Shape out_shape = x.shape();
  out_shape[a] = count;
  std::vector<T> out(v.outer * count * v.inner);
  const T* X = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t c = 0; c < count; ++c) {
      const T* src = X + (o * v.len + start + c * step) * v.inner;
      std::copy(src, src + v.inner, out.data() + (o * count + c) * v.inner);
    }
  }
  auto xn = x.node();
  return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {&x},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    T* dx = detail::grad_sink(xn);
                                    if (!dx) return;
                                    for (std::size_t o = 0; o < v.outer; ++o) {
                                      for (std::size_t c = 0; c < count; ++c) {
                                        T* dst = dx + (o * v.len + start + c * step) * v.inner;
                                        const T* src = g.data() + (o * count + c) * v.inner;
                                        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
                                      }
                                    }
                                  };
                                });
}

template <class T>
BasicTensor<T> narrow(const BasicTensor<T>& x, int axis, std::size_t start, std::size_t length) {
  return strided_slice(x, axis, start, length, 1);
}

/// Concatenation of `parts` along `axis`; all other dims must agree.
template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw PreconditionError("concat of zero tensors");
  const std::size_t a = detail::norm_axis(parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[a] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out_shape.size()) {
      throw DimensionError("concat rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != a && s[i] != out_shape[i]) {
        throw DimensionError("concat dim mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(s));
      }
    }
    out_shape[a] += s[a];
  }
  const auto ov = detail::axis_view(out_shape, a);
  std::vector<T> out(numel_of(out_shape));
  std::vector<std::size_t> lens, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[a];
    const T* P = p.data().data();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy(P + o * len * ov.inner, P + (o + 1) * len * ov.inner,
                out.data() + (o * ov.len + off) * ov.inner);
    }
    lens.push_back(len);
    offsets.push_back(off);
    off += len;
  }
  std::vector<detail::NodePtr<T>> nodes;
  const BasicTensor<T>* probe = nullptr;  // any part that takes gradients
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    if (p.requires_grad()) probe = &p;
  }
  return detail::make_result<T>(
      "concat", std::move(out_shape), std::move(out), {probe}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          for (std::size_t k = 0; k < nodes.size(); ++k) {
            T* dp = detail::grad_sink(nodes[k]);
            if (!dp) continue;
            const std::size_t len = lens[k];
            for (std::size_t o = 0; o < ov.outer; ++o) {
              const T* src = g.data() + (o * ov.len + offsets[k]) * ov.inner;
              T* dst = dp + o * len * ov.inner;
              for (std::size_t i = 0; i < len * ov.inner; ++i) dst[i] += src[i];
            }
          }
        };
      });
}

template <class T>
BasicTensor<T> concat(const BasicTensor<T>& a, const BasicTensor<T>& b, int axis) {
  return concat(std::vector<BasicTensor<T>>{a, b}, axis);
}

/// [..., d1] ++ [..., d2] -> [..., d1 + d2].
template <class T>
BasicTensor<T> concat_last(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_last leading dims differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  return concat(a, b, -1);
}

/// Repeats each slice along `axis` `times` times consecutively
/// ([a, b] -> [a, a, b, b] for times = 2).
template <class T>
BasicTensor<T> repeat_interleave(const BasicTensor<T>& x, int axis, std::size_t times) {
  const std::size_t a = detail::norm_axis(x, axis);
  const auto v = detail::axis_view(x.shape(), a);
  Shape out_shape = x.shape();
  out_shape[a] *= times;
  std::vector<T> out(x.numel() * times);
  const T* X = x.data().data();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.len; ++l)
      for (std::size_t r = 0; r < times; ++r)
        std::copy(X + (o * v.len + l) * v.inner, X + (o * v.len + l + 1) * v.inner,
                  out.data() + ((o * v.len + l) * times + r) * v.inner);
  auto xn = x.node();
  return detail::make_result<T>(
      "repeat_interleave", std::move(out_shape), std::move(out), {&x},
      [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dx = detail::grad_sink(xn);
          if (!dx) return;
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t l = 0; l < v.len; ++l)
              for (std::size_t r = 0; r < times; ++r) {
                const T* src = g.data() + ((o * v.len + l) * times + r) * v.inner;
                T* dst = dx + (o * v.len + l) * v.inner;
                for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
              }
        };
      });
}

/// [a, b, c, d] -> [a, c, b, d].
template <class T>
BasicTensor<T> swap_axes_12(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("swap_axes_12 needs rank 4, got " + shape_str(x.shape()));
  const std::size_t A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        std::copy(X + ((a * B + b) * C + c) * D, X + ((a * B + b) * C + c + 1) * D,
                  out.data() + ((a * C + c) * B + b) * D);
  auto xn = x.node();
  return detail::make_result<T>("swap_axes_12", Shape{A, C, B, D}, std::move(out), {&x},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    T* dx = detail::grad_sink(xn);
                                    if (!dx) return;
                                    for (std::size_t a = 0; a < A; ++a)
                                      for (std::size_t b = 0; b < B; ++b)
                                        for (std::size_t c = 0; c < C; ++c) {
                                          const T* src = g.data() + ((a * C + c) * B + b) * D;
                                          T* dst = dx + ((a * B + b) * C + c) * D;
                                          for (std::size_t i = 0; i < D; ++i) dst[i] += src[i];
                                        }
                                  };
                                });
}

// ---------------------------------------------------------------------------
// Sequence-axis helpers over [B, n, d]
// ---------------------------------------------------------------------------

/// Even/odd split of the time axis. `left` holds positions 0, 2, 4, ...,
/// `right` holds 1, 3, 5, ...; when n is odd the last position goes to
/// `carry` and is in neither half.
template <class T>
struct StrideSplit {
  BasicTensor<T> left;
  BasicTensor<T> right;
  std::optional<BasicTensor<T>> carry;
};

template <class T>
StrideSplit<T> stride_split(const BasicTensor<T>& h) {
  if (h.rank() != 3) throw DimensionError("stride_split needs [B, n, d], got " + shape_str(h.shape()));
  const std::size_t n = h.dim(1);
  if (n < 2) throw PreconditionError("stride_split needs n >= 2, got n = " + std::to_string(n));
  const std::size_t half = n / 2;
  StrideSplit<T> s{strided_slice(h, 1, 0, half, 2), strided_slice(h, 1, 1, half, 2), std::nullopt};
  if (n % 2 == 1) s.carry = narrow(h, 1, n - 1, 1);
  return s;
}

/// x[:, t, :] as [B, d].
template <class T>
BasicTensor<T> select_time(const BasicTensor<T>& x, std::size_t t) {
  return reshape(narrow(x, 1, t, 1), Shape{x.dim(0), x.dim(2)});
}

/// out[:, 0] = 0 and out[:, i] = mean(s[:, 0..i-1]) for s of shape [B, C, d].
template <class T>
BasicTensor<T> cumulative_mean_shifted(const BasicTensor<T>& s) {
  if (s.rank() != 3 || s.dim(1) < 1) {
    throw DimensionError("cumulative_mean_shifted needs [B, C>=1, d], got " + shape_str(s.shape()));
  }
  const std::size_t B = s.dim(0), C = s.dim(1), d = s.dim(2);
  std::vector<T> out(s.numel(), T(0));
  std::vector<T> running(d);
  const T* S = s.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(running.begin(), running.end(), T(0));
    for (std::size_t i = 1; i < C; ++i) {
      const T* prev = S + (b * C + i - 1) * d;
      T* o = out.data() + (b * C + i) * d;
      for (std::size_t j = 0; j < d; ++j) {
        running[j] += prev[j];
        o[j] = running[j] / static_cast<T>(i);
      }
    }
  }
  auto sn = s.node();
  return detail::make_result<T>(
      "cumulative_mean_shifted", s.shape(), std::move(out), {&s}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* ds = detail::grad_sink(sn);
          if (!ds) return;
          std::vector<T> suffix(d);
          for (std::size_t b = 0; b < B; ++b) {
            std::fill(suffix.begin(), suffix.end(), T(0));
            // ds[c] = sum over i > c of g[i] / i
            for (std::size_t i = C - 1; i >= 1; --i) {
              const T* gi = g.data() + (b * C + i) * d;
              T* dc = ds + (b * C + i - 1) * d;
              for (std::size_t j = 0; j < d; ++j) {
                suffix[j] += gi[j] / static_cast<T>(i);
                dc[j] += suffix[j];
              }
            }
          }
        };
      });
}

/// Mean over the time axis of [B, n, d], restricted to positions whose mask
/// entry is nonzero. mask is row-major [B, n].
template <class T>
BasicTensor<T> masked_mean_time(const BasicTensor<T>& x, std::span<const std::uint8_t> mask) {
  if (x.rank() != 3 || mask.size() != x.dim(0) * x.dim(1)) {
    throw DimensionError("masked_mean_time: mask of " + std::to_string(mask.size()) +
                         " entries for " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), n = x.dim(1), d = x.dim(2);
  std::vector<T> out(B * d, T(0));
  std::vector<T> counts(B, T(0));
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const T* X = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < n; ++t) {
      if (!m[b * n + t]) continue;
      counts[b] += T(1);
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += X[(b * n + t) * d + j];
    }
    if (counts[b] == T(0)) {
      throw PreconditionError("masked mean: row " + std::to_string(b) + " has no real tokens");
    }
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= counts[b];
  }
  auto xn = x.node();
  return detail::make_result<T>("masked_mean_time", Shape{B, d}, std::move(out), {&x},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    T* dx = detail::grad_sink(xn);
                                    if (!dx) return;
                                    for (std::size_t b = 0; b < B; ++b)
                                      for (std::size_t t = 0; t < n; ++t) {
                                        if (!m[b * n + t]) continue;
                                        for (std::size_t j = 0; j < d; ++j)
                                          dx[(b * n + t) * d + j] += g[b * d + j] / counts[b];
                                      }
                                  };
                                });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// gain * x / sqrt(mean(x^2) + eps) over the last axis.
template <class T>
BasicTensor<T> rmsnorm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps = 1e-6) {
  const std::size_t d = x.dim(-1);
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError("rmsnorm gain " + shape_str(gain.shape()) + " vs input " +
                         shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw PreconditionError("rmsnorm eps must be positive");
  const T e = static_cast<T>(eps);
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> inv(rows);
  const T* X = x.data().data();
  const T* W = gain.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X + r * d;
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + e);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = W[j] * xr[j] * inv[r];
  }
  auto xn = x.node(), wn = gain.node();
  return detail::make_result<T>(
      "rmsnorm", x.shape(), std::move(out), {&x, &gain}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dx = detail::grad_sink(xn);
          T* dw = detail::grad_sink(wn);
          const T* Xd = xn->data.data();
          const T* Wd = wn->data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = Xd + r * d;
            const T* gr = g.data() + r * d;
            const T ir = inv[r];
            T dot = T(0);
            for (std::size_t j = 0; j < d; ++j) dot += gr[j] * Wd[j] * xr[j] * ir;
            dot /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T xhat = xr[j] * ir;
              if (dx) dx[r * d + j] += ir * (gr[j] * Wd[j] - xhat * dot);
              if (dw) dw[j] += gr[j] * xhat;
            }
          }
        };
      });
}

/// Standard layer norm over the last axis with learned gain and bias.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, double eps = 1e-5) {
  const std::size_t d = x.dim(-1);
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm params do not match input " + shape_str(x.shape()));
  }
  const T e = static_cast<T>(eps);
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  const T* X = x.data().data();
  const T* W = gain.data().data();
  const T* Bv = bias.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + e);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * rstd[r];
      out[r * d + j] = W[j] * xhat[r * d + j] + Bv[j];
    }
  }
  auto xn = x.node(), wn = gain.node(), bn = bias.node();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dx = detail::grad_sink(xn);
          T* dw = detail::grad_sink(wn);
          T* db = detail::grad_sink(bn);
          const T* Wd = wn->data.data();
          const T inv_d = T(1) / static_cast<T>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * d;
            const T* xh = xhat.data() + r * d;
            T sum_gw = T(0), sum_gwx = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T gw = gr[j] * Wd[j];
              sum_gw += gw;
              sum_gwx += gw * xh[j];
              if (dw) dw[j] += gr[j] * xh[j];
              if (db) db[j] += gr[j];
            }
            if (dx) {
              for (std::size_t j = 0; j < d; ++j) {
                const T gw = gr[j] * Wd[j];
                dx[r * d + j] += rstd[r] * (gw - inv_d * sum_gw - xh[j] * inv_d * sum_gwx);
              }
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Attention pieces
// ---------------------------------------------------------------------------

/// Softmax over the last axis of scores [B, H, n, n]. With `causal`, keys
/// j > i are excluded for query i; with a key mask [B, n], keys whose entry
/// is 0 are excluded. Excluded entries get weight exactly 0.
template <class T>
BasicTensor<T> masked_softmax(const BasicTensor<T>& scores, bool causal,
                              std::span<const std::uint8_t> key_mask = {}) {
  if (scores.rank() != 4 || scores.dim(2) != scores.dim(3)) {
    throw DimensionError("masked_softmax needs [B, H, n, n], got " + shape_str(scores.shape()));
  }
  const std::size_t B = scores.dim(0), H = scores.dim(1), n = scores.dim(2);
  if (!key_mask.empty() && key_mask.size() != B * n) {
    throw DimensionError("key mask has " + std::to_string(key_mask.size()) + " entries, need " +
                         std::to_string(B * n));
  }
  std::vector<T> out(scores.numel(), T(0));
  const T* S = scores.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t row = ((b * H + h) * n + i) * n;
        const std::size_t limit = causal ? i + 1 : n;
        auto visible = [&](std::size_t j) { return key_mask.empty() || key_mask[b * n + j] != 0; };
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j)
          if (visible(j)) mx = std::max(mx, S[row + j]);
        if (mx == -std::numeric_limits<T>::infinity()) {
          throw PreconditionError("masked_softmax: query row with no visible keys");
        }
        T z = T(0);
        for (std::size_t j = 0; j < limit; ++j) {
          if (!visible(j)) continue;
          out[row + j] = std::exp(S[row + j] - mx);
          z += out[row + j];
        }
        for (std::size_t j = 0; j < limit; ++j) out[row + j] /= z;
      }
  auto sn = scores.node();
  return detail::make_result<T>(
      "masked_softmax", scores.shape(), std::move(out), {&scores}, [=](const detail::NodePtr<T>& on) {
        std::weak_ptr<detail::TensorNode<T>> weak_out = on;
        return [=](const std::vector<T>& g) {
          T* ds = detail::grad_sink(sn);
          if (!ds) return;
          auto o = weak_out.lock();
          const T* Y = o->data.data();
          const std::size_t rows = B * H * n;
          for (std::size_t r = 0; r < rows; ++r) {
            const T* y = Y + r * n;
            const T* gr = g.data() + r * n;
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * gr[j];
            for (std::size_t j = 0; j < n; ++j) ds[r * n + j] += y[j] * (gr[j] - dot);
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Lookups and convolution
// ---------------------------------------------------------------------------

/// Row gather: out[b, t, :] = table[ids[b * cols + t], :].
template <class T>
BasicTensor<T> embedding(std::span<const TokenId> ids, std::size_t rows, std::size_t cols,
                         const BasicTensor<T>& table) {
  if (table.rank() != 2) throw DimensionError("embedding table must be 2-D");
  if (ids.size() != rows * cols) throw DimensionError("embedding: id count does not match shape");
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<TokenId> idv(ids.begin(), ids.end());
  for (TokenId id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(V));
    }
  }
  std::vector<T> out(idv.size() * d);
  const T* Tb = table.data().data();
  for (std::size_t i = 0; i < idv.size(); ++i) {
    const std::size_t row = static_cast<std::size_t>(idv[i]);
    std::copy(Tb + row * d, Tb + (row + 1) * d, out.data() + i * d);
  }
  auto tn = table.node();
  return detail::make_result<T>("embedding", Shape{rows, cols, d}, std::move(out), {&table},
                                [=](const detail::NodePtr<T>&) {
                                  return [=](const std::vector<T>& g) {
                                    T* dt = detail::grad_sink(tn);
                                    if (!dt) return;
                                    for (std::size_t i = 0; i < idv.size(); ++i) {
                                      T* dst = dt + static_cast<std::size_t>(idv[i]) * d;
                                      const T* src = g.data() + i * d;
                                      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                    }
                                  };
                                });
}

/// 1-D convolution over the time axis of x[B, n, d_in] with kernel
/// [d_out, d_in, k] and bias [d_out]. The sequence is zero-padded with
/// `pad_left` / `pad_right` positions; output length is n + pads - k + 1.
template <class T>
BasicTensor<T> conv1d_time(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                           const BasicTensor<T>& bias, std::size_t pad_left, std::size_t pad_right) {
  if (x.rank() != 3 || kernel.rank() != 3 || kernel.dim(1) != x.dim(2) ||
      bias.numel() != kernel.dim(0)) {
    throw DimensionError("conv1d shapes: input " + shape_str(x.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t B = x.dim(0), n = x.dim(1), din = x.dim(2);
  const std::size_t dout = kernel.dim(0), k = kernel.dim(2);
  if (n + pad_left + pad_right < k) throw DimensionError("conv1d: sequence shorter than kernel");
  const std::size_t n_out = n + pad_left + pad_right - k + 1;
  // tap-major copy of the kernel: wt[tap][i][o]
  std::vector<T> wt(k * din * dout);
  const T* K = kernel.data().data();
  for (std::size_t o = 0; o < dout; ++o)
    for (std::size_t i = 0; i < din; ++i)
      for (std::size_t t = 0; t < k; ++t) wt[(t * din + i) * dout + o] = K[(o * din + i) * k + t];
  auto source = [=](std::size_t t, std::size_t tap) -> std::ptrdiff_t {
    const auto s = static_cast<std::ptrdiff_t>(t + tap) - static_cast<std::ptrdiff_t>(pad_left);
    return s < 0 || s >= static_cast<std::ptrdiff_t>(n) ? -1 : s;
  };
  std::vector<T> out(B * n_out * dout, T(0));
  const T* X = x.data().data();
  const T* Bv = bias.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < n_out; ++t) {
      T* o = out.data() + (b * n_out + t) * dout;
      for (std::size_t tap = 0; tap < k; ++tap) {
        const std::ptrdiff_t src = source(t, tap);
        if (src < 0) continue;
        const T* xr = X + (b * n + static_cast<std::size_t>(src)) * din;
        for (std::size_t i = 0; i < din; ++i) {
          const T xv = xr[i];
          const T* wr = wt.data() + (tap * din + i) * dout;
          for (std::size_t c = 0; c < dout; ++c) o[c] += xv * wr[c];
        }
      }
      for (std::size_t c = 0; c < dout; ++c) o[c] += Bv[c];
    }
  auto xn = x.node(), kn = kernel.node(), bn = bias.node();
  return detail::make_result<T>(
      "conv1d", Shape{B, n_out, dout}, std::move(out), {&x, &kernel, &bias},
      [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dx = detail::grad_sink(xn);
          T* dk = detail::grad_sink(kn);
          T* db = detail::grad_sink(bn);
          const T* Xd = xn->data.data();
          std::vector<T> dwt(dk ? k * din * dout : 0, T(0));
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < n_out; ++t) {
              const T* gr = g.data() + (b * n_out + t) * dout;
              if (db)
                for (std::size_t c = 0; c < dout; ++c) db[c] += gr[c];
              for (std::size_t tap = 0; tap < k; ++tap) {
                const std::ptrdiff_t src = source(t, tap);
                if (src < 0) continue;
                const std::size_t s = static_cast<std::size_t>(src);
                for (std::size_t i = 0; i < din; ++i) {
                  const T* wr = wt.data() + (tap * din + i) * dout;
                  if (dx) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < dout; ++c) acc += gr[c] * wr[c];
                    dx[(b * n + s) * din + i] += acc;
                  }
                  if (dk) {
                    const T xv = Xd[(b * n + s) * din + i];
                    T* dwr = dwt.data() + (tap * din + i) * dout;
                    for (std::size_t c = 0; c < dout; ++c) dwr[c] += xv * gr[c];
                  }
                }
              }
            }
          if (dk)
            for (std::size_t o = 0; o < dout; ++o)
              for (std::size_t i = 0; i < din; ++i)
                for (std::size_t t = 0; t < k; ++t)
                  dk[(o * din + i) * k + t] += dwt[(t * din + i) * dout + o];
        };
      });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under softmax(logits[N, V]).
/// Positions whose target equals `ignore_id` do not contribute.
template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const TokenId> targets,
                                     std::optional<TokenId> ignore_id = std::nullopt) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  std::vector<TokenId> tv(targets.begin(), targets.end());
  auto ignored = [&](TokenId t) { return ignore_id.has_value() && t == *ignore_id; };
  for (TokenId t : tv) {
    if (ignored(t)) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= V) {
      throw IndexError("target id " + std::to_string(t) + " outside [0, " + std::to_string(V) + ")");
    }
  }
  std::vector<T> probs(N * V);
  std::vector<std::uint8_t> counted(N, 0);
  const T* L = logits.data().data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const T* lr = L + r * V;
    T mx = lr[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, lr[j]);
    T z = T(0);
    for (std::size_t j = 0; j < V; ++j) {
      probs[r * V + j] = std::exp(lr[j] - mx);
      z += probs[r * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= z;
    if (ignored(tv[r])) continue;
    counted[r] = 1;
    total += static_cast<double>(std::log(z) + mx - lr[tv[r]]);
    ++count;
  }
  const T loss = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  auto ln = logits.node();
  return detail::make_result<T>(
      "softmax_cross_entropy", Shape{}, {loss}, {&logits}, [=](const detail::NodePtr<T>&) {
        return [=](const std::vector<T>& g) {
          T* dl = detail::grad_sink(ln);
          if (!dl || count == 0) return;
          const T s = g[0] / static_cast<T>(count);
          for (std::size_t r = 0; r < N; ++r) {
            if (!counted[r]) continue;
            for (std::size_t j = 0; j < V; ++j) {
              const T onehot = static_cast<TokenId>(j) == tv[r] ? T(1) : T(0);
              dl[r * V + j] += s * (probs[r * V + j] - onehot);
            }
          }
        };
      });
}

}  // namespace wat
