#pragma once

// Differentiable primitives. Every backward rule is expressed with the same
// primitives so that a recorded backward pass can itself be differentiated.

#include <Eigen/Core>

#include "gsgn/tensor.hpp"

namespace gsgn {

namespace detail {

template <class T, class F>
std::vector<T> map_values(const Tensor<T>& a, F&& f) {
  const auto& src = a.values();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (numel_of(b) == 1) return a;
  if (numel_of(a) == 1) return b;
  if (a.size() == b.size()) {
    Shape out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == b[i] || b[i] == 1) {
        out[i] = a[i];
      } else if (a[i] == 1) {
        out[i] = b[i];
      } else {
        goto mismatch;
      }
    }
    return out;
  }
mismatch:
  throw ShapeError("shape mismatch: " + to_string(a) + " vs " + to_string(b));
}

// Strides of `s` viewed inside `out` (0 along broadcast axes). A tensor with a
// single element broadcasts against anything.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  if (numel_of(s) == 1) return st;
  std::size_t acc = 1;
  for (std::size_t i = out.size(); i-- > 0;) {
    st[i] = (s[i] == 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

template <class T, class F>
std::vector<T> broadcast_apply(const Tensor<T>& a, const Tensor<T>& b, const Shape& out, F&& f) {
  const std::size_t n = numel_of(out);
  std::vector<T> r(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == out && b.shape() == out) {
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[i], bv[i]);
    return r;
  }
  if (a.shape() == out && bv.size() == 1) {
    const T s = bv[0];
    for (std::size_t i = 0; i < n; ++i) r[i] = f(av[i], s);
    return r;
  }
  if (b.shape() == out && av.size() == 1) {
    const T s = av[0];
    for (std::size_t i = 0; i < n; ++i) r[i] = f(s, bv[i]);
    return r;
  }
  const auto sa = broadcast_strides(a.shape(), out);
  const auto sb = broadcast_strides(b.shape(), out);
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia = sa[rank - 1], ib = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < n; base += inner) {
    T* dst = r.data() + base;
    const T* pa = av.data() + oa;
    const T* pb = bv.data() + ob;
    // Unit and zero inner strides get their own loops so they vectorize.
    if (ia == 1 && ib == 1) {
      for (std::size_t j = 0; j < inner; ++j) dst[j] = f(pa[j], pb[j]);
    } else if (ia == 1 && ib == 0) {
      const T y = *pb;
      for (std::size_t j = 0; j < inner; ++j) dst[j] = f(pa[j], y);
    } else if (ia == 0 && ib == 1) {
      const T x = *pa;
      for (std::size_t j = 0; j < inner; ++j) dst[j] = f(x, pb[j]);
    } else {
      for (std::size_t j = 0; j < inner; ++j) dst[j] = f(pa[j * ia], pb[j * ib]);
    }
    // advance the odometer over all but the innermost axis
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return r;
}

inline std::vector<int> normalize_axes(std::vector<int> axes, std::size_t rank) {
  for (int ax : axes)
    if (ax < 0 || static_cast<std::size_t>(ax) >= rank)
      throw ShapeError("axis " + std::to_string(ax) + " out of range for rank " +
                       std::to_string(rank));
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  return axes;
}

inline Shape reduced_shape(const Shape& s, const std::vector<int>& axes, bool keepdim) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    bool reduced = std::find(axes.begin(), axes.end(), static_cast<int>(i)) != axes.end();
    if (!reduced) {
      out.push_back(s[i]);
    } else if (keepdim) {
      out.push_back(1);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <class T>
std::vector<T> sum_values(const Tensor<T>& a, const std::vector<int>& axes) {
  const Shape& s = a.shape();
  const Shape kept = reduced_shape(s, axes, true);
  std::vector<T> out(numel_of(kept), T(0));
  const auto st = broadcast_strides(kept, s);
  const auto& v = a.values();
  const std::size_t rank = s.size();
  const std::size_t inner = s[rank - 1];
  const std::size_t io = st[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t o = 0;
  // Accumulate in double so float reductions stay stable.
  if (io == 0) {
    for (std::size_t base = 0; base < v.size(); base += inner) {
      double acc = 0.0;
      for (std::size_t j = 0; j < inner; ++j) acc += v[base + j];
      out[o] += static_cast<T>(acc);
      for (std::size_t d = rank - 1; d-- > 0;) {
        ++idx[d];
        o += st[d];
        if (idx[d] < s[d]) break;
        o -= st[d] * idx[d];
        idx[d] = 0;
      }
    }
  } else {
    for (std::size_t base = 0; base < v.size(); base += inner) {
      for (std::size_t j = 0; j < inner; ++j) out[o + j * io] += v[base + j];
      for (std::size_t d = rank - 1; d-- > 0;) {
        ++idx[d];
        o += st[d];
        if (idx[d] < s[d]) break;
        o -= st[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> constant(const Shape& s, std::vector<T> v) {
  return Tensor<T>(s, std::move(v));
}

}  // namespace detail

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
template <class T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& shape);
template <class T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape);

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, scalar, or same-rank size-1 broadcast)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::broadcast_apply(a, b, out, [](T x, T y) { return x + y; });
  return Tensor<T>::make_result(out, std::move(v), "add", {a, b},
      [](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = sum_to(g, in[0].shape());
        if (needs[1]) r[1] = sum_to(g, in[1].shape());
        return r;
      });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a);

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::broadcast_apply(a, b, out, [](T x, T y) { return x - y; });
  return Tensor<T>::make_result(out, std::move(v), "sub", {a, b},
      [](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = sum_to(g, in[0].shape());
        if (needs[1]) r[1] = neg(sum_to(g, in[1].shape()));
        return r;
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::broadcast_apply(a, b, out, [](T x, T y) { return x * y; });
  return Tensor<T>::make_result(out, std::move(v), "mul", {a, b},
      [](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = sum_to(mul(g, in[1]), in[0].shape());
        if (needs[1]) r[1] = sum_to(mul(g, in[0]), in[1].shape());
        return r;
      });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T y : b.values())
    if (y == T(0)) throw NumericError("division by zero");
  Shape out = detail::broadcast_shape(a.shape(), b.shape());
  auto v = detail::broadcast_apply(a, b, out, [](T x, T y) { return x / y; });
  return Tensor<T>::make_result(out, std::move(v), "div", {a, b},
      [](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = sum_to(div(g, in[1]), in[0].shape());
        if (needs[1]) r[1] = neg(sum_to(div(mul(g, in[0]), mul(in[1], in[1])), in[1].shape()));
        return r;
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

/// scale * a + shift
template <class T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift) {
  auto v = detail::map_values(a, [=](T x) { return scale * x + shift; });
  return Tensor<T>::make_result(a.shape(), std::move(v), "affine", {a},
      [scale](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{affine(g, scale, T(0))};
      });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return affine(a, T(-1), T(0));
}

template <class T>
Tensor<T> pow(const Tensor<T>& a, T p) {
  auto v = detail::map_values(a, [=](T x) { return std::pow(x, p); });
  return Tensor<T>::make_result(a.shape(), std::move(v), "pow", {a},
      [p](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{mul(g, affine(pow(in[0], p - T(1)), p, T(0)))};
      });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  for (T x : a.values())
    if (!(x > T(0))) throw NumericError("log of non-positive value");
  auto v = detail::map_values(a, [](T x) { return std::log(x); });
  return Tensor<T>::make_result(a.shape(), std::move(v), "log", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{div(g, in[0])};
      });
}

template <class T>
Tensor<T> log10(const Tensor<T>& a) {
  for (T x : a.values())
    if (!(x > T(0))) throw NumericError("log10 of non-positive value");
  auto v = detail::map_values(a, [](T x) { return std::log10(x); });
  return Tensor<T>::make_result(a.shape(), std::move(v), "log10", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        const T inv_ln10 = T(1) / std::log(T(10));
        return std::vector<Tensor<T>>{affine(div(g, in[0]), inv_ln10, T(0))};
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  auto v = detail::map_values(a, [](T x) { return std::exp(x); });
  return Tensor<T>::make_result(a.shape(), std::move(v), "exp", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{mul(g, exp(in[0]))};
      });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return pow(a, T(0.5));
}

/// Gradient passes where lo <= a <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  auto v = detail::map_values(a, [=](T x) { return std::min(std::max(x, lo), hi); });
  return Tensor<T>::make_result(a.shape(), std::move(v), "clamp", {a},
      [lo, hi](const Tensor<T>& g, const auto& in, const auto&) {
        auto m = detail::map_values(in[0], [=](T x) { return (x >= lo && x <= hi) ? T(1) : T(0); });
        return std::vector<Tensor<T>>{mul(g, detail::constant(in[0].shape(), std::move(m)))};
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto v = detail::map_values(a, [](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  return Tensor<T>::make_result(a.shape(), std::move(v), "sigmoid", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        auto s = sigmoid(in[0]);
        return std::vector<Tensor<T>>{mul(g, mul(s, affine(s, T(-1), T(1))))};
      });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope = T(0.2)) {
  auto v = detail::map_values(a, [=](T x) { return x >= T(0) ? x : slope * x; });
  return Tensor<T>::make_result(a.shape(), std::move(v), "leaky_relu", {a},
      [slope](const Tensor<T>& g, const auto& in, const auto&) {
        auto m = detail::map_values(in[0], [=](T x) { return x >= T(0) ? T(1) : slope; });
        return std::vector<Tensor<T>>{mul(g, detail::constant(in[0].shape(), std::move(m)))};
      });
}

// ---------------------------------------------------------------------------
// Shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  if (shape == a.shape()) return a;
  return Tensor<T>::make_result(shape, a.values(), "reshape", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{reshape(g, in[0].shape())};
      });
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  if (detail::broadcast_shape(shape, a.shape()) != shape)
    throw ShapeError("cannot broadcast " + to_string(a.shape()) + " to " + to_string(shape));
  auto zero = Tensor<T>::zeros(Shape{1});
  auto v = detail::broadcast_apply(a, zero, shape, [](T x, T) { return x; });
  return Tensor<T>::make_result(shape, std::move(v), "broadcast_to", {a},
      [](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{sum_to(g, in[0].shape())};
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, std::vector<int> axes, bool keepdim = false) {
  axes = detail::normalize_axes(std::move(axes), a.dim());
  if (axes.empty()) return a;
  Shape kept = detail::reduced_shape(a.shape(), axes, true);
  Shape out = detail::reduced_shape(a.shape(), axes, keepdim);
  auto v = detail::sum_values(a, axes);
  return Tensor<T>::make_result(out, std::move(v), "sum", {a},
      [kept](const Tensor<T>& g, const auto& in, const auto&) {
        return std::vector<Tensor<T>>{broadcast_to(reshape(g, kept), in[0].shape())};
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  std::vector<int> all(a.dim());
  std::iota(all.begin(), all.end(), 0);
  return reshape(sum(a, all), Shape{1});
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, std::vector<int> axes, bool keepdim = false) {
  axes = detail::normalize_axes(std::move(axes), a.dim());
  if (axes.empty()) return a;
  std::size_t count = 1;
  for (int ax : axes) count *= a.size(static_cast<std::size_t>(ax));
  return affine(sum(a, axes, keepdim), T(1) / static_cast<T>(count), T(0));
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return affine(sum(a), T(1) / static_cast<T>(a.numel()), T(0));
}

template <class T>
Tensor<T> sum_to(const Tensor<T>& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  if (numel_of(shape) == 1) return reshape(sum(g), shape);
  if (shape.size() != g.dim()) throw ShapeError("sum_to: rank mismatch");
  std::vector<int> axes;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (shape[i] == 1 && g.size(i) != 1) axes.push_back(static_cast<int>(i));
  return reshape(sum(g, axes, true), shape);
}

/// sqrt(sum(a^2)) over `axes`. The backward rule treats a zero norm as having
/// zero subgradient.
template <class T>
Tensor<T> l2_norm(const Tensor<T>& a, std::vector<int> axes, bool keepdim = false) {
  axes = detail::normalize_axes(std::move(axes), a.dim());
  if (axes.empty()) {
    std::vector<int> all(a.dim());
    std::iota(all.begin(), all.end(), 0);
    axes = all;
  }
  Shape kept = detail::reduced_shape(a.shape(), axes, true);
  Shape out = detail::reduced_shape(a.shape(), axes, keepdim);
  std::vector<T> v;
  {
    NoGradGuard ng;
    v = sum(mul(a, a), axes).values();
  }
  for (auto& x : v) x = std::sqrt(x);
  return Tensor<T>::make_result(out, std::move(v), "l2_norm", {a},
      [kept, axes](const Tensor<T>& g, const auto& in, const auto&) {
        auto norm = l2_norm(in[0], axes, true);
        auto is_zero = detail::map_values(norm, [](T x) { return x > T(0) ? T(0) : T(1); });
        auto nonzero = detail::map_values(norm, [](T x) { return x > T(0) ? T(1) : T(0); });
        auto safe = add(norm, detail::constant(kept, std::move(is_zero)));
        auto scale = mul(div(reshape(g, kept), safe), detail::constant(kept, std::move(nonzero)));
        return std::vector<Tensor<T>>{mul(in[0], scale)};
      });
}

// ---------------------------------------------------------------------------
/// Per (n, c) plane of an NCHW tensor: (x - mean) / sqrt(population var + eps).
/// Fused forward; the backward rule uses a direct kernel unless a
/// differentiable gradient is requested (create_graph), in which case it is
/// assembled from primitive ops.
template <class T>
Tensor<T> instance_normalize(const Tensor<T>& x, T eps) {
  if (x.dim() != 4) throw ShapeError("normalization expects NCHW, got " + to_string(x.shape()));
  if (!(eps > T(0))) throw Error("normalization epsilon must be positive");
  const std::size_t planes = x.size(0) * x.size(1), hw = x.size(2) * x.size(3);
  const auto& xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * hw;
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += src[i];
    const double mu = s / static_cast<double>(hw);
    double ss = 0.0;
    for (std::size_t i = 0; i < hw; ++i) ss += (src[i] - mu) * (src[i] - mu);
    const double rstd = 1.0 / std::sqrt(ss / static_cast<double>(hw) + static_cast<double>(eps));
    T* dst = out.data() + p * hw;
    for (std::size_t i = 0; i < hw; ++i) dst[i] = static_cast<T>((src[i] - mu) * rstd);
  }
  return Tensor<T>::make_result(x.shape(), std::move(out), "instance_normalize", {x},
      [eps, planes, hw](const Tensor<T>& g, const auto& in, const auto&) {
        const Tensor<T>& xin = in[0];
        if (grad_enabled()) {
          auto centered = sub(xin, mean(xin, {2, 3}, true));
          auto rstd = pow(affine(mean(mul(centered, centered), {2, 3}, true), T(1), eps), T(-0.5));
          auto xhat = mul(centered, rstd);
          auto inner = sub(sub(g, mean(g, {2, 3}, true)), mul(xhat, mean(mul(g, xhat), {2, 3}, true)));
          return std::vector<Tensor<T>>{mul(rstd, inner)};
        }
        const auto& xv = xin.values();
        const auto& gv = g.values();
        std::vector<T> dx(xv.size());
        const double n = static_cast<double>(hw);
        for (std::size_t p = 0; p < planes; ++p) {
          const T* xs = xv.data() + p * hw;
          const T* gs = gv.data() + p * hw;
          double s = 0.0;
          for (std::size_t i = 0; i < hw; ++i) s += xs[i];
          const double mu = s / n;
          double ss = 0.0;
          for (std::size_t i = 0; i < hw; ++i) ss += (xs[i] - mu) * (xs[i] - mu);
          const double rstd = 1.0 / std::sqrt(ss / n + static_cast<double>(eps));
          double gs_sum = 0.0, gx_sum = 0.0;
          for (std::size_t i = 0; i < hw; ++i) {
            gs_sum += gs[i];
            gx_sum += gs[i] * (xs[i] - mu) * rstd;
          }
          const double gm = gs_sum / n, gxm = gx_sum / n;
          T* d = dx.data() + p * hw;
          for (std::size_t i = 0; i < hw; ++i)
            d[i] = static_cast<T>(rstd * (gs[i] - gm - (xs[i] - mu) * rstd * gxm));
        }
        return std::vector<Tensor<T>>{Tensor<T>::make_result(xin.shape(), std::move(dx), "instance_normalize_grad", {}, nullptr)};
      });
}

// ---------------------------------------------------------------------------
// Slicing along one axis

template <class T>
Tensor<T> embed(const Tensor<T>& a, int axis, std::size_t total, std::size_t start);

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t len) {
  auto ax = static_cast<std::size_t>(detail::normalize_axes({axis}, a.dim())[0]);
  const Shape& s = a.shape();
  if (start + len > s[ax] || len == 0) throw ShapeError("slice out of range");
  if (start == 0 && len == s[ax]) return a;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Shape out = s;
  out[ax] = len;
  std::vector<T> v(numel_of(out));
  const auto& src = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((o * s[ax] + start) * inner), len * inner,
                v.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  const std::size_t total = s[ax];
  return Tensor<T>::make_result(out, std::move(v), "slice", {a},
      [axis, total, start](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{embed(g, axis, total, start)};
      });
}

/// Inverse of slice: zero tensor of extent `total` along `axis` with `a` placed at `start`.
template <class T>
Tensor<T> embed(const Tensor<T>& a, int axis, std::size_t total, std::size_t start) {
  auto ax = static_cast<std::size_t>(detail::normalize_axes({axis}, a.dim())[0]);
  const Shape& s = a.shape();
  const std::size_t len = s[ax];
  if (start + len > total) throw ShapeError("embed out of range");
  if (len == total) return a;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Shape out = s;
  out[ax] = total;
  std::vector<T> v(numel_of(out), T(0));
  const auto& src = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                v.begin() + static_cast<std::ptrdiff_t>((o * total + start) * inner));
  return Tensor<T>::make_result(out, std::move(v), "embed", {a},
      [axis, start, len](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{slice(g, axis, start, len)};
      });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  if (parts.size() == 1) return parts[0];
  auto ax = static_cast<std::size_t>(detail::normalize_axes({axis}, parts[0].dim())[0]);
  Shape out = parts[0].shape();
  out[ax] = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != out[i]) throw ShapeError("concat shape mismatch");
    offsets.push_back(out[ax]);
    out[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out[i];
  for (std::size_t i = ax + 1; i < out.size(); ++i) inner *= out[i];
  std::vector<T> v(numel_of(out));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& src = parts[k].values();
    const std::size_t len = parts[k].size(ax);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                  v.begin() + static_cast<std::ptrdiff_t>((o * out[ax] + offsets[k]) * inner));
  }
  return Tensor<T>::make_result(out, std::move(v), "concat", parts,
      [axis, offsets](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(in.size());
        auto a = static_cast<std::size_t>(axis);
        for (std::size_t k = 0; k < in.size(); ++k)
          if (needs[k]) r[k] = slice(g, axis, offsets[k], in[k].size(a));
        return r;
      });
}

// ---------------------------------------------------------------------------
// Space-to-depth shuffle (factor 2). Output channel c*4 + 2*dy + dx holds
// input channel c at spatial offset (dy, dx) of each 2x2 block.

template <class T>
Tensor<T> unshuffle(const Tensor<T>& x);

template <class T>
Tensor<T> shuffle(const Tensor<T>& x) {
  if (x.dim() != 4) throw ShapeError("shuffle expects NCHW");
  const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (H % 2 || W % 2) throw ShapeError("shuffle requires even H and W, got " + to_string(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  std::vector<T> v(x.numel());
  const auto& src = x.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::size_t oc = c * 4 + 2 * dy + dx;
          T* dst = v.data() + (n * 4 * C + oc) * h * w;
          const T* in = src.data() + (n * C + c) * H * W;
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) dst[i * w + j] = in[(2 * i + dy) * W + 2 * j + dx];
        }
  return Tensor<T>::make_result(Shape{N, 4 * C, h, w}, std::move(v), "shuffle", {x},
      [](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{unshuffle(g)};
      });
}

template <class T>
Tensor<T> unshuffle(const Tensor<T>& x) {
  if (x.dim() != 4) throw ShapeError("unshuffle expects NCHW");
  const auto N = x.size(0), C4 = x.size(1), h = x.size(2), w = x.size(3);
  if (C4 % 4) throw ShapeError("unshuffle requires channels divisible by 4, got " + to_string(x.shape()));
  const std::size_t C = C4 / 4, H = 2 * h, W = 2 * w;
  std::vector<T> v(x.numel());
  const auto& src = x.values();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const std::size_t ic = c * 4 + 2 * dy + dx;
          const T* in = src.data() + (n * C4 + ic) * h * w;
          T* dst = v.data() + (n * C + c) * H * W;
          for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) dst[(2 * i + dy) * W + 2 * j + dx] = in[i * w + j];
        }
  return Tensor<T>::make_result(Shape{N, C, H, W}, std::move(v), "unshuffle", {x},
      [](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{shuffle(g)};
      });
}

// ---------------------------------------------------------------------------
// Dense linear algebra

namespace detail {
template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
}  // namespace detail

/// op(a) * op(b) for 2-D tensors, where op transposes when the flag is set.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false) {
  if (a.dim() != 2 || b.dim() != 2) throw ShapeError("matmul expects 2-D operands");
  const auto ar = a.size(0), ac = a.size(1), br = b.size(0), bc = b.size(1);
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k != k2)
    throw ShapeError("matmul inner dimension mismatch: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  std::vector<T> v(m * n);
  detail::MapC<T> A(a.values().data(), static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
  detail::MapC<T> B(b.values().data(), static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
  detail::Map<T> Cm(v.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!ta && !tb) Cm.noalias() = A * B;
  if (ta && !tb) Cm.noalias() = A.transpose() * B;
  if (!ta && tb) Cm.noalias() = A * B.transpose();
  if (ta && tb) Cm.noalias() = A.transpose() * B.transpose();
  return Tensor<T>::make_result(Shape{m, n}, std::move(v), "matmul", {a, b},
      [ta, tb](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = ta ? matmul(in[1], g, tb, true) : matmul(g, in[1], false, !tb);
        if (needs[1]) r[1] = tb ? matmul(g, in[0], true, ta) : matmul(in[0], g, !ta, false);
        return r;
      });
}

// ---------------------------------------------------------------------------
// Same-padded, stride-1 2-D cross-correlation with odd square kernels.

namespace detail {

// col has shape (C*K*K, H*W) and must start zeroed: only in-bounds taps are
// written, so a buffer can be reused across images of the same geometry.
template <class T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t K, T* col) {
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(K / 2);
  const auto Hs = static_cast<std::ptrdiff_t>(H), Ws = static_cast<std::ptrdiff_t>(W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < K; ++ky)
      for (std::size_t kx = 0; kx < K; ++kx) {
        T* row = col + ((c * K + ky) * K + kx) * H * W;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - p;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
        for (std::ptrdiff_t i = 0; i < Hs; ++i) {
          T* out = row + i * Ws;
          const std::ptrdiff_t si = i + dy;
          if (si < 0 || si >= Hs) continue;
          const T* in = x + (static_cast<std::ptrdiff_t>(c) * Hs + si) * Ws;
          const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t j1 = std::min<std::ptrdiff_t>(Ws, Ws - dx);
          std::copy(in + j0 + dx, in + j1 + dx, out + j0);
        }
      }
}

inline void check_kernel(std::size_t kh, std::size_t kw) {
  if (kh != kw || kh % 2 == 0) throw ShapeError("conv kernels must be odd and square");
}

}  // namespace detail

template <class T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& dy, std::size_t K);
template <class T>
Tensor<T> flip_transpose(const Tensor<T>& w);

/// x: (N, C, H, W), w: (O, C, K, K) -> (N, O, H, W).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.dim() != 4 || w.dim() != 4) throw ShapeError("conv2d expects NCHW input and OCKK weights");
  const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const auto O = w.size(0), K = w.size(2);
  detail::check_kernel(w.size(2), w.size(3));
  if (w.size(1) != C)
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(C) +
                     " channels, kernel expects " + std::to_string(w.size(1)));
  const std::size_t HW = H * W, CKK = C * K * K;
  std::vector<T> v(N * O * HW);
  std::vector<T> col(K == 1 ? 0 : CKK * HW);
  detail::MapC<T> Wm(w.values().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(CKK));
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.values().data() + n * C * HW;
    const T* colp = xn;
    if (K != 1) {
      detail::im2col(xn, C, H, W, K, col.data());
      colp = col.data();
    }
    detail::MapC<T> Col(colp, static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(HW));
    detail::Map<T> Out(v.data() + n * O * HW, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(HW));
    Out.noalias() = Wm * Col;
  }
  return Tensor<T>::make_result(Shape{N, O, H, W}, std::move(v), "conv2d", {x, w},
      [K](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = conv2d(g, flip_transpose(in[1]));
        if (needs[1]) r[1] = conv2d_weight_grad(in[0], g, K);
        return r;
      });
}

/// d/dw of <dy, conv2d(x, w)>: (O, C, K, K).
template <class T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& dy, std::size_t K) {
  const auto N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const auto O = dy.size(1);
  if (dy.size(0) != N || dy.size(2) != H || dy.size(3) != W) throw ShapeError("conv2d_weight_grad shape mismatch");
  const std::size_t HW = H * W, CKK = C * K * K;
  std::vector<T> v(O * CKK, T(0));
  std::vector<T> col(K == 1 ? 0 : CKK * HW);
  detail::Map<T> Gw(v.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(CKK));
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.values().data() + n * C * HW;
    const T* colp = xn;
    if (K != 1) {
      detail::im2col(xn, C, H, W, K, col.data());
      colp = col.data();
    }
    detail::MapC<T> Col(colp, static_cast<Eigen::Index>(CKK), static_cast<Eigen::Index>(HW));
    detail::MapC<T> Dy(dy.values().data() + n * O * HW, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(HW));
    Gw.noalias() += Dy * Col.transpose();
  }
  return Tensor<T>::make_result(Shape{O, C, K, K}, std::move(v), "conv2d_weight_grad", {x, dy},
      [](const Tensor<T>& g, const auto& in, const auto& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = conv2d(in[1], flip_transpose(g));
        if (needs[1]) r[1] = conv2d(in[0], g);
        return r;
      });
}

/// (O, C, K, K) -> (C, O, K, K) with both spatial axes reversed.
template <class T>
Tensor<T> flip_transpose(const Tensor<T>& w) {
  const auto O = w.size(0), C = w.size(1), K = w.size(2);
  std::vector<T> v(w.numel());
  const auto& src = w.values();
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx)
          v[((c * O + o) * K + (K - 1 - ky)) * K + (K - 1 - kx)] = src[((o * C + c) * K + ky) * K + kx];
  return Tensor<T>::make_result(Shape{C, O, K, K}, std::move(v), "flip_transpose", {w},
      [](const Tensor<T>& g, const auto&, const auto&) {
        return std::vector<Tensor<T>>{flip_transpose(g)};
      });
}

// ---------------------------------------------------------------------------
// Operator sugar and the generic dispatchers.

template <class T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T> Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <class T> Tensor<T> operator+(const Tensor<T>& a, T s) { return affine(a, T(1), s); }
template <class T> Tensor<T> operator-(const Tensor<T>& a, T s) { return affine(a, T(1), -s); }
template <class T> Tensor<T> operator*(const Tensor<T>& a, T s) { return affine(a, s, T(0)); }
template <class T> Tensor<T> operator*(T s, const Tensor<T>& a) { return affine(a, s, T(0)); }

enum class Elementwise { add, sub, mul, div, pow, log10, clamp };

/// Dispatcher over the elementwise family. `pow` takes a single-element
/// exponent; `clamp` takes a two-element {lo, hi}; `log10` ignores `b`.
template <class T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  switch (kind) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::div: return div(a, b);
    case Elementwise::pow:
      if (b.numel() != 1) throw ShapeError("pow exponent must be a scalar");
      return pow(a, b.item());
    case Elementwise::log10: return log10(a);
    case Elementwise::clamp:
      if (b.numel() != 2) throw ShapeError("clamp bounds must be {lo, hi}");
      return clamp(a, b[0], b[1]);
  }
  throw Error("unknown elementwise op");
}

enum class Reduction { mean, sum, l2_norm };

template <class T>
Tensor<T> reduce(Reduction kind, const Tensor<T>& a, std::vector<int> axes) {
  switch (kind) {
    case Reduction::mean: return mean(a, std::move(axes));
    case Reduction::sum: return sum(a, std::move(axes));
    case Reduction::l2_norm:
      if (axes.empty()) throw ShapeError("l2-norm needs at least one axis");
      return l2_norm(a, std::move(axes));
  }
  throw Error("unknown reduction");
}

}  // namespace gsgn
