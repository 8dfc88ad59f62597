#pragma once

// Dense row-major tensor with a reverse-mode tape.
//
// A Tensor is a reference-counted handle: copies alias the same buffer and
// graph node. Ops that produce a tensor while grad mode is enabled and at
// least one input requires grad attach a Node describing how to propagate
// gradients back to the inputs. Backward rules are written in terms of the
// same differentiable ops, so gradients of gradients are available when
// the backward pass itself is recorded (see autograd.hpp).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gsgn {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Raised when an op would produce NaN/Inf or divides by zero.
class NumericError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------------------
// Grad mode

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Sets grad mode to a fixed value for the guard's scope.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : saved_(detail::no_grad_depth) {
    detail::no_grad_depth = enabled ? 0 : 1;
  }
  ~GradModeGuard() { detail::no_grad_depth = saved_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  int saved_;
};

template <class T>
class Tensor;

/// One recorded operation. `inputs` are the op's tensor arguments in order;
/// `rule` maps the output gradient to one gradient per input (an undefined
/// Tensor where the input does not need one).
template <class T>
struct Node {
  using Rule = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad,
                                                    const std::vector<Tensor<T>>& inputs,
                                                    const std::vector<bool>& needs)>;
  std::string name;
  std::vector<Tensor<T>> inputs;
  Rule rule;
  bool released = false;

  void release() {
    inputs.clear();
    rule = nullptr;
    released = true;
  }
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::shared_ptr<Node<T>> grad_fn;
  std::shared_ptr<TensorImpl<T>> grad;
};

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorImpl<T>>()) {
    if (numel_of(shape) != values.size())
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + gsgn::to_string(shape));
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + gsgn::to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor full(const Shape& shape, T value) {
    return Tensor(shape, std::vector<T>(numel_of(shape), value));
  }
  static Tensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static Tensor ones(const Shape& shape) { return full(shape, T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, {value}); }
  static Tensor from(std::initializer_list<T> values) {
    return Tensor(Shape{values.size()}, std::vector<T>(values));
  }

  template <class Rng>
  static Tensor randn(const Shape& shape, Rng& rng, T stddev = T(1)) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng)) * stddev;
    return Tensor(shape, std::move(v));
  }

  template <class Rng>
  static Tensor uniform(const Shape& shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(v));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return impl().shape; }
  std::size_t dim() const { return impl().shape.size(); }
  std::size_t size(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  const std::vector<T>& values() const { return impl().data; }

  T& operator[](std::size_t i) { return impl().data[i]; }
  T operator[](std::size_t i) const { return impl().data[i]; }

  /// Value of a single-element tensor.
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + gsgn::to_string(shape()));
    return impl().data[0];
  }

  /// NCHW element access.
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    const auto& s = shape();
    return impl().data[((n * s[1] + c) * s[2] + h) * s[3] + w];
  }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (impl().grad_fn && !on)
      throw GraphError("cannot clear requires_grad on a non-leaf tensor; use detach()");
    impl().requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl().grad_fn; }
  const std::shared_ptr<Node<T>>& grad_fn() const { return impl().grad_fn; }

  /// Accumulated gradient of a leaf (undefined if none was written).
  Tensor grad() const { return Tensor(impl().grad); }
  void zero_grad() { impl().grad.reset(); }
  void accumulate_grad(const Tensor& g) {
    if (g.shape() != shape())
      throw ShapeError("gradient shape " + gsgn::to_string(g.shape()) + " does not match " +
                       gsgn::to_string(shape()));
    if (!impl().grad) {
      impl().grad = std::make_shared<TensorImpl<T>>();
      impl().grad->shape = shape();
      impl().grad->data = g.values();
      return;
    }
    auto& dst = impl().grad->data;
    const auto& src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Fresh leaf with a copy of the values and no graph.
  Tensor detach() const { return Tensor(shape(), values()); }
  Tensor clone() const { return detach(); }

  /// Same tensor object identity.
  bool same(const Tensor& other) const { return impl_ == other.impl_; }
  const TensorImpl<T>* id() const { return impl_.get(); }

  /// Replace values in place (shape must match). Leaves the graph untouched;
  /// intended for optimizer updates and perturbation in gradient checks.
  void assign(std::span<const T> values) {
    if (values.size() != numel()) throw ShapeError("assign: size mismatch");
    std::copy(values.begin(), values.end(), impl().data.begin());
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> v(numel());
    const auto& src = values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(v));
  }

  // Internal: construct an op result and record its node.
  static Tensor make_result(Shape shape, std::vector<T> values, std::string op,
                            std::vector<Tensor> inputs, typename Node<T>::Rule rule);

  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  TensorImpl<T>& impl() const {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {
/// Exponent-bit test so the loop vectorizes (std::isfinite with early exit does not).
template <class T>
bool all_finite(const std::vector<T>& values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (const T& v : values) {
    const Bits b = std::bit_cast<Bits>(v);
    bad |= static_cast<Bits>((b & exponent) == exponent);
  }
  return bad == 0;
}
}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::make_result(Shape shape, std::vector<T> values, std::string op,
                                 std::vector<Tensor> inputs, typename Node<T>::Rule rule) {
  if (!detail::all_finite(values)) throw NumericError("non-finite value produced by " + op);
  Tensor out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->name = std::move(op);
  node->inputs = std::move(inputs);
  node->rule = std::move(rule);
  out.impl_->grad_fn = std::move(node);
  out.impl_->requires_grad = true;
  return out;
}

}  // namespace gsgn
