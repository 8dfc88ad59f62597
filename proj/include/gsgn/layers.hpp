#pragma once

// Neural building blocks: convolution, fully connected, activations,
// instance / adaptive instance normalization, the global feature gate and
// residual blocks. Each parameterized block exposes `visit(prefix, f)`
// which calls f(name, tensor&) for every learnable tensor in a stable order.

#include <optional>
#include <string>

#include "gsgn/autograd.hpp"

namespace gsgn {

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kNormEpsilon = 1e-5;

struct ConvSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;

  std::size_t padding() const { return (kernel - 1) / 2; }
  std::size_t parameter_count() const {
    return in_channels * out_channels * kernel * kernel + out_channels;
  }
  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ShapeError("ConvSpec: channel counts must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw ShapeError("ConvSpec: kernel must be odd and positive");
  }
};

// ---------------------------------------------------------------------------
// Functional forms

/// Same-padded convolution plus per-channel bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.dim() != 4) throw ShapeError("conv2d expects NCHW input, got " + to_string(x.shape()));
  if (x.size(1) != spec.in_channels)
    throw ShapeError("conv2d: input has " + std::to_string(x.size(1)) + " channels, ConvSpec expects " +
                     std::to_string(spec.in_channels));
  if (weight.shape() != Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel} ||
      bias.shape() != Shape{spec.out_channels})
    throw ShapeError("conv2d: weight/bias shapes do not match ConvSpec");
  return add(conv2d(x, weight), reshape(bias, Shape{1, spec.out_channels, 1, 1}));
}

/// x: (N, in), weight: (out, in), bias: (out) -> (N, out)
template <class T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.dim() != 2 || weight.dim() != 2 || x.size(1) != weight.size(1))
    throw ShapeError("fully_connected: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  if (bias.shape() != Shape{weight.size(0)}) throw ShapeError("fully_connected: bias shape mismatch");
  return add(matmul(x, weight, false, true), reshape(bias, Shape{1, weight.size(0)}));
}

/// Per (sample, channel) standardization over H, W with population variance.
template <class T>
Tensor<T> normalize_spatial(const Tensor<T>& x, T eps = T(kNormEpsilon)) {
  return instance_normalize(x, eps);
}

/// gamma, beta: (C)
template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(kNormEpsilon)) {
  const std::size_t C = x.size(1);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("instance_norm: gamma/beta must have one value per channel");
  if (!(eps > T(0))) throw Error("instance_norm: epsilon must be positive");
  auto xhat = normalize_spatial(x, eps);
  return add(mul(xhat, reshape(gamma, Shape{1, C, 1, 1})), reshape(beta, Shape{1, C, 1, 1}));
}

/// scale, shift: (C) shared by the batch, or (N, C) per sample.
template <class T>
Tensor<T> adaptive_instance_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                                 T eps = T(kNormEpsilon)) {
  if (x.dim() != 4) throw ShapeError("adaptive_instance_norm expects NCHW");
  const std::size_t N = x.size(0), C = x.size(1);
  auto as_nc11 = [&](const Tensor<T>& p) {
    if (p.shape() == Shape{C}) return reshape(p, Shape{1, C, 1, 1});
    if (p.shape() == Shape{N, C}) return reshape(p, Shape{N, C, 1, 1});
    throw ShapeError("adaptive_instance_norm: modulation shape " + to_string(p.shape()) +
                     " does not match " + std::to_string(C) + " channels");
  };
  auto s = as_nc11(scale);
  auto b = as_nc11(shift);
  return add(mul(normalize_spatial(x, eps), s), b);
}

/// Global average pooling: (N, C, H, W) -> (N, C)
template <class T>
Tensor<T> global_average_pool(const Tensor<T>& x) {
  return mean(x, {2, 3});
}

// ---------------------------------------------------------------------------
// Parameterized blocks

namespace init {

/// He-normal initialization scaled for leaky ReLU.
template <class T, class Rng>
Tensor<T> he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
  const double slope = kLeakySlope;
  const double stddev = std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
  return Tensor<T>::randn(shape, rng, static_cast<T>(stddev));
}

}  // namespace init

template <class T>
struct Conv2d {
  ConvSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;

  Conv2d() = default;
  template <class Rng>
  Conv2d(ConvSpec s, Rng& rng, bool zero = false) : spec(s) {
    spec.validate();
    const Shape ws{s.out_channels, s.in_channels, s.kernel, s.kernel};
    weight = zero ? Tensor<T>::zeros(ws) : init::he_normal<T>(ws, s.in_channels * s.kernel * s.kernel, rng);
    bias = Tensor<T>::zeros(Shape{s.out_channels});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, spec, weight, bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <class T>
struct Linear {
  Tensor<T> weight;  // (out, in)
  Tensor<T> bias;    // (out)

  Linear() = default;
  template <class Rng>
  Linear(std::size_t in, std::size_t out, Rng& rng, bool zero = false) {
    weight = zero ? Tensor<T>::zeros(Shape{out, in}) : init::he_normal<T>(Shape{out, in}, in, rng);
    bias = Tensor<T>::zeros(Shape{out});
  }

  std::size_t in_features() const { return weight.size(1); }
  std::size_t out_features() const { return weight.size(0); }

  Tensor<T> operator()(const Tensor<T>& x) const { return fully_connected(x, weight, bias); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <class T>
struct InstanceNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(kNormEpsilon);

  InstanceNorm() = default;
  explicit InstanceNorm(std::size_t channels)
      : gamma(Tensor<T>::ones(Shape{channels})), beta(Tensor<T>::zeros(Shape{channels})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return instance_norm(x, gamma, beta, eps); }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

/// Channel gate from pooled global features:
/// x * sigmoid(fc2(leaky_relu(fc1(GAP(x))))).
template <class T>
struct GlobalFeatureGate {
  Linear<T> fc1;
  Linear<T> fc2;

  GlobalFeatureGate() = default;
  template <class Rng>
  GlobalFeatureGate(std::size_t channels, std::size_t reduction, Rng& rng) {
    const std::size_t hidden = std::max<std::size_t>(1, channels / std::max<std::size_t>(1, reduction));
    fc1 = Linear<T>(channels, hidden, rng);
    fc2 = Linear<T>(hidden, channels, rng);
  }

  /// Gate values (N, C).
  Tensor<T> gate(const Tensor<T>& x) const {
    if (x.size(1) != fc1.in_features())
      throw ShapeError("global gate: feature map has " + std::to_string(x.size(1)) +
                       " channels, gate expects " + std::to_string(fc1.in_features()));
    return sigmoid(fc2(leaky_relu(fc1(global_average_pool(x)), T(kLeakySlope))));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return mul(x, reshape(gate(x), Shape{x.size(0), x.size(1), 1, 1}));
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    fc1.visit(prefix + ".fc1", f);
    fc2.visit(prefix + ".fc2", f);
  }
};

/// x + F(x) with F = conv -> act -> norm -> conv -> norm. Normalization is
/// supplied by the caller as norm(tensor, site) so the same block serves the
/// plain, instance-normalized and style-modulated networks.
template <class T>
struct ResidualBlock {
  Conv2d<T> conv1;
  Conv2d<T> conv2;
  std::size_t site1 = 0;
  std::size_t site2 = 0;

  ResidualBlock() = default;
  template <class Rng>
  ResidualBlock(std::size_t channels, Rng& rng, std::size_t first_site)
      : conv1(ConvSpec{channels, channels, 3}, rng),
        conv2(ConvSpec{channels, channels, 3}, rng),
        site1(first_site),
        site2(first_site + 1) {}

  template <class Norm>
  Tensor<T> operator()(const Tensor<T>& x, Norm&& norm) const {
    if (x.size(1) != conv1.spec.in_channels) throw ShapeError("residual block channel mismatch");
    auto h = norm(leaky_relu(conv1(x), T(kLeakySlope)), site1);
    h = norm(conv2(h), site2);
    return add(x, h);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    conv1.visit(prefix + ".conv1", f);
    conv2.visit(prefix + ".conv2", f);
  }
};

}  // namespace gsgn
