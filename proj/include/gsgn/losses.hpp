#pragma once

// Objectives: the supervised PSNR loss and the unpaired two-cycle adversarial
// losses (gradient penalty, critic, adversarial, cycle, identity, conditional
// and their weighted total). Batch losses average over samples; MSE is the
// mean over all elements.

#include <limits>
#include <nlohmann/json.hpp>

#include "gsgn/autograd.hpp"

namespace gsgn {

inline constexpr double kMseFloor = 1e-10;
inline constexpr double kProbabilityClamp = 1e-7;

enum class PenaltyForm { product, standard };

inline std::string to_string(PenaltyForm f) { return f == PenaltyForm::product ? "product" : "standard"; }

inline PenaltyForm parse_penalty_form(const std::string& s) {
  if (s == "product") return PenaltyForm::product;
  if (s == "standard") return PenaltyForm::standard;
  throw Error("unknown penalty form '" + s + "'");
}

struct LossWeights {
  double cycle = 10.0;
  double identity = 1.0;
  double adversarial = 1.0;
  double conditional = 1.0;
  double gradient_penalty = 10.0;
  PenaltyForm penalty_form = PenaltyForm::standard;

  void validate() const {
    for (double w : {cycle, identity, adversarial, conditional, gradient_penalty})
      if (!std::isfinite(w) || w < 0.0) throw Error("loss weights must be finite and non-negative");
  }
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"cycle", w.cycle},
                     {"identity", w.identity},
                     {"adversarial", w.adversarial},
                     {"conditional", w.conditional},
                     {"gradient_penalty", w.gradient_penalty},
                     {"penalty_form", to_string(w.penalty_form)}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.cycle = j.value("cycle", d.cycle);
  w.identity = j.value("identity", d.identity);
  w.adversarial = j.value("adversarial", d.adversarial);
  w.conditional = j.value("conditional", d.conditional);
  w.gradient_penalty = j.value("gradient_penalty", d.gradient_penalty);
  w.penalty_form = parse_penalty_form(j.value("penalty_form", to_string(d.penalty_form)));
}

template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  auto d = sub(a, b);
  return mean(mul(d, d));
}

/// -log10(max(MSE, 1e-10)); equals PSNR / 10 on [0, 1] images.
template <class T>
Tensor<T> psnr_loss(const Tensor<T>& output, const Tensor<T>& target) {
  return neg(log10(clamp(mse(output, target), T(kMseFloor), std::numeric_limits<T>::max())));
}

/// Quantity the supervised optimizer minimizes: log10(max(MSE, 1e-10)).
template <class T>
Tensor<T> supervised_objective(const Tensor<T>& output, const Tensor<T>& target) {
  return neg(psnr_loss(output, target));
}

/// max(0, norm - 1) elementwise.
template <class T>
Tensor<T> penalty_hinge(const Tensor<T>& grad_norm) {
  return clamp(affine(grad_norm, T(1), T(-1)), T(0), std::numeric_limits<T>::max());
}

template <class T>
struct PenaltyResult {
  Tensor<T> lambda;     // (N) hinge per sample, differentiable w.r.t. critic parameters
  Tensor<T> grad_norm;  // (N) ||dD/dy||_2 at the interpolates
};

/// Penalty at y = u * real + (1 - u) * fake with one u per sample. `critic`
/// maps (N, C, H, W) to (N) and must not mix samples.
template <class T, class CriticFn>
PenaltyResult<T> gradient_penalty(CriticFn&& critic, const Tensor<T>& real, const Tensor<T>& fake,
                                  const Tensor<T>& u) {
  if (real.shape() != fake.shape()) throw ShapeError("gradient_penalty: real/fake shapes differ");
  if (real.dim() != 4) throw ShapeError("gradient_penalty expects NCHW batches");
  const std::size_t N = real.size(0);
  if (u.shape() != Shape{N}) throw ShapeError("gradient_penalty: need one interpolation coefficient per sample");
  Tensor<T> y;
  {
    NoGradGuard ng;
    auto uu = reshape(u, Shape{N, 1, 1, 1});
    y = add(mul(uu, real), mul(affine(uu, T(-1), T(1)), fake));
  }
  y.set_requires_grad(true);
  // The input gradient needs a recorded critic pass even under NoGradGuard;
  // the penalty itself is only differentiable when grad mode was on.
  const bool outer = grad_enabled();
  Tensor<T> g;
  {
    GradModeGuard on(true);
    auto scores = critic(y);
    if (scores.shape() != Shape{N}) throw ShapeError("gradient_penalty: critic must return one score per sample");
    g = grad(sum(scores), {y}, outer)[0];
  }
  auto norm = l2_norm(g, {1, 2, 3});
  return {penalty_hinge(norm), norm};
}

/// Critic objective from mean scores and per-sample penalties lambda (N) or (1).
/// standard: d_fake - d_real + w * mean(lambda^2); product: (d_real - d_fake) * mean(lambda) * w.
template <class T>
Tensor<T> critic_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake, const Tensor<T>& lambda,
                      const LossWeights& weights) {
  const T w = static_cast<T>(weights.gradient_penalty);
  if (weights.penalty_form == PenaltyForm::product)
    return affine(mul(sub(d_real, d_fake), mean(lambda)), w, T(0));
  return add(sub(d_fake, d_real), affine(mean(mul(lambda, lambda)), w, T(0)));
}

/// Generator-side adversarial term: -mean(d_fake), minimized.
template <class T>
Tensor<T> adversarial_loss(const Tensor<T>& d_fake) {
  return neg(mean(d_fake));
}

/// Literal reported value mean(d_fake).
template <class T>
Tensor<T> adversarial_loss_literal(const Tensor<T>& d_fake) {
  return mean(d_fake);
}

template <class T>
Tensor<T> cycle_loss(const Tensor<T>& x_s, const Tensor<T>& x_s_cyc, const Tensor<T>& x_t,
                     const Tensor<T>& x_t_cyc) {
  return add(mse(x_s, x_s_cyc), mse(x_t, x_t_cyc));
}

/// Subtracts each image's own scalar mean over channels and pixels. Accepts
/// a CHW image or an NCHW batch (centered per sample).
template <class T>
Tensor<T> center_per_image(const Tensor<T>& x) {
  if (x.dim() == 4) return sub(x, mean(x, {1, 2, 3}, true));
  return sub(x, mean(x));
}

/// Brightness-invariant identity loss: each image is centered by its own mean.
template <class T>
Tensor<T> identity_loss(const Tensor<T>& x_s, const Tensor<T>& x_t_fake, const Tensor<T>& x_t,
                        const Tensor<T>& x_s_fake) {
  if (x_s.shape() != x_t_fake.shape() || x_t.shape() != x_s_fake.shape())
    throw ShapeError("identity_loss: pairwise shapes differ");
  return add(mse(center_per_image(x_s), center_per_image(x_t_fake)),
             mse(center_per_image(x_t), center_per_image(x_s_fake)));
}

/// Binary cross-entropy summed over tasks, averaged over the batch.
/// z and c_out: (K) or (N, K); c_out is clamped to [1e-7, 1 - 1e-7].
template <class T>
Tensor<T> conditional_loss(const Tensor<T>& z, const Tensor<T>& c_out) {
  if (z.shape() != c_out.shape())
    throw ShapeError("conditional_loss: z " + to_string(z.shape()) + " vs output " + to_string(c_out.shape()));
  for (T v : z.values())
    if (!(v >= T(0) && v <= T(1))) throw Error("conditional_loss: z entries must lie in [0, 1]");
  const T eps = static_cast<T>(kProbabilityClamp);
  auto c = clamp(c_out, eps, T(1) - eps);
  auto ll = add(mul(z, log(c)), mul(affine(z, T(-1), T(1)), log(affine(c, T(-1), T(1)))));
  const std::size_t batch = z.dim() == 2 ? z.size(0) : 1;
  return affine(sum(ll), T(-1) / static_cast<T>(batch), T(0));
}

template <class T>
struct GeneratorLosses {
  Tensor<T> cycle;
  Tensor<T> identity;
  Tensor<T> adversarial;  // generator-side term (-D)
  Tensor<T> conditional;  // may be undefined when the conditional weight is 0
};

/// Weighted sum; terms with weight 0 are omitted exactly.
template <class T>
Tensor<T> total_generator_loss(const GeneratorLosses<T>& parts, const LossWeights& weights) {
  weights.validate();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  auto term = [&](const Tensor<T>& t, double w, const char* name) {
    if (w == 0.0) return;
    if (!t.defined()) throw Error(std::string("total_generator_loss: missing ") + name + " term");
    for (T v : t.values())
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + name + " loss");
    total = add(total, affine(reshape(t, Shape{1}), static_cast<T>(w), T(0)));
  };
  term(parts.cycle, weights.cycle, "cycle");
  term(parts.identity, weights.identity, "identity");
  term(parts.adversarial, weights.adversarial, "adversarial");
  term(parts.conditional, weights.conditional, "conditional");
  return total;
}

}  // namespace gsgn
