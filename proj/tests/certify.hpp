#pragma once

// Finite-difference certification cases shared by the unit tests and the
// acceptance binary. Every case builds random float64 inputs from a seed and
// returns the worst relative error of finite_difference_check.

#include <functional>
#include <string>
#include <vector>

#include "gsgn/gradcheck.hpp"
#include "gsgn/gsgn.hpp"

namespace gsgn::certify {

using D = Tensor<double>;
using Rng = std::mt19937_64;

struct Case {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

inline D randn(const Shape& s, Rng& rng, double std = 1.0) { return D::randn(s, rng, std); }
inline D uniform(const Shape& s, Rng& rng, double lo, double hi) { return D::uniform(s, rng, lo, hi); }

/// Moves entries within `margin` of `point` to point +- margin so central
/// differences never straddle a kink.
inline void avoid(D& t, double point, double margin = 1e-2) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double d = t[i] - point;
    if (std::abs(d) < margin) t[i] = point + (d < 0 ? -margin : margin);
  }
}

/// Scalar probe <y, r> with fixed random r, so every output entry matters.
inline D probe(const D& y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9E3779B97F4A7C15ull);
  return sum(mul(y, D::randn(y.shape(), rng)));
}

/// Better of two step sizes: a central difference that straddles a leaky
/// ReLU kink inside a deep network is wrong at one step size but not at both,
/// while a wrong backward rule fails at every step size.
inline double check(const std::function<D()>& f, std::vector<D> wrt, std::uint64_t seed, std::size_t max_entries = 0) {
  const double coarse = finite_difference_check(f, wrt, 1e-5, max_entries, seed);
  if (coarse < 1e-7) return coarse;
  return std::min(coarse, finite_difference_check(f, wrt, 1e-6, max_entries, seed));
}

/// Named handles for top-level modules (visit(f)) and blocks (visit(prefix, f)).
template <class Module>
NamedTensors<double> named_of(Module& m) {
  NamedTensors<double> out;
  auto f = [&](const std::string& name, D& t) { out.emplace_back(name, t); };
  if constexpr (requires { m.visit(f); })
    m.visit(f);
  else
    m.visit("", f);
  return out;
}

template <class Module>
std::vector<D> params_of(Module& m) {
  std::vector<D> out;
  for (auto& [name, t] : named_of(m)) out.push_back(t);
  return out;
}

/// Gradient of `f(x)` w.r.t. x that stays differentiable when grad mode is
/// on and is still computable during the no-grad finite-difference probes.
inline D input_grad(const std::function<D(const D&)>& f, const D& x) {
  const bool outer = grad_enabled();
  GradModeGuard on(true);
  D leaf = x;
  if (!outer || !x.requires_grad()) {
    leaf = x.detach();
    leaf.set_requires_grad(true);
  }
  return grad(f(leaf), {leaf}, outer)[0];
}

/// Randomizes every parameter (including zero-initialized heads and norm
/// affines) so no gradient path is trivially zero.
template <class Module>
void randomize(Module& m, Rng& rng, double std = 0.3) {
  for (auto& [name, t] : named_of(m)) {
    auto r = D::randn(t.shape(), rng, std);
    if (name.find("gamma") != std::string::npos)
      for (std::size_t i = 0; i < r.numel(); ++i) r[i] += 1.0;
    t.assign(r.values());
  }
}

// ---------------------------------------------------------------------------

inline std::vector<Case> op_cases() {
  std::vector<Case> c;
  auto binary = [&](std::string name, auto op, double lo_b, double hi_b, Shape sb) {
    c.push_back({name, [=](std::uint64_t seed) {
                   Rng rng(seed);
                   D a = randn({2, 3, 4}, rng), b = uniform(sb, rng, lo_b, hi_b);
                   return check([&] { return probe(op(a, b), seed); }, {a, b}, seed);
                 }});
  };
  auto add_ = [](const D& a, const D& b) { return add(a, b); };
  auto sub_ = [](const D& a, const D& b) { return sub(a, b); };
  auto mul_ = [](const D& a, const D& b) { return mul(a, b); };
  auto div_ = [](const D& a, const D& b) { return div(a, b); };
  binary("add", add_, -1, 1, {2, 3, 4});
  binary("add broadcast", add_, -1, 1, {1, 3, 1});
  binary("sub broadcast", sub_, -1, 1, {2, 1, 4});
  binary("mul", mul_, -1, 1, {2, 3, 4});
  binary("mul broadcast", mul_, -1, 1, {1, 1, 4});
  binary("div", div_, 0.5, 2, {2, 3, 4});
  binary("div broadcast", div_, 0.5, 2, {2, 3, 1});

  auto unary = [&](std::string name, auto op, double lo, double hi, std::vector<double> kinks = {}) {
    c.push_back({name, [=](std::uint64_t seed) {
                   Rng rng(seed);
                   D a = uniform({3, 5}, rng, lo, hi);
                   for (double k : kinks) avoid(a, k);
                   return check([&] { return probe(op(a), seed); }, {a}, seed);
                 }});
  };
  unary("affine", [](const D& a) { return affine(a, 1.7, -0.3); }, -2, 2);
  unary("pow", [](const D& a) { return pow(a, 2.5); }, 0.2, 2);
  unary("pow negative exponent", [](const D& a) { return pow(a, -0.5); }, 0.2, 2);
  unary("log", [](const D& a) { return log(a); }, 0.1, 3);
  unary("log10", [](const D& a) { return log10(a); }, 0.1, 3);
  unary("exp", [](const D& a) { return exp(a); }, -2, 2);
  unary("sqrt", [](const D& a) { return sqrt(a); }, 0.1, 3);
  unary("clamp", [](const D& a) { return clamp(a, 0.0, 1.0); }, -0.5, 1.5, {0.0, 1.0});
  unary("sigmoid", [](const D& a) { return sigmoid(a); }, -4, 4);
  unary("leaky_relu", [](const D& a) { return leaky_relu(a, 0.2); }, -2, 2, {0.0});
  unary("reshape", [](const D& a) { return reshape(a, Shape{5, 3}); }, -1, 1);
  unary("broadcast_to", [](const D& a) { return broadcast_to(reshape(a, Shape{1, 3, 5}), Shape{2, 3, 5}); }, -1, 1);
  unary("sum axes", [](const D& a) { return sum(a, {1}); }, -1, 1);
  unary("sum keepdim", [](const D& a) { return sum(a, {0}, true); }, -1, 1);
  unary("mean axes", [](const D& a) { return mean(a, {0, 1}); }, -1, 1);
  unary("l2_norm", [](const D& a) { return l2_norm(a, {1}); }, 0.1, 1);
  unary("slice", [](const D& a) { return slice(a, 1, 1, 3); }, -1, 1);
  unary("concat", [](const D& a) { return concat<double>({a, affine(a, 2.0, 0.0), slice(a, 1, 0, 2)}, 1); }, -1, 1);

  c.push_back({"shuffle", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 3, 4, 6}, rng);
                 return check([&] { return probe(shuffle(x), seed); }, {x}, seed);
               }});
  c.push_back({"unshuffle", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 8, 2, 3}, rng);
                 return check([&] { return probe(unshuffle(x), seed); }, {x}, seed);
               }});
  for (int t = 0; t < 4; ++t) {
    const bool ta = t & 1, tb = t & 2;
    c.push_back({"matmul " + std::to_string(t), [ta, tb](std::uint64_t seed) {
                   Rng rng(seed);
                   D a = randn(ta ? Shape{4, 3} : Shape{3, 4}, rng), b = randn(tb ? Shape{5, 4} : Shape{4, 5}, rng);
                   return check([&] { return probe(matmul(a, b, ta, tb), seed); }, {a, b}, seed);
                 }});
  }
  for (std::size_t K : {1, 3, 5}) {
    c.push_back({"conv2d k" + std::to_string(K), [K](std::uint64_t seed) {
                   Rng rng(seed);
                   D x = randn({2, 3, 5, 4}, rng), w = randn({4, 3, K, K}, rng, 0.3);
                   return check([&] { return probe(conv2d(x, w), seed); }, {x, w}, seed);
                 }});
  }
  c.push_back({"instance_normalize", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 3, 4, 4}, rng);
                 return check([&] { return probe(instance_normalize(x, 1e-5), seed); }, {x}, seed);
               }});
  // Differentiable backward of the fused normalization (used by the penalty).
  c.push_back({"instance_normalize double backward", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 2, 3, 3}, rng);
                 return check(
                     [&] {
                       auto g = input_grad([&](const D& v) { return probe(instance_normalize(v, 1e-5), seed); }, x);
                       return probe(mul(g, g), seed + 1);
                     },
                     {x}, seed);
               }});
  c.push_back({"conv2d double backward", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({1, 2, 4, 4}, rng), w = randn({3, 2, 3, 3}, rng, 0.3);
                 return check(
                     [&] {
                       auto g = input_grad([&](const D& v) { return probe(leaky_relu(conv2d(v, w), 0.2), seed); }, x);
                       return sum(mul(g, g));
                     },
                     {w}, seed);
               }});
  return c;
}

inline std::vector<Case> layer_cases() {
  std::vector<Case> c;
  c.push_back({"conv2d layer", [](std::uint64_t seed) {
                 Rng rng(seed);
                 ConvSpec s{3, 4, 3};
                 D x = randn({2, 3, 4, 4}, rng), w = randn({4, 3, 3, 3}, rng, 0.3), b = randn({4}, rng);
                 return check([&] { return probe(conv2d(x, s, w, b), seed); }, {x, w, b}, seed);
               }});
  c.push_back({"fully_connected", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({3, 5}, rng), w = randn({4, 5}, rng), b = randn({4}, rng);
                 return check([&] { return probe(fully_connected(x, w, b), seed); }, {x, w, b}, seed);
               }});
  c.push_back({"leaky_relu layer", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 3, 3, 3}, rng);
                 avoid(x, 0.0);
                 return check([&] { return probe(leaky_relu(x, kLeakySlope), seed); }, {x}, seed);
               }});
  c.push_back({"instance_norm", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 3, 4, 4}, rng), g = randn({3}, rng), b = randn({3}, rng);
                 return check([&] { return probe(instance_norm(x, g, b), seed); }, {x, g, b}, seed);
               }});
  c.push_back({"adaptive_instance_norm", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D x = randn({2, 3, 4, 4}, rng), s = randn({2, 3}, rng), b = randn({2, 3}, rng);
                 return check([&] { return probe(adaptive_instance_norm(x, s, b), seed); }, {x, s, b}, seed);
               }});
  c.push_back({"global_feature_gate", [](std::uint64_t seed) {
                 Rng rng(seed);
                 GlobalFeatureGate<double> gate(4, 2, rng);
                 D x = randn({2, 4, 3, 3}, rng);
                 auto p = params_of(gate);
                 p.push_back(x);
                 return check([&] { return probe(gate(x), seed); }, p, seed);
               }});
  c.push_back({"residual_block", [](std::uint64_t seed) {
                 Rng rng(seed);
                 ResidualBlock<double> block(3, rng, 0);
                 std::vector<InstanceNorm<double>> norms{InstanceNorm<double>(3), InstanceNorm<double>(3)};
                 for (auto& n : norms) randomize(n, rng);
                 D x = randn({2, 3, 4, 4}, rng);
                 auto p = params_of(block);
                 for (auto& n : norms) p.push_back(n.gamma), p.push_back(n.beta);
                 p.push_back(x);
                 auto norm = [&](const D& h, std::size_t site) { return norms[site](h); };
                 return check([&] { return probe(block(x, norm), seed); }, p, seed);
               }});
  c.push_back({"mapping network", [](std::uint64_t seed) {
                 Rng rng(seed);
                 MappingNetwork<double> m(3, 6, 3, rng);
                 D z = uniform({2, 3}, rng, 0, 1);
                 auto p = params_of(m);
                 p.push_back(z);
                 return check([&] { return probe(m(z), seed); }, p, seed);
               }});
  c.push_back({"critic", [](std::uint64_t seed) {
                 Critic<double> d(CriticConfig{{4, 6}}, seed);
                 Rng rng(seed);
                 D x = uniform({2, 3, 8, 8}, rng, 0, 1);
                 auto p = params_of(d);
                 p.push_back(x);
                 return check([&] { return probe(d(x), seed); }, p, seed);
               }});
  c.push_back({"classifier", [](std::uint64_t seed) {
                 Classifier<double> cl(3, CriticConfig{{4, 6}}, seed);
                 Rng rng(seed);
                 D x = uniform({2, 3, 8, 8}, rng, 0, 1);
                 auto p = params_of(cl);
                 p.push_back(x);
                 return check([&] { return probe(cl(x), seed); }, p, seed);
               }});
  return c;
}

inline std::vector<Case> loss_cases() {
  std::vector<Case> c;
  auto img = [](Rng& rng) { return uniform({2, 3, 4, 4}, rng, 0, 1); };
  c.push_back({"mse", [=](std::uint64_t seed) {
                 Rng rng(seed);
                 D a = img(rng), b = img(rng);
                 return check([&] { return mse(a, b); }, {a, b}, seed);
               }});
  c.push_back({"psnr_loss", [=](std::uint64_t seed) {
                 Rng rng(seed);
                 D a = img(rng), b = img(rng);
                 return check([&] { return psnr_loss(a, b); }, {a, b}, seed);
               }});
  c.push_back({"supervised_objective", [=](std::uint64_t seed) {
                 Rng rng(seed);
                 D a = img(rng), b = img(rng);
                 return check([&] { return supervised_objective(a, b); }, {a, b}, seed);
               }});
  c.push_back({"cycle_loss", [=](std::uint64_t seed) {
                 Rng rng(seed);
                 D a = img(rng), b = img(rng), e = img(rng), f = img(rng);
                 return check([&] { return cycle_loss(a, b, e, f); }, {a, b, e, f}, seed);
               }});
  c.push_back({"identity_loss", [=](std::uint64_t seed) {
                 Rng rng(seed);
                 D a = img(rng), b = img(rng), e = img(rng), f = img(rng);
                 return check([&] { return identity_loss(a, b, e, f); }, {a, b, e, f}, seed);
               }});
  c.push_back({"conditional_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D z = uniform({3, 4}, rng, 0, 1), p = uniform({3, 4}, rng, 0.05, 0.95);
                 return check([&] { return conditional_loss(z, p); }, {z, p}, seed);
               }});
  for (auto form : {PenaltyForm::standard, PenaltyForm::product}) {
    c.push_back({"critic_loss " + to_string(form), [form](std::uint64_t seed) {
                   Rng rng(seed);
                   D dr = randn({1}, rng), df = randn({1}, rng), lam = uniform({4}, rng, 0.1, 2);
                   LossWeights w;
                   w.penalty_form = form;
                   return check([&] { return critic_loss(dr, df, lam, w); }, {dr, df, lam}, seed);
                 }});
  }
  c.push_back({"adversarial_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D d = randn({5}, rng);
                 return check([&] { return adversarial_loss(d); }, {d}, seed);
               }});
  c.push_back({"penalty_hinge", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D n = uniform({6}, rng, 0.2, 2.0);
                 avoid(n, 1.0);
                 return check([&] { return probe(penalty_hinge(n), seed); }, {n}, seed);
               }});
  c.push_back({"total_generator_loss", [](std::uint64_t seed) {
                 Rng rng(seed);
                 D cy = randn({1}, rng), id = randn({1}, rng), ad = randn({1}, rng), co = randn({1}, rng);
                 LossWeights w;
                 w.cycle = 0.5 + uniform({1}, rng, 0, 1)[0];
                 w.identity = uniform({1}, rng, 0, 2)[0];
                 w.adversarial = uniform({1}, rng, 0, 2)[0];
                 w.conditional = uniform({1}, rng, 0, 2)[0];
                 return check([&] { return total_generator_loss<double>({cy, id, ad, co}, w); }, {cy, id, ad, co}, seed);
               }});
  // Second-order path: d/d(critic params) of a loss built on the critic's input gradient.
  c.push_back({"gradient_penalty", [](std::uint64_t seed) {
                 Critic<double> d(CriticConfig{{4, 6}}, seed);
                 Rng rng(seed);
                 D real = uniform({3, 3, 8, 8}, rng, 0, 1), fake = uniform({3, 3, 8, 8}, rng, 0, 1);
                 D u = uniform({3}, rng, 0, 1);
                 {
                   // Scale the linear head so every sample sits past the hinge.
                   auto pr = gradient_penalty(d, real, fake, u);
                   double lo = 1e9;
                   for (double v : pr.grad_norm.values()) lo = std::min(lo, v);
                   auto& hw = d.head().weight;
                   for (auto& v : hw.data()) v *= 2.0 / lo;
                 }
                 LossWeights w;
                 return check(
                     [&] {
                       auto pr = gradient_penalty(d, real, fake, u);
                       return critic_loss(mean(d(real)), mean(d(fake)), pr.lambda, w);
                     },
                     params_of(d), seed);
               }});
  c.push_back({"gradient_penalty norm", [](std::uint64_t seed) {
                 Critic<double> d(CriticConfig{{4, 6}}, seed);
                 Rng rng(seed);
                 D real = uniform({2, 3, 8, 8}, rng, 0, 1), fake = uniform({2, 3, 8, 8}, rng, 0, 1);
                 D u = uniform({2}, rng, 0, 1);
                 return check([&] { return sum(gradient_penalty(d, real, fake, u).grad_norm); }, params_of(d), seed);
               }});
  return c;
}

/// Assembled generators on (1, 3, 8, 8) inputs with every parameter
/// randomized. `max_entries` samples entries per parameter tensor.
inline double model_check(const ModelConfig& base, std::uint64_t seed, std::size_t max_entries) {
  ModelConfig cfg = base;
  cfg.zero_init_output = false;
  Gsgn<double> g(cfg, seed);
  Rng rng(seed);
  randomize(g, rng, 0.15);
  D x = uniform({1, 3, 8, 8}, rng, 0, 1), y = uniform({1, 3, 8, 8}, rng, 0, 1);
  D z = cfg.norm_mode == NormMode::adaptive ? uniform({cfg.task_count}, rng, 0, 1) : D();
  auto p = params_of(g);
  p.push_back(x);
  return check([&] { return supervised_objective(g.forward(x, z), y); }, p, seed, max_entries);
}

inline std::vector<Case> model_cases() {
  return {
      {"gsgn desk instance", [](std::uint64_t s) { return model_check(ModelConfig::desk(), s, 4); }},
      {"gsgn desk adaptive", [](std::uint64_t s) { return model_check(ModelConfig::desk(NormMode::adaptive, 3), s, 4); }},
      {"gsgn desk no norm", [](std::uint64_t s) { return model_check(ModelConfig::desk(NormMode::none), s, 4); }},
  };
}

/// Default-size generators (GSGN, MT-GSGN) with sampled entries.
inline std::vector<Case> full_model_cases() {
  return {
      {"gsgn", [](std::uint64_t s) { return model_check(ModelConfig::gsgn(), s, 2); }},
      {"mt-gsgn", [](std::uint64_t s) { return model_check(ModelConfig::mt_gsgn(3), s, 2); }},
  };
}

}  // namespace gsgn::certify
