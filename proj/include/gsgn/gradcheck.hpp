#pragma once

#include <functional>

#include "gsgn/autograd.hpp"

namespace gsgn {

/// Max over entries of |analytic - central difference| / max(1, |analytic|),
/// where the analytic gradient of `f` is taken with respect to each tensor in
/// `wrt` (perturbed in place and restored). `f` must be deterministic and
/// return a single-element tensor.
inline double finite_difference_check(const std::function<Tensor<double>()>& f,
                                      std::vector<Tensor<double>> wrt, double h = 1e-4,
                                      std::size_t max_entries_per_tensor = 0,
                                      std::uint64_t sample_seed = 0) {
  for (auto& t : wrt) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  Tensor<double> y = f();
  if (y.numel() != 1)
    throw ShapeError("finite_difference_check: function returned shape " + to_string(y.shape()));
  std::vector<Tensor<double>> analytic;
  if (y.requires_grad()) {
    analytic = grad(y, wrt);
  } else {
    for (auto& t : wrt) analytic.push_back(Tensor<double>::zeros(t.shape()));
  }

  NoGradGuard ng;
  std::mt19937_64 rng(sample_seed);
  double worst = 0.0;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    auto& t = wrt[k];
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (max_entries_per_tensor && idx.size() > max_entries_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries_per_tensor);
    }
    for (std::size_t i : idx) {
      const double orig = t[i];
      t[i] = orig + h;
      const double fp = f().item();
      t[i] = orig - h;
      const double fm = f().item();
      t[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

/// Single-input form: checks d f(x) / dx at x.
inline double finite_difference_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                      const Tensor<double>& x, double h = 1e-4) {
  Tensor<double> leaf = x.detach();
  return finite_difference_check([&] { return f(leaf); }, {leaf}, h);
}

}  // namespace gsgn
