#pragma once

#include <nlohmann/json.hpp>

#include "gsgn/models.hpp"

namespace gsgn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a fixed list of parameter handles. Moments are kept in the
/// parameter precision; the update arithmetic runs in double.
template <class T>
class Adam {
 public:
  Adam(NamedTensors<T> params, AdamConfig config) : params_(std::move(params)), config_(config) {
    if (!(config_.learning_rate >= 0.0) || !(config_.beta1 >= 0.0 && config_.beta1 < 1.0) ||
        !(config_.beta2 >= 0.0 && config_.beta2 < 1.0) || !(config_.epsilon > 0.0))
      throw Error("invalid Adam hyper-parameters");
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  const NamedTensors<T>& parameters() const { return params_; }
  std::vector<Tensor<T>> parameter_list() const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, p] : params_) out.push_back(p);
    return out;
  }

  const AdamConfig& config() const { return config_; }
  std::uint64_t step_count() const { return t_; }

  void set_requires_grad(bool on) {
    for (auto& [name, p] : params_) p.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  /// Update from explicit gradients (one per parameter, in order).
  void step(const std::vector<Tensor<T>>& grads) {
    if (grads.size() != params_.size()) throw Error("Adam::step: gradient count does not match parameters");
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.learning_rate, eps = config_.epsilon;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].second;
      const auto& g = grads[k];
      if (!g.defined()) continue;
      if (g.shape() != p.shape()) throw ShapeError("Adam::step: gradient shape mismatch for " + params_[k].first);
      auto data = p.data();
      const auto& gv = g.values();
      for (std::size_t i = 0; i < gv.size(); ++i) {
        if (!std::isfinite(gv[i])) throw NumericError("non-finite gradient for " + params_[k].first);
        const double m = b1 * m_[k][i] + (1.0 - b1) * gv[i];
        const double v = b2 * v_[k][i] + (1.0 - b2) * static_cast<double>(gv[i]) * gv[i];
        m_[k][i] = static_cast<T>(m);
        v_[k][i] = static_cast<T>(v);
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + eps);
        data[i] = static_cast<T>(data[i] - update);
      }
    }
  }

  /// Update from each parameter's accumulated .grad buffer.
  void step() {
    std::vector<Tensor<T>> grads;
    for (const auto& [name, p] : params_) grads.push_back(p.grad());
    step(grads);
  }

  /// Moments as named tensors (prefix + "m." / "v." + parameter name).
  template <class F>
  void visit_state(const std::string& prefix, F&& f) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      f(prefix + "m." + params_[k].first, params_[k].second.shape(), m_[k]);
      f(prefix + "v." + params_[k].first, params_[k].second.shape(), v_[k]);
    }
  }

  void set_step_count(std::uint64_t t) { t_ = t; }

 private:
  NamedTensors<T> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace gsgn
