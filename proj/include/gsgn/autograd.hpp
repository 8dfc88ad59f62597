#pragma once

#include <unordered_map>
#include <unordered_set>

#include "gsgn/ops.hpp"

namespace gsgn {

namespace detail {

template <class T>
using ImplPtr = const TensorImpl<T>*;

// Reverse-mode sweep from `root`. With `targets` empty, gradients are
// accumulated into every reachable requires_grad leaf; otherwise gradients
// for exactly the given tensors are returned and no leaf is touched.
template <class T>
std::vector<Tensor<T>> run_backward(const Tensor<T>& root, const std::vector<Tensor<T>>& targets,
                                    bool create_graph, bool retain_graph) {
  if (!root.defined()) throw GraphError("backward on undefined tensor");
  if (root.numel() != 1)
    throw GraphError("backward requires a scalar root, got shape " + to_string(root.shape()));
  if (!root.requires_grad())
    throw GraphError("backward without a recorded forward pass: root does not require grad");

  // Topological order over tensors reachable through recorded nodes.
  std::vector<Tensor<T>> order;
  std::unordered_set<ImplPtr<T>> seen;
  {
    std::vector<std::pair<Tensor<T>, bool>> stack{{root, false}};
    while (!stack.empty()) {
      auto [t, expanded] = stack.back();
      stack.pop_back();
      if (expanded) {
        order.push_back(t);
        continue;
      }
      if (seen.count(t.id())) continue;
      seen.insert(t.id());
      stack.push_back({t, true});
      if (const auto& fn = t.grad_fn()) {
        if (fn->released)
          throw GraphError("backward through a released graph (node '" + fn->name +
                           "'); run a new forward pass");
        for (const auto& in : fn->inputs)
          if (in.defined() && in.requires_grad() && !seen.count(in.id())) stack.push_back({in, false});
      }
    }
  }

  std::unordered_set<ImplPtr<T>> target_ids;
  for (const auto& t : targets) target_ids.insert(t.id());
  const bool accumulate = targets.empty();

  // needed[t]: t lies on a path to something that wants a gradient.
  std::unordered_map<ImplPtr<T>, bool> needed;
  for (const auto& t : order) {
    bool need = accumulate ? (t.is_leaf() && t.requires_grad()) : target_ids.count(t.id()) > 0;
    if (const auto& fn = t.grad_fn())
      for (const auto& in : fn->inputs)
        if (in.defined() && in.requires_grad()) need = need || needed[in.id()];
    needed[t.id()] = need;
  }

  std::unordered_map<ImplPtr<T>, Tensor<T>> grads;
  grads[root.id()] = Tensor<T>::ones(root.shape());
  {
    GradModeGuard mode(create_graph);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Tensor<T>& t = *it;
      auto git = grads.find(t.id());
      if (git == grads.end() || !needed[t.id()]) continue;
      const auto& fn = t.grad_fn();
      if (!fn) continue;
      std::vector<bool> needs;
      needs.reserve(fn->inputs.size());
      for (const auto& in : fn->inputs)
        needs.push_back(in.defined() && in.requires_grad() && needed[in.id()]);
      auto in_grads = fn->rule(git->second, fn->inputs, needs);
      for (std::size_t i = 0; i < fn->inputs.size(); ++i) {
        if (!needs[i] || !in_grads[i].defined()) continue;
        const auto* id = fn->inputs[i].id();
        auto slot = grads.find(id);
        if (slot == grads.end()) {
          grads.emplace(id, in_grads[i]);
        } else {
          slot->second = add(slot->second, in_grads[i]);
        }
      }
      if (!create_graph && !target_ids.count(t.id())) grads.erase(t.id());
    }
  }

  std::vector<Tensor<T>> result;
  if (accumulate) {
    for (auto& t : order) {
      if (!t.is_leaf() || !t.requires_grad()) continue;
      auto g = grads.find(t.id());
      if (g != grads.end()) t.accumulate_grad(g->second);
    }
  } else {
    for (const auto& t : targets) {
      auto g = grads.find(t.id());
      result.push_back(g != grads.end() ? g->second : Tensor<T>::zeros(t.shape()));
    }
  }

  if (!retain_graph)
    for (auto& t : order)
      if (const auto& fn = t.grad_fn()) fn->release();
  return result;
}

}  // namespace detail

/// Accumulates d(root)/d(leaf) into every requires_grad leaf. Releases the
/// graph unless `retain_graph`; a second backward through a released graph
/// is an error.
template <class T>
void backward(const Tensor<T>& root, bool retain_graph = false) {
  detail::run_backward<T>(root, {}, false, retain_graph);
}

/// Functional gradient: d(root)/d(input) for each input, without touching
/// leaf gradient buffers. With `create_graph` the returned gradients are
/// themselves differentiable (the graph is retained).
template <class T>
std::vector<Tensor<T>> grad(const Tensor<T>& root, const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false) {
  if (inputs.empty()) throw GraphError("grad() needs at least one input");
  return detail::run_backward<T>(root, inputs, create_graph, create_graph);
}

}  // namespace gsgn
