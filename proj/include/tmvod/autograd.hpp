#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tmvod/tensor.hpp"

namespace tmvod::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void()> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
Var<T> constant(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

// Builds an op result. The backward closure receives the result node; it is
// only kept when some input requires a gradient and recording is enabled.
template <typename T, typename Fn>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, Fn&& backward) {
  auto out = std::make_shared<Node<T>>();
  out->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : inputs) needs = needs || (p && p->requires_grad);
  }
  if (needs) {
    out->requires_grad = true;
    out->parents = std::move(inputs);
    Node<T>* self = out.get();
    out->backward_fn = [self, fn = std::forward<Fn>(backward)]() { fn(*self); };
  }
  return out;
}

// Reverse-mode sweep from a scalar (or seeded) output.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Tensor<T>& g = root->grad_buffer();
  if (seed) {
    g.require_same_shape(*seed, "backward seed");
    g += *seed;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn();
  }
}

}  // namespace tmvod::ag
