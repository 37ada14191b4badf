// Minimal tape-free reverse-mode differentiation. Each Var owns a node holding
// its value, an accumulated gradient, and a closure that pushes the gradient
// into its inputs. backward() walks the graph in reverse topological order.
#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lsirr/tensor.hpp"

namespace lsirr::ad {

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables graph construction in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Zeros when nothing has flowed into this node.
  Tensor<T> grad() const { return node_->grad.empty() ? Tensor<T>(node_->value.shape()) : node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Var detach() const { return Var(node_->value, false); }
  const NodePtr& node() const { return node_; }

  // Seeds d(this)/d(this) = 1; this must hold a single element.
  void backward() const {
    if (node_->value.size() != 1) throw std::logic_error("backward() requires a scalar output");
    backward(Tensor<T>(node_->value.shape(), T{1}));
  }

  void backward(const Tensor<T>& seed) const {
    if (!node_->requires_grad) return;
    // Strong references keep interior nodes alive while their inputs are released.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->inputs.size()) {
        auto child = top.first->inputs[top.second++];
        if (child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
      } else {
        order.push_back(std::move(top.first));
        stack.pop_back();
      }
    }
    node_->grad_buffer() += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (!n.backward) continue;
      if (!n.grad.empty()) n.backward(n);
      // Interior nodes release their closure and gradient once propagated.
      n.backward = nullptr;
      n.inputs.clear();
      if (&n != node_.get()) n.grad = Tensor<T>();
    }
  }

  static Var make(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node<T>&)> fn) {
    Var out(std::move(value), false);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs)
      if (in.defined()) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::move(fn);
    return out;
  }

 private:
  NodePtr node_;
};

// Accumulate into an input's gradient only if it participates in differentiation.
template <class T>
Tensor<T>* grad_of(Node<T>& n, std::size_t i) {
  if (i >= n.inputs.size() || !n.inputs[i]->requires_grad) return nullptr;
  return &n.inputs[i]->grad_buffer();
}

}  // namespace lsirr::ad
