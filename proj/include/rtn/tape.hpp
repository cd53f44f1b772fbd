#pragma once

#include <deque>
#include <functional>
#include <stdexcept>
#include <vector>

#include "rtn/tensor.hpp"

namespace rtn::ad {

// Reverse-mode autodiff over whole tensors. Nodes are recorded on a Tape in
// creation order, which is a valid topological order (an op can only consume
// nodes that already exist), so backward is a single reverse sweep.
//
// Parameters are leaves owned outside the tape (see nn::ParamStore); they
// accumulate gradients but are never traversed as tape entries.
template <class T>
struct Node {
  Tensor<T> val;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<Node*> parents;
  std::function<void(Node&)> backward;  // pulls this->grad into parents

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.empty()) grad = Tensor<T>(val.shape());
    if (!grad.same_shape(g)) throw std::logic_error("grad shape mismatch");
    T* dst = grad.data();
    const T* src = g.data();
    for (int64_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  // Gradient buffer for in-place accumulation by op backwards.
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(val.shape());
    return grad;
  }
};

template <class T>
using Var = Node<T>*;

template <class T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
    Node<T>& n = nodes_.emplace_back();
    n.val = std::move(v);
    n.requires_grad = requires_grad;
    return &n;
  }

  Var<T> make(Tensor<T> v, std::vector<Var<T>> parents,
              std::function<void(Node<T>&)> bwd) {
    Node<T>& n = nodes_.emplace_back();
    n.val = std::move(v);
    for (Var<T> p : parents)
      if (p && p->requires_grad) n.requires_grad = true;
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(bwd);
    return &n;
  }

  // Reverse sweep from a scalar loss. Only nodes recorded on this tape are
  // visited; external parameter leaves just receive accumulations.
  void backward(Var<T> loss) {
    if (loss->val.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    loss->grad = Tensor<T>::full(loss->val.shape(), T(1));
    loss->requires_grad = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = *it;
      if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(n);
    }
  }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  std::deque<Node<T>> nodes_;
};

}  // namespace rtn::ad
