#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pral/tensor.hpp"

namespace pral {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::string name;

  // Returns the gradient buffer, allocating zeros on first use.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !grad.empty(); }
  void zero_grad() { grad = Tensor<T>(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_parameter(std::string name, Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->name = std::move(name);
  return node;
}

template <typename T>
Var<T> make_constant(Tensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  return node;
}

// Records operations in execution order and replays their adjoints in
// reverse. Only nodes downstream of a trainable leaf are recorded; with
// recording disabled the tape is a plain forward evaluator.
template <typename T>
class Tape {
 public:
  using Adjoint = std::function<void(Node<T>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }

  bool needs_grad(std::initializer_list<const Var<T>*> inputs) const {
    if (!recording_) return false;
    for (const Var<T>* in : inputs) {
      if ((*in)->requires_grad) return true;
    }
    return false;
  }

  // `adjoint` runs once the output gradient is complete and must accumulate
  // into the gradients of any inputs that require them. It is dropped when
  // no input requires a gradient.
  Var<T> record(Tensor<T> value, bool requires_grad, Adjoint adjoint) {
    auto out = std::make_shared<Node<T>>();
    out->value = std::move(value);
    out->requires_grad = requires_grad;
    if (requires_grad) entries_.push_back({out, std::move(adjoint)});
    return out;
  }

  void backward(const Var<T>& root) {
    if (root->value.size() != 1) {
      throw DimensionError("backward() needs a scalar root, got " + shape_string(root->value.shape()));
    }
    if (!root->requires_grad) return;
    root->grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->has_grad()) continue;
      it->adjoint(*it->output);
    }
  }

 private:
  struct Entry {
    Var<T> output;
    Adjoint adjoint;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace pral
