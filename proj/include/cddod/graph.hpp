#pragma once

#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "cddod/tensor.hpp"

namespace cddod {

/// Named trainable tensor. Gradients accumulate into `grad` when a Graph
/// holding this parameter is backpropagated; sgd_step consumes and zeroes them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape)) {}
};

class Graph;

/// Lightweight handle to a node in a Graph.
struct Value {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in forward order; backward() walks
/// them in exact reverse creation order. One Graph per training step.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first gradient write
    bool requires_grad = false;
    Parameter* bound = nullptr;
    std::function<void(Graph&)> backprop;  // empty for leaves
  };

  Value leaf(Tensor t, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(t), Tensor(), requires_grad, nullptr, nullptr});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  Value constant(Tensor t) { return leaf(std::move(t), false); }
  Value constant_scalar(double v) { return leaf(Tensor::scalar(v), false); }

  /// Inserts a parameter as a leaf. Its value is copied onto the tape; after
  /// backward() the accumulated gradient is added into p.grad.
  Value param(Parameter& p) {
    nodes_.push_back(Node{p.value, Tensor(), true, &p, nullptr});
    return Value{this, static_cast<int>(nodes_.size()) - 1};
  }

  int emit(Tensor out, bool requires_grad, std::function<void(Graph&)> back) {
    nodes_.push_back(Node{std::move(out), Tensor(), requires_grad, nullptr,
                          requires_grad ? std::move(back) : nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Tensor& value(Value v) const { return val(v.id); }

  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  bool needs_grad(Value v) const { return needs_grad(v.id); }

  /// Gradient buffer of a node, allocated (zero) on first access.
  Tensor& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }
  Tensor& grad(Value v) { return grad_buf(v.id); }

  bool grad_written(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

  double scalar(Value v) const {
    const Tensor& t = val(v.id);
    check(t.numel() == 1, "scalar: node has " + std::to_string(t.numel()) + " elements");
    return t.data[0];
  }

  /// Reverse pass from a scalar loss. Visits node records in exact reverse
  /// creation order; nodes whose gradient buffer was never touched are skipped
  /// (they cannot contribute). Parameter-bound leaves flush into
  /// Parameter::grad at the end.
  void backward(Value loss) {
    check(loss.g == this, "backward: value belongs to another graph");
    check(val(loss.id).numel() == 1, "backward: loss must be scalar");
    grad_buf(loss.id).data[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (!n.requires_grad || !n.backprop || n.grad.data.empty()) continue;
      n.backprop(*this);
    }
    for (Node& n : nodes_) {
      if (n.bound == nullptr || n.grad.data.empty()) continue;
      double* dst = n.bound->grad.data.data();
      const double* src = n.grad.data.data();
      for (int64_t i = 0; i < n.grad.numel(); ++i) dst[i] += src[i];
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

}  // namespace cddod
