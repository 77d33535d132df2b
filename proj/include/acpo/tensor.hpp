#pragma once

#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "acpo/errors.hpp"

namespace acpo {

// Dense row-major shape. All data is 64-bit real.
using Shape = std::vector<int>;

inline int shape_numel(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One node of the computation graph. Ops fill `parents` and `backprop`; a
// leaf has neither. `grad` is allocated (zeroed) iff requires_grad.
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool kink = false;  // forward evaluated at a non-differentiable point
  const char* op = "";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables graph recording in its scope. Values computed
// under the guard are constants to any later backward pass.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Value-semantics handle to a graph node. Copying a Tensor shares the node.
//
// Graphs are built by applying the ops in ops.hpp; calling backward() on a
// scalar output fills `grad` on every requires_grad leaf reachable from it.
// Repeated backward calls without zero_grad accumulate.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return make(std::move(shape), v, requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return make({1}, v, requires_grad);
  }

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<int>(data.size()) != shape_numel(shape))
      throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    set_requires_grad_on(*t.node_, requires_grad);
    return t;
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int numel() const { return static_cast<int>(node_->value.size()); }

  std::span<const double> data() const { return node_->value; }
  std::vector<double>& values() { return node_->value; }  // leaf mutation (params)

  double item() const {
    if (numel() != 1)
      throw ShapeError("Tensor::item: tensor has shape " + shape_str(shape()) +
                       ", expected a scalar");
    return node_->value[0];
  }

  double at(int i) const { return node_->value[static_cast<size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }

  void set_requires_grad(bool on) { set_requires_grad_on(*node_, on); }

  std::span<const double> grad() const { return node_->grad; }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  detail::TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const { return node_; }

  // Copy of values with no graph attachment.
  Tensor detach_copy() const {
    return Tensor::from(node_->shape, node_->value, false);
  }

 private:
  static Tensor make(Shape shape, double fill, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->value.assign(static_cast<size_t>(shape_numel(shape)), fill);
    t.node_->shape = std::move(shape);
    set_requires_grad_on(*t.node_, requires_grad);
    return t;
  }

  static void set_requires_grad_on(detail::TensorNode& n, bool on) {
    n.requires_grad = on;
    if (on && n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    if (!on) n.grad.clear();
  }

  std::shared_ptr<detail::TensorNode> node_;
};

// Reverse-mode sweep from a scalar output. Grads accumulate into every
// requires_grad node reachable through recorded parents; leaves that are not
// reachable keep their (zero-initialized) grad. Calling it twice without
// zeroing grads accumulates, by contract.
inline void backward(const Tensor& out) {
  if (out.numel() != 1)
    throw ShapeError("backward: output must be a scalar, got shape " +
                     shape_str(out.shape()));
  detail::TensorNode* root = out.node();
  if (!root->requires_grad) return;  // nothing reachable tracks gradients

  // Iterative post-order over parents.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  struct Frame {
    detail::TensorNode* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      detail::TensorNode* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace acpo
