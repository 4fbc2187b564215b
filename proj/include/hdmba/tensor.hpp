// Dense row-major n-d arrays with reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable value buffer plus an optional
// gradient buffer and backward-graph record. Ops (ops.hpp) build an acyclic
// graph of parent links; backward() walks it in reverse topological order and
// accumulates dLoss/dX into each grad-requiring tensor with sum semantics on
// fan-out. Values never alias: every op produces a fresh buffer, so gradient
// checks are unambiguous. float is the training precision, double the
// verification precision.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hdmba/common.hpp"

namespace hdmba {

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward reaches this tensor
  bool requires_grad = false;
  // Backward-graph record; empty for leaves and no-grad results.
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  std::function<void(TensorImpl<T>&)> backward_fn;
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// RAII switch that disables graph construction (inference, finite-difference
// probes, metric evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
class Tensor {
public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                       std::to_string(values.size()) + " values");
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    auto n = static_cast<size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(Shape shape, T v) {
    auto n = static_cast<size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->values.size()); }
  int64_t extent(int64_t axis) const { return impl_->shape[static_cast<size_t>(axis)]; }

  const std::vector<T>& values() const { return impl_->values; }

  // In-place mutation is reserved for leaves (optimizer updates, test setup);
  // mutating an op result would silently desynchronize its backward record.
  std::vector<T>& mutable_values() {
    if (impl_->backward_fn)
      throw ValueError("tensor: refusing to mutate a non-leaf tensor");
    return impl_->values;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return impl_->values[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }

  Tensor& set_requires_grad(bool flag = true) {
    if (impl_->backward_fn)
      throw ValueError("tensor: requires_grad can only be toggled on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  const std::vector<T>& grad() const {
    if (impl_->grad.empty()) throw ValueError("tensor: gradient not populated");
    return impl_->grad;
  }

  std::vector<T>& grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), T(0));
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.clear(); }

  // Reverse-mode sweep from a scalar. Frees the traversed graph afterwards
  // unless retain_graph is set.
  void backward(bool retain_graph = false) const {
    if (!defined()) throw ValueError("backward: undefined tensor");
    if (numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(shape()));
    if (!impl_->requires_grad)
      throw ValueError("backward: loss does not depend on any grad-requiring tensor");

    // Iterative DFS post-order; reverse post-order is a valid topological
    // order because the graph is acyclic. The order holds shared ownership so
    // releasing parent links mid-sweep cannot free a node still to be visited.
    std::vector<std::shared_ptr<Impl>> order;
    std::unordered_set<Impl*> seen;
    struct Frame {
      std::shared_ptr<Impl> node;
      size_t next;
    };
    std::vector<Frame> stack{{impl_, 0}};
    seen.insert(impl_.get());
    while (!stack.empty()) {
      Frame& fr = stack.back();
      if (fr.next < fr.node->parents.size()) {
        const auto& p = fr.node->parents[fr.next++];
        if (p->requires_grad && seen.insert(p.get()).second) stack.push_back({p, 0});
      } else {
        order.push_back(std::move(fr.node));
        stack.pop_back();
      }
    }

    impl_->grad.assign(1, T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Impl* node = it->get();
      if (!node->backward_fn) continue;
      if (node->grad.empty()) node->grad.assign(node->values.size(), T(0));
      for (auto& p : node->parents)
        if (p->requires_grad && p->grad.empty()) p->grad.assign(p->values.size(), T(0));
      node->backward_fn(*node);
      if (!retain_graph) {
        node->backward_fn = nullptr;
        node->parents.clear();
      }
    }
  }

  std::shared_ptr<Impl> impl() const { return impl_; }

private:
  std::shared_ptr<Impl> impl_;
};

// Named model weight. Names form unique dotted paths within a model
// ("rdm.0.dml.1.wssm.in_proj.weight").
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

namespace detail {

// Assemble an op result: fresh value buffer, and a graph record when autograd
// is active and any input participates.
template <typename T>
Tensor<T> make_node(Shape shape, std::vector<T> values, std::vector<Tensor<T>> inputs,
                    std::function<void(TensorImpl<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(values));
  if (!grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs)
    if (in.defined() && in.requires_grad()) needs = true;
  if (!needs) return out;
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->parents.reserve(inputs.size());
  for (const auto& in : inputs)
    if (in.defined()) impl->parents.push_back(in.impl());
  impl->backward_fn = std::move(backward_fn);
  return out;
}

}  // namespace detail

}  // namespace hdmba
