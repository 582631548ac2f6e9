#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "parabart/errors.hpp"

namespace parabart {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool& finite_checks() {
#ifdef NDEBUG
  static bool enabled = false;
#else
  static bool enabled = true;
#endif
  return enabled;
}
}  // namespace detail

/// While alive, newly created tensors do not record a backward graph.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// NaN/Inf detection on every op output. On by default in debug builds.
inline void set_finite_checks(bool on) { detail::finite_checks() = on; }
inline bool finite_checks_enabled() { return detail::finite_checks(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

/// Dense row-major array that participates in a reverse-mode autodiff graph.
/// Copies share the underlying node.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() = default;
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
  }
  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static BasicTensor scalar(T value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    }
    return node_->shape[axis];
  }

  std::span<const T> data() const { return node_->data; }
  /// Only meant for leaves (parameters, optimizer updates, test fixtures).
  std::span<T> mutable_data() const { return node_->data; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }
  const char* op() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->data.at(r * dim(1) + c); }

  void zero_grad() const { node_->grad.clear(); }

  /// Leaf copy that shares no graph history.
  BasicTensor detach() const { return from_data(shape(), node_->data, false); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>::from_data(shape(), std::move(out), requires_grad());
  }

  /// Reverse pass from a scalar. Gradients accumulate into every reachable
  /// node that requires them.
  void backward() const {
    if (numel() != 1) {
      throw ShapeError("backward() needs a scalar, got " + shape_str(shape()));
    }
    if (!requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

  Node<T>& node() const { return *node_; }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& data, const char* op) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at element " +
                         std::to_string(i));
    }
  }
}

/// Wraps an op result. The backward closure is kept only when grad mode is on
/// and some input requires a gradient.
template <typename T, typename Backward>
BasicTensor<T> record(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<BasicTensor<T>> inputs, Backward&& backward) {
  if (finite_checks()) check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
      node->backward_fn = std::forward<Backward>(backward);
    }
  }
  return BasicTensor<T>(std::move(node));
}

template <typename T>
BasicTensor<T> record_many(Shape shape, std::vector<T> data, const char* op,
                           const std::vector<BasicTensor<T>>& inputs,
                           std::function<void(Node<T>&)> backward) {
  if (finite_checks()) check_finite(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
      node->backward_fn = std::move(backward);
    }
  }
  return BasicTensor<T>(std::move(node));
}

}  // namespace detail
}  // namespace parabart
