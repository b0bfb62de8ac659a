#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pargo/error.hpp"

namespace pargo {

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

enum class DType { float32, float64 };

inline std::string_view dtype_name(DType d) { return d == DType::float32 ? "float32" : "float64"; }

inline DType parse_dtype(std::string_view s) {
  if (s == "float32") return DType::float32;
  if (s == "float64") return DType::float64;
  throw ConfigError("unknown dtype '" + std::string(s) + "' (expected float32 or float64)");
}

template <Real T>
constexpr DType dtype_of() {
  return std::same_as<T, float> ? DType::float32 : DType::float64;
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

template <Real T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array with an optional gradient. Copies share storage;
/// use clone() or detach() for an independent buffer.
template <Real T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<detail::Node<T>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                       " elements, got " + std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value));
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  static Tensor from_node(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }

  T& operator()(std::size_t r, std::size_t c) { return node_->data[r * node_->shape[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape[1] + c]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// New leaf holding a copy of the values; no gradient, no history.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }

  /// Deep copy that keeps the trainable flag.
  Tensor clone() const {
    Tensor t = detach();
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

template <Real T>
bool all_finite(std::span<const T> xs) {
  return std::all_of(xs.begin(), xs.end(), [](T x) { return std::isfinite(x); });
}

namespace detail {

/// Wraps an op result. History is kept only when some input is trainable.
/// `fn(self)` reads self.grad and accumulates into self.parents.
template <Real T, class Backward>
Tensor<T> record(std::string_view op, Shape shape, std::vector<T> data,
                 std::initializer_list<Tensor<T>> inputs, Backward&& fn) {
  if (!all_finite<T>(data)) throw NumericalError(std::string(op) + ": non-finite value in result");
  Tensor<T> out(std::move(shape), std::move(data));
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || (in.defined() && in.requires_grad());
  if (!tracked) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.defined() ? in.node() : nullptr);
  node.backward_fn = std::forward<Backward>(fn);
  return out;
}

template <Real T>
bool wants_grad(const std::shared_ptr<Node<T>>& p) {
  return p && p->requires_grad;
}

}  // namespace detail

/// Reverse-mode pass from a one-element loss. Gradients accumulate (sum) into
/// every trainable leaf; the recorded history is released afterwards.
template <Real T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  using NodePtr = detail::Node<T>*;
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (NodePtr node : order) {
    if (node->backward_fn) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.clear();
      node->requires_grad = false;
    }
  }
}

}  // namespace pargo
