#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hvqa/errors.hpp"

namespace hvqa {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array. Plain value type; no gradient bookkeeping.
template <typename T>
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }

  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("array: " + std::to_string(data_.size()) + " elements do not fill shape " +
                       shape_str(shape_));
  }

  /// 1-D array holding `values`.
  static Array vector(std::vector<T> values) {
    Shape shape{values.size()};
    return Array(std::move(shape), std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  const std::vector<T>& vec() const noexcept { return data_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  /// Same elements under a new shape with equal element count.
  Array reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    return Array(std::move(shape), data_);
  }

  template <typename U>
  Array<U> cast() const {
    return Array<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Array& a, const Array& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("array: zero extent in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
struct Node;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

/// One vertex of the differentiation graph.
template <typename T>
struct Node {
  Array<T> value;
  Array<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn<T> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }

  Array<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Array<T>(value.shape(), T(0));
    return grad;
  }
};

/// Shared handle to a graph node, the user-facing tensor.
///
/// Copies alias the same node. Leaves created with requires_grad=true
/// accumulate gradients across backward calls until zero_grad().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Array<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Array<T>& value() const { return node_->value; }
  /// Mutable access for optimizers and buffers. Never call on a node already used by a live graph.
  Array<T>& mutable_value() { return node_->value; }

  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->value.rank(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  /// Accumulated gradient; a zero array if nothing has been accumulated yet.
  Array<T> grad() const { return has_grad() ? node_->grad : Array<T>(shape(), T(0)); }

  void zero_grad() {
    if (has_grad()) node_->grad.fill(T(0));
  }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The graph edge and closure are kept only when an input needs gradients.
template <typename T>
Tensor<T> make_result(const char* op, Array<T> value, std::initializer_list<Tensor<T>> inputs,
                      BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(const char* op, Array<T> value, const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

/// Accumulate into an input's gradient only if that input participates in differentiation.
template <typename T>
inline Array<T>* grad_of(Node<T>& self, std::size_t input) {
  auto& in = *self.inputs[input];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

}  // namespace hvqa
