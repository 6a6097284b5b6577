#pragma once

#include <vector>

#include "hvqa/tensor.hpp"

namespace hvqa {

/// Topologically ordered record of the ops that produced a tensor.
///
/// Built by walking the graph from its root; every record's inputs appear
/// before it. Only nodes that participate in differentiation are recorded.
template <typename T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root);

  const std::vector<Node<T>*>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }

  /// Seeds the root gradient with ones and replays the records in reverse.
  /// Interior gradients are cleared first; leaf gradients accumulate.
  void backward();

 private:
  std::vector<Node<T>*> records_;
};

/// Fills grad of every requires_grad leaf reachable from `loss` with d loss / d leaf.
/// Repeated calls without zero_grad() accumulate.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace hvqa
