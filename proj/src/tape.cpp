#include "hvqa/tape.hpp"

#include <unordered_set>
#include <utility>

namespace hvqa {

template <typename T>
Tape<T>::Tape(const Tensor<T>& root) {
  if (!root.defined() || !root.requires_grad()) return;
  std::unordered_set<const Node<T>*> visited;
  // Iterative post-order DFS; the pair holds the next input to visit.
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* in = node->inputs[next++].get();
      if (in->requires_grad && visited.insert(in).second) stack.emplace_back(in, 0);
    } else {
      records_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void Tape<T>::backward() {
  if (records_.empty()) return;
  for (auto* node : records_)
    if (!node->is_leaf()) node->grad_buffer().fill(T(0));
  Node<T>* root = records_.back();
  for (auto& g : root->grad_buffer().data()) g += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward) node->backward(*node);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ArgumentError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Tape<T>(loss).backward();
}

template class Tape<float>;
template class Tape<double>;
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

}  // namespace hvqa
