#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hvqa/layers.hpp"

namespace hvqa {

enum class AggregatorKind { kSum, kPairwise, kRelation };

std::string to_string(AggregatorKind kind);

/// Column sums of the selected rows, [k,d] -> [d].
template <typename T>
Tensor<T> sum_pool(const Tensor<T>& selected);

/// Multi-head non-local pairwise operator followed by sum pooling.
///
/// Per head: q = x Wq, k = x Wk, v = x Wv, then x~_a = sum_b softmax_b(q_a . k_b) v_b.
/// Head outputs are concatenated and mapped back to d by Wo; the k rows are summed.
template <typename T>
class NonlocalPairwise {
 public:
  NonlocalPairwise() = default;
  /// head_dim 0 means d / heads.
  NonlocalPairwise(ParameterSet<T>& params, const std::string& name, std::size_t d, std::size_t heads,
                   std::size_t head_dim, bool scale_scores, Rng& rng);

  /// selected [k,d] -> [d].
  Tensor<T> forward(const Tensor<T>& selected) const;
  /// Rows [K,d] split into segments by offsets -> [S,d].
  Tensor<T> forward_segments(const Tensor<T>& rows, std::span<const std::size_t> offsets) const;

  std::size_t heads() const noexcept { return heads_; }
  std::size_t head_dim() const noexcept { return head_dim_; }
  const Tensor<T>& w_query() const noexcept { return wq_; }
  const Tensor<T>& w_key() const noexcept { return wk_; }
  const Tensor<T>& w_value() const noexcept { return wv_; }
  const Tensor<T>& w_out() const noexcept { return wo_; }

 private:
  std::size_t d_ = 0, heads_ = 1, head_dim_ = 0;
  bool scale_scores_ = false;
  Tensor<T> wq_, wk_, wv_, wo_;
};

/// Relation-network aggregation: f_phi( sum_{a,b} g_theta([m_a; m_b; q]) ) over all k^2
/// ordered pairs, self-pairs included, summed in lexicographic pair order.
template <typename T>
class RelationNetwork {
 public:
  RelationNetwork() = default;
  /// g_theta: g_layers ReLU layers of width g_width on 2d + q_dim inputs.
  /// f_phi: ReLU hidden layers `f_hidden` (with dropout), affine output of width `out_dim`.
  RelationNetwork(ParameterSet<T>& params, const std::string& name, std::size_t d, std::size_t q_dim,
                  std::size_t g_width, std::size_t g_layers, const std::vector<std::size_t>& f_hidden,
                  std::size_t out_dim, Rng& rng, double f_dropout = 0.0);

  /// selected [k,d], q [q_dim] -> [out_dim].
  Tensor<T> forward(const Tensor<T>& selected, const Tensor<T>& question) const;
  /// rows [K,d] in segments, questions [S,q_dim] -> [S,out_dim].
  Tensor<T> forward_segments(const Tensor<T>& rows, std::span<const std::size_t> offsets,
                             const Tensor<T>& questions, Mode mode = Mode::kEval, Rng* rng = nullptr) const;

  const Mlp<T>& g() const noexcept { return g_; }
  const Mlp<T>& f() const noexcept { return f_; }
  std::size_t out_dim() const { return f_.out_features(); }

 private:
  std::size_t d_ = 0, q_dim_ = 0;
  Mlp<T> g_, f_;
};

/// Multiply-accumulate counts of one forward pass, split by how they scale with k.
struct PairCost {
  std::uint64_t linear_macs = 0;    // grows with k
  std::uint64_t pairwise_macs = 0;  // grows with k^2
  std::uint64_t fixed_macs = 0;     // independent of k

  std::uint64_t macs() const noexcept { return linear_macs + pairwise_macs + fixed_macs; }
  std::uint64_t flops() const noexcept { return 2 * macs(); }
};

/// Closed-form cost of NonlocalPairwise on k cells.
PairCost count_pair_flops(std::size_t k, std::size_t d, std::size_t heads, std::size_t head_dim = 0);

/// Closed-form cost of RelationNetwork on k cells.
PairCost count_relation_flops(std::size_t k, std::size_t d, std::size_t q_dim, std::size_t g_width,
                              std::size_t g_layers, const std::vector<std::size_t>& f_hidden, std::size_t out_dim);

}  // namespace hvqa
