#include "hvqa/aggregation.hpp"

#include <cmath>

namespace hvqa {

std::string to_string(AggregatorKind kind) {
  switch (kind) {
    case AggregatorKind::kSum: return "sum";
    case AggregatorKind::kPairwise: return "pairwise";
    case AggregatorKind::kRelation: return "rn";
  }
  return "?";
}

template <typename T>
Tensor<T> sum_pool(const Tensor<T>& selected) {
  if (selected.rank() != 2) throw ShapeError("sum_pool: expected [k,d], got " + shape_str(selected.shape()));
  return sum_rows(selected);
}

template <typename T>
NonlocalPairwise<T>::NonlocalPairwise(ParameterSet<T>& params, const std::string& name, std::size_t d,
                                      std::size_t heads, std::size_t head_dim, bool scale_scores, Rng& rng)
    : d_(d), heads_(heads), head_dim_(head_dim ? head_dim : d / std::max<std::size_t>(heads, 1)),
      scale_scores_(scale_scores) {
  if (heads == 0) throw ArgumentError("nonlocal_pairwise: at least one head is required");
  if (head_dim_ == 0) throw ArgumentError("nonlocal_pairwise: head dimension is zero");
  const std::size_t inner = heads_ * head_dim_;
  wq_ = params.add(name + ".w_query", glorot_uniform<T>({d, inner}, d, inner, rng), ParamKind::kWeight);
  wk_ = params.add(name + ".w_key", glorot_uniform<T>({d, inner}, d, inner, rng), ParamKind::kWeight);
  wv_ = params.add(name + ".w_value", glorot_uniform<T>({d, inner}, d, inner, rng), ParamKind::kWeight);
  wo_ = params.add(name + ".w_out", glorot_uniform<T>({inner, d}, inner, d, rng), ParamKind::kWeight);
}

template <typename T>
Tensor<T> NonlocalPairwise<T>::forward(const Tensor<T>& selected) const {
  if (selected.rank() != 2 || selected.dim(1) != d_)
    throw ShapeError("nonlocal_pairwise: expected [k," + std::to_string(d_) + "], got " + shape_str(selected.shape()));
  const auto q = matmul(selected, wq_);
  const auto k = matmul(selected, wk_);
  const auto v = matmul(selected, wv_);
  std::vector<Tensor<T>> heads;
  heads.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const std::size_t lo = h * head_dim_, hi = lo + head_dim_;
    auto scores = matmul(slice_cols(q, lo, hi), transpose(slice_cols(k, lo, hi)));
    if (scale_scores_) scores = scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim_))));
    heads.push_back(matmul(softmax(scores, 1), slice_cols(v, lo, hi)));
  }
  auto mixed = heads_ == 1 ? heads.front() : concat_cols(heads);
  return sum_rows(matmul(mixed, wo_));
}

template <typename T>
Tensor<T> NonlocalPairwise<T>::forward_segments(const Tensor<T>& rows, std::span<const std::size_t> offsets) const {
  std::vector<Tensor<T>> pooled;
  pooled.reserve(offsets.size() - 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    pooled.push_back(forward(slice_rows(rows, offsets[s], offsets[s + 1])));
  return concat_rows(pooled);
}

template <typename T>
RelationNetwork<T>::RelationNetwork(ParameterSet<T>& params, const std::string& name, std::size_t d,
                                    std::size_t q_dim, std::size_t g_width, std::size_t g_layers,
                                    const std::vector<std::size_t>& f_hidden, std::size_t out_dim, Rng& rng,
                                    double f_dropout)
    : d_(d), q_dim_(q_dim) {
  if (g_layers == 0) throw ArgumentError("relation network: g_theta needs at least one layer");
  std::vector<std::size_t> g_dims{2 * d + q_dim};
  for (std::size_t i = 0; i < g_layers; ++i) g_dims.push_back(g_width);
  g_ = Mlp<T>(params, name + ".g", g_dims, rng, 0.0, true);
  std::vector<std::size_t> f_dims{g_width};
  f_dims.insert(f_dims.end(), f_hidden.begin(), f_hidden.end());
  f_dims.push_back(out_dim);
  f_ = Mlp<T>(params, name + ".f", f_dims, rng, f_dropout);
}

template <typename T>
Tensor<T> RelationNetwork<T>::forward_segments(const Tensor<T>& rows, std::span<const std::size_t> offsets,
                                               const Tensor<T>& questions, Mode mode, Rng* rng) const {
  if (rows.rank() != 2 || rows.dim(1) != d_)
    throw ShapeError("relation_aggregate: expected [k," + std::to_string(d_) + "], got " + shape_str(rows.shape()));
  const std::size_t segments = offsets.size() - 1;
  if (questions.rank() != 2 || questions.dim(0) != segments || questions.dim(1) != q_dim_)
    throw ShapeError("relation_aggregate: question block " + shape_str(questions.shape()) + " does not match " +
                     std::to_string(segments) + " segments of width " + std::to_string(q_dim_));
  std::vector<std::size_t> first, second, question_row, pair_offsets{0};
  for (std::size_t s = 0; s < segments; ++s) {
    for (std::size_t a = offsets[s]; a < offsets[s + 1]; ++a)
      for (std::size_t b = offsets[s]; b < offsets[s + 1]; ++b) {
        first.push_back(a);
        second.push_back(b);
        question_row.push_back(s);
      }
    pair_offsets.push_back(first.size());
  }
  auto pairs = concat_cols<T>({gather_cells(rows, std::span<const std::size_t>(first)),
                               gather_cells(rows, std::span<const std::size_t>(second)),
                               gather_cells(questions, std::span<const std::size_t>(question_row))});
  auto relations = segment_sum(g_.forward(pairs), std::span<const std::size_t>(pair_offsets));
  return f_.forward(relations, mode, rng);
}

template <typename T>
Tensor<T> RelationNetwork<T>::forward(const Tensor<T>& selected, const Tensor<T>& question) const {
  if (selected.rank() != 2) throw ShapeError("relation_aggregate: expected [k,d], got " + shape_str(selected.shape()));
  const std::size_t offsets[2] = {0, selected.dim(0)};
  auto out = forward_segments(selected, std::span<const std::size_t>(offsets, 2), reshape(question, {1, question.size()}));
  return reshape(out, {out.size()});
}

PairCost count_pair_flops(std::size_t k, std::size_t d, std::size_t heads, std::size_t head_dim) {
  if (k == 0 || d == 0 || heads == 0) throw ArgumentError("count_pair_flops: arguments must be positive");
  const std::uint64_t dh = head_dim ? head_dim : d / heads;
  const std::uint64_t inner = heads * dh;
  const std::uint64_t kk = k;
  PairCost c;
  c.linear_macs = 3 * kk * d * inner + kk * inner * d;  // q, k, v projections and output map
  c.pairwise_macs = 2 * heads * kk * kk * dh;            // scores and weighted values
  return c;
}

PairCost count_relation_flops(std::size_t k, std::size_t d, std::size_t q_dim, std::size_t g_width,
                              std::size_t g_layers, const std::vector<std::size_t>& f_hidden, std::size_t out_dim) {
  if (k == 0 || d == 0 || g_width == 0 || g_layers == 0) throw ArgumentError("count_relation_flops: arguments must be positive");
  const std::uint64_t pairs = static_cast<std::uint64_t>(k) * k;
  PairCost c;
  c.pairwise_macs = pairs * ((2 * d + q_dim) * g_width + (g_layers - 1) * g_width * g_width);
  std::uint64_t prev = g_width;
  for (auto w : f_hidden) {
    c.fixed_macs += prev * w;
    prev = w;
  }
  c.fixed_macs += prev * out_dim;
  return c;
}

template Tensor<float> sum_pool(const Tensor<float>&);
template Tensor<double> sum_pool(const Tensor<double>&);
template class NonlocalPairwise<float>;
template class NonlocalPairwise<double>;
template class RelationNetwork<float>;
template class RelationNetwork<double>;

}  // namespace hvqa
