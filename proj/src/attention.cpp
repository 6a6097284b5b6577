#include "hvqa/attention.hpp"

#include <algorithm>
#include <cmath>

namespace hvqa {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kHan: return "han";
    case AttentionMode::kAdaHan: return "adahan";
    case AttentionMode::kSoft: return "soft";
    case AttentionMode::kStraightThrough: return "straight_through";
  }
  return "?";
}

std::string to_string(GateNormalizer mu) { return mu == GateNormalizer::kSigmoid ? "sigmoid" : "softmax"; }

void AttentionConfig::validate() const {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("attention.fraction must lie in (0, 1]");
  if (hops < 1) throw ConfigError("attention.hops must be at least 1");
}

std::size_t AttentionConfig::k_for(std::size_t cells) const {
  if (k > 0) {
    if (k > cells)
      throw ConfigError("attention.k=" + std::to_string(k) + " exceeds the " + std::to_string(cells) + " grid cells");
    return k;
  }
  return fraction_to_k(fraction, cells);
}

double AttentionConfig::tau_for(std::size_t cells) const { return tau > 0.0 ? tau : 1.0 / static_cast<double>(cells); }

std::size_t fraction_to_k(double fraction, std::size_t cells) {
  if (cells == 0) throw ArgumentError("fraction_to_k: empty grid");
  const auto k = static_cast<long long>(std::llround(fraction * static_cast<double>(cells)));
  return static_cast<std::size_t>(std::clamp<long long>(k, 1, static_cast<long long>(cells)));
}

double adahan_threshold(std::size_t w, std::size_t h) {
  if (w == 0 || h == 0) throw ArgumentError("adahan_threshold: empty grid");
  return 1.0 / static_cast<double>(w * h);
}

std::vector<std::size_t> Selection::ascending() const {
  auto out = indices;
  std::sort(out.begin(), out.end());
  return out;
}

template <typename T>
Selection select_cells_fixed(std::span<const T> presence, std::size_t k) {
  Selection s;
  s.indices = top_k_indices(presence, k);
  s.presence.assign(presence.begin(), presence.end());
  s.mode = AttentionMode::kHan;
  return s;
}

template <typename T>
Selection select_cells_adaptive(std::span<const T> presence, double tau) {
  if (presence.empty()) throw ArgumentError("select_adahan: empty presence vector");
  // The threshold is formed in T so a uniform presence compares equal to it exactly.
  const T threshold = tau > 0.0 ? static_cast<T>(tau) : T(1) / static_cast<T>(presence.size());
  const auto prob = softmax_values(presence);
  Selection s;
  for (std::size_t i = 0; i < prob.size(); ++i)
    if (prob[i] > threshold) s.indices.push_back(i);
  std::sort(s.indices.begin(), s.indices.end(), [&](std::size_t a, std::size_t b) {
    return presence[a] > presence[b] || (presence[a] == presence[b] && a < b);
  });
  if (s.indices.empty()) {
    s.indices = top_k_indices(presence, 1);
    s.fallback = true;
  }
  s.presence.assign(presence.begin(), presence.end());
  s.mode = AttentionMode::kAdaHan;
  s.tau = static_cast<double>(threshold);
  return s;
}

namespace {

template <typename T>
std::size_t feature_dim(const Tensor<T>& m) {
  if (m.rank() < 2) throw ShapeError("attention: expected a [..., d] map, got " + shape_str(m.shape()));
  return m.shape().back();
}

template <typename T>
SelectedFeatures<T> gather_selection(const Tensor<T>& m, Selection selection) {
  const auto rows = selection.ascending();
  auto features = gather_cells(m, std::span<const std::size_t>(rows));
  return {std::move(selection), std::move(features)};
}

template <typename T>
void check_presence(const Tensor<T>& m, const Tensor<T>& presence) {
  const std::size_t cells = m.size() / feature_dim(m);
  if (presence.size() != cells)
    throw ShapeError("attention: presence has " + std::to_string(presence.size()) + " entries for " +
                     std::to_string(cells) + " cells");
}

// Row indices [0,0,...,1,1,...] repeating each of `batch` rows `cells` times.
std::vector<std::size_t> repeat_rows(std::size_t batch, std::size_t cells) {
  std::vector<std::size_t> idx(batch * cells);
  for (std::size_t b = 0; b < batch; ++b) std::fill_n(idx.begin() + static_cast<std::ptrdiff_t>(b * cells), cells, b);
  return idx;
}

std::vector<std::size_t> uniform_offsets(std::size_t batch, std::size_t cells) {
  std::vector<std::size_t> off(batch + 1);
  for (std::size_t b = 0; b <= batch; ++b) off[b] = b * cells;
  return off;
}

}  // namespace

template <typename T>
SelectedFeatures<T> select_han(const Tensor<T>& m, const Tensor<T>& presence, std::size_t k) {
  check_presence(m, presence);
  return gather_selection(m, select_cells_fixed(presence.value().data(), k));
}

template <typename T>
SelectedFeatures<T> select_adahan(const Tensor<T>& m, const Tensor<T>& presence, double tau) {
  check_presence(m, presence);
  return gather_selection(m, select_cells_adaptive(presence.value().data(), tau));
}

template <typename T>
Tensor<T> presence(const MultimodalMap<T>& map) {
  return l2_norm_map(map.m);
}

template <typename T>
Tensor<T> fuse_add(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding) {
  if (question_embedding.rank() != 1 || question_embedding.size() != feature_dim(image_embedding))
    throw ShapeError("fuse: question embedding " + shape_str(question_embedding.shape()) +
                     " does not match image embedding " + shape_str(image_embedding.shape()));
  return add(image_embedding, question_embedding);
}

template <typename T>
FusionModule<T>::FusionModule(ParameterSet<T>& params, const std::string& name, std::size_t image_channels,
                              std::size_t question_dim, std::size_t d, std::size_t alignment_depth, Rng& rng)
    : d_(d),
      image_(params, name + ".image", {image_channels, d, d}, rng, 0.0, true),
      question_(params, name + ".question", {question_dim, d, d}, rng, 0.0, true) {
  for (std::size_t i = 0; i < alignment_depth; ++i)
    alignment_.emplace_back(params, name + ".align" + std::to_string(i), d, d, rng);
}

template <typename T>
Tensor<T> FusionModule<T>::embed_image(const Tensor<T>& x) const {
  if (x.rank() == 3) {
    const Shape s = x.shape();
    auto cells = image_.forward(reshape(x, {s[0] * s[1], s[2]}));
    return reshape(cells, {s[0], s[1], d_});
  }
  return image_.forward(x);
}

template <typename T>
Tensor<T> FusionModule<T>::embed_question(const Tensor<T>& q) const {
  return question_.forward(q);
}

template <typename T>
Tensor<T> FusionModule<T>::align(Tensor<T> cells) const {
  for (const auto& layer : alignment_) cells = relu(layer.forward(cells));
  return cells;
}

template <typename T>
MultimodalMap<T> FusionModule<T>::fuse(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding) const {
  auto m = fuse_add(image_embedding, question_embedding);
  MultimodalMap<T> map;
  map.d = d_;
  map.alignment_depth = alignment_.size();
  if (m.rank() == 3) {
    map.w = m.dim(0);
    map.h = m.dim(1);
    map.m = alignment_.empty() ? m : reshape(align(reshape(m, {map.w * map.h, d_})), {map.w, map.h, d_});
  } else {
    map.w = m.dim(0);
    map.h = 1;
    map.m = align(m);
  }
  return map;
}

template <typename T>
MultimodalMap<T> FusionModule<T>::fuse_batch(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding,
                                             std::size_t w, std::size_t h) const {
  const std::size_t cells = w * h;
  if (question_embedding.rank() != 2 || question_embedding.dim(1) != d_ ||
      image_embedding.size() != question_embedding.dim(0) * cells * d_)
    throw ShapeError("fuse: image embedding " + shape_str(image_embedding.shape()) + " and question embedding " +
                     shape_str(question_embedding.shape()) + " disagree");
  const auto rows = repeat_rows(question_embedding.dim(0), cells);
  auto m = add(image_embedding, gather_cells(question_embedding, std::span<const std::size_t>(rows)));
  MultimodalMap<T> map;
  map.m = align(m);
  map.w = w;
  map.h = h;
  map.d = d_;
  map.alignment_depth = alignment_.size();
  return map;
}

template <typename T>
SoftAttention<T>::SoftAttention(ParameterSet<T>& params, const std::string& name, std::size_t d, std::size_t hops,
                                Rng& rng) {
  if (hops < 1) throw ArgumentError("soft attention: hops must be at least 1");
  const std::size_t a = std::max<std::size_t>(1, d / 2);
  for (std::size_t i = 0; i < hops; ++i) {
    const std::string prefix = name + ".hop" + std::to_string(i);
    Hop hop{Linear<T>(params, prefix + ".cell", d, a, rng), Linear<T>(params, prefix + ".query", d, a, rng),
            params.add(prefix + ".score", glorot_uniform<T>({a, 1}, a, 1, rng), ParamKind::kWeight)};
    hops_.push_back(std::move(hop));
  }
}

template <typename T>
Tensor<T> SoftAttention<T>::forward_batch(const Tensor<T>& m, const Tensor<T>& q, std::size_t cells,
                                          std::vector<Tensor<T>>* weights) const {
  const std::size_t batch = q.dim(0);
  const auto rows = repeat_rows(batch, cells);
  const auto offsets = uniform_offsets(batch, cells);
  Tensor<T> u = q;
  Tensor<T> pooled;
  for (const auto& hop : hops_) {
    auto query = gather_cells(hop.query.forward(u), std::span<const std::size_t>(rows));
    auto hidden = relu(add(hop.cell.forward(m), query));
    auto scores = reshape(matmul(hidden, hop.score), {batch, cells});
    auto w = softmax(scores, 1);
    if (weights) weights->push_back(w);
    pooled = segment_sum(scale_rows(m, reshape(w, {batch * cells})), std::span<const std::size_t>(offsets));
    u = add(u, pooled);
  }
  return pooled;
}

template <typename T>
Tensor<T> SoftAttention<T>::forward(const Tensor<T>& m, const Tensor<T>& q, std::vector<Tensor<T>>* weights) const {
  const std::size_t d = feature_dim(m);
  const std::size_t cells = m.size() / d;
  std::vector<Tensor<T>> batch_weights;
  auto pooled = forward_batch(reshape(m, {cells, d}), reshape(q, {1, q.size()}), cells, weights ? &batch_weights : nullptr);
  if (weights)
    for (auto& w : batch_weights) weights->push_back(reshape(w, {cells}));
  return reshape(pooled, {d});
}

template <typename T>
StraightThroughGate<T>::StraightThroughGate(ParameterSet<T>& params, const std::string& name, std::size_t d,
                                            GateNormalizer mu, Rng& rng)
    : f_(params, name + ".f", {d, std::max<std::size_t>(1, d / 2), 1}, rng), mu_(mu) {}

template <typename T>
GatedCells<T> StraightThroughGate<T>::forward_batch(const Tensor<T>& x, std::size_t cells, std::size_t k) const {
  const std::size_t rows = x.size() / feature_dim(x);
  if (cells == 0 || rows % cells != 0) throw ShapeError("straight_through: rows are not a whole number of grids");
  if (k == 0 || k > cells)
    throw ArgumentError("straight_through: k=" + std::to_string(k) + " outside [1, " + std::to_string(cells) + "]");
  const std::size_t batch = rows / cells;
  auto scores = f_.forward(x);
  Tensor<T> g = mu_ == GateNormalizer::kSigmoid ? reshape(sigmoid(scores), {rows})
                                                 : reshape(softmax(reshape(scores, {batch, cells}), 1), {rows});
  // Exactly k rows per grid: the top-k of g under the ascending-index tie rule,
  // which coincides with g >= (k-th largest g) whenever that value is unique.
  if (frozen_) {
    if (frozen_mask_.size() != rows) throw ShapeError("straight_through: frozen mask does not match the rows");
    auto gate = add(g, Tensor<T>(frozen_offset_));
    return {scale_rows(x, gate), g, frozen_mask_};
  }
  Array<T> mask({rows});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto keep = top_k_indices(g.value().data().subspan(b * cells, cells), k);
    for (auto i : keep) mask[b * cells + i] = T(1);
  }
  auto gate = straight_through(g, mask);
  return {scale_rows(x, gate), g, std::move(mask)};
}

template <typename T>
void StraightThroughGate<T>::freeze(Array<T> g0, Array<T> mask) {
  if (g0.shape() != mask.shape()) throw ShapeError("straight_through: freeze needs matching gate and mask");
  frozen_offset_ = mask;
  for (std::size_t i = 0; i < mask.size(); ++i) frozen_offset_[i] -= g0[i];
  frozen_mask_ = std::move(mask);
  frozen_ = true;
}

template <typename T>
GatedCells<T> StraightThroughGate<T>::forward(const Tensor<T>& x, std::size_t k) const {
  const std::size_t d = feature_dim(x);
  const std::size_t cells = x.size() / d;
  auto out = forward_batch(x.rank() == 2 ? x : reshape(x, {cells, d}), cells, k);
  if (x.rank() != 2) out.output = reshape(out.output, x.shape());
  return out;
}

#define HVQA_INSTANTIATE_ATTENTION(T)                                                            \
  template Selection select_cells_fixed(std::span<const T>, std::size_t);                       \
  template Selection select_cells_adaptive(std::span<const T>, double);                         \
  template SelectedFeatures<T> select_han(const Tensor<T>&, const Tensor<T>&, std::size_t);     \
  template SelectedFeatures<T> select_adahan(const Tensor<T>&, const Tensor<T>&, double);       \
  template Tensor<T> presence(const MultimodalMap<T>&);                                         \
  template Tensor<T> fuse_add(const Tensor<T>&, const Tensor<T>&);                              \
  template class FusionModule<T>;                                                               \
  template class SoftAttention<T>;                                                              \
  template class StraightThroughGate<T>;

HVQA_INSTANTIATE_ATTENTION(float)
HVQA_INSTANTIATE_ATTENTION(double)

}  // namespace hvqa
