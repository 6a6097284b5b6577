#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hvqa/layers.hpp"

namespace hvqa {

enum class AttentionMode { kHan, kAdaHan, kSoft, kStraightThrough };
enum class GateNormalizer { kSigmoid, kSoftmax };

std::string to_string(AttentionMode mode);
std::string to_string(GateNormalizer mu);

struct AttentionConfig {
  AttentionMode mode = AttentionMode::kHan;
  std::size_t k = 0;       // fixed k; 0 derives k from `fraction`
  double fraction = 0.25;  // attended share of cells, in (0, 1]
  double tau = 0.0;        // AdaHAN threshold; <= 0 means 1 / (w * h)
  std::size_t hops = 2;
  GateNormalizer st_normalizer = GateNormalizer::kSigmoid;

  void validate() const;
  /// Number of cells kept by fixed-k modes on a grid of `cells` cells.
  std::size_t k_for(std::size_t cells) const;
  double tau_for(std::size_t cells) const;
};

/// k = round(fraction * cells), clamped to [1, cells].
std::size_t fraction_to_k(double fraction, std::size_t cells);

/// AdaHAN threshold 1 / (w * h).
double adahan_threshold(std::size_t w, std::size_t h);

/// Which cells were attended and why.
struct Selection {
  std::vector<std::size_t> indices;  // l_1..l_k by descending presence, ties by ascending cell
  std::vector<double> presence;      // p over all cells, row-major
  AttentionMode mode = AttentionMode::kHan;
  double tau = 0.0;
  bool fallback = false;  // AdaHAN admitted no cell and fell back to the argmax

  std::size_t k() const noexcept { return indices.size(); }
  std::size_t cells() const noexcept { return presence.size(); }
  double fraction() const { return cells() ? static_cast<double>(k()) / static_cast<double>(cells()) : 0.0; }
  /// Selected cells in ascending order: the row order of the gathered features.
  std::vector<std::size_t> ascending() const;
};

/// Top-k cells of p.
template <typename T>
Selection select_cells_fixed(std::span<const T> presence, std::size_t k);

/// Cells whose softmax(p) strictly exceeds tau; falls back to the argmax when none does.
template <typename T>
Selection select_cells_adaptive(std::span<const T> presence, double tau);

template <typename T>
struct SelectedFeatures {
  Selection selection;
  Tensor<T> features;  // [k, d], rows in ascending cell order
};

/// Fixed-k hard attention over m ([w,h,d] or [n,d]) using presence p.
template <typename T>
SelectedFeatures<T> select_han(const Tensor<T>& m, const Tensor<T>& presence, std::size_t k);

/// Adaptive hard attention with tau = 1 / (number of cells) unless given.
template <typename T>
SelectedFeatures<T> select_adahan(const Tensor<T>& m, const Tensor<T>& presence, double tau = 0.0);

template <typename T>
struct MultimodalMap {
  Tensor<T> m;  // [w, h, d] for one sample, [B * w * h, d] for a batch
  std::size_t w = 0, h = 0, d = 0;
  std::size_t alignment_depth = 0;

  std::size_t cells() const noexcept { return w * h; }
};

/// Per-cell L2 norm of the fused embedding.
template <typename T>
Tensor<T> presence(const MultimodalMap<T>& map);

/// Question broadcast over cells plus element-wise addition: m_ij = x_ij + q.
template <typename T>
Tensor<T> fuse_add(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding);

/// Image/question embeddings into a shared d-dimensional space and their fusion.
template <typename T>
class FusionModule {
 public:
  FusionModule() = default;
  FusionModule(ParameterSet<T>& params, const std::string& name, std::size_t image_channels,
               std::size_t question_dim, std::size_t d, std::size_t alignment_depth, Rng& rng);

  /// Two 1x1 layers, each followed by ReLU: [w,h,c] / [n,c] -> [.., d].
  Tensor<T> embed_image(const Tensor<T>& x) const;
  /// Two-layer MLP with ReLU after each layer: [H] / [B,H] -> [.., d].
  Tensor<T> embed_question(const Tensor<T>& q) const;
  /// Fusion of one sample, x_hat [w,h,d] and q_hat [d].
  MultimodalMap<T> fuse(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding) const;
  /// Batched fusion: x_hat [B*w*h, d], q_hat [B, d].
  MultimodalMap<T> fuse_batch(const Tensor<T>& image_embedding, const Tensor<T>& question_embedding, std::size_t w,
                              std::size_t h) const;

  std::size_t d() const noexcept { return d_; }
  std::size_t alignment_depth() const noexcept { return alignment_.size(); }

 private:
  Tensor<T> align(Tensor<T> cells) const;

  std::size_t d_ = 0;
  Mlp<T> image_, question_;
  std::vector<Linear<T>> alignment_;
};

/// Multi-hop soft attention baseline. Each hop scores cells with a one-hidden-layer
/// network (width d/2) over the cell and the query state, softmax-normalizes the
/// scores and pools the weighted cells; the pooled vector is added to the query.
template <typename T>
class SoftAttention {
 public:
  SoftAttention() = default;
  SoftAttention(ParameterSet<T>& params, const std::string& name, std::size_t d, std::size_t hops, Rng& rng);

  /// m [n,d], q [d] -> pooled [d] of the last hop. `weights`, if given, receives each hop's [n] weights.
  Tensor<T> forward(const Tensor<T>& m, const Tensor<T>& q, std::vector<Tensor<T>>* weights = nullptr) const;
  /// m [B*n,d], q [B,d] -> [B,d].
  Tensor<T> forward_batch(const Tensor<T>& m, const Tensor<T>& q, std::size_t cells,
                          std::vector<Tensor<T>>* weights = nullptr) const;

  std::size_t hops() const noexcept { return hops_.size(); }

 private:
  struct Hop {
    Linear<T> cell, query;
    Tensor<T> score;  // [a, 1]
  };
  std::vector<Hop> hops_;
};

template <typename T>
struct GatedCells {
  Tensor<T> output;  // [rows, d]; unkept rows are exactly zero
  Tensor<T> gate;    // g = mu(f(x)), [rows]
  Array<T> mask;     // 1 for kept rows, 0 otherwise
};

/// Straight-through estimator baseline: x * (g + stop(1{g >= t(g,k)} - g)),
/// g = mu(f(x)) with f an MLP d -> d/2 -> 1.
template <typename T>
class StraightThroughGate {
 public:
  StraightThroughGate() = default;
  StraightThroughGate(ParameterSet<T>& params, const std::string& name, std::size_t d, GateNormalizer mu, Rng& rng);

  /// x [n,d], keeps exactly k rows.
  GatedCells<T> forward(const Tensor<T>& x, std::size_t k) const;
  /// x [B*n,d], keeps k rows per sample.
  GatedCells<T> forward_batch(const Tensor<T>& x, std::size_t cells, std::size_t k) const;

  const Mlp<T>& scorer() const noexcept { return f_; }

  /// Pins the mask and the stop-gradient term to values taken at one point, so the gated
  /// output becomes the smooth surrogate x * (g + (mask - g0)) whose true derivative is
  /// the straight-through gradient. Used to check that gradient numerically.
  void freeze(Array<T> g0, Array<T> mask);
  void release() { frozen_ = false; }

 private:
  Mlp<T> f_;
  GateNormalizer mu_ = GateNormalizer::kSigmoid;
  bool frozen_ = false;
  Array<T> frozen_offset_, frozen_mask_;
};

}  // namespace hvqa
