#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hvqa/aggregation.hpp"
#include "hvqa/attention.hpp"
#include "hvqa/config.hpp"
#include "hvqa/layers.hpp"

namespace hvqa {

template <typename T>
struct ModelOutput {
  Tensor<T> logits;                   // [B, answers]
  MultimodalMap<T> map;               // fused cells of the whole batch, [B*w*h, d]
  std::vector<Selection> selections;  // per sample; soft mode leaves this empty
  double mean_fraction = 1.0;         // mean attended share of cells over the batch
};

/// CNN + LSTM encoders, fusion, attention, aggregation and answer classifier.
template <typename T>
class Model {
 public:
  /// Parameters are initialized from `init_seed`.
  Model(const RunConfig& config, std::uint64_t init_seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// images [B,H,W,C] (already normalized), one token sequence per image.
  /// Train mode updates batch-norm statistics and needs `rng` when dropout is on.
  ModelOutput<T> forward(const Array<T>& images, const std::vector<TokenSeq>& questions, Mode mode,
                         Rng* rng = nullptr);

  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }
  const RunConfig& config() const noexcept { return config_; }

  std::size_t grid_width() const noexcept { return grid_w_; }
  std::size_t grid_height() const noexcept { return grid_h_; }
  std::size_t cells() const noexcept { return grid_w_ * grid_h_; }
  /// Input pixels per grid cell along each axis.
  std::size_t cell_stride() const { return cnn_.total_stride(); }

  StraightThroughGate<T>& gate() noexcept { return gate_; }

  /// Cells kept by fixed-k modes.
  std::size_t k() const;

 private:
  Tensor<T> aggregate(const Tensor<T>& rows, std::span<const std::size_t> offsets, const Tensor<T>& question,
                      Mode mode, Rng* rng);

  RunConfig config_;
  ParameterSet<T> params_;
  std::size_t grid_w_ = 0, grid_h_ = 0;
  CnnEncoder<T> cnn_;
  LstmEncoder<T> lstm_;
  FusionModule<T> fusion_;
  SoftAttention<T> soft_;
  StraightThroughGate<T> gate_;
  NonlocalPairwise<T> pairwise_;
  RelationNetwork<T> relation_;
  Mlp<T> classifier_;
};

/// Exact trainable-parameter count of a configuration, derived from layer shapes.
std::size_t parameter_count(const RunConfig& config);

}  // namespace hvqa
