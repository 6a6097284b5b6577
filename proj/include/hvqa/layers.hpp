#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hvqa/ops.hpp"
#include "hvqa/rng.hpp"
#include "hvqa/types.hpp"

namespace hvqa {

enum class ParamKind { kWeight, kBias, kNormScale, kNormShift, kBuffer };

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  ParamKind kind;

  bool trainable() const noexcept { return kind != ParamKind::kBuffer; }
};

/// Ordered registry of every parameter and buffer of a model.
/// Names are unique; registration order is the checkpoint and optimizer order.
template <typename T>
class ParameterSet {
 public:
  Tensor<T> add(const std::string& name, Array<T> init, ParamKind kind);

  const std::vector<Parameter<T>>& all() const noexcept { return params_; }
  std::vector<Parameter<T>>& all() noexcept { return params_; }
  const Parameter<T>* find(const std::string& name) const;

  /// Number of trainable scalars (buffers excluded).
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::vector<Parameter<T>> params_;
};

/// Uniform in [-s, s], s = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Array<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  /// x: [rows, in] or [in]; the result keeps the input rank.
  Tensor<T> forward(const Tensor<T>& x) const;

  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  const Tensor<T>& weight() const noexcept { return weight_; }
  const Tensor<T>& bias() const noexcept { return bias_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor<T> weight_, bias_;
};

/// Per-channel normalization over every leading axis of [..., C].
template <typename T>
class BatchNorm {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kMomentum = 0.9;

  BatchNorm() = default;
  BatchNorm(ParameterSet<T>& params, const std::string& name, std::size_t channels);

  /// Train mode needs at least two rows per channel and updates the running statistics.
  Tensor<T> forward(const Tensor<T>& x, Mode mode);

  const Array<T>& running_mean() const { return running_mean_.value(); }
  const Array<T>& running_var() const { return running_var_.value(); }

 private:
  std::size_t channels_ = 0;
  Tensor<T> scale_, shift_, running_mean_, running_var_;
};

/// Inverted dropout; identity in eval mode or at rate 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng);

template <typename T>
class Mlp {
 public:
  Mlp() = default;
  /// dims = {in, hidden..., out}. ReLU after each hidden layer; the output
  /// layer is affine unless activate_output is set.
  Mlp(ParameterSet<T>& params, const std::string& name, const std::vector<std::size_t>& dims, Rng& rng,
      double dropout_rate = 0.0, bool activate_output = false);

  Tensor<T> forward(const Tensor<T>& x, Mode mode = Mode::kEval, Rng* rng = nullptr) const;

  const std::vector<Linear<T>>& layers() const noexcept { return layers_; }
  std::size_t in_features() const { return layers_.front().in_features(); }
  std::size_t out_features() const { return layers_.back().out_features(); }

 private:
  std::vector<Linear<T>> layers_;
  double dropout_rate_ = 0.0;
  bool activate_output_ = false;
};

struct ConvLayerSpec {
  std::size_t kernel = 3;
  std::size_t stride = 2;
  std::size_t channels = 32;
};

/// Conv -> (BatchNorm) -> ReLU stack with same padding. Convs feeding a batch norm carry no bias.
template <typename T>
class CnnEncoder {
 public:
  CnnEncoder() = default;
  CnnEncoder(ParameterSet<T>& params, const std::string& name, std::size_t in_channels,
             const std::vector<ConvLayerSpec>& layers, bool batch_norm, Rng& rng);

  /// images: [N,H,W,C] or [H,W,C].
  Tensor<T> forward(const Tensor<T>& images, Mode mode);

  /// Spatial extent of the output map for an input extent.
  std::size_t output_extent(std::size_t in) const;
  std::size_t out_channels() const { return specs_.back().channels; }
  std::size_t total_stride() const;

 private:
  std::vector<ConvLayerSpec> specs_;
  std::vector<Tensor<T>> kernels_, biases_;
  std::vector<BatchNorm<T>> norms_;
  bool batch_norm_ = false;
};

/// Word embedding followed by a single-layer LSTM (gate order i, f, g, o).
template <typename T>
class LstmEncoder {
 public:
  LstmEncoder() = default;
  LstmEncoder(ParameterSet<T>& params, const std::string& name, std::size_t vocab, std::size_t embed_dim,
              std::size_t hidden_dim, Rng& rng);

  /// Final hidden state of each sequence: [B, hidden].
  Tensor<T> forward(const std::vector<TokenSeq>& sequences) const;
  /// Single sequence: [hidden].
  Tensor<T> encode(const TokenSeq& tokens) const;

  std::size_t hidden_dim() const noexcept { return hidden_; }
  std::size_t vocab() const noexcept { return vocab_; }

 private:
  std::size_t vocab_ = 0, embed_ = 0, hidden_ = 0;
  Tensor<T> embedding_, weight_, bias_;
};

}  // namespace hvqa
