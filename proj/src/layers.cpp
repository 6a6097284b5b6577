#include "hvqa/layers.hpp"

#include <cmath>

namespace hvqa {

template <typename T>
Tensor<T> ParameterSet<T>::add(const std::string& name, Array<T> init, ParamKind kind) {
  if (find(name)) throw ArgumentError("parameter '" + name + "' registered twice");
  Tensor<T> t(std::move(init), kind != ParamKind::kBuffer);
  params_.push_back({name, t, kind});
  return t;
}

template <typename T>
const Parameter<T>* ParameterSet<T>::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
std::size_t ParameterSet<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.trainable()) n += p.tensor.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Array<T> glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Array<T> out(std::move(shape));
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-s, s));
  return out;
}

template <typename T>
Linear<T>::Linear(ParameterSet<T>& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : in_(in), out_(out) {
  weight_ = params.add(name + ".weight", glorot_uniform<T>({in, out}, in, out, rng), ParamKind::kWeight);
  bias_ = params.add(name + ".bias", Array<T>({out}), ParamKind::kBias);
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  if (x.shape().back() != in_)
    throw ShapeError("linear: expected " + std::to_string(in_) + " input features, got " + shape_str(x.shape()));
  if (x.rank() == 1) return reshape(add(matmul(reshape(x, {1, in_}), weight_), bias_), {out_});
  if (x.rank() != 2) throw ShapeError("linear: expected [rows, features] or [features], got " + shape_str(x.shape()));
  return add(matmul(x, weight_), bias_);
}

template <typename T>
BatchNorm<T>::BatchNorm(ParameterSet<T>& params, const std::string& name, std::size_t channels)
    : channels_(channels) {
  scale_ = params.add(name + ".scale", Array<T>({channels}, T(1)), ParamKind::kNormScale);
  shift_ = params.add(name + ".shift", Array<T>({channels}), ParamKind::kNormShift);
  running_mean_ = params.add(name + ".running_mean", Array<T>({channels}), ParamKind::kBuffer);
  running_var_ = params.add(name + ".running_var", Array<T>({channels}, T(1)), ParamKind::kBuffer);
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const std::size_t c = channels_;
  if (x.shape().back() != c)
    throw ShapeError("batch_norm: expected " + std::to_string(c) + " channels, got " + shape_str(x.shape()));
  const std::size_t rows = x.size() / c;
  const T eps = static_cast<T>(kEpsilon);
  const T* xv = x.value().ptr();
  const T* gamma = scale_.value().ptr();
  const T* beta = shift_.value().ptr();
  Array<T> out(x.shape());

  if (mode == Mode::kEval) {
    std::vector<T> inv(c);
    const auto& rm = running_mean_.value();
    const auto& rv = running_var_.value();
    for (std::size_t j = 0; j < c; ++j) inv[j] = T(1) / std::sqrt(rv[j] + eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) out[r * c + j] = gamma[j] * (xv[r * c + j] - rm[j]) * inv[j] + beta[j];
    return make_result<T>("batch_norm_eval", std::move(out), {x, scale_, shift_},
                          [rows, c, inv, mean = rm.vec()](Node<T>& self) {
                            const T* g = self.grad.ptr();
                            const T* xv = self.inputs[0]->value.ptr();
                            const T* gamma = self.inputs[1]->value.ptr();
                            if (auto* gx = grad_of(self, 0))
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < c; ++j) (*gx)[r * c + j] += g[r * c + j] * gamma[j] * inv[j];
                            auto* gs = grad_of(self, 1);
                            auto* gb = grad_of(self, 2);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < c; ++j) {
                                if (gs) (*gs)[j] += g[r * c + j] * (xv[r * c + j] - mean[j]) * inv[j];
                                if (gb) (*gb)[j] += g[r * c + j];
                              }
                          });
  }

  if (rows < 2) throw ArgumentError("batch_norm: train mode needs at least 2 rows per channel, got " + std::to_string(rows));
  std::vector<T> mu(c, T(0)), var(c, T(0)), inv(c);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) mu[j] += xv[r * c + j];
  for (auto& m : mu) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const T dv = xv[r * c + j] - mu[j];
      var[j] += dv * dv;
    }
  for (auto& v : var) v /= static_cast<T>(rows);
  for (std::size_t j = 0; j < c; ++j) inv[j] = T(1) / std::sqrt(var[j] + eps);

  std::vector<T> xhat(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = (xv[i] - mu[j]) * inv[j];
      out[i] = gamma[j] * xhat[i] + beta[j];
    }

  // Running statistics keep the unbiased variance estimate.
  auto& rm = running_mean_.mutable_value();
  auto& rv = running_var_.mutable_value();
  const T momentum = static_cast<T>(kMomentum);
  const T unbias = static_cast<T>(rows) / static_cast<T>(rows - 1);
  for (std::size_t j = 0; j < c; ++j) {
    rm[j] = momentum * rm[j] + (T(1) - momentum) * mu[j];
    rv[j] = momentum * rv[j] + (T(1) - momentum) * var[j] * unbias;
  }

  return make_result<T>("batch_norm_train", std::move(out), {x, scale_, shift_},
                        [rows, c, inv = std::move(inv), xhat = std::move(xhat)](Node<T>& self) {
                          const T* g = self.grad.ptr();
                          const T* gamma = self.inputs[1]->value.ptr();
                          std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < c; ++j) {
                              sum_g[j] += g[r * c + j];
                              sum_gx[j] += g[r * c + j] * xhat[r * c + j];
                            }
                          if (auto* gs = grad_of(self, 1))
                            for (std::size_t j = 0; j < c; ++j) (*gs)[j] += sum_gx[j];
                          if (auto* gb = grad_of(self, 2))
                            for (std::size_t j = 0; j < c; ++j) (*gb)[j] += sum_g[j];
                          if (auto* gx = grad_of(self, 0)) {
                            const T n = static_cast<T>(rows);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < c; ++j) {
                                const std::size_t i = r * c + j;
                                (*gx)[i] += gamma[j] * inv[j] / n * (n * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                              }
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ArgumentError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::kEval || rate == 0.0) return x;
  Array<T> mask(x.shape());
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = rng.bernoulli(rate) ? T(0) : keep;
  return mul(x, Tensor<T>(std::move(mask)));
}

template <typename T>
Mlp<T>::Mlp(ParameterSet<T>& params, const std::string& name, const std::vector<std::size_t>& dims, Rng& rng,
            double dropout_rate, bool activate_output)
    : dropout_rate_(dropout_rate), activate_output_(activate_output) {
  if (dims.size() < 2) throw ArgumentError("mlp: needs at least input and output sizes");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    layers_.emplace_back(params, name + "." + std::to_string(i), dims[i], dims[i + 1], rng);
}

template <typename T>
Tensor<T> Mlp<T>::forward(const Tensor<T>& x, Mode mode, Rng* rng) const {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    const bool last = i + 1 == layers_.size();
    if (!last || activate_output_) h = relu(h);
    if (!last && dropout_rate_ > 0.0 && mode == Mode::kTrain) {
      if (!rng) throw ArgumentError("mlp: dropout in train mode needs a random generator");
      h = dropout(h, dropout_rate_, mode, *rng);
    }
  }
  return h;
}

template <typename T>
CnnEncoder<T>::CnnEncoder(ParameterSet<T>& params, const std::string& name, std::size_t in_channels,
                          const std::vector<ConvLayerSpec>& layers, bool batch_norm, Rng& rng)
    : specs_(layers), batch_norm_(batch_norm) {
  if (layers.empty()) throw ArgumentError("cnn: at least one conv layer is required");
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    const std::string prefix = name + ".conv" + std::to_string(i);
    const std::size_t fan_in = s.kernel * s.kernel * cin, fan_out = s.kernel * s.kernel * s.channels;
    kernels_.push_back(params.add(prefix + ".kernel",
                                  glorot_uniform<T>({s.kernel, s.kernel, cin, s.channels}, fan_in, fan_out, rng),
                                  ParamKind::kWeight));
    // Batch norm's shift takes the place of the conv bias.
    if (batch_norm) norms_.emplace_back(params, prefix + ".bn", s.channels);
    else biases_.push_back(params.add(prefix + ".bias", Array<T>({s.channels}), ParamKind::kBias));
    cin = s.channels;
  }
}

template <typename T>
std::size_t CnnEncoder<T>::total_stride() const {
  std::size_t s = 1;
  for (const auto& l : specs_) s *= l.stride;
  return s;
}

template <typename T>
std::size_t CnnEncoder<T>::output_extent(std::size_t in) const {
  for (const auto& l : specs_) in = conv_output_extent(in, l.kernel, l.stride, Padding::kSame);
  return in;
}

template <typename T>
Tensor<T> CnnEncoder<T>::forward(const Tensor<T>& images, Mode mode) {
  const bool batched = images.rank() == 4;
  if (!batched && images.rank() != 3) throw ShapeError("cnn: expected [N,H,W,C] or [H,W,C], got " + shape_str(images.shape()));
  const std::size_t h = images.dim(batched ? 1 : 0), w = images.dim(batched ? 2 : 1);
  if (h < total_stride() || w < total_stride())
    throw ShapeError("cnn: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than the encoder's total stride " + std::to_string(total_stride()));
  Tensor<T> x = images;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    x = conv2d(x, kernels_[i], specs_[i].stride, Padding::kSame);
    x = batch_norm_ ? norms_[i].forward(x, mode) : add(x, biases_[i]);
    x = relu(x);
  }
  return x;
}

template <typename T>
LstmEncoder<T>::LstmEncoder(ParameterSet<T>& params, const std::string& name, std::size_t vocab,
                            std::size_t embed_dim, std::size_t hidden_dim, Rng& rng)
    : vocab_(vocab), embed_(embed_dim), hidden_(hidden_dim) {
  embedding_ = params.add(name + ".embedding", glorot_uniform<T>({vocab, embed_dim}, vocab, embed_dim, rng),
                          ParamKind::kWeight);
  weight_ = params.add(name + ".weight",
                       glorot_uniform<T>({embed_dim + hidden_dim, 4 * hidden_dim}, embed_dim + hidden_dim,
                                         4 * hidden_dim, rng),
                       ParamKind::kWeight);
  Array<T> bias({4 * hidden_dim});
  for (std::size_t j = hidden_dim; j < 2 * hidden_dim; ++j) bias[j] = T(1);
  bias_ = params.add(name + ".bias", std::move(bias), ParamKind::kBias);
}

template <typename T>
Tensor<T> LstmEncoder<T>::forward(const std::vector<TokenSeq>& sequences) const {
  if (sequences.empty()) throw ArgumentError("lstm: empty batch");
  const std::size_t batch = sequences.size();
  std::size_t steps = 0;
  for (const auto& s : sequences) {
    if (s.empty()) throw ArgumentError("lstm: empty token sequence");
    for (auto t : s)
      if (t >= vocab_)
        throw ArgumentError("lstm: token " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab_));
    steps = std::max(steps, s.size());
  }
  const std::size_t hd = hidden_;
  Tensor<T> h(Array<T>({batch, hd})), c(Array<T>({batch, hd}));
  std::vector<Tensor<T>> states;
  states.reserve(steps);
  std::vector<std::size_t> ids(batch);
  for (std::size_t t = 0; t < steps; ++t) {
    // Finished sequences keep stepping on token 0; their later states are never read.
    for (std::size_t b = 0; b < batch; ++b) ids[b] = t < sequences[b].size() ? sequences[b][t] : 0;
    const auto x = gather_cells(embedding_, std::span<const std::size_t>(ids));
    const auto z = add(matmul(concat_cols<T>({x, h}), weight_), bias_);
    const auto in_gate = sigmoid(slice_cols(z, 0, hd));
    const auto forget = sigmoid(slice_cols(z, hd, 2 * hd));
    const auto cand = hvqa::tanh(slice_cols(z, 2 * hd, 3 * hd));
    const auto out_gate = sigmoid(slice_cols(z, 3 * hd, 4 * hd));
    c = add(mul(forget, c), mul(in_gate, cand));
    h = mul(out_gate, hvqa::tanh(c));
    states.push_back(h);
  }
  if (steps == 1) return h;
  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = (sequences[b].size() - 1) * batch + b;
  return gather_cells(concat_rows(states), std::span<const std::size_t>(last));
}

template <typename T>
Tensor<T> LstmEncoder<T>::encode(const TokenSeq& tokens) const {
  return reshape(forward({tokens}), {hidden_});
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template Array<float> glorot_uniform(Shape, std::size_t, std::size_t, Rng&);
template Array<double> glorot_uniform(Shape, std::size_t, std::size_t, Rng&);
template class Linear<float>;
template class Linear<double>;
template class BatchNorm<float>;
template class BatchNorm<double>;
template Tensor<float> dropout(const Tensor<float>&, double, Mode, Rng&);
template Tensor<double> dropout(const Tensor<double>&, double, Mode, Rng&);
template class Mlp<float>;
template class Mlp<double>;
template class CnnEncoder<float>;
template class CnnEncoder<double>;
template class LstmEncoder<float>;
template class LstmEncoder<double>;

}  // namespace hvqa
