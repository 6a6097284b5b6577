#include "hvqa/model.hpp"

#include <algorithm>

#include "hvqa/errors.hpp"

namespace hvqa {

namespace {

std::vector<std::size_t> classifier_dims(std::size_t in, const RunConfig& c) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), c.model.classifier_hidden.begin(), c.model.classifier_hidden.end());
  dims.push_back(c.data.answer_vocab);
  return dims;
}

}  // namespace

template <typename T>
Model<T>::Model(const RunConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const auto& enc = config_.encoder;
  cnn_ = CnnEncoder<T>(params_, "cnn", config_.data.channels, enc.conv_layers(), enc.batch_norm, rng);
  if (config_.data.width < cnn_.total_stride() || config_.data.height < cnn_.total_stride())
    throw ConfigError("images of " + std::to_string(config_.data.width) + "x" + std::to_string(config_.data.height) +
                      " are smaller than the encoder stride " + std::to_string(cnn_.total_stride()));
  grid_w_ = cnn_.output_extent(config_.data.width);
  grid_h_ = cnn_.output_extent(config_.data.height);
  lstm_ = LstmEncoder<T>(params_, "lstm", config_.data.question_vocab, enc.embed_dim, enc.lstm_hidden, rng);
  const std::size_t d = config_.model.d;
  fusion_ = FusionModule<T>(params_, "fusion", cnn_.out_channels(), enc.lstm_hidden, d, config_.model.alignment_depth,
                            rng);
  if (config_.attention.mode == AttentionMode::kSoft)
    soft_ = SoftAttention<T>(params_, "soft", d, config_.attention.hops, rng);
  if (config_.attention.mode == AttentionMode::kStraightThrough)
    gate_ = StraightThroughGate<T>(params_, "gate", d, config_.attention.st_normalizer, rng);
  if (config_.attention.mode != AttentionMode::kSoft) {
    if (config_.aggregator == AggregatorKind::kPairwise)
      pairwise_ = NonlocalPairwise<T>(params_, "pairwise", d, config_.pairwise.heads, config_.pairwise.head_dim,
                                      config_.pairwise.scale_scores, rng);
    if (config_.aggregator == AggregatorKind::kRelation) {
      // f_phi doubles as the answer classifier.
      relation_ = RelationNetwork<T>(params_, "rn", d, d, config_.rn.g_width, config_.rn.g_layers,
                                     config_.model.classifier_hidden, config_.data.answer_vocab, rng,
                                     config_.model.dropout);
      return;
    }
  }
  classifier_ = Mlp<T>(params_, "classifier", classifier_dims(d, config_), rng, config_.model.dropout);
}

template <typename T>
std::size_t Model<T>::k() const {
  return config_.attention.k_for(cells());
}

template <typename T>
Tensor<T> Model<T>::aggregate(const Tensor<T>& rows, std::span<const std::size_t> offsets, const Tensor<T>& question,
                              Mode mode, Rng* rng) {
  switch (config_.aggregator) {
    case AggregatorKind::kSum: return classifier_.forward(segment_sum(rows, offsets), mode, rng);
    case AggregatorKind::kPairwise: return classifier_.forward(pairwise_.forward_segments(rows, offsets), mode, rng);
    case AggregatorKind::kRelation: return relation_.forward_segments(rows, offsets, question, mode, rng);
  }
  throw std::logic_error("unknown aggregator");
}

template <typename T>
ModelOutput<T> Model<T>::forward(const Array<T>& images, const std::vector<TokenSeq>& questions, Mode mode, Rng* rng) {
  const auto& data = config_.data;
  if (images.rank() != 4 || images.dim(1) != data.height || images.dim(2) != data.width ||
      images.dim(3) != data.channels)
    throw ShapeError("model: expected images [B," + std::to_string(data.height) + "," + std::to_string(data.width) +
                     "," + std::to_string(data.channels) + "], got " + shape_str(images.shape()));
  const std::size_t batch = images.dim(0);
  if (questions.size() != batch)
    throw ShapeError("model: " + std::to_string(questions.size()) + " questions for " + std::to_string(batch) +
                     " images");
  const std::size_t n = cells();

  auto features = cnn_.forward(Tensor<T>(images), mode);
  auto x = fusion_.embed_image(reshape(features, {batch * n, cnn_.out_channels()}));
  auto q = fusion_.embed_question(lstm_.forward(questions));
  ModelOutput<T> out;
  out.map = fusion_.fuse_batch(x, q, grid_w_, grid_h_);
  const auto& m = out.map.m;

  switch (config_.attention.mode) {
    case AttentionMode::kHan:
    case AttentionMode::kAdaHan: {
      const auto p = l2_norm_map(m);
      const auto values = p.value().data();
      std::vector<std::size_t> rows, offsets{0};
      double fraction = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const auto cell_p = values.subspan(b * n, n);
        auto sel = config_.attention.mode == AttentionMode::kHan
                       ? select_cells_fixed(cell_p, k())
                       : select_cells_adaptive(cell_p, config_.attention.tau);
        for (auto c : sel.ascending()) rows.push_back(b * n + c);
        offsets.push_back(rows.size());
        fraction += sel.fraction();
        out.selections.push_back(std::move(sel));
      }
      out.mean_fraction = fraction / static_cast<double>(batch);
      auto selected = gather_cells(m, std::span<const std::size_t>(rows));
      out.logits = aggregate(selected, offsets, q, mode, rng);
      break;
    }
    case AttentionMode::kSoft: {
      out.logits = classifier_.forward(soft_.forward_batch(m, q, n), mode, rng);
      out.mean_fraction = 1.0;
      break;
    }
    case AttentionMode::kStraightThrough: {
      const std::size_t kk = k();
      auto gated = gate_.forward_batch(m, n, kk);
      std::vector<std::size_t> offsets(batch + 1);
      for (std::size_t b = 0; b <= batch; ++b) offsets[b] = b * n;
      const auto g = gated.gate.value().data();
      for (std::size_t b = 0; b < batch; ++b) {
        auto sel = select_cells_fixed(g.subspan(b * n, n), kk);
        sel.mode = AttentionMode::kStraightThrough;
        out.selections.push_back(std::move(sel));
      }
      out.mean_fraction = static_cast<double>(kk) / static_cast<double>(n);
      out.logits = aggregate(gated.output, offsets, q, mode, rng);
      break;
    }
  }
  return out;
}

std::size_t parameter_count(const RunConfig& config) {
  return Model<float>(config, 0).params().trainable_count();
}

template class Model<float>;
template class Model<double>;

}  // namespace hvqa
