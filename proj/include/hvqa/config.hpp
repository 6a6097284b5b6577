#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hvqa/aggregation.hpp"
#include "hvqa/attention.hpp"
#include "hvqa/layers.hpp"

namespace hvqa {

struct EncoderConfig {
  std::string preset = "desk";
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t kernel = 3;
  std::size_t stride = 2;
  bool batch_norm = true;
  std::size_t embed_dim = 32;     // word embedding
  std::size_t lstm_hidden = 128;

  std::vector<ConvLayerSpec> conv_layers() const;
};

struct ModelConfig {
  std::size_t d = 128;
  std::size_t alignment_depth = 2;
  std::vector<std::size_t> classifier_hidden{256};
  double dropout = 0.0;
};

struct PairwiseConfig {
  std::size_t heads = 2;
  std::size_t head_dim = 0;  // 0: d / heads
  bool scale_scores = false;
};

struct RelationConfig {
  std::size_t g_width = 256;
  std::size_t g_layers = 4;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::size_t max_steps = 20000;
  std::uint64_t seed = 1;
  std::size_t eval_every = 1000;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  double l2 = 1e-5;
  std::size_t plateau_windows = 3;
  double plateau_delta = 0.001;  // accuracy as a fraction
};

struct DataConfig {
  std::size_t width = 64, height = 64, channels = 3;
  std::size_t question_vocab = 24;
  std::size_t answer_vocab = 16;
};

/// Every architectural and optimization setting of a run.
struct RunConfig {
  AttentionConfig attention;
  AggregatorKind aggregator = AggregatorKind::kSum;
  EncoderConfig encoder;
  ModelConfig model;
  PairwiseConfig pairwise;
  RelationConfig rn;
  TrainConfig train;
  DataConfig data;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  /// One "key=value" line per key, in a fixed order.
  std::string to_text() const;
  /// FNV-1a of to_text().
  std::uint64_t hash() const;

  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_text() == b.to_text(); }
};

/// Settings implied by an encoder preset ("desk" or "clevr").
RunConfig preset_config(std::string_view name);

/// Known keys in canonical order.
const std::vector<std::string>& config_keys();
bool is_config_key(std::string_view key);

/// Sets one key from its textual value; ConfigError on unknown keys or bad values.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& config, std::string_view key);

struct ConfigEntry {
  std::string key, value;
  std::size_t line = 0, column = 0;  // 1-based position of the key; 0 when not from a file
};

/// Parses "key=value" lines; '#' starts a comment. Errors carry "line L, column C".
std::vector<ConfigEntry> parse_config_entries(std::string_view text);

/// Starts from the preset named by the last encoder.preset entry (default desk),
/// then applies every other entry in order.
RunConfig config_from_entries(const std::vector<ConfigEntry>& entries);
RunConfig parse_config(std::string_view text);

}  // namespace hvqa
