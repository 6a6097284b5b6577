#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hvqa/config.hpp"
#include "hvqa/data.hpp"
#include "hvqa/model.hpp"

namespace hvqa {

/// Keeps large freed blocks in the heap instead of returning them to the OS; every
/// training step reallocates the same activation buffers. No-op outside glibc.
void retain_freed_memory();

/// Mean over rows of -log softmax(logits)[target]; logits [B,C] or [C].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint16_t> targets);

/// Bias-corrected Adam moments for the trainable entries of a ParameterSet.
template <typename T>
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  std::vector<Array<T>> m, v;  // one per trainable parameter, registration order
  std::uint64_t step = 0;

  void init(const ParameterSet<T>& params);
};

/// One Adam update from the accumulated gradients (missing gradients count as zero).
template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr);

/// Sum of squares of every weight matrix (biases, norm parameters and buffers excluded).
template <typename T>
Tensor<T> weight_penalty(const ParameterSet<T>& params);

/// Images of the chosen samples, each normalized to unit L2 norm: [B,H,W,C].
template <typename T>
Array<T> batch_images(const Dataset& dataset, std::span<const std::size_t> indices);

struct FamilyAccuracy {
  std::size_t correct = 0, total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

struct EvalReport {
  FamilyAccuracy overall;
  std::array<FamilyAccuracy, kFamilyCount> families{};
  std::vector<std::uint16_t> predictions;  // dataset order
  double mean_fraction = 0.0;

  /// Overall and per-family accuracy as a text table.
  std::string table() const;
};

/// Eval-mode accuracy, batches of `batch_size` in dataset order. Predictions take the
/// first maximal logit.
EvalReport evaluate(Model<float>& model, const Dataset& dataset, std::size_t batch_size);

struct MetricRow {
  std::size_t step = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;  // NaN without an eval split
  double mean_selected_fraction = 0.0;
  double wall_ms = 0.0;
};

struct EpochRow {
  std::size_t epoch = 0;
  double mean_selected_fraction = 0.0;
};

/// Header line and one line per row.
std::string metrics_csv(const std::vector<MetricRow>& rows);
std::vector<MetricRow> parse_metrics_csv(const std::string& text);

/// Throws ConfigError when the dataset's dimensions or vocabularies disagree with the config.
void check_dataset(const RunConfig& config, const DatasetHeader& header);

/// Training loop state: model, optimizer, sampling position and metric history.
///
/// Every random draw is a function of (train.seed, step) or (train.seed, epoch), so a
/// run restored from a checkpoint continues exactly as the uninterrupted run would.
class Trainer {
 public:
  Trainer(const RunConfig& config, const Dataset& train, const Dataset* eval = nullptr);

  /// Runs until train.max_steps or a plateau; `on_row` sees each metric row.
  void run(const std::function<void(const MetricRow&)>& on_row = {});

  /// One optimization step. Returns the batch loss.
  double step();

  /// Closes the current metric window: evaluates and appends a row.
  const MetricRow& close_window();

  bool finished() const;
  bool plateaued() const noexcept { return plateau_stop_; }
  std::size_t steps_done() const noexcept { return step_; }

  Model<float>& model() noexcept { return model_; }
  const RunConfig& config() const noexcept { return config_; }
  const std::vector<MetricRow>& metrics() const noexcept { return rows_; }
  const std::vector<EpochRow>& epochs() const noexcept { return epoch_rows_; }
  const AdamState<float>& optimizer() const noexcept { return adam_; }

  /// Directory for periodic checkpoints ("checkpoint.bin"); empty disables them.
  void set_checkpoint_dir(std::filesystem::path dir) { checkpoint_dir_ = std::move(dir); }

  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer and loop state. The stored config must match this trainer's.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<std::size_t> batch_indices(std::size_t step) const;
  void check_gradients(double loss) const;

  RunConfig config_;
  const Dataset& train_;
  const Dataset* eval_;
  Model<float> model_;
  AdamState<float> adam_;
  std::size_t step_ = 0;

  // Current metric window.
  double window_loss_ = 0.0, window_fraction_ = 0.0;
  std::size_t window_steps_ = 0;
  double wall_ms_ = 0.0;

  // Per-epoch selected fraction.
  double epoch_fraction_ = 0.0;
  std::size_t epoch_steps_ = 0;

  double best_train_acc_ = -1.0;
  std::size_t stale_windows_ = 0;
  bool plateau_stop_ = false;

  std::vector<MetricRow> rows_;
  std::vector<EpochRow> epoch_rows_;
  std::filesystem::path checkpoint_dir_;
};

/// Checkpoint header fields readable without building a model.
struct CheckpointInfo {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  RunConfig config;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Builds a model from a checkpoint's config and loads its parameters.
std::unique_ptr<Model<float>> load_model(const std::filesystem::path& path);

}  // namespace hvqa
