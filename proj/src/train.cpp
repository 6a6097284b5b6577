#include "hvqa/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "hvqa/binary_io.hpp"
#include "hvqa/errors.hpp"
#include "hvqa/tape.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace hvqa {

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::uint16_t> targets) {
  if (logits.rank() != 1 && logits.rank() != 2)
    throw ShapeError("cross_entropy: expected [B,C] or [C] logits, got " + shape_str(logits.shape()));
  const std::size_t classes = logits.shape().back();
  const std::size_t rows = logits.size() / classes;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows");
  const auto& x = logits.value();
  Array<T> prob(Shape{rows, classes});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= classes)
      throw ArgumentError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                          std::to_string(classes) + ")");
    const T* row = x.ptr() + r * classes;
    const T top = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(static_cast<double>(row[c] - top));
    for (std::size_t c = 0; c < classes; ++c)
      prob[r * classes + c] = static_cast<T>(std::exp(static_cast<double>(row[c] - top)) / z);
    total += std::log(z) - static_cast<double>(row[targets[r]] - top);
  }
  std::vector<std::uint16_t> t(targets.begin(), targets.end());
  return make_result<T>("cross_entropy", Array<T>({1}, static_cast<T>(total / static_cast<double>(rows))), {logits},
                        [prob = std::move(prob), t = std::move(t), rows, classes](Node<T>& self) {
                          auto* g = grad_of(self, 0);
                          if (!g) return;
                          const T scale = self.grad[0] / static_cast<T>(rows);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T onehot = c == t[r] ? T(1) : T(0);
                              (*g)[r * classes + c] += (prob[r * classes + c] - onehot) * scale;
                            }
                        });
}

template <typename T>
void AdamState<T>::init(const ParameterSet<T>& params) {
  m.clear();
  v.clear();
  for (const auto& p : params.all())
    if (p.trainable()) {
      m.emplace_back(p.tensor.shape(), T(0));
      v.emplace_back(p.tensor.shape(), T(0));
    }
  step = 0;
}

template <typename T>
void adam_step(ParameterSet<T>& params, AdamState<T>& state, double lr) {
  if (state.m.empty() && params.trainable_count() > 0) state.init(params);
  ++state.step;
  const double c1 = 1.0 - std::pow(AdamState<T>::kBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(AdamState<T>::kBeta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(AdamState<T>::kBeta1), b2 = static_cast<T>(AdamState<T>::kBeta2);
  const T step_size = static_cast<T>(lr / c1);
  const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
  const T eps = static_cast<T>(AdamState<T>::kEpsilon);
  std::size_t slot = 0;
  for (auto& p : params.all()) {
    if (!p.trainable()) continue;
    if (slot >= state.m.size() || state.m[slot].shape() != p.tensor.shape())
      throw ShapeError("adam: optimizer state does not match parameter " + p.name);
    auto& m = state.m[slot];
    auto& v = state.v[slot];
    ++slot;
    if (!p.tensor.has_grad()) {
      // A zero gradient still decays the moments.
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] *= b1;
        v[i] *= b2;
      }
    } else {
      const auto& g = p.tensor.node()->grad;
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      }
    }
    auto& w = p.tensor.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
  }
}

template <typename T>
Tensor<T> weight_penalty(const ParameterSet<T>& params) {
  Tensor<T> total;
  for (const auto& p : params.all()) {
    if (p.kind != ParamKind::kWeight) continue;
    auto s = sum_squares(p.tensor);
    total = total.defined() ? add(total, s) : s;
  }
  return total.defined() ? total : Tensor<T>(Array<T>({1}, T(0)));
}

template <typename T>
Array<T> batch_images(const Dataset& dataset, std::span<const std::size_t> indices) {
  const auto& h = dataset.header;
  const std::size_t pixels = static_cast<std::size_t>(h.width) * h.height * h.channels;
  if (indices.empty()) throw ArgumentError("batch_images: empty batch");
  Array<T> out({indices.size(), h.height, h.width, h.channels});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= dataset.samples.size()) throw ArgumentError("batch_images: sample index out of range");
    const auto img = normalize_image(dataset.samples[indices[b]].image);
    std::copy(img.data().begin(), img.data().end(), out.ptr() + b * pixels);
  }
  return out;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "family           correct  total  accuracy\n";
  auto line = [&](const std::string& name, const FamilyAccuracy& f) {
    os << name << std::string(name.size() < 17 ? 17 - name.size() : 1, ' ') << f.correct << "\t" << f.total << "\t"
       << 100.0 * f.accuracy() << "%\n";
  };
  for (std::size_t f = 0; f < kFamilyCount; ++f) line(to_string(static_cast<QuestionFamily>(f)), families[f]);
  line("overall", overall);
  return os.str();
}

EvalReport evaluate(Model<float>& model, const Dataset& dataset, std::size_t batch_size) {
  if (batch_size == 0) throw ArgumentError("evaluate: batch size must be positive");
  check_dataset(model.config(), dataset.header);
  EvalReport report;
  report.predictions.reserve(dataset.samples.size());
  double fraction = 0.0;
  for (std::size_t start = 0; start < dataset.samples.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.samples.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::vector<TokenSeq> questions;
    for (std::size_t i = start; i < end; ++i) {
      idx[i - start] = i;
      questions.push_back(dataset.samples[i].tokens);
    }
    const auto out = model.forward(batch_images<float>(dataset, idx), questions, Mode::kEval);
    const auto& logits = out.logits.value();
    const std::size_t classes = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const float* row = logits.ptr() + r * classes;
      const auto pred = static_cast<std::uint16_t>(std::max_element(row, row + classes) - row);
      const auto& s = dataset.samples[idx[r]];
      const bool hit = pred == s.answer;
      auto& fam = report.families[static_cast<std::size_t>(s.family)];
      ++fam.total;
      ++report.overall.total;
      fam.correct += hit;
      report.overall.correct += hit;
      report.predictions.push_back(pred);
    }
    fraction += out.mean_fraction * static_cast<double>(idx.size());
  }
  if (!dataset.samples.empty()) report.mean_fraction = fraction / static_cast<double>(dataset.samples.size());
  return report;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_field(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("bad metrics field '" + s + "'", 0);
  return v;
}

constexpr std::string_view kCsvHeader = "step,loss,train_acc,eval_acc,mean_selected_fraction,wall_ms";
constexpr std::string_view kCheckpointMagic = "HCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out(kCsvHeader);
  out += "\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + fmt(r.loss) + "," + fmt(r.train_acc) + "," + fmt(r.eval_acc) + "," +
           fmt(r.mean_selected_fraction) + "," + fmt(r.wall_ms) + "\n";
  return out;
}

std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("metrics CSV: unexpected header", 0);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw FormatError("metrics CSV: expected 6 fields in '" + line + "'", 0);
    MetricRow r;
    r.step = static_cast<std::size_t>(parse_field(f[0]));
    r.loss = parse_field(f[1]);
    r.train_acc = parse_field(f[2]);
    r.eval_acc = parse_field(f[3]);
    r.mean_selected_fraction = parse_field(f[4]);
    r.wall_ms = parse_field(f[5]);
    rows.push_back(r);
  }
  return rows;
}

void check_dataset(const RunConfig& config, const DatasetHeader& header) {
  const auto& d = config.data;
  auto mismatch = [](const std::string& key, std::size_t want, std::size_t got) {
    throw ConfigError("dataset " + key + " is " + std::to_string(got) + " but the config expects " +
                      std::to_string(want) + " (data." + key + ")");
  };
  if (header.width != d.width) mismatch("width", d.width, header.width);
  if (header.height != d.height) mismatch("height", d.height, header.height);
  if (header.channels != d.channels) mismatch("channels", d.channels, header.channels);
  if (header.question_vocab != d.question_vocab) mismatch("question_vocab", d.question_vocab, header.question_vocab);
  if (header.answer_vocab != d.answer_vocab) mismatch("answer_vocab", d.answer_vocab, header.answer_vocab);
}

Trainer::Trainer(const RunConfig& config, const Dataset& train, const Dataset* eval)
    : config_(config), train_(train), eval_(eval), model_((config.validate(), config), mix_seed(config.train.seed, 0)) {
  check_dataset(config_, train_.header);
  if (eval_) check_dataset(config_, eval_->header);
  if (train_.samples.empty()) throw ConfigError("training dataset is empty");
  adam_.init(model_.params());
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
  const std::size_t n = train_.samples.size();
  const std::size_t b = config_.train.batch_size;
  std::vector<std::size_t> out;
  out.reserve(b);
  std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> perm;
  for (std::size_t pos = step * b; pos < (step + 1) * b; ++pos) {
    const std::size_t epoch = pos / n;
    if (epoch != cached_epoch) {
      Rng rng(mix_seed(config_.train.seed, 0x5348554646ULL + epoch));
      perm = rng.permutation(n);
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n]);
  }
  return out;
}

void Trainer::check_gradients(double loss) const {
  std::ostringstream dump;
  bool bad = !std::isfinite(loss);
  for (const auto& p : model_.params().all()) {
    if (!p.trainable() || !p.tensor.has_grad()) continue;
    std::size_t nonfinite = 0;
    double sq = 0.0;
    for (float g : p.tensor.node()->grad.data()) {
      if (!std::isfinite(g)) ++nonfinite;
      else sq += static_cast<double>(g) * g;
    }
    if (nonfinite) bad = true;
    dump << "  " << p.name << " " << shape_str(p.tensor.shape()) << " grad_norm=" << std::sqrt(sq)
         << " nonfinite=" << nonfinite << "\n";
  }
  if (bad)
    throw TrainingError("non-finite gradient at step " + std::to_string(step_) + " (loss " + fmt(loss) + ")\n" +
                        dump.str());
}

double Trainer::step() {
  const auto started = std::chrono::steady_clock::now();
  const auto idx = batch_indices(step_);
  std::vector<TokenSeq> questions;
  std::vector<std::uint16_t> answers;
  for (auto i : idx) {
    questions.push_back(train_.samples[i].tokens);
    answers.push_back(train_.samples[i].answer);
  }
  Rng dropout_rng(mix_seed(config_.train.seed ^ 0xD20F0D7ULL, step_));
  auto out = model_.forward(batch_images<float>(train_, idx), questions, Mode::kTrain, &dropout_rng);
  auto data_loss = cross_entropy(out.logits, std::span<const std::uint16_t>(answers));
  auto loss = data_loss;
  if (config_.train.l2 > 0.0)
    loss = add(data_loss, scale(weight_penalty(model_.params()), static_cast<float>(config_.train.l2)));
  model_.params().zero_grad();
  backward(loss);
  const double value = data_loss.item();
  check_gradients(loss.item());
  adam_step(model_.params(), adam_, config_.train.lr);
  ++step_;

  window_loss_ += value;
  window_fraction_ += out.mean_fraction;
  ++window_steps_;
  epoch_fraction_ += out.mean_fraction;
  ++epoch_steps_;
  const std::size_t completed = step_ * config_.train.batch_size / train_.samples.size();
  while (epoch_rows_.size() < completed) {
    epoch_rows_.push_back({epoch_rows_.size(), epoch_fraction_ / static_cast<double>(std::max<std::size_t>(1, epoch_steps_))});
    epoch_fraction_ = 0.0;
    epoch_steps_ = 0;
  }
  wall_ms_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return value;
}

const MetricRow& Trainer::close_window() {
  MetricRow row;
  row.step = step_;
  const double steps = static_cast<double>(std::max<std::size_t>(1, window_steps_));
  row.loss = window_loss_ / steps;
  row.mean_selected_fraction = window_fraction_ / steps;
  row.train_acc = evaluate(model_, train_, config_.train.batch_size).overall.accuracy();
  row.eval_acc = eval_ ? evaluate(model_, *eval_, config_.train.batch_size).overall.accuracy()
                       : std::numeric_limits<double>::quiet_NaN();
  row.wall_ms = wall_ms_;
  window_loss_ = window_fraction_ = 0.0;
  window_steps_ = 0;
  if (row.train_acc > best_train_acc_ + config_.train.plateau_delta) {
    best_train_acc_ = row.train_acc;
    stale_windows_ = 0;
  } else if (++stale_windows_ >= config_.train.plateau_windows && config_.train.plateau_windows > 0) {
    plateau_stop_ = true;
  }
  rows_.push_back(row);
  return rows_.back();
}

bool Trainer::finished() const { return plateau_stop_ || step_ >= config_.train.max_steps; }

void Trainer::run(const std::function<void(const MetricRow&)>& on_row) {
  while (!finished()) {
    step();
    if (step_ % config_.train.eval_every == 0 || step_ == config_.train.max_steps) {
      const auto& row = close_window();
      if (on_row) on_row(row);
    }
    if (!checkpoint_dir_.empty() && config_.train.checkpoint_every > 0 && step_ % config_.train.checkpoint_every == 0)
      save_checkpoint(checkpoint_dir_ / "checkpoint.bin");
  }
}

namespace {

void write_params(io::ByteWriter& w, const ParameterSet<float>& params) {
  w.u32(static_cast<std::uint32_t>(params.all().size()));
  for (const auto& p : params.all()) {
    w.str(p.name);
    w.u8(static_cast<std::uint8_t>(p.kind));
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(e));
    for (float v : p.tensor.value().data()) w.f32(v);
  }
}

void read_params(io::ByteReader& r, ParameterSet<float>& params) {
  const auto at = r.offset();
  const auto count = r.u32("parameter table");
  if (count != params.all().size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                          std::to_string(params.all().size()),
                      at);
  for (auto& p : params.all()) {
    const auto name_at = r.offset();
    const auto name = r.str("parameter name");
    if (name != p.name) throw FormatError("expected parameter " + p.name + ", found " + name, name_at);
    const auto kind = r.u8("parameter kind");
    if (kind != static_cast<std::uint8_t>(p.kind)) throw FormatError("parameter kind mismatch for " + name, name_at);
    const auto rank = r.u32("parameter rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32("parameter shape");
    if (shape != p.tensor.shape())
      throw FormatError("parameter " + name + " has shape " + shape_str(shape) + ", model expects " +
                            shape_str(p.tensor.shape()),
                        name_at);
    r.require(4ull * p.tensor.size(), "parameter values");
    for (auto& v : p.tensor.mutable_value().data()) v = r.f32();
  }
}

struct CheckpointHead {
  CheckpointInfo info;
  std::string text;
};

CheckpointHead read_head(io::ByteReader& r) {
  CheckpointHead h;
  r.expect_magic(kCheckpointMagic);
  const auto at = r.offset();
  h.info.version = r.u32("version");
  if (h.info.version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(h.info.version), at);
  h.info.config_hash = r.u64("config hash");
  h.info.step = r.u64("step");
  const auto text_at = r.offset();
  h.text = r.str("config text");
  try {
    h.info.config = parse_config(h.text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config does not parse: ") + e.what(), text_at);
  }
  if (io::fnv1a(h.text) != h.info.config_hash) throw FormatError("config hash does not match config text", at + 4);
  return h;
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  io::ByteWriter w;
  const auto text = config_.to_text();
  w.magic(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(io::fnv1a(text));
  w.u64(step_);
  w.str(text);
  write_params(w, model_.params());
  w.u64(adam_.step);
  w.u32(static_cast<std::uint32_t>(adam_.m.size()));
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    for (float v : adam_.m[i].data()) w.f32(v);
    for (float v : adam_.v[i].data()) w.f32(v);
  }
  w.f64(window_loss_);
  w.f64(window_fraction_);
  w.u64(window_steps_);
  w.f64(wall_ms_);
  w.f64(epoch_fraction_);
  w.u64(epoch_steps_);
  w.f64(best_train_acc_);
  w.u64(stale_windows_);
  w.u8(plateau_stop_ ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(rows_.size()));
  for (const auto& r : rows_) {
    w.u64(r.step);
    w.f64(r.loss);
    w.f64(r.train_acc);
    w.f64(r.eval_acc);
    w.f64(r.mean_selected_fraction);
    w.f64(r.wall_ms);
  }
  w.u32(static_cast<std::uint32_t>(epoch_rows_.size()));
  for (const auto& e : epoch_rows_) {
    w.u64(e.epoch);
    w.f64(e.mean_selected_fraction);
  }
  io::write_file(path, w.bytes());
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  const auto head = read_head(r);
  if (head.info.config_hash != config_.hash())
    throw ConfigError("checkpoint " + path.string() + " was written with a different configuration");
  read_params(r, model_.params());
  adam_.init(model_.params());
  adam_.step = r.u64("optimizer step");
  const auto at = r.offset();
  if (r.u32("optimizer slots") != adam_.m.size()) throw FormatError("optimizer slot count mismatch", at);
  for (std::size_t i = 0; i < adam_.m.size(); ++i) {
    r.require(8ull * adam_.m[i].size(), "optimizer moments");
    for (auto& v : adam_.m[i].data()) v = r.f32();
    for (auto& v : adam_.v[i].data()) v = r.f32();
  }
  step_ = head.info.step;
  window_loss_ = r.f64("loop state");
  window_fraction_ = r.f64("loop state");
  window_steps_ = r.u64("loop state");
  wall_ms_ = r.f64("loop state");
  epoch_fraction_ = r.f64("loop state");
  epoch_steps_ = r.u64("loop state");
  best_train_acc_ = r.f64("loop state");
  stale_windows_ = r.u64("loop state");
  plateau_stop_ = r.u8("loop state") != 0;
  rows_.resize(r.u32("metric rows"));
  for (auto& row : rows_) {
    row.step = r.u64("metric row");
    row.loss = r.f64("metric row");
    row.train_acc = r.f64("metric row");
    row.eval_acc = r.f64("metric row");
    row.mean_selected_fraction = r.f64("metric row");
    row.wall_ms = r.f64("metric row");
  }
  epoch_rows_.resize(r.u32("epoch rows"));
  for (auto& e : epoch_rows_) {
    e.epoch = r.u64("epoch row");
    e.mean_selected_fraction = r.f64("epoch row");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  return read_head(r).info;
}

std::unique_ptr<Model<float>> load_model(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  const auto head = read_head(r);
  auto model = std::make_unique<Model<float>>(head.info.config, mix_seed(head.info.config.train.seed, 0));
  read_params(r, model->params());
  return model;
}

template Tensor<float> cross_entropy(const Tensor<float>&, std::span<const std::uint16_t>);
template Tensor<double> cross_entropy(const Tensor<double>&, std::span<const std::uint16_t>);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParameterSet<float>&, AdamState<float>&, double);
template void adam_step(ParameterSet<double>&, AdamState<double>&, double);
template Tensor<float> weight_penalty(const ParameterSet<float>&);
template Tensor<double> weight_penalty(const ParameterSet<double>&);
template Array<float> batch_images(const Dataset&, std::span<const std::size_t>);
template Array<double> batch_images(const Dataset&, std::span<const std::size_t>);

}  // namespace hvqa
