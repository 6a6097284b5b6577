// hvqa: dataset generation, training, evaluation, benchmarking and attention-mask images.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "hvqa/bench.hpp"
#include "hvqa/binary_io.hpp"
#include "hvqa/config.hpp"
#include "hvqa/data.hpp"
#include "hvqa/errors.hpp"
#include "hvqa/train.hpp"
#include "hvqa/viz.hpp"

namespace fs = std::filesystem;
using namespace hvqa;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitRuntime = 4;

std::string read_text(const fs::path& path) {
  const auto bytes = io::read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

template <typename T>
std::vector<T> parse_csv_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("invalid ") + what + " entry '" + item + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::size_t n = 0;
  std::uint64_t seed = 1;
  std::size_t canvas = kDefaultCanvas;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  const auto dataset = generate_dataset(a.n, a.seed, a.canvas);
  const fs::path out(a.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_dataset(dataset, out);
  const auto summary = dataset_summary(dataset);
  fs::path sidecar = out;
  sidecar += ".summary.txt";
  io::write_text(sidecar, summary);

  const auto back = read_dataset(out);
  if (!(back.header == dataset.header) || back.samples != dataset.samples)
    throw IoError("self-check failed: " + out.string() + " does not read back identically");
  if (read_text(sidecar) != summary) throw IoError("self-check failed: " + sidecar.string());
  std::cout << "wrote " << a.n << " samples to " << out.string() << "\n" << summary;
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config_path, data, eval_data, out, resume;
  std::size_t max_steps = 0;
  bool max_steps_set = false;
  std::vector<std::string> overrides;
};

// Overrides arrive as "--key=value" or "--key value".
std::vector<ConfigEntry> parse_overrides(const std::vector<std::string>& args) {
  std::vector<ConfigEntry> entries;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& arg = args[i];
    if (arg.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + arg + "'");
    std::string key = arg.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (!is_config_key(key)) throw ConfigError("unknown config key '" + key + "'");
      if (i + 1 >= args.size()) throw ConfigError("missing value for --" + key);
      value = args[++i];
    }
    if (!is_config_key(key)) throw ConfigError("unknown config key '" + key + "'");
    RunConfig scratch;
    set_config_value(scratch, key, value);
    entries.push_back(ConfigEntry{key, value, 0, 0});
  }
  return entries;
}

int cmd_train(const TrainArgs& a) {
  std::vector<ConfigEntry> entries;
  if (!a.config_path.empty()) {
    try {
      entries = parse_config_entries(read_text(a.config_path));
    } catch (const ConfigError& e) {
      throw ConfigError(a.config_path + ": " + e.what());
    }
  }
  for (auto& e : parse_overrides(a.overrides)) entries.push_back(std::move(e));
  if (a.max_steps_set) entries.push_back(ConfigEntry{"train.max_steps", std::to_string(a.max_steps), 0, 0});
  const RunConfig config = config_from_entries(entries);
  config.validate();

  const auto train = read_dataset(a.data);
  std::optional<Dataset> eval;
  if (!a.eval_data.empty()) eval = read_dataset(a.eval_data);
  const fs::path out(a.out);
  ensure_dir(out);

  Trainer trainer(config, train, eval ? &*eval : nullptr);
  if (!a.resume.empty()) trainer.load_checkpoint(a.resume);
  trainer.set_checkpoint_dir(out);
  io::write_text(out / "config.txt", config.to_text());
  std::cout << "parameters " << trainer.model().params().trainable_count() << ", grid " << trainer.model().grid_width()
            << "x" << trainer.model().grid_height() << "\n";
  try {
    trainer.run([](const MetricRow& r) {
      std::printf("step %zu loss %.4f train_acc %.4f eval_acc %.4f fraction %.4f wall_ms %.0f\n", r.step, r.loss,
                  r.train_acc, r.eval_acc, r.mean_selected_fraction, r.wall_ms);
      std::fflush(stdout);
    });
  } catch (const TrainingError& e) {
    io::write_text(out / "diagnostics.txt", e.what());
    throw;
  }
  if (trainer.plateaued()) std::cout << "stopped at step " << trainer.steps_done() << ": training accuracy plateaued\n";

  const auto csv = metrics_csv(trainer.metrics());
  io::write_text(out / "metrics.csv", csv);
  std::string epochs = "epoch,mean_selected_fraction\n";
  for (const auto& e : trainer.epochs()) {
    std::ostringstream os;
    os.precision(17);
    os << e.epoch << "," << e.mean_selected_fraction << "\n";
    epochs += os.str();
  }
  io::write_text(out / "epochs.csv", epochs);
  trainer.save_checkpoint(out / "checkpoint.bin");

  // Self-check.
  if (metrics_csv(parse_metrics_csv(read_text(out / "metrics.csv"))) != csv)
    throw IoError("self-check failed: metrics.csv does not read back identically");
  if (read_text(out / "epochs.csv") != epochs) throw IoError("self-check failed: epochs.csv");
  const auto info = read_checkpoint_info(out / "checkpoint.bin");
  if (info.config_hash != config.hash() || info.step != trainer.steps_done())
    throw IoError("self-check failed: checkpoint header disagrees with the run");
  if (parse_config(read_text(out / "config.txt")) != config) throw IoError("self-check failed: config.txt");
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, out;
};

int cmd_eval(const EvalArgs& a) {
  auto model = load_model(a.checkpoint);
  const auto dataset = read_dataset(a.data);
  const auto report = evaluate(*model, dataset, model->config().train.batch_size);
  std::ostringstream os;
  os << report.table();
  os.precision(17);
  os << "accuracy " << report.overall.accuracy() << "\n";
  os << "mean_selected_fraction " << report.mean_fraction << "\n";
  std::cout << os.str();
  if (!a.out.empty()) {
    const fs::path out(a.out);
    if (out.has_parent_path()) ensure_dir(out.parent_path());
    io::write_text(out, os.str());
    if (read_text(out) != os.str()) throw IoError("self-check failed: " + out.string());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string k_list = "8,16,32,64";
  std::string aggregators = "sum,pairwise,rn";
  BenchOptions options;
  std::string out;
};

int cmd_bench(BenchArgs a) {
  a.options.k_list = parse_csv_list<std::size_t>(a.k_list, "k");
  a.options.aggregators.clear();
  std::stringstream ss(a.aggregators);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "sum") a.options.aggregators.push_back(AggregatorKind::kSum);
    else if (item == "pairwise") a.options.aggregators.push_back(AggregatorKind::kPairwise);
    else if (item == "rn") a.options.aggregators.push_back(AggregatorKind::kRelation);
    else throw ConfigError("unknown aggregator '" + item + "'");
  }
  for (auto k : a.options.k_list)
    if (k == 0 || k > a.options.n)
      throw ConfigError("k=" + std::to_string(k) + " must lie in [1, n=" + std::to_string(a.options.n) + "]");
  const auto rows = run_bench(a.options);
  const auto csv = bench_csv(rows);
  const auto table = bench_table(rows);
  std::cout << table;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    ensure_dir(out);
    io::write_text(out / "bench.csv", csv);
    io::write_text(out / "bench.txt", table);
    if (read_text(out / "bench.csv") != csv || read_text(out / "bench.txt") != table)
      throw IoError("self-check failed: bench outputs");
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct VizArgs {
  std::string checkpoint, data, indices = "0", out;
};

int cmd_viz(const VizArgs& a) {
  auto model = load_model(a.checkpoint);
  const auto dataset = read_dataset(a.data);
  check_dataset(model->config(), dataset.header);
  const auto indices = parse_csv_list<std::size_t>(a.indices, "index");
  const fs::path out(a.out);
  ensure_dir(out);
  for (auto i : indices) {
    if (i >= dataset.samples.size())
      throw ArgumentError("sample index " + std::to_string(i) + " out of range (dataset has " +
                          std::to_string(dataset.samples.size()) + " samples)");
    const auto& sample = dataset.samples[i];
    const std::size_t idx[1] = {i};
    const auto result = model->forward(batch_images<float>(dataset, idx), {sample.tokens}, Mode::kEval);
    const auto& logits = result.logits.value();
    const auto pred = static_cast<std::size_t>(std::max_element(logits.data().begin(), logits.data().end()) -
                                               logits.data().begin());
    std::vector<std::size_t> cells;
    if (result.selections.empty()) {
      for (std::size_t c = 0; c < model->cells(); ++c) cells.push_back(c);
    } else {
      cells = result.selections.front().ascending();
    }
    const auto image = darken_unselected(sample.image, cells, model->grid_width(), model->grid_height(),
                                         model->cell_stride());
    const auto ppm = encode_ppm(image);
    const fs::path ppm_path = out / ("sample_" + std::to_string(i) + ".ppm");
    const fs::path txt_path = out / ("sample_" + std::to_string(i) + ".txt");
    io::write_file(ppm_path, ppm);
    std::ostringstream txt;
    txt << "question: " << detokenize(sample.tokens) << "\n";
    txt << "predicted: " << (pred < answer_vocab().size() ? answer_vocab()[pred] : std::to_string(pred)) << "\n";
    txt << "true: " << answer_vocab()[sample.answer] << "\n";
    txt << "family: " << to_string(sample.family) << "\n";
    txt << "attended_cells:";
    for (auto c : cells) txt << " " << c;
    txt << "\n";
    io::write_text(txt_path, txt.str());

    const auto back = decode_ppm(io::read_file(ppm_path));
    if (back.width != image.dim(1) || back.height != image.dim(0) ||
        !std::equal(back.rgb.begin(), back.rgb.end(), ppm.end() - static_cast<std::ptrdiff_t>(back.rgb.size())))
      throw IoError("self-check failed: " + ppm_path.string());
    if (read_text(txt_path) != txt.str()) throw IoError("self-check failed: " + txt_path.string());
    std::cout << "wrote " << ppm_path.string() << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  CLI::App app{"Hard-attention visual question answering toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--n", gen.n, "Number of samples")->required();
  gen_cmd->add_option("--seed", gen.seed, "Master seed");
  gen_cmd->add_option("--canvas", gen.canvas, "Image side in pixels");
  gen_cmd->add_option("--out", gen.out, "Output dataset path")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model; config keys may be overridden with --key=value");
  train_cmd->add_option("--config", train.config_path, "key=value config file");
  train_cmd->add_option("--data", train.data, "Training dataset")->required();
  train_cmd->add_option("--eval-data", train.eval_data, "Held-out dataset for eval_acc");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to continue from");
  train_cmd->add_option("--max-steps", train.max_steps, "Shorthand for --train.max_steps");
  train_cmd->allow_extras();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Per-family accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data)->required();
  eval_cmd->add_option("--out", eval.out, "Write the report here as well");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time selection plus aggregation against k");
  bench_cmd->add_option("--k", bench.k_list, "Comma-separated k values");
  bench_cmd->add_option("--n", bench.options.n, "Total cells");
  bench_cmd->add_option("--d", bench.options.d, "Feature dimension");
  bench_cmd->add_option("--heads", bench.options.heads, "Pairwise heads");
  bench_cmd->add_option("--reps", bench.options.reps, "Timed repetitions");
  bench_cmd->add_option("--aggregators", bench.aggregators, "Comma-separated: sum,pairwise,rn");
  bench_cmd->add_option("--seed", bench.options.seed);
  bench_cmd->add_option("--out", bench.out, "Output directory for bench.csv and bench.txt");

  VizArgs viz;
  auto* viz_cmd = app.add_subcommand("viz", "Write attention-mask images");
  viz_cmd->add_option("--checkpoint", viz.checkpoint)->required();
  viz_cmd->add_option("--data", viz.data)->required();
  viz_cmd->add_option("--indices", viz.indices, "Comma-separated sample indices");
  viz_cmd->add_option("--out", viz.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen);
    if (*train_cmd) {
      train.overrides = train_cmd->remaining();
      train.max_steps_set = train_cmd->count("--max-steps") > 0;
      return cmd_train(train);
    }
    if (*eval_cmd) return cmd_eval(eval);
    if (*bench_cmd) return cmd_bench(bench);
    if (*viz_cmd) return cmd_viz(viz);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
