#include "hvqa/config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "hvqa/binary_io.hpp"
#include "hvqa/errors.hpp"

namespace hvqa {

std::vector<ConvLayerSpec> EncoderConfig::conv_layers() const {
  std::vector<ConvLayerSpec> out;
  for (auto c : channels) out.push_back(ConvLayerSpec{kernel, stride, c});
  return out;
}

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + ": expected " +
                    std::string(expected));
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

double parse_double(std::string_view key, std::string_view v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> parse_list(std::string_view key, std::string_view v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    const auto item = v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    out.push_back(static_cast<std::size_t>(parse_u64(key, item)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct KeyDef {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

#define HVQA_SIZE(name, field)                                                                       \
  KeyDef {                                                                                           \
    name, [](const RunConfig& c) { return std::to_string(c.field); },                                \
        [](RunConfig& c, std::string_view v) { c.field = static_cast<std::size_t>(parse_u64(name, v)); } \
  }
#define HVQA_DOUBLE(name, field)                                                                  \
  KeyDef {                                                                                        \
    name, [](const RunConfig& c) { return fmt_double(c.field); },                                 \
        [](RunConfig& c, std::string_view v) { c.field = parse_double(name, v); }                 \
  }
#define HVQA_BOOL(name, field)                                                                    \
  KeyDef {                                                                                        \
    name, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); },             \
        [](RunConfig& c, std::string_view v) { c.field = parse_bool(name, v); }                   \
  }
#define HVQA_LIST(name, field)                                                                    \
  KeyDef {                                                                                        \
    name, [](const RunConfig& c) { return fmt_list(c.field); },                                   \
        [](RunConfig& c, std::string_view v) { c.field = parse_list(name, v); }                   \
  }

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table{
      KeyDef{"attention.mode", [](const RunConfig& c) { return to_string(c.attention.mode); },
             [](RunConfig& c, std::string_view v) {
               if (v == "han") c.attention.mode = AttentionMode::kHan;
               else if (v == "adahan") c.attention.mode = AttentionMode::kAdaHan;
               else if (v == "soft") c.attention.mode = AttentionMode::kSoft;
               else if (v == "straight_through") c.attention.mode = AttentionMode::kStraightThrough;
               else bad_value("attention.mode", v, "han, adahan, soft or straight_through");
             }},
      HVQA_DOUBLE("attention.fraction", attention.fraction),
      HVQA_SIZE("attention.k", attention.k),
      HVQA_DOUBLE("attention.tau", attention.tau),
      HVQA_SIZE("attention.hops", attention.hops),
      KeyDef{"attention.st_normalizer", [](const RunConfig& c) { return to_string(c.attention.st_normalizer); },
             [](RunConfig& c, std::string_view v) {
               if (v == "sigmoid") c.attention.st_normalizer = GateNormalizer::kSigmoid;
               else if (v == "softmax") c.attention.st_normalizer = GateNormalizer::kSoftmax;
               else bad_value("attention.st_normalizer", v, "sigmoid or softmax");
             }},
      KeyDef{"aggregator", [](const RunConfig& c) { return to_string(c.aggregator); },
             [](RunConfig& c, std::string_view v) {
               if (v == "sum") c.aggregator = AggregatorKind::kSum;
               else if (v == "pairwise") c.aggregator = AggregatorKind::kPairwise;
               else if (v == "rn") c.aggregator = AggregatorKind::kRelation;
               else bad_value("aggregator", v, "sum, pairwise or rn");
             }},
      KeyDef{"encoder.preset", [](const RunConfig& c) { return c.encoder.preset; },
             [](RunConfig& c, std::string_view v) {
               if (v != "desk" && v != "clevr") bad_value("encoder.preset", v, "desk or clevr");
               c.encoder.preset = std::string(v);
             }},
      HVQA_LIST("encoder.channels", encoder.channels),
      HVQA_SIZE("encoder.kernel", encoder.kernel),
      HVQA_SIZE("encoder.stride", encoder.stride),
      HVQA_BOOL("encoder.batch_norm", encoder.batch_norm),
      HVQA_SIZE("encoder.embed_dim", encoder.embed_dim),
      HVQA_SIZE("encoder.lstm_hidden", encoder.lstm_hidden),
      HVQA_SIZE("model.d", model.d),
      HVQA_SIZE("model.alignment_depth", model.alignment_depth),
      HVQA_LIST("model.classifier_hidden", model.classifier_hidden),
      HVQA_DOUBLE("model.dropout", model.dropout),
      HVQA_SIZE("pairwise.heads", pairwise.heads),
      HVQA_SIZE("pairwise.head_dim", pairwise.head_dim),
      HVQA_BOOL("pairwise.scale_scores", pairwise.scale_scores),
      HVQA_SIZE("rn.g_width", rn.g_width),
      HVQA_SIZE("rn.g_layers", rn.g_layers),
      HVQA_SIZE("train.batch_size", train.batch_size),
      HVQA_DOUBLE("train.lr", train.lr),
      HVQA_SIZE("train.max_steps", train.max_steps),
      KeyDef{"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
             [](RunConfig& c, std::string_view v) { c.train.seed = parse_u64("train.seed", v); }},
      HVQA_SIZE("train.eval_every", train.eval_every),
      HVQA_SIZE("train.checkpoint_every", train.checkpoint_every),
      HVQA_DOUBLE("train.l2", train.l2),
      HVQA_SIZE("train.plateau_windows", train.plateau_windows),
      HVQA_DOUBLE("train.plateau_delta", train.plateau_delta),
      HVQA_SIZE("data.width", data.width),
      HVQA_SIZE("data.height", data.height),
      HVQA_SIZE("data.channels", data.channels),
      HVQA_SIZE("data.question_vocab", data.question_vocab),
      HVQA_SIZE("data.answer_vocab", data.answer_vocab),
  };
  return table;
}

#undef HVQA_SIZE
#undef HVQA_DOUBLE
#undef HVQA_BOOL
#undef HVQA_LIST

const KeyDef* find_key(std::string_view key) {
  const auto& t = key_table();
  auto it = std::find_if(t.begin(), t.end(), [&](const KeyDef& k) { return k.key == key; });
  return it == t.end() ? nullptr : &*it;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::validate() const {
  attention.validate();
  if (encoder.channels.empty()) throw ConfigError("encoder.channels must list at least one layer");
  if (std::find(encoder.channels.begin(), encoder.channels.end(), 0u) != encoder.channels.end())
    throw ConfigError("encoder.channels entries must be positive");
  if (encoder.kernel == 0 || encoder.stride == 0) throw ConfigError("encoder.kernel and encoder.stride must be positive");
  if (encoder.embed_dim == 0 || encoder.lstm_hidden == 0) throw ConfigError("encoder.embed_dim and encoder.lstm_hidden must be positive");
  if (model.d == 0) throw ConfigError("model.d must be positive");
  if (!(model.dropout >= 0.0 && model.dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
  if (std::find(model.classifier_hidden.begin(), model.classifier_hidden.end(), 0u) != model.classifier_hidden.end())
    throw ConfigError("model.classifier_hidden entries must be positive");
  if (pairwise.heads == 0) throw ConfigError("pairwise.heads must be positive");
  const std::size_t head_dim = pairwise.head_dim ? pairwise.head_dim : model.d / pairwise.heads;
  if (head_dim == 0) throw ConfigError("pairwise.head_dim resolves to zero");
  if (head_dim * pairwise.heads > model.d) throw ConfigError("pairwise.heads * pairwise.head_dim exceeds model.d");
  if (rn.g_width == 0 || rn.g_layers == 0) throw ConfigError("rn.g_width and rn.g_layers must be positive");
  if (attention.mode == AttentionMode::kSoft && aggregator != AggregatorKind::kSum)
    throw ConfigError("attention.mode=soft pools by weighted average; aggregator must be sum");
  if (attention.mode == AttentionMode::kStraightThrough && model.d < 2)
    throw ConfigError("attention.mode=straight_through needs model.d >= 2");
  if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(train.lr >= 0.0)) throw ConfigError("train.lr must be non-negative");
  if (!(train.l2 >= 0.0)) throw ConfigError("train.l2 must be non-negative");
  if (train.eval_every == 0) throw ConfigError("train.eval_every must be positive");
  if (data.width == 0 || data.height == 0 || data.channels == 0) throw ConfigError("data dimensions must be positive");
  if (data.question_vocab == 0 || data.answer_vocab == 0) throw ConfigError("data vocabularies must be non-empty");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : key_table()) out += k.key + "=" + k.get(*this) + "\n";
  return out;
}

std::uint64_t RunConfig::hash() const { return io::fnv1a(to_text()); }

RunConfig preset_config(std::string_view name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name != "clevr") throw ConfigError("unknown encoder preset '" + std::string(name) + "'");
  c.encoder.preset = "clevr";
  c.encoder.channels = {128, 128, 128, 128};
  c.encoder.embed_dim = 64;
  c.encoder.lstm_hidden = 256;
  c.model.d = 256;
  c.model.classifier_hidden = {1024};
  c.model.dropout = 0.5;
  c.aggregator = AggregatorKind::kRelation;
  c.data.width = c.data.height = 128;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.key);
    return out;
  }();
  return keys;
}

bool is_config_key(std::string_view key) { return find_key(key) != nullptr; }

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  const auto* def = find_key(key);
  if (!def) throw ConfigError("unknown config key '" + std::string(key) + "'");
  def->set(config, value);
}

std::string get_config_value(const RunConfig& config, std::string_view key) {
  const auto* def = find_key(key);
  if (!def) throw ConfigError("unknown config key '" + std::string(key) + "'");
  return def->get(config);
}

std::vector<ConfigEntry> parse_config_entries(std::string_view text) {
  std::vector<ConfigEntry> out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto eol = text.find('\n', pos);
    std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos : eol - pos);
    ++line_no;
    pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto key_col = line.find_first_not_of(" \t") + 1;
    auto where = [&](std::size_t col) {
      return "line " + std::to_string(line_no) + ", column " + std::to_string(col) + ": ";
    };
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where(key_col) + "expected key=value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where(eq + 1) + "missing key before '='");
    if (!is_config_key(key)) throw ConfigError(where(key_col) + "unknown config key '" + std::string(key) + "'");
    const auto raw_value = line.substr(eq + 1);
    const auto value = trim(raw_value);
    const auto value_col = eq + 2 + (value.empty() ? 0 : raw_value.find(value.front()));
    // Check the value now so the error can point at it.
    RunConfig scratch;
    try {
      set_config_value(scratch, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where(value_col) + e.what());
    }
    out.push_back(ConfigEntry{std::string(key), std::string(value), line_no, key_col});
  }
  return out;
}

RunConfig config_from_entries(const std::vector<ConfigEntry>& entries) {
  std::string preset = "desk";
  for (const auto& e : entries)
    if (e.key == "encoder.preset") preset = e.value;
  RunConfig config = preset_config(preset);
  for (const auto& e : entries) {
    if (e.key == "encoder.preset") continue;
    try {
      set_config_value(config, e.key, e.value);
    } catch (const ConfigError& err) {
      if (e.line == 0) throw;
      throw ConfigError("line " + std::to_string(e.line) + ", column " + std::to_string(e.column) + ": " + err.what());
    }
  }
  return config;
}

RunConfig parse_config(std::string_view text) { return config_from_entries(parse_config_entries(text)); }

}  // namespace hvqa
