#include <gtest/gtest.h>

#include <algorithm>
#include <string>

#include "hvqa/config.hpp"
#include "hvqa/errors.hpp"

using namespace hvqa;

namespace {

std::string error_of(std::string_view text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, DefaultsValidate) {
  EXPECT_NO_THROW(preset_config("desk").validate());
  EXPECT_NO_THROW(preset_config("clevr").validate());
  EXPECT_THROW(preset_config("imagenet"), ConfigError);
}

TEST(Config, EveryKeyRoundTrips) {
  for (const auto& preset : {"desk", "clevr"}) {
    const auto config = preset_config(preset);
    const auto text = config.to_text();
    const auto back = parse_config(text);
    EXPECT_EQ(back.to_text(), text);
    EXPECT_EQ(back.hash(), config.hash());
  }
  const auto text = preset_config("desk").to_text();
  EXPECT_EQ(config_keys().size(), static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')));
}

TEST(Config, NonDefaultValuesRoundTrip) {
  RunConfig c;
  c.attention.mode = AttentionMode::kAdaHan;
  c.attention.fraction = 0.5;
  c.aggregator = AggregatorKind::kPairwise;
  c.model.classifier_hidden = {64, 32};
  c.train.lr = 3e-4;
  c.train.seed = 0xFFFFFFFFFFFFull;
  c.pairwise.scale_scores = true;
  const auto back = parse_config(c.to_text());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.train.lr, 3e-4);
  EXPECT_EQ(back.model.classifier_hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_NE(back.hash(), RunConfig{}.hash());
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = parse_config("# header\n\n  train.lr = 0.01  # inline\naggregator=rn\n");
  EXPECT_EQ(c.train.lr, 0.01);
  EXPECT_EQ(c.aggregator, AggregatorKind::kRelation);
}

TEST(Config, PresetEntryAppliesFirst) {
  const auto c = parse_config("model.d=64\nencoder.preset=clevr\n");
  EXPECT_EQ(c.model.d, 64u);
  EXPECT_EQ(c.encoder.channels, (std::vector<std::size_t>{128, 128, 128, 128}));
  EXPECT_EQ(c.data.width, 128u);
}

TEST(Config, UnknownKeyNamesPosition) {
  const auto msg = error_of("train.lr=0.1\n  model.depth=3\n");
  EXPECT_NE(msg.find("line 2, column 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("model.depth"), std::string::npos) << msg;
}

TEST(Config, BadValueNamesValueColumn) {
  const auto msg = error_of("train.batch_size=abc\n");
  EXPECT_NE(msg.find("line 1, column 18"), std::string::npos) << msg;
  EXPECT_NE(error_of("attention.mode=fuzzy").find("column 16"), std::string::npos);
  EXPECT_NE(error_of("model.d=-4").find("line 1"), std::string::npos);
}

TEST(Config, MissingEqualsAndKey) {
  EXPECT_NE(error_of("\n\ntrain.lr 0.1\n").find("line 3, column 1"), std::string::npos);
  EXPECT_NE(error_of("=3\n").find("missing key"), std::string::npos);
}

TEST(Config, ValidationRejectsInconsistentSettings) {
  RunConfig c;
  c.attention.mode = AttentionMode::kSoft;
  c.aggregator = AggregatorKind::kPairwise;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.d = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.pairwise.heads = 3;
  c.pairwise.head_dim = 64;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.model.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.train.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, SetAndGetByKey) {
  RunConfig c;
  set_config_value(c, "attention.k", "4");
  EXPECT_EQ(get_config_value(c, "attention.k"), "4");
  EXPECT_THROW(set_config_value(c, "nope", "1"), ConfigError);
  EXPECT_THROW(get_config_value(c, "nope"), ConfigError);
  EXPECT_THROW(set_config_value(c, "encoder.batch_norm", "maybe"), ConfigError);
  EXPECT_TRUE(is_config_key("train.lr"));
  EXPECT_FALSE(is_config_key("train.learning_rate"));
}
