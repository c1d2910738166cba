#include <gtest/gtest.h>

#include "kubert/pipeline_config.hpp"
#include "support.hpp"

using namespace kubert;
using nlohmann::json;

namespace {

const std::filesystem::path kConfigDir = KUBERT_CONFIG_DIR;

void expect_rejected(const json& j, const std::string& needle) {
  try {
    PipelineConfig::from_json(j);
    ADD_FAILURE() << "accepted: " << j.dump();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(PipelineConfig, ModelTableConfigsLoad) {
  struct Row {
    const char* file;
    size_t epochs, iterations, hidden;
  };
  for (const Row& r : {Row{"model1.json", 10, 1000000, 384}, Row{"model2.json", 20, 2000000, 384},
                       Row{"model3.json", 10, 1000000, 768}, Row{"model4.json", 20, 2000000, 768}}) {
    const auto cfg = PipelineConfig::load(kConfigDir / r.file);
    ASSERT_TRUE(cfg.bert) << r.file;
    EXPECT_EQ(cfg.bert->epochs, r.epochs) << r.file;
    EXPECT_EQ(cfg.bert->iterations, r.iterations) << r.file;
    EXPECT_EQ(cfg.bert->hidden_size, r.hidden) << r.file;
    EXPECT_EQ(cfg.bert->vocab_size, 50000u);
    EXPECT_EQ(cfg.bert->num_attention_heads, 12u);
    EXPECT_EQ(cfg.bert->num_hidden_layers, 6u);
    EXPECT_EQ(cfg.bert->batch_size, 12u);
    EXPECT_TRUE(cfg.bert->gpu);
  }
  EXPECT_NO_THROW(PipelineConfig::load(kConfigDir / "desk.json"));
}

TEST(PipelineConfig, DefaultsAndSeedPropagation) {
  const auto empty = PipelineConfig::from_json(json::object());
  EXPECT_EQ(empty.seed, 42u);
  EXPECT_EQ(empty.train.seed, 42u);
  EXPECT_FALSE(empty.bert);
  EXPECT_EQ(empty.vocab_size, 50000u);

  const auto c = PipelineConfig::from_json({{"seed", 7}, {"train", {{"batch_size", 4}}}});
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.train.batch_size, 4u);
  const auto d = PipelineConfig::from_json({{"seed", 7}, {"train", {{"seed", 9}}}});
  EXPECT_EQ(d.train.seed, 9u);
}

TEST(PipelineConfig, RejectsUnknownKeysInEverySection) {
  expect_rejected({{"sede", 1}}, "sede");
  expect_rejected({{"normalizer", {{"rule", "x"}}}}, "normalizer.rule");
  expect_rejected({{"tokenizer", {{"size", 1}}}}, "tokenizer.size");
  expect_rejected({{"paths", {{"elsewhere", "x"}}}}, "paths.elsewhere");
  expect_rejected({{"train", {{"epoch", 1}}}}, "epoch");
  expect_rejected({{"bert",
                    {{"hidden_size", 8}, {"num_hidden_layers", 1}, {"num_attention_heads", 2}, {"vocab_size", 10},
                     {"hiden", 1}}}},
                  "hiden");
}

TEST(PipelineConfig, RejectsInvalidValues) {
  expect_rejected({{"bert", {{"hidden_size", 10}, {"num_hidden_layers", 1}, {"num_attention_heads", 3}, {"vocab_size", 10}}}},
                  "divisible");
  expect_rejected({{"bert", {{"hidden_size", 8}, {"num_attention_heads", 2}, {"vocab_size", 10}}}},
                  "num_hidden_layers");
  expect_rejected({{"tokenizer", {{"min_freq", 0}}}}, "min_freq");
  expect_rejected({{"train", {{"num_classes", 4}}}}, "num_classes");
  expect_rejected({{"seed", "abc"}}, "config");
  expect_rejected(json::array(), "object");
}

TEST(PipelineConfig, InvalidJsonNamesTheFile) {
  const auto dir = fixtures::scratch_dir("config");
  io::write_file_atomic(dir / "bad.json", "{\"seed\": ");
  try {
    PipelineConfig::load(dir / "bad.json");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
  }
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.epochs = 5;
  c.mlp_hidden = {1, 1};
  c.num_classes = 2;
  const auto back = TrainConfig::from_json(json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(BertConfig, JsonRoundTrip) {
  const auto cfg = PipelineConfig::load(kConfigDir / "model3.json");
  EXPECT_EQ(BertConfig::from_json(json::parse(cfg.bert->to_json().dump())).to_json(), cfg.bert->to_json());
}
