#include <gtest/gtest.h>

#include "gsgn/config_io.hpp"
#include "gsgn/training.hpp"

namespace {

using namespace gsgn;

TEST(Toml, ScalarsTablesAndArrays) {
  auto j = parse_toml(R"(
# run settings
mode = "supervised-multitask"
iterations = 3_000
learning_rate = 1e-4
flag = true
name = 'literal \n'

[model]
norm_mode = "adaptive"
blocks_per_level = [2, 1,
                    1]   # trailing comment
widths = { a = 1, b.c = 2.5 }

[weights.extra]
x = -3
)");
  EXPECT_EQ(j["mode"], "supervised-multitask");
  EXPECT_EQ(j["iterations"], 3000);
  EXPECT_TRUE(j["iterations"].is_number_integer());
  EXPECT_DOUBLE_EQ(j["learning_rate"].get<double>(), 1e-4);
  EXPECT_EQ(j["flag"], true);
  EXPECT_EQ(j["name"], "literal \\n");
  EXPECT_EQ(j["model"]["blocks_per_level"], nlohmann::json::array({2, 1, 1}));
  EXPECT_EQ(j["model"]["widths"]["b"]["c"], 2.5);
  EXPECT_EQ(j["weights"]["extra"]["x"], -3);
}

TEST(Toml, BasicStringEscapes) {
  EXPECT_EQ(parse_toml("s = \"a\\tb\\\"c\"")["s"], "a\tb\"c");
}

TEST(Toml, ErrorsCarryLineNumbers) {
  try {
    parse_toml("a = 1\nb = \n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_toml("a = 1\na = 2\n"), Error);
  EXPECT_THROW(parse_toml("[[arr]]\n"), Error);
  EXPECT_THROW(parse_toml("a = \"open\n"), Error);
  EXPECT_THROW(parse_toml("a = 1 2\n"), Error);
}

TEST(TrainConfig, FromTomlWithDefaults) {
  auto c = parse_toml(R"(
mode = "unpaired-single"
critic_ratio = 5
[weights]
conditional = 0.0
penalty_form = "product"
[model]
base_channels = 8
)").get<TrainConfig>();
  EXPECT_EQ(c.mode, TrainMode::unpaired_single);
  EXPECT_EQ(c.critic_ratio, 5u);
  EXPECT_EQ(c.weights.conditional, 0.0);
  EXPECT_EQ(c.weights.cycle, LossWeights{}.cycle);
  EXPECT_EQ(c.weights.penalty_form, PenaltyForm::product);
  EXPECT_EQ(c.model.base_channels, 8u);
  EXPECT_EQ(c.model.latent_w_dim, ModelConfig::desk().latent_w_dim);
  EXPECT_EQ(c.iterations, TrainConfig{}.iterations);
}

TEST(TrainConfig, UnknownKeysAreErrors) {
  EXPECT_THROW(parse_toml("iteratons = 5").get<TrainConfig>(), Error);
  EXPECT_THROW(parse_toml("[model]\nwidth = 5").get<TrainConfig>(), Error);
  EXPECT_THROW(parse_toml("[weights]\ncycles = 5").get<TrainConfig>(), Error);
  EXPECT_THROW(parse_toml("mode = \"semi\"").get<TrainConfig>(), Error);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c;
  c.mode = TrainMode::supervised_all;
  c.crop = 32;
  c.weights.identity = 0.5;
  nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.crop = 6;
  EXPECT_THROW(c.validate(), Error);
  c.crop = 0;
  c.critic_ratio = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(ConfigFile, DispatchesOnExtension) {
  const auto dir = std::filesystem::path(GSGN_TEST_TMP) / "config";
  std::filesystem::create_directories(dir);
  write_file(dir / "a.toml", "seed = 7\n");
  write_file(dir / "a.json", "{\"seed\": 8}");
  write_file(dir / "bad.json", "{seed: 8}");
  EXPECT_EQ(load_config_file(dir / "a.toml")["seed"], 7);
  EXPECT_EQ(load_config_file(dir / "a.json")["seed"], 8);
  EXPECT_THROW(load_config_file(dir / "bad.json"), Error);
}

}  // namespace
