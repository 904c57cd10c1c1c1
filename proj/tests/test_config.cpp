#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ocrgan/config.hpp"
#include "ocrgan/rng.hpp"

using namespace ocrgan;

TEST(Config, DefaultsMatchTrainingRecipe) {
  const RunConfig c;
  EXPECT_EQ(c.lambda_con, 50.0);
  EXPECT_EQ(c.lambda_adv, 1.0);
  EXPECT_EQ(c.lambda_lat, 1.0);
  EXPECT_EQ(c.score_lambda, 0.9);
  EXPECT_EQ(c.lr, 0.002);
  EXPECT_EQ(c.beta1, 0.5);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.base_channels, 64);
  EXPECT_EQ(c.n_branches, 2);
  EXPECT_EQ(c.image_size, 256);
  EXPECT_NO_THROW(validate(c));
}

TEST(Config, ParsesCommentsAndWhitespace) {
  const auto c = parse_config(
      "# experiment\n"
      "n_branches = 3   # three bands\n"
      "\n"
      "  use_cs=false\n"
      "lr = 1e-3\r\n"
      "data_root = /tmp/data set\n"
      "seed = 18446744073709551615\n");
  EXPECT_EQ(c.n_branches, 3);
  EXPECT_FALSE(c.use_cs);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.data_root, "/tmp/data set");
  EXPECT_EQ(c.seed, 18446744073709551615ull);
  EXPECT_EQ(c.base_channels, 64);
}

TEST(Config, RejectsMalformedInput) {
  EXPECT_THROW(parse_config("nonsense_key = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("lr 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("lr = 0.1\nlr = 0.2\n"), ConfigError);
  EXPECT_THROW(parse_config("use_cs = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("seed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_size = 3.5\n"), ConfigError);
  try {
    parse_config("lr = 1\n\nbogus = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, OverridesApplyOnTopOfFile) {
  RunConfig c = parse_config("batch_size = 8\n");
  apply_override(c, "batch_size=4");
  apply_override(c, "category = bottle");
  EXPECT_EQ(c.batch_size, 4);
  EXPECT_EQ(c.category, "bottle");
  EXPECT_THROW(apply_override(c, "batch_size"), ConfigError);
  EXPECT_THROW(apply_override(c, "nope=1"), ConfigError);
}

TEST(Config, TextRoundTripIsExact) {
  Rng rng(3);
  const auto keys = config_keys();
  for (int trial = 0; trial < 100; ++trial) {
    RunConfig c;
    c.n_branches = int(rng.uniform_int(1, 4));
    c.base_channels = int(rng.uniform_int(1, 128));
    c.use_cs = rng.bernoulli(0.5);
    c.lambda_con = rng.uniform(0, 100);
    c.score_lambda = rng.uniform(0, 1);
    c.lr = rng.uniform(1e-6, 1e-1);
    c.weight_decay = rng.uniform(0, 1e-2);
    c.steps = long(rng.uniform_int(0, 100000));
    c.seed = rng.next_u64();
    c.category = "cat" + std::to_string(trial);
    c.cutout_fill = rng.uniform(-1, 1);
    const RunConfig back = parse_config(to_text(c));
    for (const auto& k : keys) EXPECT_EQ(get_config_value(back, k), get_config_value(c, k)) << k;
    EXPECT_EQ(back.lr, c.lr);
    EXPECT_EQ(back.cutout_fill, c.cutout_fill);
  }
}

TEST(Config, LoadsFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "ocrgan_test_config.txt";
  {
    std::ofstream out(path);
    out << "image_size = 64\nchannels = 1\n";
  }
  const auto c = load_config_file(path.string());
  EXPECT_EQ(c.image_size, 64);
  EXPECT_EQ(c.channels, 1);
  std::filesystem::remove(path);
  EXPECT_THROW(load_config_file(path.string()), ConfigError);
}

TEST(Config, ValidationCatchesEachConstraint) {
  auto invalid = [](auto mutate) {
    RunConfig c;
    mutate(c);
    EXPECT_THROW(validate(c), ConfigError);
  };
  invalid([](RunConfig& c) { c.n_branches = 0; });
  invalid([](RunConfig& c) { c.base_channels = 0; });
  invalid([](RunConfig& c) { c.lambda_con = c.lambda_adv = c.lambda_lat = 0; });
  invalid([](RunConfig& c) { c.lambda_lat = -1; });
  invalid([](RunConfig& c) { c.score_lambda = 1.5; });
  invalid([](RunConfig& c) { c.lr = 0; });
  invalid([](RunConfig& c) { c.beta2 = 1; });
  invalid([](RunConfig& c) { c.batch_size = 0; });
  invalid([](RunConfig& c) { c.channels = 2; });
  invalid([](RunConfig& c) { c.image_size = 100; });
  invalid([](RunConfig& c) { c.latent_tap = 5; });
  invalid([](RunConfig& c) { c.val_fraction = 1; });
  invalid([](RunConfig& c) { c.patch_area_min = 0.5, c.patch_area_max = 0.2; });
  invalid([](RunConfig& c) { c.patch_aspect_min = 0; });
  invalid([](RunConfig& c) { c.cutout_fill = 2; });

  RunConfig ok;
  ok.image_size = 64;
  ok.lambda_con = ok.lambda_adv = 0;
  EXPECT_NO_THROW(validate(ok));
}
