#include <gtest/gtest.h>

#include <fstream>
#include <limits>

#include "ocrgan/trainer.hpp"
#include "test_support.hpp"

using namespace ocrgan;
using ocrgan::testing::smooth_image;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.image_size = 32;
  c.base_channels = 4;
  c.batch_size = 4;
  c.cs_min_dim = 2;
  c.steps = 10;
  c.seed = 5;
  return c;
}

std::vector<Tensor<float>> tiny_images(std::size_t n, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(smooth_image<float>(3, 32, 32, rng));
  return out;
}

void expect_same_metrics(const StepMetrics& a, const StepMetrics& b, double tol) {
  EXPECT_EQ(a.step, b.step);
  EXPECT_EQ(a.epoch, b.epoch);
  EXPECT_NEAR(a.loss_D, b.loss_D, tol);
  EXPECT_NEAR(a.loss_G, b.loss_G, tol);
  EXPECT_NEAR(a.L_con, b.L_con, tol);
  EXPECT_NEAR(a.L_adv, b.L_adv, tol);
  EXPECT_NEAR(a.L_lat, b.L_lat, tol);
}

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("ocrgan_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

}  // namespace

TEST(Trainer, ScheduleFollowsConfig) {
  auto cfg = tiny_config();
  cfg.steps = 0;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  Trainer<float> t(cfg, tiny_images(10));
  EXPECT_EQ(t.batch_size(), 4u);
  EXPECT_EQ(t.batches_per_epoch(), 2u);
  EXPECT_EQ(t.planned_steps(), 6);
  EXPECT_EQ(t.batch_for_step(0).shape(), (Shape{4, 3, 32, 32}));

  cfg.batch_size = 32;
  Trainer<float> small(cfg, tiny_images(3));
  EXPECT_EQ(small.batch_size(), 3u);
  EXPECT_EQ(small.planned_steps(), 3);
}

TEST(Trainer, EpochBatchesArePermutations) {
  auto cfg = tiny_config();
  cfg.batch_size = 2;
  auto images = tiny_images(6);
  for (std::size_t i = 0; i < images.size(); ++i) images[i](0, 0, 0) = float(i) / 10.0f;
  Trainer<float> t(cfg, images);
  for (long epoch = 0; epoch < 2; ++epoch) {
    std::vector<int> seen;
    for (long s = 0; s < 3; ++s) {
      const auto b = t.batch_for_step(epoch * 3 + s);
      for (std::size_t n = 0; n < 2; ++n) seen.push_back(int(std::lround(b(n, 0, 0, 0) * 10)));
    }
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  }
}

TEST(Trainer, RejectsMismatchedImages) {
  EXPECT_THROW(Trainer<float>(tiny_config(), {}), DataError);
  auto cfg = tiny_config();
  cfg.image_size = 64;
  EXPECT_THROW(Trainer<float>(cfg, tiny_images(2)), ShapeError);
}

TEST(Trainer, IdenticalSeedsGiveIdenticalMetrics) {
  Trainer<float> a(tiny_config(), tiny_images(8)), b(tiny_config(), tiny_images(8));
  for (int i = 0; i < 10; ++i) {
    const auto ma = a.train_step(), mb = b.train_step();
    expect_same_metrics(ma, mb, 0.0);
    EXPECT_TRUE(std::isfinite(ma.loss_G));
  }
  EXPECT_EQ(parameter_hash(a.generator_registry()), parameter_hash(b.generator_registry()));
  EXPECT_EQ(parameter_hash(a.discriminator_registry()), parameter_hash(b.discriminator_registry()));
}

TEST(Trainer, OppositeNetworkIsFrozenDuringEachUpdate) {
  Trainer<float> t(tiny_config(), tiny_images(4));
  const auto batch = t.batch_for_step(0);
  const auto gen = t.forward_generator(batch);
  const auto g0 = parameter_hash(t.generator_registry()), d0 = parameter_hash(t.discriminator_registry());
  t.update_discriminator(batch, gen.image.value(), t.forge(batch));
  const auto d1 = parameter_hash(t.discriminator_registry());
  EXPECT_EQ(parameter_hash(t.generator_registry()), g0);
  EXPECT_NE(d1, d0);
  t.update_generator(batch, gen);
  EXPECT_EQ(parameter_hash(t.discriminator_registry()), d1);
  EXPECT_NE(parameter_hash(t.generator_registry()), g0);
  for (auto& p : t.discriminator_registry().params) EXPECT_TRUE(p.var.requires_grad());
}

TEST(Trainer, ZeroAdversarialWeightsDecoupleGeneratorFromCritic) {
  auto cfg = tiny_config();
  cfg.lambda_adv = 0;
  cfg.lambda_lat = 0;
  Trainer<float> a(cfg, tiny_images(8)), b(cfg, tiny_images(8));
  for (auto& p : b.discriminator_registry().params)
    for (auto& v : p.var.mutable_value().values()) v = v * 3.0f + 0.01f;
  for (int i = 0; i < 4; ++i) {
    const auto ma = a.train_step(), mb = b.train_step();
    EXPECT_EQ(ma.L_con, mb.L_con);
    EXPECT_EQ(ma.loss_G, 50.0 * ma.L_con);
    EXPECT_NE(ma.loss_D, mb.loss_D);
  }
  EXPECT_EQ(parameter_hash(a.generator_registry()), parameter_hash(b.generator_registry()));
}

TEST(Trainer, ForgedImagesNeverReachTheGenerator) {
  auto with = tiny_config(), without = tiny_config();
  without.cutout = without.cutpaste = false;
  Trainer<float> a(with, tiny_images(4)), b(without, tiny_images(4));
  EXPECT_FALSE(b.forge(b.batch_for_step(0)));
  const auto ma = a.train_step(), mb = b.train_step();
  EXPECT_EQ(ma.L_con, mb.L_con);
  EXPECT_NE(ma.loss_D, mb.loss_D);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  TempDir dir("resume");
  Trainer<float> a(tiny_config(), tiny_images(8));
  for (int i = 0; i < 3; ++i) a.train_step();
  a.save_checkpoint(dir.path() / "k.ckpt");
  const auto next = a.train_step();

  Trainer<float> b(tiny_config(), tiny_images(8));
  b.restore(read_checkpoint<float>(dir.path() / "k.ckpt"));
  EXPECT_EQ(b.step(), 3);
  const auto resumed = b.train_step();
  expect_same_metrics(next, resumed, 1e-5);
  EXPECT_EQ(parameter_hash(a.generator_registry()), parameter_hash(b.generator_registry()));
}

TEST(Trainer, NonFiniteInputAbortsWithDiagnostic) {
  Trainer<float> t(tiny_config(), tiny_images(4));
  auto batch = t.batch_for_step(0);
  batch(1, 2, 3, 4) = std::numeric_limits<float>::quiet_NaN();
  try {
    t.train_step(batch);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_EQ(e.step(), 1);
    EXPECT_FALSE(e.term().empty());
  }
}

TEST(Trainer, RepeatedImageIsMemorized) {
  auto cfg = tiny_config();
  cfg.base_channels = 8;
  const auto img = tiny_images(1, 9).front();
  Trainer<float> t(cfg, std::vector<Tensor<float>>(4, img));
  const double first = t.train_step().L_con;
  double last = first;
  for (int i = 1; i < 200; ++i) last = t.train_step().L_con;
  EXPECT_LT(last, first);
}

TEST(Checkpoint, RoundTripAndErrors) {
  TempDir dir("ckpt");
  CheckpointData<float> data;
  data.config = tiny_config();
  data.step = 42;
  data.extra = {{"note", "x"}};
  Tensor<float> t({2, 3});
  for (std::size_t i = 0; i < 6; ++i) t[i] = float(i) - 2.5f;
  data.tensors["a"] = t;
  data.tensors["b/c"] = Tensor<float>({1});
  write_checkpoint(dir.path() / "x.ckpt", data);

  const auto back = read_checkpoint<float>(dir.path() / "x.ckpt");
  EXPECT_EQ(back.step, 42);
  EXPECT_EQ(to_text(back.config), to_text(data.config));
  EXPECT_EQ(back.extra.at("note"), "x");
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(max_abs_diff(back.tensors.at("a"), t), 0.0);
  EXPECT_EQ(back.tensors.at("a").shape(), t.shape());

  EXPECT_THROW(read_checkpoint<double>(dir.path() / "x.ckpt"), CheckpointError);
  EXPECT_THROW(read_checkpoint<float>(dir.path() / "missing.ckpt"), CheckpointError);
  std::ofstream(dir.path() / "junk.ckpt") << "definitely not a checkpoint";
  EXPECT_THROW(read_checkpoint<float>(dir.path() / "junk.ckpt"), CheckpointError);

  const auto size = fs::file_size(dir.path() / "x.ckpt");
  fs::resize_file(dir.path() / "x.ckpt", size - 4);
  EXPECT_THROW(read_checkpoint<float>(dir.path() / "x.ckpt"), CheckpointError);
}

TEST(Checkpoint, ImportRejectsMissingOrMisshapenTensors) {
  Trainer<float> t(tiny_config(), tiny_images(4));
  auto data = t.checkpoint();
  auto reg = t.generator_registry();
  auto broken = data.tensors;
  broken.erase(reg.params.front().name);
  EXPECT_THROW(import_registry(reg, broken), CheckpointError);
  broken = data.tensors;
  broken[reg.params.front().name] = Tensor<float>({1});
  EXPECT_THROW(import_registry(reg, broken), CheckpointError);
}

TEST(Train, WritesLogConfigAndCheckpoints) {
  TempDir dir("train_run");
  SyntheticOptions syn;
  syn.n_train = 8;
  syn.n_test_normal = syn.n_test_abnormal = 2;
  syn.image_size = 32;
  make_synthetic_dataset(dir.path() / "data", syn);

  auto cfg = tiny_config();
  cfg.data_root = (dir.path() / "data").string();
  cfg.category = "synthetic";
  cfg.output_dir = (dir.path() / "run").string();
  cfg.steps = 5;
  cfg.checkpoint_every = 2;
  const auto result = train<float>(cfg);
  EXPECT_EQ(result.steps, 5);
  EXPECT_EQ(count_lines(result.metrics_log), 5u);
  EXPECT_TRUE(fs::exists(dir.path() / "run/checkpoints/step_0000002.ckpt"));
  EXPECT_TRUE(fs::exists(dir.path() / "run/checkpoints/step_0000004.ckpt"));
  EXPECT_EQ(read_checkpoint<float>(result.final_checkpoint).step, 5);
  EXPECT_EQ(to_text(load_config_file((dir.path() / "run/config.txt").string())), to_text(cfg));

  std::ifstream log(result.metrics_log);
  std::string line;
  std::getline(log, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* key : {"step", "epoch", "loss_D", "loss_G", "L_con", "L_adv", "L_lat", "wall_time"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j.at("step"), 1);

  // Resuming from step 4 appends one line and reproduces step 5.
  auto resumed_cfg = cfg;
  resumed_cfg.output_dir = (dir.path() / "resumed").string();
  fs::create_directories(resumed_cfg.output_dir);
  const auto resumed = train<float>(resumed_cfg, dir.path() / "run/checkpoints/step_0000004.ckpt");
  EXPECT_EQ(resumed.steps, 5);
  EXPECT_EQ(count_lines(resumed.metrics_log), 1u);
  ASSERT_TRUE(result.last && resumed.last);
  expect_same_metrics(*result.last, *resumed.last, 1e-5);

  auto zero = cfg;
  zero.steps = 0;
  zero.epochs = 0;
  zero.output_dir = (dir.path() / "zero").string();
  const auto none = train<float>(zero);
  EXPECT_EQ(none.steps, 0);
  EXPECT_EQ(count_lines(none.metrics_log), 0u);
  EXPECT_EQ(read_checkpoint<float>(none.final_checkpoint).step, 0);

  auto held = cfg;
  held.steps = 0;
  held.epochs = 1;
  held.batch_size = 1;
  held.val_fraction = 0.25;
  held.output_dir = (dir.path() / "held").string();
  EXPECT_EQ(train<float>(held).steps, 6);

  auto missing = cfg;
  missing.category = "absent";
  EXPECT_THROW(train<float>(missing), DataError);
}
