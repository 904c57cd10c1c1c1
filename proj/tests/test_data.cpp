#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "ocrgan/data.hpp"
#include "ocrgan/freqdecomp.hpp"

using namespace ocrgan;

namespace {

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

void write_gray(const fs::path& path, int size, std::uint8_t value) {
  fs::create_directories(path.parent_path());
  cv::imwrite(path.string(), cv::Mat(size, size, CV_8UC3, cv::Scalar(value, value, value)));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double high_band_energy(const Tensor<float>& image) {
  const auto bands = decompose(image, 2);
  double e = 0;
  for (float v : bands.bands[1].values()) e += double(v) * v;
  return e / double(image.size());
}

}  // namespace

TEST(ImageIo, PixelMappingAndRoundTrip) {
  cv::Mat m(2, 2, CV_8UC3);
  m.at<cv::Vec3b>(0, 0) = {0, 0, 0};
  m.at<cv::Vec3b>(0, 1) = {255, 255, 255};
  m.at<cv::Vec3b>(1, 0) = {10, 20, 30};
  m.at<cv::Vec3b>(1, 1) = {128, 64, 32};
  const auto t = mat_to_tensor<float>(m);
  EXPECT_EQ(t.shape(), (Shape{3, 2, 2}));
  EXPECT_FLOAT_EQ(t(0, 0, 0), -1.0f);
  EXPECT_FLOAT_EQ(t(2, 0, 1), 1.0f);
  EXPECT_FLOAT_EQ(t(1, 1, 0), 20.0f / 127.5f - 1.0f);
  const cv::Mat back = tensor_to_mat(t);
  EXPECT_EQ(cv::norm(back, m, cv::NORM_INF), 0.0);
}

TEST(ImageIo, LoadResizesAndConvertsToRgb) {
  TempDir dir("io");
  cv::Mat bgr(20, 30, CV_8UC3, cv::Scalar(255, 0, 0));  // pure blue
  cv::imwrite((dir.path() / "a.png").string(), bgr);
  const auto rgb = load_image<float>(dir.path() / "a.png", 16, 3);
  EXPECT_EQ(rgb.shape(), (Shape{3, 16, 16}));
  EXPECT_FLOAT_EQ(rgb(0, 5, 5), -1.0f);
  EXPECT_FLOAT_EQ(rgb(2, 5, 5), 1.0f);
  const auto gray = load_image<float>(dir.path() / "a.png", 8, 1);
  EXPECT_EQ(gray.shape(), (Shape{1, 8, 8}));
  for (float v : gray.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_THROW(load_image<float>(dir.path() / "missing.png", 8, 3), DataError);
  EXPECT_THROW(load_image<float>(dir.path() / "a.png", 8, 2), DataError);

  save_image(dir.path() / "out" / "b.png", rgb);
  EXPECT_EQ(max_abs_diff(load_image<float>(dir.path() / "out" / "b.png", 16, 3), rgb), 0.0);
}

TEST(FolderDataset, TrainSplitCountsAndOrder) {
  TempDir dir("train");
  for (int i : {3, 0, 4, 1, 2}) write_gray(dir.path() / "cat/train/good" / (std::to_string(i) + ".png"), 12, 100);
  const auto s = load_folder_dataset<float>({dir.path(), "cat", Split::train, 8, 3});
  ASSERT_EQ(s.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(s[i].label, Label::normal);
    EXPECT_EQ(s[i].id, "train/good/" + std::to_string(i) + ".png");
    EXPECT_EQ(s[i].category, "cat");
    EXPECT_EQ(s[i].image.shape(), (Shape{3, 8, 8}));
  }
}

TEST(FolderDataset, TestSplitLabels) {
  TempDir dir("test");
  for (int i = 0; i < 3; ++i) write_gray(dir.path() / "c/test/good" / (std::to_string(i) + ".png"), 8, 50);
  for (int i = 0; i < 4; ++i) write_gray(dir.path() / "c/test/crack" / (std::to_string(i) + ".jpg"), 8, 50);
  for (int i = 0; i < 3; ++i) write_gray(dir.path() / "c/test/hole" / (std::to_string(i) + ".bmp"), 8, 50);
  std::ofstream(dir.path() / "c/test/good/notes.txt") << "ignored";
  const auto s = load_folder_dataset<float>({dir.path(), "c", Split::test, 8, 3});
  ASSERT_EQ(s.size(), 10u);
  EXPECT_EQ(std::count_if(s.begin(), s.end(), [](const auto& x) { return x.label == Label::normal; }), 3);
  EXPECT_EQ(s.front().id, "test/crack/0.jpg");
}

TEST(FolderDataset, Errors) {
  TempDir dir("errors");
  EXPECT_THROW(load_folder_dataset<float>({dir.path(), "none", Split::train, 8, 3}), DataError);
  fs::create_directories(dir.path() / "c/test/good");
  try {
    load_folder_dataset<float>({dir.path(), "c", Split::test, 8, 3});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("empty split"), std::string::npos);
  }
  write_gray(dir.path() / "c/train/good/0.png", 8, 1);
  write_gray(dir.path() / "c/train/bad/0.png", 8, 1);
  EXPECT_THROW(load_folder_dataset<float>({dir.path(), "c", Split::train, 8, 3}), DataError);
  std::ofstream(dir.path() / "c/test/good/broken.png") << "not an image";
  EXPECT_THROW(load_folder_dataset<float>({dir.path(), "c", Split::test, 8, 3}), DataError);
}

TEST(FolderDataset, StackImages) {
  std::vector<Sample<float>> samples(3);
  for (std::size_t i = 0; i < 3; ++i) {
    samples[i].image = Tensor<float>({1, 2, 2});
    samples[i].image.fill(float(i));
  }
  const std::vector<std::size_t> idx{2, 0};
  const auto b = stack_images(samples, idx);
  EXPECT_EQ(b.shape(), (Shape{2, 1, 2, 2}));
  EXPECT_EQ(b(0, 0, 0, 0), 2.0f);
  EXPECT_EQ(b(1, 0, 1, 1), 0.0f);
}

TEST(Synthetic, DefectsStayInsideTheirMask) {
  for (auto d : {DefectType::scratch, DefectType::hole, DefectType::patch})
    for (std::size_t i = 0; i < 20; ++i) {
      const auto s = render_synthetic(3, Split::test, i, d, 64);
      ASSERT_TRUE(s.bbox);
      EXPECT_GT(cv::countNonZero(s.mask), 0);
      cv::Mat diff;
      cv::absdiff(s.image, s.base, diff);
      cv::Mat changed;
      cv::cvtColor(diff, changed, cv::COLOR_BGR2GRAY);
      cv::Mat outside = changed.clone();
      outside.setTo(0, s.mask);
      EXPECT_EQ(cv::countNonZero(outside), 0) << to_string(d) << " " << i;
      const cv::Rect r(s.bbox->left, s.bbox->top, s.bbox->width, s.bbox->height);
      EXPECT_EQ(cv::countNonZero(s.mask(r)), cv::countNonZero(s.mask));
    }
  const auto normal = render_synthetic(3, Split::train, 0, DefectType::none, 64);
  EXPECT_FALSE(normal.bbox);
  EXPECT_EQ(cv::norm(normal.image, normal.base, cv::NORM_INF), 0.0);
  EXPECT_THROW(render_synthetic(0, Split::train, 0, DefectType::none, 8), std::invalid_argument);
}

TEST(Synthetic, ByteIdenticalOnRerunAndLoadsBack) {
  TempDir a("syn_a"), b("syn_b");
  SyntheticOptions opt;
  opt.n_train = 6;
  opt.n_test_normal = 4;
  opt.n_test_abnormal = 5;
  opt.image_size = 32;
  const auto manifest = make_synthetic_dataset(a.path(), opt);
  make_synthetic_dataset(b.path(), opt);
  EXPECT_EQ(manifest.size(), 15u);
  for (const auto& e : manifest)
    EXPECT_EQ(slurp(a.path() / "synthetic" / e.id), slurp(b.path() / "synthetic" / e.id)) << e.id;
  EXPECT_EQ(slurp(a.path() / "synthetic/manifest.jsonl"), slurp(b.path() / "synthetic/manifest.jsonl"));

  const auto read = read_manifest(a.path() / "synthetic/manifest.jsonl");
  ASSERT_EQ(read.size(), manifest.size());
  for (std::size_t i = 0; i < read.size(); ++i) {
    EXPECT_EQ(read[i].id, manifest[i].id);
    EXPECT_EQ(read[i].label, manifest[i].label);
    EXPECT_EQ(read[i].defect, manifest[i].defect);
    EXPECT_EQ(read[i].bbox.has_value(), manifest[i].bbox.has_value());
  }

  const auto train = load_folder_dataset<float>({a.path(), "synthetic", Split::train, 32, 3});
  const auto test = load_folder_dataset<float>({a.path(), "synthetic", Split::test, 32, 3});
  EXPECT_EQ(train.size(), 6u);
  EXPECT_EQ(test.size(), 9u);
  EXPECT_EQ(std::count_if(test.begin(), test.end(), [](const auto& s) { return s.label == Label::abnormal; }), 5);

  opt.seed = 1;
  TempDir c("syn_c");
  make_synthetic_dataset(c.path(), opt);
  EXPECT_NE(slurp(a.path() / "synthetic/train/good/000.png"), slurp(c.path() / "synthetic/train/good/000.png"));
}

TEST(Synthetic, AbnormalImagesCarryMoreHighBandEnergy) {
  double normal = 0, abnormal = 0;
  const std::array<DefectType, 3> kinds{DefectType::scratch, DefectType::hole, DefectType::patch};
  for (std::size_t i = 0; i < 30; ++i) {
    normal += high_band_energy(mat_to_tensor<float>(render_synthetic(0, Split::test, i, DefectType::none, 64).image));
    abnormal += high_band_energy(mat_to_tensor<float>(render_synthetic(0, Split::test, 30 + i, kinds[i % 3], 64).image));
  }
  EXPECT_GT(abnormal, normal);
}

TEST(Synthetic, RejectsZeroCounts) {
  SyntheticOptions opt;
  opt.n_test_abnormal = 0;
  EXPECT_THROW(make_synthetic_dataset(fs::temp_directory_path() / "ocrgan_never", opt), std::invalid_argument);
}
