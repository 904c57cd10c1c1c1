#pragma once

// Folder datasets in the category/{train,test}/<defect-or-good>/ layout, and a
// procedural texture dataset with injected defects written in that layout.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ocrgan/errors.hpp"
#include "ocrgan/labels.hpp"
#include "ocrgan/rng.hpp"
#include "ocrgan/tensor.hpp"

namespace ocrgan {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

template <typename T = float>
struct Sample {
  Tensor<T> image;  // (C, H, W) in [-1, 1]
  Label label = Label::normal;
  std::string category;
  std::string id;  // path relative to the category folder
};

struct DatasetSpec {
  fs::path root;
  std::string category;
  Split split = Split::train;
  std::size_t image_size = 256;
  std::size_t channels = 3;
};

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

/// 8-bit pixels -> [-1, 1].
template <typename T = float>
Tensor<T> mat_to_tensor(const cv::Mat& mat) {
  if (mat.depth() != CV_8U) throw DataError("mat_to_tensor: expected 8-bit image");
  const std::size_t c = std::size_t(mat.channels()), h = std::size_t(mat.rows), w = std::size_t(mat.cols);
  Tensor<T> out({c, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    const std::uint8_t* row = mat.ptr<std::uint8_t>(int(y));
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out(ch, y, x) = T(row[x * c + ch]) / T(127.5) - T(1);
  }
  return out;
}

/// (C, H, W) in [-1, 1] -> 8-bit image, channel order as stored (RGB for color).
template <typename T>
cv::Mat tensor_to_mat(const Tensor<T>& t) {
  if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) throw ShapeError("tensor_to_mat: expected (1|3, H, W)");
  const int c = int(t.dim(0)), h = int(t.dim(1)), w = int(t.dim(2));
  cv::Mat mat(h, w, CV_MAKETYPE(CV_8U, c));
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        const double v = (double(t(std::size_t(ch), std::size_t(y), std::size_t(x))) + 1.0) * 127.5;
        row[x * c + ch] = cv::saturate_cast<std::uint8_t>(std::lround(v));
      }
  }
  return mat;
}

/// Reads an image, resizes it (bilinear, aspect-ignoring) to size x size and
/// returns (channels, size, size) in [-1, 1] with RGB channel order.
template <typename T = float>
Tensor<T> load_image(const fs::path& path, std::size_t size, std::size_t channels) {
  if (channels != 1 && channels != 3) throw DataError("load_image: channels must be 1 or 3");
  cv::Mat img = cv::imread(path.string(), channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("unreadable image: " + path.string());
  if (img.rows != int(size) || img.cols != int(size))
    cv::resize(img, img, cv::Size(int(size), int(size)), 0, 0, cv::INTER_LINEAR);
  if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  return mat_to_tensor<T>(img);
}

/// Writes (C, H, W) in [-1, 1] as an 8-bit image (RGB tensors are swapped to BGR).
template <typename T>
void save_image(const fs::path& path, const Tensor<T>& t) {
  cv::Mat mat = tensor_to_mat(t);
  if (mat.channels() == 3) cv::cvtColor(mat, mat, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat)) throw DataError("could not write image: " + path.string());
}

/// Image files directly inside `dir`, sorted by file name.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

template <typename T = float>
std::vector<Sample<T>> load_folder_dataset(const DatasetSpec& spec) {
  const fs::path base = spec.root / spec.category;
  const fs::path split_dir = base / to_string(spec.split);
  if (!fs::is_directory(split_dir)) throw DataError("missing split folder: " + split_dir.string());

  std::vector<fs::path> groups;
  for (const auto& e : fs::directory_iterator(split_dir))
    if (e.is_directory()) groups.push_back(e.path());
  std::sort(groups.begin(), groups.end());

  std::vector<Sample<T>> out;
  for (const auto& g : groups) {
    const std::string name = g.filename().string();
    const auto files = list_images(g);
    if (spec.split == Split::train && name != "good" && !files.empty())
      throw DataError("train split contains non-normal images: " + g.string());
    for (const auto& f : files) {
      Sample<T> s;
      s.image = load_image<T>(f, spec.image_size, spec.channels);
      s.label = name == "good" ? Label::normal : Label::abnormal;
      s.category = spec.category;
      s.id = fs::relative(f, base).generic_string();
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) throw DataError("empty split: " + split_dir.string());
  return out;
}

/// Stacks sample images into (B, C, H, W).
template <typename T>
Tensor<T> stack_images(const std::vector<Sample<T>>& samples, std::span<const std::size_t> indices) {
  std::vector<Tensor<T>> items;
  items.reserve(indices.size());
  for (std::size_t i : indices) items.push_back(samples.at(i).image);
  return stack(items);
}

// Synthetic dataset.

enum class DefectType { none, scratch, hole, patch };

inline std::string to_string(DefectType d) {
  switch (d) {
    case DefectType::scratch: return "scratch";
    case DefectType::hole: return "hole";
    case DefectType::patch: return "patch";
    case DefectType::none: break;
  }
  return "good";
}

struct BoundingBox {
  int top = 0, left = 0, height = 0, width = 0;
};

struct SyntheticImage {
  cv::Mat base;   // defect-free texture, 8-bit BGR
  cv::Mat image;  // base with the defect painted in
  cv::Mat mask;   // 8-bit, nonzero where the defect was painted
  DefectType defect = DefectType::none;
  std::optional<BoundingBox> bbox;
};

struct SyntheticOptions {
  std::uint64_t seed = 0;
  std::size_t n_train = 200;
  std::size_t n_test_normal = 50;
  std::size_t n_test_abnormal = 50;
  std::size_t image_size = 64;
  std::string category = "synthetic";
};

struct ManifestEntry {
  std::string id;
  Split split = Split::train;
  Label label = Label::normal;
  DefectType defect = DefectType::none;
  std::optional<BoundingBox> bbox;
};

namespace synthetic_detail {

// Stripes of fixed spatial frequency (random phase and slight tilt) over
// low-pass noise, with a mild per-image color tint.
inline cv::Mat render_texture(std::size_t size, Rng& rng) {
  const int n = int(size);
  cv::Mat noise(n, n, CV_32F);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) noise.at<float>(y, x) = float(rng.normal());
  const double sigma = std::max(2.0, double(n) / 16.0);
  cv::GaussianBlur(noise, noise, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
  double lo = 0, hi = 0;
  cv::minMaxLoc(noise, &lo, &hi);
  const double noise_scale = 0.12 / std::max(std::abs(lo), std::abs(hi));

  const double cycles = 4.0;
  const double theta = rng.uniform(-0.15, 0.15);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = rng.uniform(-0.04, 0.04);

  cv::Mat out(n, n, CV_8UC3);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double u = (x * std::cos(theta) + y * std::sin(theta)) / double(n);
      const double v = 0.5 + 0.2 * std::sin(2.0 * std::numbers::pi * cycles * u + phase) +
                       noise_scale * noise.at<float>(y, x);
      auto& px = out.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) px[c] = cv::saturate_cast<std::uint8_t>(std::lround(255.0 * (v + tint[std::size_t(c)])));
    }
  return out;
}

inline void paint_scratch(cv::Mat& image, cv::Mat& mask, Rng& rng) {
  const int n = image.rows;
  std::vector<cv::Point> pts;
  cv::Point p(int(rng.uniform_int(n / 8, n - n / 8)), int(rng.uniform_int(n / 8, n - n / 8)));
  pts.push_back(p);
  const int segments = int(rng.uniform_int(2, 4));
  double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (int s = 0; s < segments; ++s) {
    angle += rng.uniform(-0.8, 0.8);
    const double len = rng.uniform(n / 8.0, n / 4.0);
    p = cv::Point(std::clamp(int(std::lround(p.x + len * std::cos(angle))), 1, n - 2),
                  std::clamp(int(std::lround(p.y + len * std::sin(angle))), 1, n - 2));
    pts.push_back(p);
  }
  const std::uint8_t value = rng.bernoulli(0.5) ? 250 : 10;
  const int thickness = std::max(1, n / 64);
  for (std::size_t i = 1; i < pts.size(); ++i) cv::line(mask, pts[i - 1], pts[i], cv::Scalar(255), thickness, cv::LINE_8);
  image.setTo(cv::Scalar(value, value, value), mask);
}

inline void paint_hole(cv::Mat& image, cv::Mat& mask, Rng& rng) {
  const int n = image.rows;
  const int r = int(rng.uniform_int(std::max(2, n / 16), std::max(3, n / 8)));
  const cv::Point c(int(rng.uniform_int(r + 1, n - r - 2)), int(rng.uniform_int(r + 1, n - r - 2)));
  cv::circle(mask, c, r, cv::Scalar(255), cv::FILLED, cv::LINE_8);
  const std::uint8_t value = std::uint8_t(rng.uniform_int(5, 25));
  image.setTo(cv::Scalar(value, value, value), mask);
}

inline void paint_patch(cv::Mat& image, cv::Mat& mask, Rng& rng) {
  const int n = image.rows;
  const int h = int(rng.uniform_int(std::max(4, n / 8), std::max(5, n / 4)));
  const int w = int(rng.uniform_int(std::max(4, n / 8), std::max(5, n / 4)));
  const int top = int(rng.uniform_int(1, n - h - 1)), left = int(rng.uniform_int(1, n - w - 1));
  for (int y = top; y < top + h; ++y)
    for (int x = left; x < left + w; ++x) {
      // Fine-grained noise: off-texture and dominated by high frequencies.
      const std::uint8_t v = std::uint8_t(rng.uniform_int(0, 255));
      image.at<cv::Vec3b>(y, x) = cv::Vec3b(v, std::uint8_t(255 - v), v);
      mask.at<std::uint8_t>(y, x) = 255;
    }
}

}  // namespace synthetic_detail

/// Deterministic texture (and defect, when `defect` != none) for one image of
/// the synthetic set. Each (split, index) pair has its own random stream.
inline SyntheticImage render_synthetic(std::uint64_t seed, Split split, std::size_t index, DefectType defect,
                                       std::size_t image_size) {
  if (image_size < 16) throw std::invalid_argument("render_synthetic: image_size must be at least 16");
  Rng rng(seed, {kSyntheticStream, split == Split::train ? 0u : 1u, index, std::uint64_t(defect)});
  SyntheticImage out;
  out.base = synthetic_detail::render_texture(image_size, rng);
  out.image = out.base.clone();
  out.mask = cv::Mat::zeros(out.base.size(), CV_8U);
  out.defect = defect;
  switch (defect) {
    case DefectType::scratch: synthetic_detail::paint_scratch(out.image, out.mask, rng); break;
    case DefectType::hole: synthetic_detail::paint_hole(out.image, out.mask, rng); break;
    case DefectType::patch: synthetic_detail::paint_patch(out.image, out.mask, rng); break;
    case DefectType::none: return out;
  }
  const cv::Rect r = cv::boundingRect(out.mask);
  out.bbox = BoundingBox{r.y, r.x, r.height, r.width};
  return out;
}

inline nlohmann::json to_json(const ManifestEntry& e) {
  nlohmann::json j{{"id", e.id},
                   {"split", to_string(e.split)},
                   {"label", std::string(to_string(e.label))},
                   {"defect_type", to_string(e.defect)}};
  j["bbox"] = e.bbox ? nlohmann::json::array({e.bbox->top, e.bbox->left, e.bbox->height, e.bbox->width})
                     : nlohmann::json(nullptr);
  return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.split = j.at("split").get<std::string>() == "train" ? Split::train : Split::test;
  e.label = parse_label(j.at("label").get<std::string>());
  const auto d = j.at("defect_type").get<std::string>();
  e.defect = d == "scratch" ? DefectType::scratch
             : d == "hole"  ? DefectType::hole
             : d == "patch" ? DefectType::patch
                            : DefectType::none;
  if (!j.at("bbox").is_null()) {
    const auto& b = j.at("bbox");
    e.bbox = BoundingBox{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
  }
  return e;
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(manifest_entry_from_json(nlohmann::json::parse(line)));
  return out;
}

/// Writes root/category/{train/good, test/good, test/<defect>}/NNN.png and
/// root/category/manifest.jsonl. Abnormal test images cycle through the
/// defect types. Returns the manifest entries.
inline std::vector<ManifestEntry> make_synthetic_dataset(const fs::path& root, const SyntheticOptions& opt) {
  if (opt.n_train < 1 || opt.n_test_normal < 1 || opt.n_test_abnormal < 1)
    throw std::invalid_argument("make_synthetic_dataset: counts must be at least 1");
  const fs::path base = root / opt.category;
  std::vector<ManifestEntry> manifest;
  auto write = [&](Split split, std::size_t index, DefectType defect) {
    const auto img = render_synthetic(opt.seed, split, index, defect, opt.image_size);
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.png", index);
    const fs::path rel = fs::path(to_string(split)) / to_string(defect) / name;
    fs::create_directories((base / rel).parent_path());
    if (!cv::imwrite((base / rel).string(), img.image)) throw DataError("could not write " + (base / rel).string());
    manifest.push_back({rel.generic_string(), split, defect == DefectType::none ? Label::normal : Label::abnormal,
                        defect, img.bbox});
  };
  for (std::size_t i = 0; i < opt.n_train; ++i) write(Split::train, i, DefectType::none);
  for (std::size_t i = 0; i < opt.n_test_normal; ++i) write(Split::test, i, DefectType::none);
  constexpr std::array<DefectType, 3> kinds{DefectType::scratch, DefectType::hole, DefectType::patch};
  for (std::size_t i = 0; i < opt.n_test_abnormal; ++i) write(Split::test, opt.n_test_normal + i, kinds[i % 3]);

  std::ofstream out(base / "manifest.jsonl");
  if (!out) throw DataError("could not write manifest in " + base.string());
  for (const auto& e : manifest) out << to_json(e).dump() << '\n';
  return manifest;
}

}  // namespace ocrgan
