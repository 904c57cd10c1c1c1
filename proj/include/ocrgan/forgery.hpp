#pragma once

// Pseudo-anomalies for critic training: CutOut erases a random rectangle,
// CutPaste copies a rectangle from elsewhere in the same image.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ocrgan/config.hpp"
#include "ocrgan/rng.hpp"
#include "ocrgan/tensor.hpp"

namespace ocrgan {

enum class PatchSource { erase, self_paste };

struct PatchSpec {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  PatchSource source = PatchSource::erase;
  double fill_value = 0.0;                  // erase only
  std::size_t src_top = 0, src_left = 0;    // self_paste only
};

struct ForgeryOptions {
  double area_min = 0.02, area_max = 0.15;
  double aspect_min = 0.3, aspect_max = 3.3;  // height / width
  double fill = 0.0;
  bool cutout = true;
  bool cutpaste = true;
  bool sequential = false;
  int max_retries = 100;

  static ForgeryOptions from_config(const RunConfig& c) {
    ForgeryOptions o;
    o.area_min = c.patch_area_min;
    o.area_max = c.patch_area_max;
    o.aspect_min = c.patch_aspect_min;
    o.aspect_max = c.patch_aspect_max;
    o.fill = c.cutout_fill;
    o.cutout = c.cutout;
    o.cutpaste = c.cutpaste;
    o.sequential = c.forge_sequential;
    return o;
  }
};

namespace forgery_detail {

inline void check_image(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected (C, H, W), got " + shape_str(s));
  if (s[1] < 16 || s[2] < 16) throw ShapeError(std::string(op) + ": image must be at least 16x16, got " + shape_str(s));
}

/// Rectangle size and placement; resamples degenerate or oversized draws.
inline PatchSpec sample_rect(std::size_t h, std::size_t w, Rng& rng, const ForgeryOptions& o) {
  for (int attempt = 0; attempt < o.max_retries; ++attempt) {
    const double area = rng.uniform(o.area_min, o.area_max) * double(h * w);
    const double aspect = rng.uniform(o.aspect_min, o.aspect_max);
    const auto ph = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    const auto pw = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    if (ph == 0 || pw == 0 || ph > h || pw > w) continue;
    PatchSpec p;
    p.height = ph;
    p.width = pw;
    p.top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - ph)));
    p.left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - pw)));
    return p;
  }
  throw std::runtime_error("forgery: no valid patch after " + std::to_string(o.max_retries) + " draws");
}

}  // namespace forgery_detail

/// Fills a random rectangle of a (C, H, W) image with `opts.fill`.
template <typename T>
std::pair<Tensor<T>, PatchSpec> cutout(const Tensor<T>& image, Rng& rng, const ForgeryOptions& opts = {}) {
  forgery_detail::check_image(image.shape(), "cutout");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  PatchSpec p = forgery_detail::sample_rect(h, w, rng, opts);
  p.source = PatchSource::erase;
  p.fill_value = opts.fill;
  Tensor<T> out = image;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = p.top; y < p.top + p.height; ++y)
      for (std::size_t x = p.left; x < p.left + p.width; ++x) out(ch, y, x) = T(opts.fill);
  return {std::move(out), p};
}

/// Copies a random rectangle of a (C, H, W) image onto another random location.
template <typename T>
std::pair<Tensor<T>, PatchSpec> cutpaste(const Tensor<T>& image, Rng& rng, const ForgeryOptions& opts = {}) {
  forgery_detail::check_image(image.shape(), "cutpaste");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  PatchSpec p = forgery_detail::sample_rect(h, w, rng, opts);
  p.source = PatchSource::self_paste;
  p.src_top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - p.height)));
  p.src_left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - p.width)));
  Tensor<T> out = image;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < p.height; ++y)
      for (std::size_t x = 0; x < p.width; ++x)
        out(ch, p.top + y, p.left + x) = image(ch, p.src_top + y, p.src_left + x);
  return {std::move(out), p};
}

/// Forges every image of a batch. With both augmentations enabled each image
/// gets one of them chosen uniformly, or both in sequence when `sequential`.
template <typename T>
std::vector<Tensor<T>> forge_batch(const std::vector<Tensor<T>>& batch, Rng& rng, const ForgeryOptions& opts = {}) {
  if (batch.empty()) throw std::invalid_argument("forge_batch: empty batch");
  if (!opts.cutout && !opts.cutpaste) throw std::invalid_argument("forge_batch: no augmentation enabled");
  std::vector<Tensor<T>> out;
  out.reserve(batch.size());
  for (const auto& img : batch) {
    if (opts.cutout && opts.cutpaste && opts.sequential) {
      out.push_back(cutpaste(cutout(img, rng, opts).first, rng, opts).first);
    } else if (opts.cutout && opts.cutpaste) {
      out.push_back(rng.bernoulli(0.5) ? cutout(img, rng, opts).first : cutpaste(img, rng, opts).first);
    } else if (opts.cutout) {
      out.push_back(cutout(img, rng, opts).first);
    } else {
      out.push_back(cutpaste(img, rng, opts).first);
    }
  }
  return out;
}

/// Batched overload for (B, C, H, W) tensors.
template <typename T>
Tensor<T> forge_batch(const Tensor<T>& batch, Rng& rng, const ForgeryOptions& opts = {}) {
  if (batch.rank() != 4) throw ShapeError("forge_batch: expected (B, C, H, W), got " + shape_str(batch.shape()));
  std::vector<Tensor<T>> items;
  for (std::size_t n = 0; n < batch.dim(0); ++n) items.push_back(batch.slice0(n));
  return stack(forge_batch(items, rng, opts));
}

}  // namespace ocrgan
