#pragma once

// Gaussian-pyramid frequency decoupling. An image is split into N additive
// band images, lowest frequency first, by repeated blur/decimate/upsample.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ocrgan/errors.hpp"
#include "ocrgan/tensor.hpp"

namespace ocrgan {

template <typename T = float>
struct GaussianKernel {
  static constexpr std::size_t kSize = 5;
  static constexpr std::size_t kRadius = 2;

  std::array<std::array<T, kSize>, kSize> weights{};
  T scale{1};

  T operator()(std::size_t i, std::size_t j) const { return scale * weights[i][j]; }

  /// 5x5 binomial kernel, entries sum to exactly 1.
  static GaussianKernel gau1() {
    constexpr int b[kSize] = {1, 4, 6, 4, 1};
    GaussianKernel k;
    for (std::size_t i = 0; i < kSize; ++i)
      for (std::size_t j = 0; j < kSize; ++j) k.weights[i][j] = T(b[i] * b[j]) / T(256);
    return k;
  }

  /// Gau1 scaled by 4: restores the DC level after zero interleaving.
  static GaussianKernel gau2() {
    auto k = gau1();
    k.scale = T(4);
    return k;
  }

  T sum() const {
    T s{0};
    for (const auto& row : weights)
      for (T v : row) s += v;
    return scale * s;
  }
};

/// Boundary extension used by the 5x5 smoothing.
enum class Border {
  symmetric,   // edge sample repeated: … 1 0 | 0 1 2 … | n-1 n-2 …
  reflect101,  // edge sample not repeated: … 2 1 | 0 1 2 … | n-2 n-3 …
};

namespace detail {

/// Folds an out-of-range index back into [0, n). Handles any n >= 1 and any
/// offset by folding repeatedly.
inline std::size_t border_index(std::ptrdiff_t i, std::ptrdiff_t n, Border mode) {
  if (n == 1) return 0;
  if (mode == Border::symmetric) {
    const std::ptrdiff_t period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < n ? i : period - 1 - i);
  }
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

inline void require_spatial(const Shape& shape, const char* op) {
  if (shape.size() < 2)
    throw ShapeError(std::string(op) + ": expected at least 2 dims, got " + shape_str(shape));
}

/// Depthwise 5x5 convolution with a 2-pixel border extension, applied to every
/// (H, W) plane of `image`. No minimum size.
template <typename T>
Tensor<T> convolve(const Tensor<T>& image, const GaussianKernel<T>& kernel, Border mode) {
  const Shape& shape = image.shape();
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  const std::size_t planes = image.size() / (h * w);
  constexpr std::size_t K = GaussianKernel<T>::kSize;
  constexpr std::ptrdiff_t R = GaussianKernel<T>::kRadius;

  std::vector<std::size_t> rows(h * K), cols(w * K);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t k = 0; k < K; ++k)
      rows[y * K + k] = border_index(static_cast<std::ptrdiff_t>(y + k) - R, static_cast<std::ptrdiff_t>(h), mode);
  for (std::size_t x = 0; x < w; ++x)
    for (std::size_t k = 0; k < K; ++k)
      cols[x * K + k] = border_index(static_cast<std::ptrdiff_t>(x + k) - R, static_cast<std::ptrdiff_t>(w), mode);

  std::array<T, K * K> taps;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) taps[i * K + j] = kernel(i, j);

  Tensor<T> out(shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = image.data() + p * h * w;
    T* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        T acc{0};
        for (std::size_t i = 0; i < K; ++i) {
          const T* row = src + rows[y * K + i] * w;
          for (std::size_t j = 0; j < K; ++j) acc += taps[i * K + j] * row[cols[x * K + j]];
        }
        dst[y * w + x] = acc;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Per-plane 5x5 convolution with symmetric (edge-repeating) reflection, so a
/// unit-sum kernel preserves the image mean exactly. Requires H, W >= 5.
template <typename T>
Tensor<T> blur(const Tensor<T>& image, const GaussianKernel<T>& kernel = GaussianKernel<T>::gau1()) {
  detail::require_spatial(image.shape(), "blur");
  const auto& s = image.shape();
  if (s[s.size() - 2] < GaussianKernel<T>::kSize || s[s.size() - 1] < GaussianKernel<T>::kSize)
    throw ShapeError("blur: image " + shape_str(s) + " is smaller than the 5x5 kernel");
  return detail::convolve(image, kernel, Border::symmetric);
}

/// Blur with Gau1 and keep even (0-based) rows and columns: ceil(dim/2) output.
template <typename T>
Tensor<T> pyr_down(const Tensor<T>& image) {
  detail::require_spatial(image.shape(), "pyr_down");
  const Shape& shape = image.shape();
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  if (h < 6 || w < 6) throw ShapeError("pyr_down: image " + shape_str(shape) + " must be at least 6x6");

  const Tensor<T> blurred = blur(image, GaussianKernel<T>::gau1());
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Shape out_shape = shape;
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  Tensor<T> out(out_shape);
  const std::size_t planes = image.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out[(p * oh + y) * ow + x] = blurred[(p * h + 2 * y) * w + 2 * x];
  return out;
}

/// Zero-interleave to `target` (source samples at even indices) and smooth with
/// Gau2. The interleaved grid is extended with reflect-101, which keeps the
/// sample/zero parity at the border so constants are restored exactly.
/// Requires ceil(target/2) to equal the source extent in each axis.
template <typename T>
Tensor<T> pyr_up(const Tensor<T>& image, std::pair<std::size_t, std::size_t> target) {
  detail::require_spatial(image.shape(), "pyr_up");
  const Shape& shape = image.shape();
  const std::size_t h = shape[shape.size() - 2];
  const std::size_t w = shape[shape.size() - 1];
  const auto [th, tw] = target;
  if (th == 0 || tw == 0 || (th + 1) / 2 != h || (tw + 1) / 2 != w)
    throw ShapeError("pyr_up: target " + std::to_string(th) + "x" + std::to_string(tw) +
                     " is not a 2x upsampling of " + shape_str(shape));

  Shape up_shape = shape;
  up_shape[up_shape.size() - 2] = th;
  up_shape[up_shape.size() - 1] = tw;
  Tensor<T> up(up_shape);
  const std::size_t planes = image.size() / (h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        up[(p * th + 2 * y) * tw + 2 * x] = image[(p * h + y) * w + x];
  return detail::convolve(up, GaussianKernel<T>::gau2(), Border::reflect101);
}

/// Additive band images, ordered low to high frequency.
template <typename T = float>
struct FrequencyBands {
  std::vector<Tensor<T>> bands;
  Shape source_shape;

  std::size_t size() const noexcept { return bands.size(); }
  const Tensor<T>& operator[](std::size_t i) const { return bands[i]; }
};

/// One blur/decimate/upsample round trip at full resolution.
template <typename T>
Tensor<T> gaussian_round_trip(const Tensor<T>& image) {
  const Shape& s = image.shape();
  return pyr_up(pyr_down(image), {s[s.size() - 2], s[s.size() - 1]});
}

/// Splits `image` into `n_branches` bands [G1, G2-G1, ..., GN-G(N-1)] where
/// GN is the input and G(k-1) is one round trip of Gk. The bands sum to the input.
template <typename T>
FrequencyBands<T> decompose(const Tensor<T>& image, std::size_t n_branches) {
  if (n_branches < 2)
    throw std::invalid_argument("decompose: n_branches must be at least 2, got " +
                                std::to_string(n_branches));
  std::vector<Tensor<T>> gaussians(n_branches);
  gaussians[n_branches - 1] = image;
  for (std::size_t k = n_branches - 1; k > 0; --k) gaussians[k - 1] = gaussian_round_trip(gaussians[k]);

  FrequencyBands<T> out;
  out.source_shape = image.shape();
  out.bands.reserve(n_branches);
  out.bands.push_back(gaussians[0]);
  for (std::size_t k = 1; k < n_branches; ++k) {
    Tensor<T> band = gaussians[k];
    const Tensor<T>& lower = gaussians[k - 1];
    for (std::size_t i = 0; i < band.size(); ++i) band[i] -= lower[i];
    out.bands.push_back(std::move(band));
  }
  return out;
}

template <typename T>
Tensor<T> recompose(std::span<const Tensor<T>> bands) {
  if (bands.empty()) throw ShapeError("recompose: no bands");
  Tensor<T> out = bands.front();
  for (std::size_t k = 1; k < bands.size(); ++k) {
    if (bands[k].shape() != out.shape())
      throw ShapeError("recompose: band " + std::to_string(k) + " has shape " +
                       shape_str(bands[k].shape()) + ", expected " + shape_str(out.shape()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bands[k][i];
  }
  return out;
}

template <typename T>
Tensor<T> recompose(const FrequencyBands<T>& bands) {
  for (const auto& b : bands.bands)
    if (!bands.source_shape.empty() && b.shape() != bands.source_shape)
      throw ShapeError("recompose: band shape " + shape_str(b.shape()) + " differs from source " +
                       shape_str(bands.source_shape));
  return recompose(std::span<const Tensor<T>>(bands.bands));
}

}  // namespace ocrgan
