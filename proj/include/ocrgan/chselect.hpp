#pragma once

// Channel selection across frequency branches: the branch feature maps are
// summed, squeezed to per-channel statistics, reduced by a small FC layer, and
// mapped to one logit vector per branch. A softmax across branches gives each
// channel a set of weights that sum to one, which then rescale the branches.

#include <algorithm>
#include <string>
#include <vector>

#include "ocrgan/nn.hpp"

namespace ocrgan {

using ag::Var;

template <typename T = float>
struct CSParams {
  std::size_t channels = 0;
  std::size_t reduced_dim = 0;
  nn::Linear<T> reduce;                // C -> d, with bias, followed by ReLU
  std::vector<nn::Linear<T>> branch;   // d -> C per branch, no bias

  CSParams() = default;
  CSParams(std::size_t n_branches, std::size_t channels_, std::size_t reduced_dim_, Rng& rng)
      : channels(channels_), reduced_dim(reduced_dim_), reduce(channels_, reduced_dim_, true, rng) {
    if (n_branches < 2) throw std::invalid_argument("CSParams: need at least 2 branches");
    if (channels == 0 || reduced_dim == 0) throw std::invalid_argument("CSParams: channels and reduced_dim must be positive");
    branch.reserve(n_branches);
    for (std::size_t k = 0; k < n_branches; ++k) branch.emplace_back(reduced_dim, channels, false, rng);
  }

  std::size_t n_branches() const noexcept { return branch.size(); }

  /// max(C / ratio, min_dim)
  static std::size_t default_reduced_dim(std::size_t channels, std::size_t ratio = 16, std::size_t min_dim = 8) {
    return std::max(channels / std::max<std::size_t>(ratio, 1), min_dim);
  }

  void collect(const std::string& prefix, nn::Registry<T>& reg) {
    reduce.collect(prefix + ".reduce", reg);
    for (std::size_t k = 0; k < branch.size(); ++k) branch[k].collect(prefix + ".branch" + std::to_string(k), reg);
  }
};

template <typename T = float>
struct BranchFeatures {
  std::vector<Tensor<T>> features;
};

template <typename T = float>
struct AttentionVectors {
  std::vector<Tensor<T>> per_branch;
};

template <typename T>
Tensor<T> sum_maps(const std::vector<Tensor<T>>& maps) {
  Tensor<T> out = maps.front();
  for (std::size_t k = 1; k < maps.size(); ++k) {
    if (maps[k].shape() != out.shape())
      throw ShapeError("fuse: branch " + std::to_string(k) + " shape " + shape_str(maps[k].shape()) +
                       " differs from " + shape_str(out.shape()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += maps[k][i];
  }
  return out;
}

/// Element-wise sum of the branch maps.
template <typename T>
Tensor<T> fuse(const BranchFeatures<T>& in) {
  if (in.features.size() < 2) throw std::invalid_argument("fuse: need at least 2 branches");
  return sum_maps(in.features);
}

/// Spatial mean per channel: (C, H, W) -> (C) or (B, C, H, W) -> (B, C).
template <typename T>
Tensor<T> global_average_pool(const Tensor<T>& map) {
  if (map.rank() == 3) return ag::global_avg_pool(Var<T>(map.reshaped({1, map.dim(0), map.dim(1), map.dim(2)}))).value().reshaped({map.dim(0)});
  if (map.rank() == 4) return ag::global_avg_pool(Var<T>(map)).value();
  throw ShapeError("global_average_pool: expected (C,H,W) or (B,C,H,W), got " + shape_str(map.shape()));
}

template <typename T>
struct AttendResult {
  std::vector<Var<T>> attention;  // per branch, (B, C)
  std::vector<Var<T>> augmented;  // per branch, same shape as the input maps
};

/// Differentiable channel selection over batched maps (B, C, H, W).
template <typename T>
AttendResult<T> attend(const std::vector<Var<T>>& features, const CSParams<T>& params) {
  if (features.size() != params.n_branches())
    throw std::invalid_argument("attend: " + std::to_string(features.size()) + " branches, params expect " +
                                std::to_string(params.n_branches()));
  for (const auto& f : features) {
    if (f.shape().size() != 4 || f.shape()[1] != params.channels)
      throw ShapeError("attend: feature map " + shape_str(f.shape()) + " does not have " +
                       std::to_string(params.channels) + " channels");
    if (!f.value().all_finite()) throw NonFiniteError("attend: non-finite feature values", -1, "channel_selection");
  }
  Var<T> fused = ag::sum(features);
  Var<T> z1 = ag::global_avg_pool(fused);
  Var<T> z2 = ag::relu(params.reduce(z1));
  std::vector<Var<T>> logits;
  logits.reserve(features.size());
  for (const auto& b : params.branch) logits.push_back(b(z2));

  AttendResult<T> out;
  out.attention = ag::softmax_across(logits);
  out.augmented.reserve(features.size());
  for (std::size_t k = 0; k < features.size(); ++k) out.augmented.push_back(ag::mul_channels(features[k], out.attention[k]));
  return out;
}

/// Non-differentiable channel selection on single (C, H, W) maps.
template <typename T>
std::pair<AttentionVectors<T>, BranchFeatures<T>> attend(const BranchFeatures<T>& in, const CSParams<T>& params) {
  std::vector<Var<T>> vars;
  for (const auto& f : in.features) {
    if (f.rank() != 3) throw ShapeError("attend: expected (C,H,W) maps, got " + shape_str(f.shape()));
    if (f.shape() != in.features.front().shape()) throw ShapeError("attend: branch shapes differ");
    vars.emplace_back(f.reshaped({1, f.dim(0), f.dim(1), f.dim(2)}));
  }
  auto res = attend(vars, params);
  std::pair<AttentionVectors<T>, BranchFeatures<T>> out;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    out.first.per_branch.push_back(res.attention[k].value().reshaped({params.channels}));
    out.second.features.push_back(res.augmented[k].value().reshaped(in.features[k].shape()));
  }
  return out;
}

}  // namespace ocrgan
