#pragma once

// Networks: N skip-connected encoder-decoder generators (one per frequency
// band) coupled by channel selection after every encoder stage, and a
// spectrally normalized critic with a latent feature tap.

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ocrgan/chselect.hpp"
#include "ocrgan/config.hpp"
#include "ocrgan/freqdecomp.hpp"
#include "ocrgan/nn.hpp"

namespace ocrgan {

struct ModelSpec {
  std::size_t n_branches = 2;
  std::size_t in_channels = 3;
  std::size_t base_channels = 64;
  std::size_t encoder_stages = 5;
  std::size_t disc_stages = 4;
  std::size_t image_size = 256;
  bool use_cs = true;
  std::size_t cs_reduce_ratio = 16;
  std::size_t cs_min_dim = 8;
  std::size_t latent_tap = 0;

  static ModelSpec from_config(const RunConfig& c) {
    ModelSpec s;
    s.n_branches = static_cast<std::size_t>(c.n_branches);
    s.in_channels = static_cast<std::size_t>(c.channels);
    s.base_channels = static_cast<std::size_t>(c.base_channels);
    s.encoder_stages = static_cast<std::size_t>(c.encoder_stages);
    s.disc_stages = static_cast<std::size_t>(c.disc_stages);
    s.image_size = static_cast<std::size_t>(c.image_size);
    s.use_cs = c.use_cs;
    s.cs_reduce_ratio = static_cast<std::size_t>(c.cs_reduce_ratio);
    s.cs_min_dim = static_cast<std::size_t>(c.cs_min_dim);
    s.latent_tap = static_cast<std::size_t>(c.latent_tap);
    return s;
  }

  /// Channel width of encoder stage i: base doubling per stage, capped at 8x.
  std::size_t stage_channels(std::size_t i) const { return base_channels << std::min<std::size_t>(i, 3); }
  bool channel_selection() const { return use_cs && n_branches >= 2; }
};

/// One encoder-decoder. Encoder stage i is a 4x4 stride-2 conv, batch norm on
/// interior stages, LeakyReLU(0.2). Decoder stages upsample (nearest), apply a
/// 3x3 conv + BN + ReLU and concatenate the matching encoder output. A 3x3 conv
/// and tanh produce the band reconstruction.
template <typename T = float>
class GeneratorBranch {
 public:
  GeneratorBranch() = default;
  GeneratorBranch(const ModelSpec& spec, Rng& rng) : stages_(spec.encoder_stages) {
    for (std::size_t i = 0; i < stages_; ++i) {
      const std::size_t cin = i == 0 ? spec.in_channels : spec.stage_channels(i - 1);
      const std::size_t cout = spec.stage_channels(i);
      const bool bn = has_encoder_bn(i);
      enc_conv_.emplace_back(cin, cout, 4, 2, 1, !bn, false, rng);
      enc_bn_.push_back(bn ? std::optional<nn::BatchNorm2d<T>>(std::in_place, cout, rng) : std::nullopt);
    }
    for (std::size_t i = stages_ - 1; i >= 1; --i) {
      const std::size_t cin = i == stages_ - 1 ? spec.stage_channels(i) : 2 * spec.stage_channels(i);
      const std::size_t cout = spec.stage_channels(i - 1);
      dec_conv_.emplace_back(cin, cout, 3, 1, 1, false, false, rng);
      dec_bn_.emplace_back(cout, rng);
    }
    const std::size_t head_in = stages_ == 1 ? spec.stage_channels(0) : 2 * spec.stage_channels(0);
    head_ = nn::Conv2d<T>(head_in, spec.in_channels, 3, 1, 1, true, false, rng);
  }

  std::size_t stages() const noexcept { return stages_; }

  Var<T> encode_stage(std::size_t i, const Var<T>& x, bool training) {
    Var<T> h = enc_conv_[i](x);
    if (enc_bn_[i]) h = (*enc_bn_[i])(h, training);
    return ag::leaky_relu(h, T(0.2));
  }

  /// `skips[i]` is the (possibly attention-weighted) output of encoder stage i.
  Var<T> decode(const std::vector<Var<T>>& skips, bool training) {
    Var<T> d = skips.back();
    for (std::size_t j = 0; j + 1 < stages_; ++j) {
      const std::size_t i = stages_ - 1 - j;
      d = ag::upsample2x(d);
      d = ag::relu(dec_bn_[j](dec_conv_[j](d), training));
      d = ag::concat_channels(d, skips[i - 1]);
    }
    return ag::tanh(head_(ag::upsample2x(d)));
  }

  void collect(const std::string& prefix, nn::Registry<T>& reg) {
    for (std::size_t i = 0; i < stages_; ++i) {
      enc_conv_[i].collect(prefix + ".enc" + std::to_string(i) + ".conv", reg);
      if (enc_bn_[i]) enc_bn_[i]->collect(prefix + ".enc" + std::to_string(i) + ".bn", reg);
    }
    for (std::size_t j = 0; j < dec_conv_.size(); ++j) {
      dec_conv_[j].collect(prefix + ".dec" + std::to_string(j) + ".conv", reg);
      dec_bn_[j].collect(prefix + ".dec" + std::to_string(j) + ".bn", reg);
    }
    head_.collect(prefix + ".head", reg);
  }

 private:
  bool has_encoder_bn(std::size_t i) const { return i > 0 && i + 1 < stages_; }

  std::size_t stages_ = 0;
  std::vector<nn::Conv2d<T>> enc_conv_;
  std::vector<std::optional<nn::BatchNorm2d<T>>> enc_bn_;
  std::vector<nn::Conv2d<T>> dec_conv_;
  std::vector<nn::BatchNorm2d<T>> dec_bn_;
  nn::Conv2d<T> head_;
};

template <typename T>
struct GeneratorOutput {
  std::vector<Var<T>> bands;  // per-branch reconstructions
  Var<T> image;               // sum of bands, clamped to [-1, 1]
};

template <typename T = float>
class BranchedGenerator {
 public:
  BranchedGenerator() = default;
  BranchedGenerator(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    if (spec.n_branches < 1) throw std::invalid_argument("BranchedGenerator: need at least one branch");
    for (std::size_t k = 0; k < spec.n_branches; ++k) branches_.emplace_back(spec, rng);
    if (spec.channel_selection())
      for (std::size_t i = 0; i < spec.encoder_stages; ++i) {
        const std::size_t c = spec.stage_channels(i);
        cs_.emplace_back(spec.n_branches, c, CSParams<T>::default_reduced_dim(c, spec.cs_reduce_ratio, spec.cs_min_dim),
                         rng);
      }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t n_branches() const noexcept { return branches_.size(); }
  const std::vector<CSParams<T>>& cs_stages() const noexcept { return cs_; }

  /// Turns channel selection off at run time (branches then run independently).
  void set_cs_enabled(bool on) { cs_enabled_ = on; }

  /// Band inputs are (B, C, H, W), one per branch.
  GeneratorOutput<T> forward(const std::vector<Var<T>>& bands, bool training) {
    if (bands.size() != branches_.size())
      throw std::invalid_argument("generate: " + std::to_string(bands.size()) + " bands for " +
                                  std::to_string(branches_.size()) + " branches");
    const std::size_t n = branches_.size(), stages = spec_.encoder_stages;
    std::vector<std::vector<Var<T>>> skips(n);
    std::vector<Var<T>> current = bands;
    for (std::size_t i = 0; i < stages; ++i) {
      for (std::size_t k = 0; k < n; ++k) current[k] = branches_[k].encode_stage(i, current[k], training);
      if (!cs_.empty() && cs_enabled_) current = attend(current, cs_[i]).augmented;
      for (std::size_t k = 0; k < n; ++k) skips[k].push_back(current[k]);
    }
    GeneratorOutput<T> out;
    for (std::size_t k = 0; k < n; ++k) out.bands.push_back(branches_[k].decode(skips[k], training));
    out.image = ag::clamp(ag::sum(out.bands), T(-1), T(1));
    if (!out.image.value().all_finite()) throw NonFiniteError("generate: non-finite reconstruction", -1, "generator");
    return out;
  }

  void collect(const std::string& prefix, nn::Registry<T>& reg) {
    for (std::size_t k = 0; k < branches_.size(); ++k) branches_[k].collect(prefix + ".branch" + std::to_string(k), reg);
    for (std::size_t i = 0; i < cs_.size(); ++i) cs_[i].collect(prefix + ".cs" + std::to_string(i), reg);
  }

  nn::Registry<T> registry() {
    nn::Registry<T> reg;
    collect("gen", reg);
    return reg;
  }

 private:
  ModelSpec spec_;
  std::vector<GeneratorBranch<T>> branches_;
  std::vector<CSParams<T>> cs_;
  bool cs_enabled_ = true;
};

template <typename T>
struct CriticOutput {
  Var<T> score;   // (B)
  Var<T> latent;  // (B, C, h, w) at the configured tap
};

/// Stride-2 4x4 conv stages with LeakyReLU(0.2); a 3x3 one-channel head whose
/// map is averaged to a per-sample score. Every conv is spectrally normalized.
template <typename T = float>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    for (std::size_t i = 0; i < spec.disc_stages; ++i) {
      const std::size_t cin = i == 0 ? spec.in_channels : spec.stage_channels(i - 1);
      stages_.emplace_back(cin, spec.stage_channels(i), 4, 2, 1, true, true, rng);
    }
    head_ = nn::Conv2d<T>(spec.stage_channels(spec.disc_stages - 1), 1, 3, 1, 1, true, true, rng);
  }

  const ModelSpec& spec() const noexcept { return spec_; }

  /// `update_sn` advances the spectral-norm power iteration (training updates only).
  CriticOutput<T> forward(const Var<T>& x, bool update_sn = false) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != spec_.in_channels || s[2] != spec_.image_size || s[3] != spec_.image_size)
      throw ShapeError("discriminate: input " + shape_str(s) + " does not match configured (B, " +
                       std::to_string(spec_.in_channels) + ", " + std::to_string(spec_.image_size) + ", " +
                       std::to_string(spec_.image_size) + ")");
    CriticOutput<T> out;
    Var<T> h = x;
    const std::size_t tap = spec_.latent_tap == 0 ? stages_.size() : spec_.latent_tap;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      h = ag::leaky_relu(stages_[i](h, update_sn), T(0.2));
      if (i + 1 == tap) out.latent = h;
    }
    out.score = ag::mean_per_sample(head_(h, update_sn));
    return out;
  }

  void collect(const std::string& prefix, nn::Registry<T>& reg) {
    for (std::size_t i = 0; i < stages_.size(); ++i) stages_[i].collect(prefix + ".stage" + std::to_string(i), reg);
    head_.collect(prefix + ".head", reg);
  }

  nn::Registry<T> registry() {
    nn::Registry<T> reg;
    collect("disc", reg);
    return reg;
  }

 private:
  ModelSpec spec_;
  std::vector<nn::Conv2d<T>> stages_;
  nn::Conv2d<T> head_;
};

/// Generator + critic pair built from one spec and seed.
template <typename T = float>
struct OcrGan {
  ModelSpec spec;
  BranchedGenerator<T> generator;
  Discriminator<T> discriminator;

  OcrGan() = default;
  OcrGan(const ModelSpec& s, std::uint64_t seed) : spec(s) {
    Rng gen_rng(seed, {kInitStream, 0});
    Rng disc_rng(seed, {kInitStream, 1});
    generator = BranchedGenerator<T>(s, gen_rng);
    discriminator = Discriminator<T>(s, disc_rng);
  }
};

/// Generator inputs for a batch (B, C, H, W): the frequency bands, or the
/// image itself for a single-branch model.
template <typename T>
std::vector<Var<T>> band_inputs(const Tensor<T>& batch, std::size_t n_branches) {
  std::vector<Var<T>> out;
  if (n_branches == 1) {
    out.emplace_back(batch);
    return out;
  }
  for (auto& b : decompose(batch, n_branches).bands) out.emplace_back(std::move(b));
  return out;
}

/// Reconstructs decomposed bands. Accepts (C, H, W) or (B, C, H, W) bands.
/// Runs in inference mode.
template <typename T>
std::pair<FrequencyBands<T>, Tensor<T>> generate(const FrequencyBands<T>& bands, BranchedGenerator<T>& gen,
                                                 bool training = false) {
  if (bands.size() != gen.n_branches())
    throw std::invalid_argument("generate: " + std::to_string(bands.size()) + " bands for " +
                                std::to_string(gen.n_branches()) + " branches");
  std::vector<Var<T>> inputs;
  bool single = false;
  for (const auto& b : bands.bands) {
    single = b.rank() == 3;
    inputs.emplace_back(single ? b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)}) : b);
  }
  auto reg = gen.registry();
  nn::FreezeGuard<T> frozen(reg);
  auto out = gen.forward(inputs, training);
  std::pair<FrequencyBands<T>, Tensor<T>> result;
  result.first.source_shape = bands.source_shape;
  for (auto& b : out.bands) result.first.bands.push_back(single ? b.value().reshaped(bands.source_shape) : b.value());
  result.second = single ? out.image.value().reshaped(bands.source_shape) : out.image.value();
  return result;
}

/// Critic score and latent map for one image (C, H, W) or a batch.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discriminate(const Tensor<T>& image, Discriminator<T>& disc) {
  const bool single = image.rank() == 3;
  Var<T> x(single ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)}) : image);
  auto reg = disc.registry();
  nn::FreezeGuard<T> frozen(reg);
  auto out = disc.forward(x, false);
  Tensor<T> latent = out.latent.value();
  if (single) latent = latent.slice0(0);
  return {out.score.value(), latent};
}

}  // namespace ocrgan
