#pragma once

// Alternating critic/generator training. Each step forwards the generator
// once, updates the critic on [real | detached reconstruction | forged], then
// updates the generator against the freshly updated, frozen critic.
//
// Randomness is derived from the run seed and a counter (epoch for shuffling,
// step for forgery), so a run resumes exactly from the step counter, the
// parameters, the buffers and the optimizer moments.

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ocrgan/checkpoint.hpp"
#include "ocrgan/data.hpp"
#include "ocrgan/forgery.hpp"
#include "ocrgan/models.hpp"
#include "ocrgan/objectives.hpp"
#include "ocrgan/optim.hpp"

namespace ocrgan {

struct StepMetrics {
  long step = 0;  // 1-based index of the completed step
  long epoch = 0;
  double loss_D = 0, loss_G = 0, L_con = 0, L_adv = 0, L_lat = 0;
  double wall_time = 0;  // seconds since the trainer was constructed
};

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"epoch", m.epoch}, {"loss_D", m.loss_D}, {"loss_G", m.loss_G},
          {"L_con", m.L_con}, {"L_adv", m.L_adv}, {"L_lat", m.L_lat}, {"wall_time", m.wall_time}};
}

inline LossWeights loss_weights(const RunConfig& c) { return {c.lambda_con, c.lambda_adv, c.lambda_lat}; }

inline AdamOptions adam_options(const RunConfig& c) {
  return {c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
}

/// Order-sensitive FNV-1a digest of every parameter value in a registry.
template <typename T>
std::uint64_t parameter_hash(const nn::Registry<T>& reg) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : reg.params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.var.value().data());
    for (std::size_t i = 0; i < p.var.value().size() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <typename T = float>
class Trainer {
 public:
  /// `images` are the training set, each (C, H, W).
  Trainer(RunConfig config, std::vector<Tensor<T>> images)
      : config_(std::move(config)), images_(std::move(images)), start_(std::chrono::steady_clock::now()) {
    validate(config_);
    if (images_.empty()) throw DataError("trainer: empty training set");
    const Shape expected{std::size_t(config_.channels), std::size_t(config_.image_size), std::size_t(config_.image_size)};
    for (const auto& img : images_)
      if (img.shape() != expected)
        throw ShapeError("trainer: image shape " + shape_str(img.shape()) + ", config expects " + shape_str(expected));
    model_ = std::make_unique<OcrGan<T>>(ModelSpec::from_config(config_), config_.seed);
    gen_reg_ = model_->generator.registry();
    disc_reg_ = model_->discriminator.registry();
    opt_g_ = Adam<T>(gen_reg_, adam_options(config_));
    opt_d_ = Adam<T>(disc_reg_, adam_options(config_));
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const RunConfig& config() const noexcept { return config_; }
  OcrGan<T>& model() noexcept { return *model_; }
  nn::Registry<T>& generator_registry() noexcept { return gen_reg_; }
  nn::Registry<T>& discriminator_registry() noexcept { return disc_reg_; }
  long step() const noexcept { return step_; }

  std::size_t batch_size() const { return std::min(std::size_t(config_.batch_size), images_.size()); }
  std::size_t batches_per_epoch() const { return std::max<std::size_t>(1, images_.size() / batch_size()); }

  /// Total steps the config asks for.
  long planned_steps() const {
    return config_.steps > 0 ? config_.steps : long(config_.epochs) * long(batches_per_epoch());
  }

  /// Batch used by step `s`: epoch-wise permutation keyed by (seed, epoch).
  Tensor<T> batch_for_step(long s) {
    const long epoch = s / long(batches_per_epoch());
    const std::size_t pos = std::size_t(s % long(batches_per_epoch()));
    if (epoch != perm_epoch_) {
      perm_.resize(images_.size());
      for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
      Rng rng(config_.seed, {kShuffleStream, std::uint64_t(epoch)});
      rng.shuffle(perm_.begin(), perm_.end());
      perm_epoch_ = epoch;
    }
    std::vector<Tensor<T>> items;
    const std::size_t b = batch_size();
    for (std::size_t i = 0; i < b; ++i) items.push_back(images_[perm_[pos * b + i]]);
    return stack(items);
  }

  /// Generator forward in training mode.
  GeneratorOutput<T> forward_generator(const Tensor<T>& batch) {
    try {
      return model_->generator.forward(band_inputs(batch, std::size_t(config_.n_branches)), true);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string("step ") + std::to_string(step_ + 1) + ": " + e.what(), step_ + 1, e.term());
    }
  }

  /// Forged positives for the current step (empty when augmentation is off).
  std::optional<Tensor<T>> forge(const Tensor<T>& batch) const {
    if (!config_.augment()) return std::nullopt;
    Rng rng(config_.seed, {kForgeStream, std::uint64_t(step_)});
    return forge_batch(batch, rng, ForgeryOptions::from_config(config_));
  }

  /// One critic update; returns its loss before the update. The generator is untouched.
  double update_discriminator(const Tensor<T>& real, const Tensor<T>& recon, const std::optional<Tensor<T>>& forged) {
    std::vector<Tensor<T>> parts{real, recon};
    if (forged) parts.push_back(*forged);
    const Tensor<T> joined = concat_batch(parts);
    const std::size_t b = real.dim(0);
    disc_reg_.zero_grad();
    const auto out = model_->discriminator.forward(Var<T>(joined), true);
    const auto loss = discriminator_loss(out.score, b, recon.dim(0), forged ? forged->dim(0) : 0);
    const double value = loss.value()[0];
    check_finite(value, "loss_D");
    ag::backward(loss);
    opt_d_.step(disc_reg_);
    return value;
  }

  /// One generator update against the frozen critic.
  LossTerms update_generator(const Tensor<T>& real, const GeneratorOutput<T>& gen) {
    nn::FreezeGuard<T> frozen(disc_reg_);
    gen_reg_.zero_grad();
    const auto real_out = model_->discriminator.forward(Var<T>(real), false);
    const auto fake_out = model_->discriminator.forward(gen.image, false);
    const Var<T> con = ag::mean_abs_diff(Var<T>(real), gen.image);
    const Var<T> adv = ag::mean(fake_out.score);
    const Var<T> lat = ag::mean_sq_diff(real_out.latent.detach(), fake_out.latent);
    LossTerms terms{con.value()[0], adv.value()[0], lat.value()[0]};
    check_finite(terms.con, "L_con");
    check_finite(terms.adv, "L_adv");
    check_finite(terms.lat, "L_lat");
    const Var<T> total = total_generator_loss(con, adv, lat, loss_weights(config_));
    ag::backward(total);
    opt_g_.step(gen_reg_);
    return terms;
  }

  StepMetrics train_step() { return train_step(batch_for_step(step_)); }

  StepMetrics train_step(const Tensor<T>& batch) {
    const auto gen = forward_generator(batch);
    const auto forged = forge(batch);
    StepMetrics m;
    m.loss_D = update_discriminator(batch, gen.image.value(), forged);
    const LossTerms t = update_generator(batch, gen);
    m.L_con = t.con;
    m.L_adv = t.adv;
    m.L_lat = t.lat;
    m.loss_G = total_generator_loss(t, loss_weights(config_));
    check_finite(m.loss_G, "loss_G");
    m.epoch = step_ / long(batches_per_epoch());
    m.step = ++step_;
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return m;
  }

  CheckpointData<T> checkpoint() const {
    CheckpointData<T> data;
    data.config = config_;
    data.step = step_;
    export_registry(gen_reg_, data.tensors);
    export_registry(disc_reg_, data.tensors);
    export_moments(opt_g_, gen_reg_, "adam_g", data.tensors);
    export_moments(opt_d_, disc_reg_, "adam_d", data.tensors);
    data.extra = {{"adam_g_steps", opt_g_.steps_taken()}, {"adam_d_steps", opt_d_.steps_taken()}};
    return data;
  }

  void save_checkpoint(const fs::path& path) const { write_checkpoint(path, checkpoint()); }

  /// Restores model, buffers, optimizer state and step counter.
  void restore(const CheckpointData<T>& data) {
    import_registry(gen_reg_, data.tensors);
    import_registry(disc_reg_, data.tensors);
    import_moments(opt_g_, gen_reg_, "adam_g", data.tensors);
    import_moments(opt_d_, disc_reg_, "adam_d", data.tensors);
    opt_g_.set_steps_taken(data.extra.value("adam_g_steps", data.step));
    opt_d_.set_steps_taken(data.extra.value("adam_d_steps", data.step));
    step_ = data.step;
  }

 private:
  static Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.dim(0);
    Shape s = parts.front().shape();
    s[0] = n;
    Tensor<T> out(s);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (p.rank() != 4 || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1))
        throw ShapeError("concat_batch: shape " + shape_str(p.shape()) + " does not match " + shape_str(s));
      std::copy(p.data(), p.data() + p.size(), out.data() + offset);
      offset += p.size();
    }
    return out;
  }

  void check_finite(double v, const char* term) const {
    if (!std::isfinite(v))
      throw NonFiniteError("non-finite " + std::string(term) + " at step " + std::to_string(step_ + 1), step_ + 1, term);
  }

  static void export_moments(const Adam<T>& opt, const nn::Registry<T>& reg, const std::string& prefix,
                             std::map<std::string, Tensor<T>>& out) {
    for (std::size_t k = 0; k < reg.params.size(); ++k) {
      out[prefix + ".m/" + reg.params[k].name] = opt.first_moments()[k];
      out[prefix + ".v/" + reg.params[k].name] = opt.second_moments()[k];
    }
  }

  static void import_moments(Adam<T>& opt, const nn::Registry<T>& reg, const std::string& prefix,
                             const std::map<std::string, Tensor<T>>& in) {
    for (std::size_t k = 0; k < reg.params.size(); ++k) {
      for (auto [tag, store] : {std::pair{".m/", &opt.first_moments()}, std::pair{".v/", &opt.second_moments()}}) {
        const auto it = in.find(prefix + tag + reg.params[k].name);
        if (it == in.end()) throw CheckpointError("checkpoint is missing optimizer state for " + reg.params[k].name);
        if (it->second.shape() != (*store)[k].shape()) throw CheckpointError("optimizer state shape mismatch");
        (*store)[k] = it->second;
      }
    }
  }

  RunConfig config_;
  std::vector<Tensor<T>> images_;
  std::unique_ptr<OcrGan<T>> model_;
  nn::Registry<T> gen_reg_, disc_reg_;
  Adam<T> opt_g_, opt_d_;
  long step_ = 0;
  long perm_epoch_ = -1;
  std::vector<std::size_t> perm_;
  std::chrono::steady_clock::time_point start_;
};

/// Builds a model from a checkpoint (weights and buffers only).
template <typename T = float>
std::pair<RunConfig, std::unique_ptr<OcrGan<T>>> load_model(const fs::path& path) {
  const auto data = read_checkpoint<T>(path);
  auto model = std::make_unique<OcrGan<T>>(ModelSpec::from_config(data.config), data.config.seed);
  auto g = model->generator.registry();
  auto d = model->discriminator.registry();
  import_registry(g, data.tensors);
  import_registry(d, data.tensors);
  return {data.config, std::move(model)};
}

struct TrainResult {
  long steps = 0;
  fs::path final_checkpoint;
  fs::path metrics_log;
  std::optional<StepMetrics> last;
};

/// Full run from a config: loads the train split, writes
/// output_dir/{config.txt, metrics.jsonl, checkpoints/}. With `resume`, state
/// is restored from that checkpoint and the log is appended to.
template <typename T = float>
TrainResult train(const RunConfig& config, const std::optional<fs::path>& resume = std::nullopt,
                  std::ostream* progress = nullptr) {
  validate(config);
  DatasetSpec spec{config.data_root, config.category, Split::train, std::size_t(config.image_size),
                   std::size_t(config.channels)};
  auto samples = load_folder_dataset<T>(spec);
  if (config.val_fraction > 0) {
    // Held-out normals are removed with a seeded permutation; they are not used for training.
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(config.seed, {kShuffleStream, ~std::uint64_t(0)});
    rng.shuffle(idx.begin(), idx.end());
    const std::size_t keep = samples.size() - std::size_t(double(samples.size()) * config.val_fraction);
    std::sort(idx.begin(), idx.begin() + long(keep));
    std::vector<Sample<T>> kept;
    for (std::size_t i = 0; i < keep; ++i) kept.push_back(std::move(samples[idx[i]]));
    samples = std::move(kept);
  }
  std::vector<Tensor<T>> images;
  for (auto& s : samples) images.push_back(std::move(s.image));

  Trainer<T> trainer(config, std::move(images));
  if (resume) trainer.restore(read_checkpoint<T>(*resume));

  const fs::path out_dir = config.output_dir;
  const fs::path ckpt_dir = out_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  {
    std::ofstream cfg(out_dir / "config.txt");
    cfg << to_text(config);
    if (!cfg) throw DataError("cannot write " + (out_dir / "config.txt").string());
  }
  TrainResult result;
  result.metrics_log = out_dir / "metrics.jsonl";
  std::ofstream log(result.metrics_log, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write " + result.metrics_log.string());

  const long total = trainer.planned_steps();
  while (trainer.step() < total) {
    const StepMetrics m = trainer.train_step();
    log << to_json(m).dump() << '\n';
    log.flush();
    result.last = m;
    if (progress && (m.step % 50 == 0 || m.step == total))
      *progress << "step " << m.step << "/" << total << " loss_D " << m.loss_D << " loss_G " << m.loss_G << " L_con "
                << m.L_con << '\n';
    if (config.checkpoint_every > 0 && m.step % config.checkpoint_every == 0 && m.step != total) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%07ld.ckpt", m.step);
      trainer.save_checkpoint(ckpt_dir / name);
    }
  }
  result.steps = trainer.step();
  result.final_checkpoint = ckpt_dir / "final.ckpt";
  trainer.save_checkpoint(result.final_checkpoint);
  return result;
}

}  // namespace ocrgan
