#pragma once

// Parameterized layers and the registry used by optimizers and checkpoints.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ocrgan/ops.hpp"
#include "ocrgan/rng.hpp"

namespace ocrgan::nn {

using ag::Var;

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Flat view of a model's trainable parameters and persistent buffers. Entries
/// alias the model's storage; rebuild the registry after structural changes.
template <typename T>
struct Registry {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;

  void add(std::string name, const Var<T>& v) { params.push_back({std::move(name), v}); }
  void add_buffer(std::string name, Tensor<T>& t) { buffers.push_back({std::move(name), &t}); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params) p.var.grad().fill(T(0));
  }

  void set_requires_grad(bool on) {
    for (auto& p : params) p.var.node()->requires_grad = on;
  }
};

/// Freezes a registry for the guard's lifetime.
template <typename T>
class FreezeGuard {
 public:
  explicit FreezeGuard(Registry<T>& reg) : reg_(reg) { reg_.set_requires_grad(false); }
  ~FreezeGuard() { reg_.set_requires_grad(true); }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  Registry<T>& reg_;
};

template <typename T>
Var<T> normal_param(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = T(rng.normal(mean, stddev));
  return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> constant_param(Shape shape, T value) {
  return Var<T>(Tensor<T>(std::move(shape), value), true);
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;  // undefined when the layer has no bias
  std::size_t stride = 1, pad = 0;
  bool spectral = false;
  Tensor<T> sn_u, sn_v;

  Conv2d() = default;
  Conv2d(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride_, std::size_t pad_, bool with_bias,
         bool spectral_norm, Rng& rng)
      : stride(stride_), pad(pad_), spectral(spectral_norm) {
    weight = normal_param<T>({cout, cin, k, k}, rng, 0.0, 0.02);
    if (with_bias) bias = constant_param<T>({cout}, T(0));
    if (spectral) {
      sn_u = Tensor<T>({cout});
      sn_v = Tensor<T>({cin * k * k});
      for (auto& e : sn_u.values()) e = T(rng.normal());
      for (auto& e : sn_v.values()) e = T(rng.normal());
      normalize(sn_u);
      normalize(sn_v);
      // Settle the estimate so sigma is positive and near the true norm before any update.
      ag::power_iterate(weight.value(), sn_u, sn_v, 10);
    }
  }

  /// `update_sn` runs one power iteration on the spectral-norm estimate.
  Var<T> operator()(const Var<T>& x, bool update_sn = false) {
    Var<T> w = spectral ? ag::spectral_normalize(weight, sn_u, sn_v, update_sn) : weight;
    return ag::conv2d(x, w, bias, stride, pad);
  }

  void collect(const std::string& prefix, Registry<T>& reg) {
    reg.add(prefix + ".weight", weight);
    if (bias.defined()) reg.add(prefix + ".bias", bias);
    if (spectral) {
      reg.add_buffer(prefix + ".sn_u", sn_u);
      reg.add_buffer(prefix + ".sn_v", sn_v);
    }
  }

 private:
  static void normalize(Tensor<T>& t) {
    T n{0};
    for (T v : t.values()) n += v * v;
    n = std::sqrt(n);
    for (auto& v : t.values()) v /= n;
  }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma, beta;
  ag::BatchNormStats<T> stats;

  BatchNorm2d() = default;
  BatchNorm2d(std::size_t channels, Rng& rng)
      : gamma(normal_param<T>({channels}, rng, 1.0, 0.02)),
        beta(constant_param<T>({channels}, T(0))),
        stats(channels) {}

  Var<T> operator()(const Var<T>& x, bool training) { return ag::batch_norm(x, gamma, beta, stats, training); }

  void collect(const std::string& prefix, Registry<T>& reg) {
    reg.add(prefix + ".gamma", gamma);
    reg.add(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".running_mean", stats.running_mean);
    reg.add_buffer(prefix + ".running_var", stats.running_var);
  }
};

template <typename T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng)
      : weight(normal_param<T>({out, in}, rng, 0.0, 0.02)) {
    if (with_bias) bias = constant_param<T>({out}, T(0));
  }

  Var<T> operator()(const Var<T>& z) const { return ag::linear(z, weight, bias); }

  void collect(const std::string& prefix, Registry<T>& reg) {
    reg.add(prefix + ".weight", weight);
    if (bias.defined()) reg.add(prefix + ".bias", bias);
  }
};

}  // namespace ocrgan::nn
