#pragma once

#include <cmath>
#include <vector>

#include "ocrgan/nn.hpp"

namespace ocrgan {

struct AdamOptions {
  double lr = 0.002;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // L2 term added to the gradient
};

/// Adam with L2 weight decay folded into the gradient.
template <typename T = float>
class Adam {
 public:
  Adam() = default;
  Adam(const nn::Registry<T>& reg, AdamOptions opts) : opts_(opts) {
    for (const auto& p : reg.params) {
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step(nn::Registry<T>& reg) {
    if (reg.params.size() != m_.size()) throw std::logic_error("Adam: registry does not match optimizer state");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
    const T b1 = T(opts_.beta1), b2 = T(opts_.beta2), wd = T(opts_.weight_decay);
    const T step_size = T(opts_.lr / bc1);
    const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
    for (std::size_t k = 0; k < reg.params.size(); ++k) {
      auto& var = reg.params[k].var;
      Tensor<T>& w = var.mutable_value();
      const Tensor<T>& g = var.grad();
      Tensor<T>& m = m_[k];
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g[i] + wd * w[i];
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + T(opts_.eps));
      }
    }
  }

  long steps_taken() const noexcept { return t_; }
  void set_steps_taken(long t) noexcept { t_ = t; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }
  const AdamOptions& options() const noexcept { return opts_; }

 private:
  AdamOptions opts_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace ocrgan
