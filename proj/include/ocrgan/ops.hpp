#pragma once

// Differentiable tensor ops used by the networks. Layout is NCHW throughout.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ocrgan/autograd.hpp"

namespace ocrgan::ag {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
}

template <typename T>
void accumulate(Node<T>& dst, const Tensor<T>& g) {
  auto& buf = dst.grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

// Target GEMM width (columns) when batching samples inside conv2d.
inline std::size_t kConvChunkColumns = 1024;

struct ConvGeometry {
  std::size_t cin, h, w, k, stride, pad, ho, wo;
  std::size_t patch() const { return cin * k * k; }
  std::size_t pixels() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox * stride + kj - pad is inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t kj, const ConvGeometry& g) {
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride), w = static_cast<std::ptrdiff_t>(g.w);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t hi = w - off <= 0 ? 0 : (w - off + s - 1) / s;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.wo));
  lo = std::min(lo, hi);
  return {std::size_t(lo), std::size_t(hi)};
}

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols, std::size_t row_stride) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const auto [lo, hi] = valid_range(kj, g);
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
        T* row = cols + ((c * g.k + ki) * g.k + kj) * row_stride;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* src = plane + iy * static_cast<std::ptrdiff_t>(g.w) + off;
          std::fill(out, out + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) out[ox] = src[ox * g.stride];
          }
          std::fill(out + hi, out + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx, std::size_t row_stride) {
  for (std::size_t c = 0; c < g.cin; ++c) {
    T* plane = dx + c * g.h * g.w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const auto [lo, hi] = valid_range(kj, g);
        const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kj) - static_cast<std::ptrdiff_t>(g.pad);
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * row_stride;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + iy * static_cast<std::ptrdiff_t>(g.w) + off;
          const T* in = row + oy * g.wo;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += in[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) detail::accumulate(*in, self.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) detail::accumulate(*self.inputs[0], self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_op(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

template <typename T>
Var<T> sum(const std::vector<Var<T>>& items) {
  if (items.empty()) throw ShapeError("sum: no inputs");
  Tensor<T> out = items.front().value();
  for (std::size_t k = 1; k < items.size(); ++k) {
    detail::require_same(items[k].shape(), out.shape(), "sum");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += items[k].value()[i];
  }
  return make_op(std::move(out), items, [](Node<T>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) detail::accumulate(*in, self.grad);
  });
}

/// x (B, C, H, W) scaled per (sample, channel) by a (B, C).
template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& a) {
  detail::require_rank(x.shape(), 4, "mul_channels");
  const auto& s = x.shape();
  if (a.shape() != Shape{s[0], s[1]})
    throw ShapeError("mul_channels: weights " + shape_str(a.shape()) + " do not match " + shape_str(s));
  const std::size_t hw = s[2] * s[3];
  Tensor<T> out = x.value();
  for (std::size_t bc = 0; bc < s[0] * s[1]; ++bc) {
    const T w = a.value()[bc];
    for (std::size_t i = 0; i < hw; ++i) out[bc * hw + i] *= w;
  }
  return make_op(std::move(out), {x, a}, [hw](Node<T>& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& av = self.inputs[1]->value;
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t bc = 0; bc < av.size(); ++bc)
        for (std::size_t i = 0; i < hw; ++i) g[bc * hw + i] += av[bc] * self.grad[bc * hw + i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t bc = 0; bc < av.size(); ++bc) {
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += xv[bc * hw + i] * self.grad[bc * hw + i];
        g[bc] += acc;
      }
    }
  });
}

/// 2-D convolution with zero padding. w is (Cout, Cin, k, k); bias optional.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride, std::size_t pad) {
  detail::require_rank(x.shape(), 4, "conv2d");
  detail::require_rank(w.shape(), 4, "conv2d weight");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3])
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs));
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3])
    throw ShapeError("conv2d: input " + shape_str(xs) + " smaller than kernel");
  const std::size_t batch = xs[0], cout = ws[0];
  detail::ConvGeometry g{xs[1], xs[2], xs[3], ws[2], stride, pad,
                         (xs[2] + 2 * pad - ws[2]) / stride + 1, (xs[3] + 2 * pad - ws[3]) / stride + 1};
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));

  // Samples are processed in chunks that share one GEMM: cols is
  // (patch, chunk * pixels). Small feature maps get large chunks.
  const std::size_t np = g.pixels(), in_step = g.cin * g.h * g.w;
  const std::size_t chunk = std::clamp<std::size_t>(detail::kConvChunkColumns / np, 1, batch);
  Tensor<T> out({batch, cout, g.ho, g.wo});
  {
    AlignedVector<T> cols(g.patch() * chunk * np);
    detail::RowMat<T> y(cout, chunk * np);
    detail::ConstMatMap<T> wm(w.value().data(), cout, g.patch());
    for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
      const std::size_t m = std::min(chunk, batch - n0), total = m * np;
      for (std::size_t n = 0; n < m; ++n)
        detail::im2col(x.value().data() + (n0 + n) * in_step, g, cols.data() + n * np, total);
      detail::ConstMatMap<T> cm(cols.data(), g.patch(), total);
      detail::MatMap<T> ym(y.data(), cout, total);
      ym.noalias() = wm * cm;
      for (std::size_t n = 0; n < m; ++n)
        for (std::size_t c = 0; c < cout; ++c) {
          T* dst = out.data() + ((n0 + n) * cout + c) * np;
          const T* src = y.data() + c * total + n * np;
          const T b = has_bias ? bias.value()[c] : T(0);
          for (std::size_t i = 0; i < np; ++i) dst[i] = src[i] + b;
        }
    }
  }

  auto fn = [g, batch, cout, has_bias, in_step, np, chunk](Node<T>& self) {
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    Node<T>* bn = has_bias ? self.inputs[2].get() : nullptr;
    if (bn && bn->requires_grad) {
      auto& db = bn->grad_buffer();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < cout; ++c) {
          const T* src = self.grad.data() + (n * cout + c) * np;
          T acc{0};
          for (std::size_t i = 0; i < np; ++i) acc += src[i];
          db[c] += acc;
        }
    }
    AlignedVector<T> cols;
    if (wn.requires_grad) cols.resize(g.patch() * chunk * np);
    detail::RowMat<T> dy(cout, chunk * np), dcols;
    detail::ConstMatMap<T> wm(wn.value.data(), cout, g.patch());
    for (std::size_t n0 = 0; n0 < batch; n0 += chunk) {
      const std::size_t m = std::min(chunk, batch - n0), total = m * np;
      for (std::size_t n = 0; n < m; ++n)
        for (std::size_t c = 0; c < cout; ++c)
          std::copy_n(self.grad.data() + ((n0 + n) * cout + c) * np, np, dy.data() + c * total + n * np);
      detail::ConstMatMap<T> dym(dy.data(), cout, total);
      if (wn.requires_grad) {
        for (std::size_t n = 0; n < m; ++n)
          detail::im2col(xn.value.data() + (n0 + n) * in_step, g, cols.data() + n * np, total);
        detail::ConstMatMap<T> cm(cols.data(), g.patch(), total);
        detail::MatMap<T> dw(wn.grad_buffer().data(), cout, g.patch());
        dw.noalias() += dym * cm.transpose();
      }
      if (xn.requires_grad) {
        dcols.noalias() = wm.transpose() * dym;
        T* dx = xn.grad_buffer().data();
        for (std::size_t n = 0; n < m; ++n)
          detail::col2im_add(dcols.data() + n * np, g, dx + (n0 + n) * in_step, total);
      }
    }
  };
  if (has_bias) return make_op(std::move(out), {x, w, bias}, fn);
  return make_op(std::move(out), {x, w}, fn);
}

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean({channels}, T(0)), running_var({channels}, T(1)) {}
};

/// Batch normalization over (N, H, W) per channel. In training mode batch
/// statistics normalize the input and update `stats`; otherwise `stats` is used.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats,
                  bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require_rank(x.shape(), 4, "batch_norm");
  const auto& s = x.shape();
  const std::size_t batch = s[0], ch = s[1], hw = s[2] * s[3];
  const std::size_t m = batch * hw;
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) throw ShapeError("batch_norm: affine shape mismatch");

  Tensor<T> mean({ch}), invstd({ch});
  const auto& xv = x.value();
  if (training) {
    for (std::size_t c = 0; c < ch; ++c) {
      double acc = 0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < hw; ++i) acc += xv[(n * ch + c) * hw + i];
      const double mu = acc / double(m);
      double var = 0;
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = xv[(n * ch + c) * hw + i] - mu;
          var += d * d;
        }
      var /= double(m);
      mean[c] = T(mu);
      invstd[c] = T(1.0 / std::sqrt(var + double(eps)));
      const double unbiased = m > 1 ? var * double(m) / double(m - 1) : var;
      stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * T(mu);
      stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * T(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = stats.running_mean[c];
      invstd[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }

  Tensor<T> xhat(s), out(s);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (n * ch + c) * hw + i;
        xhat[idx] = (xv[idx] - mean[c]) * invstd[c];
        out[idx] = gamma.value()[c] * xhat[idx] + beta.value()[c];
      }

  return make_op(std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), invstd, batch, ch, hw, m, training](Node<T>& self) {
                   Node<T>& xn = *self.inputs[0];
                   Node<T>& gn = *self.inputs[1];
                   Node<T>& bn = *self.inputs[2];
                   const auto& dy = self.grad;
                   for (std::size_t c = 0; c < ch; ++c) {
                     T sum_dy{0}, sum_dy_xhat{0};
                     for (std::size_t n = 0; n < batch; ++n)
                       for (std::size_t i = 0; i < hw; ++i) {
                         const std::size_t idx = (n * ch + c) * hw + i;
                         sum_dy += dy[idx];
                         sum_dy_xhat += dy[idx] * xhat[idx];
                       }
                     if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xhat;
                     if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
                     if (!xn.requires_grad) continue;
                     auto& dx = xn.grad_buffer();
                     const T gam = gn.value[c];
                     const T k = gam * invstd[c];
                     for (std::size_t n = 0; n < batch; ++n)
                       for (std::size_t i = 0; i < hw; ++i) {
                         const std::size_t idx = (n * ch + c) * hw + i;
                         if (training)
                           dx[idx] += k * (dy[idx] - (sum_dy + xhat[idx] * sum_dy_xhat) / T(m));
                         else
                           dx[idx] += k * dy[idx];
                       }
                   }
                 });
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, F f, D df_from_xy) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.value()[i]);
  Tensor<T> y = out;
  return make_op(std::move(out), {x}, [df_from_xy, y = std::move(y)](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df_from_xy(xv[i], y[i]);
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  return unary(x, [slope](T v) { return v > 0 ? v : slope * v; },
               [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

/// Hard clamp; gradient passes only strictly inside (lo, hi).
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary(x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
               [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

/// Nearest-neighbour 2x spatial upsampling.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "upsample2x");
  const auto& s = x.shape();
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  Tensor<T> out({s[0], s[1], 2 * h, 2 * w});
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x.value()[(p * h + y / 2) * w + xx / 2];
  return make_op(std::move(out), {x}, [planes, h, w](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          g[(p * h + y / 2) * w + xx / 2] += self.grad[(p * 2 * h + y) * 2 * w + xx];
  });
}

/// Concatenation along the channel axis.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a.shape(), 4, "concat_channels");
  detail::require_rank(b.shape(), 4, "concat_channels");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw ShapeError("concat_channels: " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t hw = sa[2] * sa[3], ca = sa[1] * hw, cb = sb[1] * hw;
  Tensor<T> out({sa[0], sa[1] + sb[1], sa[2], sa[3]});
  for (std::size_t n = 0; n < sa[0]; ++n) {
    std::copy_n(a.value().data() + n * ca, ca, out.data() + n * (ca + cb));
    std::copy_n(b.value().data() + n * cb, cb, out.data() + n * (ca + cb) + ca);
  }
  return make_op(std::move(out), {a, b}, [ca, cb, batch = sa[0]](Node<T>& self) {
    for (std::size_t n = 0; n < batch; ++n) {
      const T* g = self.grad.data() + n * (ca + cb);
      if (self.inputs[0]->requires_grad) {
        T* d = self.inputs[0]->grad_buffer().data() + n * ca;
        for (std::size_t i = 0; i < ca; ++i) d[i] += g[i];
      }
      if (self.inputs[1]->requires_grad) {
        T* d = self.inputs[1]->grad_buffer().data() + n * cb;
        for (std::size_t i = 0; i < cb; ++i) d[i] += g[ca + i];
      }
    }
  });
}

/// (B, C, H, W) -> (B, C) spatial mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const auto& s = x.shape();
  const std::size_t bc = s[0] * s[1], hw = s[2] * s[3];
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent");
  Tensor<T> out({s[0], s[1]});
  for (std::size_t i = 0; i < bc; ++i) {
    T acc{0};
    for (std::size_t j = 0; j < hw; ++j) acc += x.value()[i * hw + j];
    out[i] = acc / T(hw);
  }
  return make_op(std::move(out), {x}, [bc, hw](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < bc; ++i) {
      const T v = self.grad[i] / T(hw);
      for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += v;
    }
  });
}

/// z (B, In) times weight (Out, In) transposed, plus optional bias (Out).
template <typename T>
Var<T> linear(const Var<T>& z, const Var<T>& weight, const Var<T>& bias) {
  detail::require_rank(z.shape(), 2, "linear");
  detail::require_rank(weight.shape(), 2, "linear weight");
  const std::size_t batch = z.shape()[0], in = z.shape()[1], out_dim = weight.shape()[0];
  if (weight.shape()[1] != in)
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " vs input " + shape_str(z.shape()));
  const bool has_bias = bias.defined();
  Tensor<T> out({batch, out_dim});
  detail::ConstMatMap<T> zm(z.value().data(), batch, in);
  detail::ConstMatMap<T> wm(weight.value().data(), out_dim, in);
  detail::MatMap<T> om(out.data(), batch, out_dim);
  om.noalias() = zm * wm.transpose();
  if (has_bias)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < out_dim; ++o) om(b, o) += bias.value()[o];
  auto fn = [batch, in, out_dim, has_bias](Node<T>& self) {
    Node<T>& zn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    detail::ConstMatMap<T> dy(self.grad.data(), batch, out_dim);
    if (zn.requires_grad) {
      detail::MatMap<T> dz(zn.grad_buffer().data(), batch, in);
      dz.noalias() += dy * detail::ConstMatMap<T>(wn.value.data(), out_dim, in);
    }
    if (wn.requires_grad) {
      detail::MatMap<T> dw(wn.grad_buffer().data(), out_dim, in);
      dw.noalias() += dy.transpose() * detail::ConstMatMap<T>(zn.value.data(), batch, in);
    }
    if (has_bias && self.inputs[2]->requires_grad) {
      auto& db = self.inputs[2]->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < out_dim; ++o) db[o] += dy(b, o);
    }
  };
  if (has_bias) return make_op(std::move(out), {z, weight, bias}, fn);
  return make_op(std::move(out), {z, weight}, fn);
}

/// Softmax across a list of same-shaped logit tensors, element by element.
/// Returns one weight tensor per input; the weights sum to one at every index.
template <typename T>
std::vector<Var<T>> softmax_across(const std::vector<Var<T>>& logits) {
  if (logits.empty()) throw ShapeError("softmax_across: no inputs");
  const std::size_t k = logits.size(), n = logits.front().value().size();
  for (const auto& l : logits) detail::require_same(l.shape(), logits.front().shape(), "softmax_across");

  // Stacked (k, n) probabilities live in one node; each output is a slice of it.
  Shape stacked_shape{k, n};
  Tensor<T> probs(stacked_shape);
  for (std::size_t i = 0; i < n; ++i) {
    T mx = logits[0].value()[i];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits[j].value()[i]);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) {
      probs[j * n + i] = std::exp(logits[j].value()[i] - mx);
      total += probs[j * n + i];
    }
    for (std::size_t j = 0; j < k; ++j) probs[j * n + i] /= total;
  }
  Tensor<T> p_copy = probs;
  Var<T> joint = make_op(std::move(probs), logits, [k, n, p = std::move(p_copy)](Node<T>& self) {
    // d logit_j = p_j * (g_j - sum_m p_m g_m)
    for (std::size_t i = 0; i < n; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < k; ++j) dot += p[j * n + i] * self.grad[j * n + i];
      for (std::size_t j = 0; j < k; ++j)
        if (self.inputs[j]->requires_grad)
          self.inputs[j]->grad_buffer()[i] += p[j * n + i] * (self.grad[j * n + i] - dot);
    }
  });

  const Shape item_shape = logits.front().shape();
  std::vector<Var<T>> out;
  out.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    Tensor<T> part(item_shape, joint.value().data() + j * n, joint.value().data() + (j + 1) * n);
    out.push_back(make_op(std::move(part), {joint}, [j, n](Node<T>& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[j * n + i] += self.grad[i];
    }));
  }
  return out;
}

/// (B, ...) -> (B) mean over all non-batch axes.
template <typename T>
Var<T> mean_per_sample(const Var<T>& x) {
  const std::size_t batch = x.shape().at(0), inner = x.value().size() / batch;
  Tensor<T> out({batch});
  for (std::size_t b = 0; b < batch; ++b) {
    T acc{0};
    for (std::size_t i = 0; i < inner; ++i) acc += x.value()[b * inner + i];
    out[b] = acc / T(inner);
  }
  return make_op(std::move(out), {x}, [batch, inner](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < inner; ++i) g[b * inner + i] += self.grad[b] / T(inner);
  });
}

/// Mean over every element; result has shape (1).
template <typename T>
Var<T> mean(const Var<T>& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean of empty tensor");
  T acc{0};
  for (T v : x.value().values()) acc += v;
  return make_op(Tensor<T>({1}, acc / T(n)), {x}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T v = self.grad[0] / T(n);
    for (auto& e : g.values()) e += v;
  });
}

/// Mean absolute difference (l1), shape (1).
template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mean_abs_diff");
  const std::size_t n = a.value().size();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a.value()[i] - b.value()[i]);
  return make_op(Tensor<T>({1}, acc / T(n)), {a, b}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const T s = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = av[i] - bv[i];
      const T sg = d > 0 ? s : (d < 0 ? -s : T(0));
      if (self.inputs[0]->requires_grad) self.inputs[0]->grad_buffer()[i] += sg;
      if (self.inputs[1]->requires_grad) self.inputs[1]->grad_buffer()[i] -= sg;
    }
  });
}

/// Mean squared difference (l2), shape (1).
template <typename T>
Var<T> mean_sq_diff(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mean_sq_diff");
  const std::size_t n = a.value().size();
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  return make_op(Tensor<T>({1}, acc / T(n)), {a, b}, [n](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    const T s = T(2) * self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = s * (av[i] - bv[i]);
      if (self.inputs[0]->requires_grad) self.inputs[0]->grad_buffer()[i] += d;
      if (self.inputs[1]->requires_grad) self.inputs[1]->grad_buffer()[i] -= d;
    }
  });
}

/// Refines the leading singular vector estimates u, v of a weight viewed as
/// (rows, rest).
template <typename T>
void power_iterate(const Tensor<T>& weight, Tensor<T>& u, Tensor<T>& v, int iterations, T eps = T(1e-12)) {
  const std::size_t rows = weight.shape().at(0), cols = weight.size() / rows;
  if (u.size() != rows || v.size() != cols) throw ShapeError("power_iterate: u/v size mismatch");
  detail::ConstMatMap<T> wm(weight.data(), rows, cols);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data(), rows), vm(v.data(), cols);
  for (int i = 0; i < iterations; ++i) {
    vm = wm.transpose() * um;
    vm /= std::max(vm.norm(), eps);
    um = wm * vm;
    um /= std::max(um.norm(), eps);
  }
}

/// W / sigma(W), with sigma estimated as u^T W v from persistent singular
/// vector estimates. When `update` is set, one power iteration refreshes u and v
/// first. u and v are treated as constants in the backward pass.
template <typename T>
Var<T> spectral_normalize(const Var<T>& weight, Tensor<T>& u, Tensor<T>& v, bool update, T eps = T(1e-12)) {
  const std::size_t rows = weight.shape().at(0), cols = weight.value().size() / rows;
  if (u.size() != rows || v.size() != cols) throw ShapeError("spectral_normalize: u/v size mismatch");
  if (update) power_iterate(weight.value(), u, v, 1, eps);
  detail::ConstMatMap<T> wm(weight.value().data(), rows, cols);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> um(u.data(), rows), vm(v.data(), cols);
  const T sigma = std::max(um.dot(wm * vm), eps);
  Tensor<T> out = weight.value();
  for (auto& e : out.values()) e /= sigma;
  return make_op(std::move(out), {weight}, [u, v, sigma, rows, cols](Node<T>& self) {
    Node<T>& wn = *self.inputs[0];
    T inner{0};
    for (std::size_t i = 0; i < self.grad.size(); ++i) inner += self.grad[i] * wn.value[i];
    const T k = inner / (sigma * sigma);
    auto& g = wn.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        g[r * cols + c] += self.grad[r * cols + c] / sigma - k * u[r] * v[c];
  });
}

}  // namespace ocrgan::ag
