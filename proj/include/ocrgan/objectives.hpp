#pragma once

// Training losses and the inference-time anomaly score.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ocrgan/labels.hpp"
#include "ocrgan/ops.hpp"

namespace ocrgan {

struct LossWeights {
  double con = 50.0;
  double adv = 1.0;
  double lat = 1.0;

  void validate() const {
    if (con < 0 || adv < 0 || lat < 0) throw std::invalid_argument("loss weights must be non-negative");
    if (con == 0 && adv == 0 && lat == 0) throw std::invalid_argument("loss weights must not all be zero");
  }
};

struct LossTerms {
  double con = 0.0;
  double adv = 0.0;
  double lat = 0.0;
};

/// Mean absolute error between an input and its reconstruction.
template <typename T>
T content_loss(const Tensor<T>& input, const Tensor<T>& recon) {
  return ag::mean_abs_diff(ag::Var<T>(input), ag::Var<T>(recon)).value()[0];
}

/// Mean squared error between two latent feature maps.
template <typename T>
T latent_loss(const Tensor<T>& a, const Tensor<T>& b) {
  return ag::mean_sq_diff(ag::Var<T>(a), ag::Var<T>(b)).value()[0];
}

namespace objectives_detail {

inline double finite_mean(std::span<const double> v, const char* what) {
  double acc = 0;
  for (double x : v) {
    if (!std::isfinite(x)) throw std::domain_error(std::string(what) + ": non-finite critic score");
    acc += x;
  }
  return v.empty() ? 0.0 : acc / double(v.size());
}

}  // namespace objectives_detail

/// Critic objective, minimized by the discriminator:
/// E[D(I)] - E[D(recon)] - E[D(forged)]. An empty forged set drops its term.
inline double discriminator_loss(std::span<const double> d_real, std::span<const double> d_recon,
                                 std::span<const double> d_forged) {
  if (d_real.empty() || d_recon.empty()) throw std::invalid_argument("discriminator_loss: empty score batch");
  return objectives_detail::finite_mean(d_real, "discriminator_loss") -
         objectives_detail::finite_mean(d_recon, "discriminator_loss") -
         objectives_detail::finite_mean(d_forged, "discriminator_loss");
}

inline double discriminator_loss(double d_real, double d_recon, double d_forged) {
  return discriminator_loss(std::span<const double>(&d_real, 1), std::span<const double>(&d_recon, 1),
                            std::span<const double>(&d_forged, 1));
}

/// Generator's adversarial term: E[D(recon)].
inline double generator_adv_loss(std::span<const double> d_recon) {
  if (d_recon.empty()) throw std::invalid_argument("generator_adv_loss: empty score batch");
  return objectives_detail::finite_mean(d_recon, "generator_adv_loss");
}

inline double total_generator_loss(const LossTerms& t, const LossWeights& w) {
  return w.con * t.con + w.adv * t.adv + w.lat * t.lat;
}

/// Differentiable critic loss over a concatenated score vector laid out as
/// [real | recon | forged] with the given group sizes.
template <typename T>
ag::Var<T> discriminator_loss(const ag::Var<T>& scores, std::size_t n_real, std::size_t n_recon, std::size_t n_forged) {
  const std::size_t n = scores.value().size();
  if (n != n_real + n_recon + n_forged || n_real == 0 || n_recon == 0)
    throw ShapeError("discriminator_loss: score layout does not match group sizes");
  Tensor<T> coeff({n});
  for (std::size_t i = 0; i < n_real; ++i) coeff[i] = T(1) / T(n_real);
  for (std::size_t i = 0; i < n_recon; ++i) coeff[n_real + i] = -T(1) / T(n_recon);
  for (std::size_t i = 0; i < n_forged; ++i) coeff[n_real + n_recon + i] = -T(1) / T(n_forged);
  T acc{0};
  for (std::size_t i = 0; i < n; ++i) acc += coeff[i] * scores.value()[i];
  return ag::make_op(Tensor<T>({1}, acc), {scores}, [coeff](ag::Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += coeff[i] * self.grad[0];
  });
}

template <typename T>
ag::Var<T> total_generator_loss(const ag::Var<T>& con, const ag::Var<T>& adv, const ag::Var<T>& lat,
                                const LossWeights& w) {
  return ag::sum<T>({ag::scale(con, T(w.con)), ag::scale(adv, T(w.adv)), ag::scale(lat, T(w.lat))});
}

/// A(I) = lambda * content + (1 - lambda) * latent.
inline double anomaly_score(double content_error, double latent_error, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("anomaly_score: lambda must be in [0, 1]");
  if (content_error < 0 || latent_error < 0) throw std::invalid_argument("anomaly_score: errors must be non-negative");
  return lambda * content_error + (1.0 - lambda) * latent_error;
}

/// Min-max scaling of a score set to [0, 1].
inline std::vector<double> normalize_scores(std::span<const double> scores) {
  if (scores.size() < 2) throw DegenerateInputError("normalize_scores: need at least 2 scores");
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double min = *lo, max = *hi;
  if (!(max > min)) throw DegenerateInputError("normalize_scores: all scores are equal");
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back((s - min) / (max - min));
  return out;
}

struct ScoreRecord {
  std::string sample_id;
  double content_error = 0.0;
  double latent_error = 0.0;
  double raw_score = 0.0;
  std::optional<double> normalized_score;  // empty when the set cannot be min-max scaled
  Label label = Label::unknown;
};

/// Columns: sample_id,content_error,latent_error,raw_score,normalized_score,label
inline void write_scores_csv(std::ostream& os, std::span<const ScoreRecord> records) {
  os << "sample_id,content_error,latent_error,raw_score,normalized_score,label\n";
  os << std::setprecision(9);
  for (const auto& r : records) {
    os << r.sample_id << ',' << r.content_error << ',' << r.latent_error << ',' << r.raw_score << ',';
    if (r.normalized_score) os << *r.normalized_score;
    os << ',' << to_string(r.label) << '\n';
  }
}

}  // namespace ocrgan
