#pragma once

// Evaluation: rank AUC and ROC, per-sample scoring, score histograms, latent
// exports and radial amplitude-spectrum profiles.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ocrgan/data.hpp"
#include "ocrgan/models.hpp"
#include "ocrgan/objectives.hpp"

namespace ocrgan {

// AUC and ROC.

namespace eval_detail {

inline void count_classes(std::span<const Label> labels, std::size_t& normal, std::size_t& abnormal) {
  normal = abnormal = 0;
  for (Label l : labels) {
    if (l == Label::normal) ++normal;
    else if (l == Label::abnormal) ++abnormal;
    else throw std::invalid_argument("compute_auc: records must be labeled normal or abnormal");
  }
  if (normal == 0 || abnormal == 0) throw DegenerateInputError("compute_auc: need at least one normal and one abnormal record");
}

/// Score used for ranking: the normalized score when present, else raw.
inline double ranking_score(const ScoreRecord& r) { return r.normalized_score.value_or(r.raw_score); }

}  // namespace eval_detail

/// Rank-sum AUC with midranks: P(abnormal > normal) + 0.5 P(tie).
inline double compute_auc(std::span<const double> scores, std::span<const Label> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("compute_auc: size mismatch");
  std::size_t n_norm = 0, n_abn = 0;
  eval_detail::count_classes(labels, n_norm, n_abn);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the rank sum keeps midranks integral.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t mid2 = std::uint64_t(i + 1 + j);  // 2 * average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == Label::abnormal) rank_sum2 += mid2;
    i = j;
  }
  const std::uint64_t u2 = rank_sum2 - std::uint64_t(n_abn) * (n_abn + 1);
  return (double(u2) / 2.0) / (double(n_abn) * double(n_norm));
}

inline double compute_auc(std::span<const ScoreRecord> records) {
  std::vector<double> s;
  std::vector<Label> l;
  for (const auto& r : records) {
    s.push_back(eval_detail::ranking_score(r));
    l.push_back(r.label);
  }
  return compute_auc(s, l);
}

struct RocPoint {
  double threshold;  // scores >= threshold are flagged abnormal
  double fpr;
  double tpr;
};

/// ROC from (0, 0) to (1, 1), one point per distinct score in decreasing order.
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const Label> labels) {
  std::size_t n_norm = 0, n_abn = 0;
  eval_detail::count_classes(labels, n_norm, n_abn);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] == Label::abnormal ? tp : fp) += 1;
      ++i;
    }
    out.push_back({thr, double(fp) / double(n_norm), double(tp) / double(n_abn)});
  }
  return out;
}

inline double trapezoid_area(std::span<const RocPoint> roc) {
  double area = 0;
  for (std::size_t i = 1; i < roc.size(); ++i)
    area += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
  return area;
}

struct PermutationNull {
  double mean = 0;
  double stddev = 0;
  std::size_t permutations = 0;
};

/// AUC distribution under randomly permuted labels.
inline PermutationNull permutation_null(std::span<const double> scores, std::span<const Label> labels,
                                        std::size_t permutations, std::uint64_t seed) {
  std::vector<Label> shuffled(labels.begin(), labels.end());
  Rng rng(seed);
  double sum = 0, sum2 = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    rng.shuffle(shuffled.begin(), shuffled.end());
    const double a = compute_auc(scores, shuffled);
    sum += a;
    sum2 += a * a;
  }
  PermutationNull out;
  out.permutations = permutations;
  out.mean = sum / double(permutations);
  out.stddev = std::sqrt(std::max(0.0, sum2 / double(permutations) - out.mean * out.mean));
  return out;
}

// Scoring.

struct SampleErrors {
  double content = 0;
  double latent = 0;
};

/// Per-sample content (L1) and latent (L2) errors, evaluation mode.
template <typename T>
std::vector<SampleErrors> sample_errors(OcrGan<T>& model, const Tensor<T>& batch) {
  auto greg = model.generator.registry();
  auto dreg = model.discriminator.registry();
  nn::FreezeGuard<T> freeze_g(greg), freeze_d(dreg);

  const std::size_t b = batch.dim(0);
  const auto gen = model.generator.forward(band_inputs(batch, model.spec.n_branches), false);
  const auto real = model.discriminator.forward(Var<T>(batch), false);
  const auto fake = model.discriminator.forward(gen.image, false);
  const Tensor<T>& recon = gen.image.value();
  const std::size_t img = batch.size() / b, lat = real.latent.value().size() / b;
  std::vector<SampleErrors> out(b);
  for (std::size_t n = 0; n < b; ++n) {
    double c = 0, l = 0;
    for (std::size_t i = 0; i < img; ++i) c += std::abs(double(batch[n * img + i]) - double(recon[n * img + i]));
    for (std::size_t i = 0; i < lat; ++i) {
      const double d = double(real.latent.value()[n * lat + i]) - double(fake.latent.value()[n * lat + i]);
      l += d * d;
    }
    out[n] = {c / double(img), l / double(lat)};
  }
  return out;
}

/// Scores every sample and min-max normalizes over the set. When all raw
/// scores are equal the normalized column is left empty.
template <typename T>
std::vector<ScoreRecord> score_dataset(OcrGan<T>& model, const std::vector<Sample<T>>& samples, double score_lambda,
                                       std::size_t batch_size = 16) {
  if (samples.empty()) throw std::invalid_argument("score_dataset: empty sample set");
  std::vector<ScoreRecord> out;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<Tensor<T>> items;
    for (std::size_t i = start; i < end; ++i) items.push_back(samples[i].image);
    const auto errs = sample_errors(model, stack(items));
    for (std::size_t i = start; i < end; ++i) {
      ScoreRecord r;
      r.sample_id = samples[i].id;
      r.content_error = errs[i - start].content;
      r.latent_error = errs[i - start].latent;
      r.raw_score = anomaly_score(r.content_error, r.latent_error, score_lambda);
      r.label = samples[i].label;
      out.push_back(std::move(r));
    }
  }
  std::vector<double> raw;
  for (const auto& r : out) raw.push_back(r.raw_score);
  try {
    const auto norm = normalize_scores(raw);
    for (std::size_t i = 0; i < out.size(); ++i) out[i].normalized_score = norm[i];
  } catch (const DegenerateInputError&) {
  }
  return out;
}

// Histograms.

struct HistogramBucket {
  std::size_t bucket = 0;
  std::size_t normal_count = 0;
  std::size_t abnormal_count = 0;
};

/// Buckets normalized scores (or min-max scaled raw scores) over [0, 1].
inline std::vector<HistogramBucket> export_histogram(std::span<const ScoreRecord> records, std::size_t n_buckets) {
  if (records.empty()) throw std::invalid_argument("export_histogram: no records");
  if (n_buckets == 0) throw std::invalid_argument("export_histogram: n_buckets must be positive");
  double lo = 0, hi = 1;
  const bool normalized = std::all_of(records.begin(), records.end(), [](const auto& r) { return r.normalized_score.has_value(); });
  if (!normalized) {
    lo = hi = records.front().raw_score;
    for (const auto& r : records) {
      lo = std::min(lo, r.raw_score);
      hi = std::max(hi, r.raw_score);
    }
  }
  std::vector<HistogramBucket> out(n_buckets);
  for (std::size_t b = 0; b < n_buckets; ++b) out[b].bucket = b;
  for (const auto& r : records) {
    const double s = normalized ? *r.normalized_score : (hi > lo ? (r.raw_score - lo) / (hi - lo) : 0.0);
    const std::size_t b = std::min(n_buckets - 1, std::size_t(std::max(0.0, s) * double(n_buckets)));
    (r.label == Label::abnormal ? out[b].abnormal_count : out[b].normal_count) += 1;
  }
  return out;
}

/// Shared mass of the two class-conditional histograms, in [0, 1].
inline double histogram_overlap(std::span<const HistogramBucket> buckets) {
  double n = 0, a = 0;
  for (const auto& b : buckets) {
    n += double(b.normal_count);
    a += double(b.abnormal_count);
  }
  if (n == 0 || a == 0) return 0.0;
  double overlap = 0;
  for (const auto& b : buckets) overlap += std::min(double(b.normal_count) / n, double(b.abnormal_count) / a);
  return overlap;
}

inline void write_histogram_csv(std::ostream& os, std::span<const HistogramBucket> buckets) {
  os << "bucket,normal_count,abnormal_count\n";
  for (const auto& b : buckets) os << b.bucket << ',' << b.normal_count << ',' << b.abnormal_count << '\n';
}

// Latents.

struct LatentRow {
  std::string sample_id;
  Label label = Label::unknown;
  std::vector<double> features;  // spatial mean of each latent channel
};

template <typename T>
std::vector<LatentRow> export_latents(OcrGan<T>& model, const std::vector<Sample<T>>& samples, std::size_t batch_size = 16) {
  if (samples.empty()) throw std::invalid_argument("export_latents: empty sample set");
  std::vector<LatentRow> out;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t end = std::min(samples.size(), start + batch_size);
    std::vector<Tensor<T>> items;
    for (std::size_t i = start; i < end; ++i) items.push_back(samples[i].image);
    const auto [score, latent] = discriminate(stack(items), model.discriminator);
    const std::size_t c = latent.dim(1), hw = latent.dim(2) * latent.dim(3);
    for (std::size_t i = start; i < end; ++i) {
      LatentRow row{samples[i].id, samples[i].label, std::vector<double>(c, 0.0)};
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (std::size_t k = 0; k < hw; ++k) acc += double(latent[((i - start) * c + ch) * hw + k]);
        row.features[ch] = acc / double(hw);
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

inline void write_latents_csv(std::ostream& os, std::span<const LatentRow> rows) {
  os << "sample_id,label";
  const std::size_t d = rows.empty() ? 0 : rows.front().features.size();
  for (std::size_t k = 0; k < d; ++k) os << ",f" << k;
  os << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.sample_id << ',' << to_string(r.label);
    for (double v : r.features) os << ',' << v;
    os << '\n';
  }
}

// Frequency profile.

struct RadialBin {
  double radius = 0;          // centre of the bin's integer-radius range
  double mean_amplitude = 0;  // mean over pixels in the bin, then over images
  double total_amplitude = 0; // summed amplitude in the bin, summed over images
  std::size_t count = 0;      // spectrum pixels per image falling in the bin
};

struct FrequencyProfile {
  std::vector<RadialBin> bins;
  Label set_label = Label::unknown;
  std::size_t n_images = 0;
};

/// Centered amplitude spectrum of the channel-mean image with intensities
/// mapped to [0, 1]. Normalized by its DC amplitude when that is nonzero.
template <typename T>
cv::Mat amplitude_spectrum(const Tensor<T>& image) {
  if (image.rank() != 3) throw ShapeError("amplitude_spectrum: expected (C, H, W)");
  const int c = int(image.dim(0)), h = int(image.dim(1)), w = int(image.dim(2));
  cv::Mat gray(h, w, CV_64F);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int ch = 0; ch < c; ++ch) acc += double(image(std::size_t(ch), std::size_t(y), std::size_t(x)));
      gray.at<double>(y, x) = (acc / c + 1.0) / 2.0;
    }
  cv::Mat spec;
  cv::dft(gray, spec, cv::DFT_COMPLEX_OUTPUT);
  cv::Mat planes[2];
  cv::split(spec, planes);
  cv::Mat amp;
  cv::magnitude(planes[0], planes[1], amp);
  const double dc = amp.at<double>(0, 0);
  if (dc > 1e-12) amp /= dc;
  // Shift so the zero frequency sits at (h/2, w/2).
  cv::Mat shifted(h, w, CV_64F);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) shifted.at<double>((y + h / 2) % h, (x + w / 2) % w) = amp.at<double>(y, x);
  return shifted;
}

/// Radial profile: integer radius r = round(distance from centre), r in
/// [0, r_max], grouped into n_bins equal ranges.
template <typename T>
FrequencyProfile frequency_energy_profile(std::span<const Tensor<T>> images, std::size_t n_bins,
                                          Label set_label = Label::unknown) {
  if (images.empty()) throw std::invalid_argument("frequency_energy_profile: no images");
  if (n_bins == 0) throw std::invalid_argument("frequency_energy_profile: n_bins must be positive");
  const Shape shape = images.front().shape();
  if (shape.size() != 3) throw ShapeError("frequency_energy_profile: expected (C, H, W) images");
  const int h = int(shape[1]), w = int(shape[2]);
  const int r_max = int(std::lround(std::hypot(h / 2, w / 2)));
  const std::size_t bins = std::min<std::size_t>(n_bins, std::size_t(r_max + 1));
  auto bin_of = [&](int r) { return std::size_t(r) * bins / std::size_t(r_max + 1); };

  FrequencyProfile out;
  out.set_label = set_label;
  out.n_images = images.size();
  out.bins.resize(bins);
  std::vector<int> bin_of_pixel(std::size_t(h * w));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int r = int(std::lround(std::hypot(y - h / 2, x - w / 2)));
      const std::size_t b = bin_of(r);
      bin_of_pixel[std::size_t(y * w + x)] = int(b);
      ++out.bins[b].count;
    }
  for (std::size_t b = 0; b < bins; ++b) {
    const double r_lo = double(b * std::size_t(r_max + 1)) / double(bins);
    const double r_hi = double((b + 1) * std::size_t(r_max + 1)) / double(bins);
    out.bins[b].radius = (r_lo + r_hi - 1.0) / 2.0;
  }
  for (const auto& img : images) {
    if (img.shape() != shape)
      throw ShapeError("frequency_energy_profile: image shape " + shape_str(img.shape()) + " differs from " + shape_str(shape));
    const cv::Mat amp = amplitude_spectrum(img);
    std::vector<double> sums(bins, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) sums[std::size_t(bin_of_pixel[std::size_t(y * w + x)])] += amp.at<double>(y, x);
    for (std::size_t b = 0; b < bins; ++b) {
      out.bins[b].total_amplitude += sums[b];
      if (out.bins[b].count) out.bins[b].mean_amplitude += sums[b] / double(out.bins[b].count);
    }
  }
  for (auto& b : out.bins) b.mean_amplitude /= double(images.size());
  return out;
}

/// Fraction of bins in the upper half of the radius range where the abnormal
/// profile exceeds the normal one.
inline double upper_band_dominance(const FrequencyProfile& normal, const FrequencyProfile& abnormal) {
  if (normal.bins.size() != abnormal.bins.size()) throw std::invalid_argument("upper_band_dominance: bin count mismatch");
  const std::size_t start = normal.bins.size() / 2;
  std::size_t wins = 0, total = 0;
  for (std::size_t b = start; b < normal.bins.size(); ++b, ++total)
    if (abnormal.bins[b].mean_amplitude > normal.bins[b].mean_amplitude) ++wins;
  return total ? double(wins) / double(total) : 0.0;
}

inline void write_profile_csv(std::ostream& os, const FrequencyProfile& p) {
  os << "radius,mean_amplitude,total_amplitude,count\n" << std::setprecision(12);
  for (const auto& b : p.bins) os << b.radius << ',' << b.mean_amplitude << ',' << b.total_amplitude << ',' << b.count << '\n';
}

inline void write_profile_comparison_csv(std::ostream& os, const FrequencyProfile& normal, const FrequencyProfile& abnormal) {
  if (normal.bins.size() != abnormal.bins.size()) throw std::invalid_argument("profile comparison: bin count mismatch");
  os << "radius,normal_mean_amplitude,abnormal_mean_amplitude\n" << std::setprecision(12);
  for (std::size_t b = 0; b < normal.bins.size(); ++b)
    os << normal.bins[b].radius << ',' << normal.bins[b].mean_amplitude << ',' << abnormal.bins[b].mean_amplitude << '\n';
}

/// Line plot of two profiles on a log amplitude axis (normal blue, abnormal red).
inline cv::Mat render_profile_plot(const FrequencyProfile& normal, const FrequencyProfile& abnormal, int width = 640,
                                   int height = 400) {
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const int margin = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* p : {&normal, &abnormal})
    for (const auto& b : p->bins)
      if (b.mean_amplitude > 0) {
        lo = std::min(lo, std::log10(b.mean_amplitude));
        hi = std::max(hi, std::log10(b.mean_amplitude));
      }
  if (!(hi > lo)) hi = lo + 1;
  cv::rectangle(img, {margin, margin}, {width - margin, height - margin}, cv::Scalar(0, 0, 0));
  auto draw = [&](const FrequencyProfile& p, const cv::Scalar& color) {
    const std::size_t n = p.bins.size();
    std::vector<cv::Point> pts;
    for (std::size_t b = 0; b < n; ++b) {
      const double v = p.bins[b].mean_amplitude > 0 ? std::log10(p.bins[b].mean_amplitude) : lo;
      const int x = margin + int(double(b) / double(std::max<std::size_t>(1, n - 1)) * (width - 2 * margin));
      const int y = height - margin - int((v - lo) / (hi - lo) * (height - 2 * margin));
      pts.emplace_back(x, y);
    }
    cv::polylines(img, pts, false, color, 2, cv::LINE_AA);
  };
  draw(normal, cv::Scalar(200, 80, 0));
  draw(abnormal, cv::Scalar(0, 0, 220));
  cv::putText(img, "normal", {margin + 10, margin + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(200, 80, 0));
  cv::putText(img, "abnormal", {margin + 10, margin + 40}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 220));
  cv::putText(img, "radius", {width / 2 - 20, height - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0));
  return img;
}

// Report.

struct EvalReport {
  double auc = 0;
  std::size_t n_normal = 0, n_abnormal = 0;
  std::vector<ScoreRecord> records;
  std::vector<RocPoint> roc;
};

inline EvalReport make_report(std::vector<ScoreRecord> records) {
  EvalReport rep;
  std::vector<double> s;
  std::vector<Label> l;
  for (const auto& r : records) {
    if (r.label == Label::normal) ++rep.n_normal;
    if (r.label == Label::abnormal) ++rep.n_abnormal;
    s.push_back(eval_detail::ranking_score(r));
    l.push_back(r.label);
  }
  rep.auc = compute_auc(s, l);
  rep.roc = roc_curve(s, l);
  rep.records = std::move(records);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"auc", r.auc}, {"n_normal", r.n_normal}, {"n_abnormal", r.n_abnormal}, {"n_roc_points", r.roc.size()}};
}

inline void write_roc_csv(std::ostream& os, std::span<const RocPoint> roc) {
  os << "threshold,fpr,tpr\n" << std::setprecision(12);
  for (const auto& p : roc) os << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
}

}  // namespace ocrgan
