// Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.
//
//   acceptance --workdir DIR [--only 1,2,5]
//
// The same lines are written to DIR/report.txt.

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "ocrgan/ocrgan.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace ocrgan;
using ocrgan::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

template <typename T>
double max_diff(const Tensor<T>& a, const Tensor<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

// Shared state for the synthetic-dataset criteria.
struct SyntheticSetup {
  fs::path root;
  std::vector<Tensor<float>> train;
  std::vector<Sample<float>> test;
};

RunConfig synthetic_config(const fs::path& root) {
  RunConfig c;
  c.data_root = root.string();
  c.category = "synthetic";
  c.image_size = 64;
  c.channels = 3;
  c.n_branches = 2;
  c.base_channels = 16;
  c.batch_size = 16;
  c.seed = 0;
  return c;
}

constexpr long kEndToEndSteps = 1200;
constexpr double kEndToEndBudget = 20 * 60;
constexpr long kAblationSteps = kEndToEndSteps;
constexpr double kAblationTie = 0.02;

struct TrainedRun {
  double auc = 0;
  std::vector<ScoreRecord> records;
  double seconds = 0;
  long steps = 0;
};

TrainedRun train_and_score(const RunConfig& cfg, const SyntheticSetup& data) {
  Trainer<float> trainer(cfg, data.train);
  TrainedRun out;
  const auto t0 = Clock::now();
  while (trainer.step() < cfg.steps) trainer.train_step();
  out.seconds = seconds_since(t0);
  out.steps = trainer.step();
  out.records = score_dataset(trainer.model(), data.test, cfg.score_lambda);
  out.auc = compute_auc(out.records);
  return out;
}

std::vector<StepMetrics> read_metrics(const fs::path& log) {
  std::vector<StepMetrics> out;
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    StepMetrics m;
    m.step = j.at("step");
    m.epoch = j.at("epoch");
    m.loss_D = j.at("loss_D");
    m.loss_G = j.at("loss_G");
    m.L_con = j.at("L_con");
    m.L_adv = j.at("L_adv");
    m.L_lat = j.at("L_lat");
    out.push_back(m);
  }
  return out;
}

double metric_gap(const StepMetrics& a, const StepMetrics& b) {
  if (a.step != b.step || a.epoch != b.epoch) return std::numeric_limits<double>::infinity();
  return std::max({std::abs(a.loss_D - b.loss_D), std::abs(a.loss_G - b.loss_G), std::abs(a.L_con - b.L_con),
                   std::abs(a.L_adv - b.L_adv), std::abs(a.L_lat - b.L_lat)});
}

// 1. Pyramid exactness.
Outcome pyramid_exactness() {
  Rng rng(101);
  double worst = 0;
  const auto t0 = Clock::now();
  for (int i = 0; i < 50; ++i) {
    const std::size_t c = i % 2 ? 3 : 1;
    const auto h = std::size_t(rng.uniform_int(32, 256)), w = std::size_t(rng.uniform_int(32, 256));
    const auto img = random_tensor<float>({c, h, w}, rng);
    for (std::size_t n : {2u, 3u}) worst = std::max(worst, double(max_abs_diff(recompose(decompose(img, n)), img)));
  }
  const double elapsed = seconds_since(t0);
  return {worst < 1e-5 && elapsed < 10.0,
          "max |recompose(decompose(I,N)) - I| = " + fmt(worst) + " over 50 images x N in {2,3}; " + fmt(elapsed, 3) +
              " s"};
}

// 2. Convolution oracles.
Outcome convolution_oracles() {
  Rng rng(202);
  const int cases = 25;
  double blur_err = 0, down_err = 0, up_err = 0;
  for (int i = 0; i < cases; ++i) {
    const std::size_t c = i % 2 ? 3 : 1;
    const auto h = std::size_t(rng.uniform_int(6, 48)), w = std::size_t(rng.uniform_int(6, 48));
    const auto img = random_tensor<double>({c, h, w}, rng);
    blur_err = std::max(blur_err, max_diff(blur(img), oracle::oracle_conv(img, 1.0, oracle::pad_symmetric)));
    down_err = std::max(down_err, max_diff(pyr_down(img), oracle::oracle_pyr_down(img)));
    const auto sh = std::size_t(rng.uniform_int(3, 24)), sw = std::size_t(rng.uniform_int(3, 24));
    const std::size_t th = 2 * sh - std::size_t(rng.uniform_int(0, 1)), tw = 2 * sw - std::size_t(rng.uniform_int(0, 1));
    const auto small = random_tensor<double>({c, sh, sw}, rng);
    up_err = std::max(up_err, max_diff(pyr_up(small, {th, tw}), oracle::oracle_pyr_up(small, th, tw)));
  }
  const double worst = std::max({blur_err, down_err, up_err});
  return {worst < 1e-6, std::to_string(cases) + " cases each; max error blur " + fmt(blur_err) + ", pyr_down " +
                            fmt(down_err) + ", pyr_up " + fmt(up_err)};
}

// 3. Channel selection closure and gradients.
Outcome channel_selection_checks() {
  Rng rng(303);
  double sum_err = 0, grad_rel = 0;
  for (std::size_t n : {2u, 3u}) {
    auto p = oracle::random_params(n, 4, 3, rng);
    std::vector<Tensor<double>> maps, proj;
    for (std::size_t k = 0; k < n; ++k) {
      maps.push_back(random_tensor<double>({2, 4, 3, 3}, rng));
      proj.push_back(random_tensor<double>({2, 4, 3, 3}, rng));
    }
    {
      std::vector<Var<double>> vars;
      for (auto& m : maps) vars.emplace_back(m, false);
      const auto r = attend(vars, p);
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t ch = 0; ch < 4; ++ch) {
          double s = 0;
          for (std::size_t k = 0; k < n; ++k) s += r.attention[k].value()[b * 4 + ch];
          sum_err = std::max(sum_err, std::abs(s - 1.0));
        }
    }
    auto objective = [&] {
      std::vector<Var<double>> vars;
      for (auto& m : maps) vars.emplace_back(m, false);
      const auto r = attend(vars, p);
      double acc = 0;
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < proj[k].size(); ++i) acc += proj[k][i] * r.augmented[k].value()[i];
      return acc;
    };
    std::vector<Var<double>> vars;
    for (auto& m : maps) vars.emplace_back(m, true);
    nn::Registry<double> reg;
    p.collect("cs", reg);
    reg.zero_grad();
    const auto r = attend(vars, p);
    Var<double> joined = r.augmented[0];
    Tensor<double> seed = proj[0];
    for (std::size_t k = 1; k < n; ++k) {
      joined = ag::concat_channels(joined, r.augmented[k]);
      seed = ag::concat_channels(Var<double>(seed), Var<double>(proj[k])).value();
    }
    ag::backward(joined, &seed);
    double num2 = 0, den2 = 0;
    auto compare = [&](Tensor<double>& x, const Tensor<double>& g) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double fd = ocrgan::testing::central_difference<double>(x, i, 1e-4, objective);
        num2 += (fd - g[i]) * (fd - g[i]);
        den2 += fd * fd;
      }
    };
    for (std::size_t k = 0; k < n; ++k) compare(maps[k], vars[k].grad());
    for (auto& np : reg.params) compare(np.var.mutable_value(), np.var.grad());
    grad_rel = std::max(grad_rel, std::sqrt(num2 / den2));
  }
  return {sum_err < 1e-6 && grad_rel < 1e-4,
          "max |sum attention - 1| = " + fmt(sum_err) + "; gradient relative error " + fmt(grad_rel) +
              " (C=4, d=3, float64, step 1e-4, N in {2,3})"};
}

// 4. Loss and score algebra.
Outcome loss_and_score_algebra() {
  Rng rng(404);
  double worst = 0;
  bool affine_ok = true, auc_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_tensor<float>({2, 3, 8, 8}, rng), b = random_tensor<float>({2, 3, 8, 8}, rng);
    double l1 = 0, l2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = double(a[i]) - double(b[i]);
      l1 += std::abs(d);
      l2 += d * d;
    }
    worst = std::max(worst, std::abs(content_loss(a, b) - l1 / double(a.size())));
    worst = std::max(worst, std::abs(latent_loss(a, b) - l2 / double(a.size())));

    std::vector<double> real(5), recon(5), forged(5);
    double mr = 0, mh = 0, mf = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      mr += (real[i] = rng.uniform(-5, 5)) / 5;
      mh += (recon[i] = rng.uniform(-5, 5)) / 5;
      mf += (forged[i] = rng.uniform(-5, 5)) / 5;
    }
    worst = std::max(worst, std::abs(discriminator_loss(real, recon, forged) - (mr - mh - mf)));
    worst = std::max(worst, std::abs(generator_adv_loss(recon) - mh));
    const LossTerms terms{rng.uniform(0, 1), rng.uniform(-5, 5), rng.uniform(0, 1)};
    worst = std::max(worst, std::abs(total_generator_loss(terms, LossWeights{}) -
                                     (50 * terms.con + terms.adv + terms.lat)));
    const double ce = rng.uniform(0, 1), le = rng.uniform(0, 1);
    worst = std::max(worst, std::abs(anomaly_score(ce, le, 0.9) - (0.9 * ce + 0.1 * le)));

    std::vector<double> s(12);
    for (auto& v : s) v = rng.uniform(-10, 10);
    const auto norm = normalize_scores(s);
    const double lo = *std::min_element(s.begin(), s.end()), hi = *std::max_element(s.begin(), s.end());
    for (std::size_t i = 0; i < s.size(); ++i) worst = std::max(worst, std::abs(norm[i] - (s[i] - lo) / (hi - lo)));
    const double scale = rng.uniform(0.1, 10), shift = rng.uniform(-100, 100);
    std::vector<double> moved(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) moved[i] = scale * s[i] + shift;
    const auto norm2 = normalize_scores(moved);
    for (std::size_t i = 0; i < s.size(); ++i) affine_ok = affine_ok && std::abs(norm2[i] - norm[i]) < 1e-9;
  }
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = std::size_t(rng.uniform_int(2, 50));
    std::vector<double> s(n);
    std::vector<Label> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng.uniform_int(0, trial % 2 ? 6 : 100000));
      l[i] = rng.bernoulli(0.5) ? Label::abnormal : Label::normal;
    }
    l[0] = Label::normal;
    l[1] = Label::abnormal;
    auc_exact = auc_exact && compute_auc(s, l) == oracle::pairwise_auc(s, l);
  }
  return {worst < 1e-6 && affine_ok && auc_exact,
          "max oracle deviation " + fmt(worst) + "; affine invariance " + (affine_ok ? "holds" : "violated") +
              "; AUC == pairwise oracle on 100 sets: " + (auc_exact ? "yes" : "no")};
}

// 5. End-to-end synthetic run.
Outcome end_to_end(const SyntheticSetup& data, TrainedRun& run) {
  RunConfig cfg = synthetic_config(data.root);
  cfg.steps = kEndToEndSteps;
  run = train_and_score(cfg, data);

  std::vector<double> scores;
  std::vector<Label> labels;
  for (const auto& r : run.records) {
    scores.push_back(*r.normalized_score);
    labels.push_back(r.label);
  }
  const auto null = permutation_null(scores, labels, 1000, 7);
  const double bound = 0.5 + 3 * null.stddev;

  std::vector<Tensor<float>> normal, abnormal;
  for (const auto& s : data.test) (s.label == Label::normal ? normal : abnormal).push_back(s.image);
  const auto pn = frequency_energy_profile<float>(normal, 32, Label::normal);
  const auto pa = frequency_energy_profile<float>(abnormal, 32, Label::abnormal);
  const double dominance = upper_band_dominance(pn, pa);
  const double overlap = histogram_overlap(export_histogram(run.records, 20));

  const bool pass = run.steps <= 2000 && run.seconds <= kEndToEndBudget && run.auc >= 0.80 && run.auc > bound &&
                    dominance >= 0.8;
  return {pass, "AUC " + fmt(run.auc) + " after " + std::to_string(run.steps) + " steps in " + fmt(run.seconds, 4) +
                    " s; null 0.5 + 3 sd = " + fmt(bound) + "; abnormal > normal in " + fmt(100 * dominance, 3) +
                    "% of upper-half radial bins; histogram overlap " + fmt(overlap, 3)};
}

// 6. Ablation ordering.
Outcome ablation(const SyntheticSetup& data, const TrainedRun* full_seed0) {
  struct Variant {
    std::string name;
    std::function<void(RunConfig&)> apply;
  };
  const std::vector<Variant> variants{
      {"full", [](RunConfig&) {}},
      {"fd_only",
       [](RunConfig& c) {
         c.use_cs = false;
         c.cutout = c.cutpaste = false;
       }},
      {"baseline",
       [](RunConfig& c) {
         c.n_branches = 1;
         c.use_cs = false;
         c.cutout = c.cutpaste = false;
       }},
  };
  std::map<std::string, double> mean;
  std::string detail;
  for (const auto& v : variants) {
    std::vector<double> aucs;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
      if (v.name == "full" && seed == 0 && full_seed0) {
        aucs.push_back(full_seed0->auc);
        continue;
      }
      RunConfig cfg = synthetic_config(data.root);
      cfg.steps = kAblationSteps;
      cfg.seed = seed;
      v.apply(cfg);
      aucs.push_back(train_and_score(cfg, data).auc);
    }
    mean[v.name] = (aucs[0] + aucs[1] + aucs[2]) / 3.0;
    detail += v.name + " " + fmt(mean[v.name]) + " [" + fmt(aucs[0], 3) + ", " + fmt(aucs[1], 3) + ", " +
              fmt(aucs[2], 3) + "]; ";
  }
  const bool pass =
      mean["full"] >= mean["fd_only"] - kAblationTie && mean["fd_only"] >= mean["baseline"] - kAblationTie;
  return {pass, detail + std::to_string(kAblationSteps) + " steps per run, ties within " + fmt(kAblationTie)};
}

// 7. Determinism and resumption.
Outcome determinism_and_resume(const SyntheticSetup& data, const fs::path& work) {
  RunConfig cfg = synthetic_config(data.root);
  cfg.steps = 10;
  cfg.checkpoint_every = 5;
  cfg.output_dir = (work / "det_a").string();
  train<float>(cfg);
  cfg.output_dir = (work / "det_b").string();
  train<float>(cfg);
  const auto a = read_metrics(work / "det_a/metrics.jsonl");
  const auto b = read_metrics(work / "det_b/metrics.jsonl");
  bool identical = a.size() == 10 && b.size() == 10;
  for (std::size_t i = 0; identical && i < a.size(); ++i) identical = metric_gap(a[i], b[i]) == 0.0;

  RunConfig resume_cfg = cfg;
  resume_cfg.steps = 6;
  resume_cfg.checkpoint_every = 0;
  resume_cfg.output_dir = (work / "det_resume").string();
  fs::remove_all(resume_cfg.output_dir);
  const auto resumed = train<float>(resume_cfg, work / "det_a/checkpoints/step_0000005.ckpt");
  const double gap = resumed.last && a.size() >= 6 ? metric_gap(a[5], *resumed.last) : std::numeric_limits<double>::infinity();
  return {identical && gap <= 1e-5, std::string("10-step metric logs ") + (identical ? "identical" : "differ") +
                                        "; resumed step 6 max metric gap " + fmt(gap)};
}

// 8. Memorization.
Outcome memorization() {
  RunConfig cfg;
  cfg.image_size = 32;
  cfg.base_channels = 16;
  cfg.batch_size = 16;
  cfg.steps = 300;
  const auto mat = render_synthetic(0, Split::train, 0, DefectType::none, 32).image;
  cv::Mat rgb;
  cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
  const auto image = mat_to_tensor<float>(rgb);
  Trainer<float> trainer(cfg, std::vector<Tensor<float>>(16, image));
  const double first = trainer.train_step().L_con;
  long halved_at = -1;
  double last = first;
  while (trainer.step() < cfg.steps) {
    const auto m = trainer.train_step();
    last = m.L_con;
    if (halved_at < 0 && m.L_con <= 0.5 * first) halved_at = m.step;
  }
  return {halved_at > 0, "L_con step 1 " + fmt(first) + ", step 300 " + fmt(last) + "; halved at step " +
                             (halved_at > 0 ? std::to_string(halved_at) : std::string("never"))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory")->required();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };

  const fs::path work = workdir;
  fs::remove_all(work);
  fs::create_directories(work);

  std::ofstream summary(work / "report.txt");
  int failures = 0;
  auto report = [&](int k, const std::string& title, const std::function<Outcome()>& fn) {
    if (!wanted(k)) return;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " [" << k << "] " << title << ": " << o.detail << " ("
         << fmt(seconds_since(t0), 4) << " s)";
    std::cout << line.str() << std::endl;
    summary << line.str() << std::endl;
  };

  report(1, "pyramid exactness", pyramid_exactness);
  report(2, "convolution oracles", convolution_oracles);
  report(3, "channel selection closure and gradients", channel_selection_checks);
  report(4, "loss and score algebra", loss_and_score_algebra);

  SyntheticSetup data;
  if (wanted(5) || wanted(6) || wanted(7)) {
    data.root = work / "data";
    make_synthetic_dataset(data.root, SyntheticOptions{});
    for (auto& s : load_folder_dataset<float>({data.root, "synthetic", Split::train, 64, 3}))
      data.train.push_back(std::move(s.image));
    data.test = load_folder_dataset<float>({data.root, "synthetic", Split::test, 64, 3});
  }
  TrainedRun full;
  bool have_full = false;
  report(5, "end-to-end synthetic run", [&] {
    auto o = end_to_end(data, full);
    have_full = true;
    return o;
  });
  report(6, "ablation ordering", [&] { return ablation(data, have_full ? &full : nullptr); });
  report(7, "determinism and resumption", [&] { return determinism_and_resume(data, work); });
  report(8, "memorization", memorization);

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
