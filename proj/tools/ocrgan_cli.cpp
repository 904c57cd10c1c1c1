// ocrgan: command-line entry point.
//
//   ocrgan make-synthetic --out DIR [--seed S] [--n-train N] ...
//   ocrgan train [--config FILE] [--set key=value]... [--out DIR] [--resume CKPT]
//   ocrgan eval --checkpoint CKPT [--set key=value]... [--out DIR]
//   ocrgan score --checkpoint CKPT --input DIR [--out DIR]
//   ocrgan analyze-frequency [--normal DIR --abnormal DIR] [--bins N] [--out DIR]
//   ocrgan decompose --input IMAGE [--n N] [--out DIR]

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ocrgan/ocrgan.hpp"

namespace {

using namespace ocrgan;

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", o.config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.overrides, "Override a config key, key=value (repeatable)");
  }
  cmd->add_option("--out", o.out, "Output directory");
}

RunConfig resolve_config(const CommonOptions& o, RunConfig base = {}) {
  RunConfig cfg = o.config_path.empty() ? base : load_config_file(o.config_path, base);
  for (const auto& kv : o.overrides) apply_override(cfg, kv);
  if (!o.out.empty()) cfg.output_dir = o.out;
  validate(cfg);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

fs::path prepare_out(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  write_text(dir / "config.txt", to_text(cfg));
  return dir;
}

template <typename Fn>
void write_stream(const fs::path& path, Fn&& fn) {
  std::ofstream out(path);
  fn(out);
  if (!out) throw DataError("cannot write " + path.string());
}

/// Images under `dir` (recursive), sorted, labelled `label`.
std::vector<Sample<float>> load_image_tree(const fs::path& dir, std::size_t size, std::size_t channels, Label label) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no images found in " + dir.string());
  std::vector<Sample<float>> out;
  for (const auto& f : files)
    out.push_back({load_image<float>(f, size, channels), label, "", fs::relative(f, dir).generic_string()});
  return out;
}

int run_make_synthetic(const SyntheticOptions& opt, const std::string& out) {
  const auto manifest = make_synthetic_dataset(out, opt);
  std::cout << "wrote " << manifest.size() << " images to " << (fs::path(out) / opt.category).string() << '\n';
  return 0;
}

int run_train(const CommonOptions& o, const std::string& resume) {
  RunConfig cfg = resolve_config(o);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const auto result = train<float>(cfg, from, &std::cout);
  std::cout << "trained " << result.steps << " steps; checkpoint " << result.final_checkpoint.string() << '\n';
  return 0;
}

int run_eval(const CommonOptions& o, const std::string& checkpoint, std::size_t buckets) {
  auto [stored, model] = load_model<float>(checkpoint);
  CommonOptions opts = o;
  if (opts.out.empty()) opts.out = (fs::path(stored.output_dir) / "eval").string();
  const RunConfig cfg = resolve_config(opts, stored);
  const fs::path out = prepare_out(cfg.output_dir, cfg);

  const auto samples = load_folder_dataset<float>(
      {cfg.data_root, cfg.category, Split::test, std::size_t(cfg.image_size), std::size_t(cfg.channels)});
  const EvalReport report = make_report(score_dataset(*model, samples, cfg.score_lambda));
  write_stream(out / "scores.csv", [&](std::ostream& os) { write_scores_csv(os, report.records); });
  write_stream(out / "roc.csv", [&](std::ostream& os) { write_roc_csv(os, report.roc); });
  const auto hist = export_histogram(report.records, buckets);
  write_stream(out / "histogram.csv", [&](std::ostream& os) { write_histogram_csv(os, hist); });
  const auto latents = export_latents(*model, samples);
  write_stream(out / "latents.csv", [&](std::ostream& os) { write_latents_csv(os, latents); });
  auto json = to_json(report);
  json["histogram_overlap"] = histogram_overlap(hist);
  json["checkpoint"] = checkpoint;
  write_text(out / "report.json", json.dump(2) + "\n");
  std::cout << "AUC " << report.auc << " (" << report.n_normal << " normal, " << report.n_abnormal << " abnormal); report "
            << (out / "report.json").string() << '\n';
  return 0;
}

int run_score(const CommonOptions& o, const std::string& checkpoint, const std::string& input) {
  auto [stored, model] = load_model<float>(checkpoint);
  CommonOptions opts = o;
  if (opts.out.empty()) opts.out = (fs::path(stored.output_dir) / "score").string();
  const RunConfig cfg = resolve_config(opts, stored);
  const fs::path out = prepare_out(cfg.output_dir, cfg);
  const auto samples = load_image_tree(input, std::size_t(cfg.image_size), std::size_t(cfg.channels), Label::unknown);
  const auto records = score_dataset(*model, samples, cfg.score_lambda);
  write_stream(out / "scores.csv", [&](std::ostream& os) { write_scores_csv(os, records); });
  std::cout << "scored " << records.size() << " images; " << (out / "scores.csv").string() << '\n';
  return 0;
}

int run_analyze(const CommonOptions& o, const std::string& normal_dir, const std::string& abnormal_dir, std::size_t bins) {
  CommonOptions opts = o;
  if (opts.out.empty()) opts.out = "frequency";
  const RunConfig cfg = resolve_config(opts);
  const fs::path out = prepare_out(cfg.output_dir, cfg);
  const std::size_t size = std::size_t(cfg.image_size), ch = std::size_t(cfg.channels);

  std::vector<Tensor<float>> normal, abnormal;
  if (normal_dir.empty() != abnormal_dir.empty()) throw CLI::ValidationError("--normal and --abnormal go together");
  if (!normal_dir.empty()) {
    for (auto& s : load_image_tree(normal_dir, size, ch, Label::normal)) normal.push_back(std::move(s.image));
    for (auto& s : load_image_tree(abnormal_dir, size, ch, Label::abnormal)) abnormal.push_back(std::move(s.image));
  } else {
    for (auto& s : load_folder_dataset<float>({cfg.data_root, cfg.category, Split::test, size, ch}))
      (s.label == Label::normal ? normal : abnormal).push_back(std::move(s.image));
  }
  if (normal.empty() || abnormal.empty()) throw DataError("analyze-frequency: need both normal and abnormal images");
  const auto pn = frequency_energy_profile<float>(normal, bins, Label::normal);
  const auto pa = frequency_energy_profile<float>(abnormal, bins, Label::abnormal);
  write_stream(out / "profile_normal.csv", [&](std::ostream& os) { write_profile_csv(os, pn); });
  write_stream(out / "profile_abnormal.csv", [&](std::ostream& os) { write_profile_csv(os, pa); });
  write_stream(out / "profile_comparison.csv", [&](std::ostream& os) { write_profile_comparison_csv(os, pn, pa); });
  if (!cv::imwrite((out / "profile.png").string(), render_profile_plot(pn, pa)))
    throw DataError("cannot write " + (out / "profile.png").string());
  const double dominance = upper_band_dominance(pn, pa);
  nlohmann::json summary{{"n_normal", normal.size()}, {"n_abnormal", abnormal.size()}, {"bins", pn.bins.size()},
                         {"upper_band_dominance", dominance}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "abnormal exceeds normal in " << dominance * 100 << "% of upper-half bins\n";
  return 0;
}

int run_decompose(const CommonOptions& o, const std::string& input, std::size_t n, std::size_t channels) {
  CommonOptions opts = o;
  if (opts.out.empty()) opts.out = "bands";
  const fs::path out = opts.out;
  fs::create_directories(out);
  cv::Mat mat = cv::imread(input, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (mat.empty()) throw DataError("unreadable image: " + input);
  if (channels == 3) cv::cvtColor(mat, mat, cv::COLOR_BGR2RGB);
  const auto image = mat_to_tensor<float>(mat);
  const auto bands = decompose(image, n);
  for (std::size_t k = 0; k < bands.size(); ++k) save_image(out / ("band_" + std::to_string(k + 1) + ".png"), bands[k]);
  const auto recon = recompose(bands);
  save_image(out / "recomposed.png", recon);
  const double err = max_abs_diff(recon, image);
  write_text(out / "decompose.json", nlohmann::json{{"input", input}, {"n_branches", n}, {"max_abs_error", err}}.dump(2) + "\n");
  std::cout << "wrote " << bands.size() << " bands to " << out.string() << " (max recomposition error " << err << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-decoupled GAN anomaly detection toolkit"};
  app.require_subcommand(1);

  SyntheticOptions syn;
  std::string syn_out;
  auto* make = app.add_subcommand("make-synthetic", "Write the procedural defect dataset");
  make->add_option("--out", syn_out, "Dataset root")->required();
  make->add_option("--seed", syn.seed, "Random seed");
  make->add_option("--n-train", syn.n_train, "Normal training images")->check(CLI::PositiveNumber);
  make->add_option("--n-test-normal", syn.n_test_normal, "Normal test images")->check(CLI::PositiveNumber);
  make->add_option("--n-test-abnormal", syn.n_test_abnormal, "Defective test images")->check(CLI::PositiveNumber);
  make->add_option("--image-size", syn.image_size, "Side length in pixels")->check(CLI::Range(16, 4096));
  make->add_option("--category", syn.category, "Category folder name");

  CommonOptions train_opts;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  add_common(train_cmd, train_opts);
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  CommonOptions eval_opts;
  std::string eval_ckpt;
  std::size_t buckets = 20;
  auto* eval_cmd = app.add_subcommand("eval", "Score the test split and write a report");
  add_common(eval_cmd, eval_opts);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--buckets", buckets, "Histogram buckets")->check(CLI::PositiveNumber);

  CommonOptions score_opts;
  std::string score_ckpt, score_input;
  auto* score_cmd = app.add_subcommand("score", "Score every image under a folder");
  add_common(score_cmd, score_opts);
  score_cmd->add_option("--checkpoint", score_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--input", score_input, "Image folder")->required()->check(CLI::ExistingDirectory);

  CommonOptions freq_opts;
  std::string normal_dir, abnormal_dir;
  std::size_t bins = 32;
  auto* freq_cmd = app.add_subcommand("analyze-frequency", "Radial amplitude spectra of normal vs abnormal images");
  add_common(freq_cmd, freq_opts);
  freq_cmd->add_option("--normal", normal_dir, "Folder of normal images")->check(CLI::ExistingDirectory);
  freq_cmd->add_option("--abnormal", abnormal_dir, "Folder of abnormal images")->check(CLI::ExistingDirectory);
  freq_cmd->add_option("--bins", bins, "Radial bins")->check(CLI::PositiveNumber);

  CommonOptions dec_opts;
  std::string dec_input;
  std::size_t dec_n = 2, dec_channels = 3;
  auto* dec_cmd = app.add_subcommand("decompose", "Write the frequency bands of one image");
  add_common(dec_cmd, dec_opts, false);
  dec_cmd->add_option("--input", dec_input, "Image file")->required()->check(CLI::ExistingFile);
  dec_cmd->add_option("--n", dec_n, "Number of bands")->check(CLI::Range(2, 8));
  dec_cmd->add_option("--channels", dec_channels, "1 or 3")->check(CLI::IsMember({1, 3}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (*make) return run_make_synthetic(syn, syn_out);
    if (*train_cmd) return run_train(train_opts, resume);
    if (*eval_cmd) return run_eval(eval_opts, eval_ckpt, buckets);
    if (*score_cmd) return run_score(score_opts, score_ckpt, score_input);
    if (*freq_cmd) return run_analyze(freq_opts, normal_dir, abnormal_dir, bins);
    if (*dec_cmd) return run_decompose(dec_opts, dec_input, dec_n, dec_channels);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
