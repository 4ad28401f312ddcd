// Batch entry points: dataset synthesis, training with module toggles,
// evaluation, inference and PR-curve plotting.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rfn/config.hpp"
#include "rfn/image.hpp"
#include "rfn/model.hpp"
#include "rfn/pipeline.hpp"
#include "rfn/png_io.hpp"
#include "rfn/synthdata.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset = "desk";
  std::vector<std::string> sets;  // key=value overrides
};

rfn::RunConfig build_config(const CommonOpts& opts) {
  rfn::RunConfig cfg = rfn::preset_config(opts.preset);
  if (!opts.config_path.empty()) cfg = rfn::load_config(opts.config_path, cfg);
  for (const auto& kv : opts.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw rfn::ConfigError("--set expects key=value, got '" + kv + "'");
    rfn::set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  rfn::validate_config(cfg);
  return cfg;
}

std::string data_dir_or_env(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("RFN_DATA_DIR")) return env;
  throw rfn::ConfigError("no dataset directory: pass --data or set RFN_DATA_DIR");
}

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "flat key=value configuration file");
  cmd->add_option("--preset", opts.preset, "configuration preset: desk (default) or paper");
  cmd->add_option("--set", opts.sets, "override a config key, e.g. --set optim.lr=0.002");
}

int cmd_synth(const CommonOpts& common, long n, long seed, const std::string& out) {
  rfn::RunConfig cfg = build_config(common);
  if (n >= 0) rfn::set_config_key(cfg, "synth.n", std::to_string(n));
  if (seed >= 0) rfn::set_config_key(cfg, "seed", std::to_string(seed));
  rfn::validate_config(cfg);
  rfn::generate_dataset(rfn::synth_config(cfg), static_cast<int>(cfg.synth_n), out);
  std::cout << "wrote " << cfg.synth_n << " images to " << out << "\n";
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data, const std::string& out,
              int sff, int apr, int rescore) {
  rfn::RunConfig cfg = build_config(common);
  if (sff >= 0) cfg.toggle_sff = sff != 0;
  if (apr >= 0) cfg.toggle_apr = apr != 0;
  if (rescore >= 0) cfg.toggle_rescore = rescore != 0;
  rfn::validate_config(cfg);

  auto dataset = rfn::load_dataset(data_dir_or_env(data));
  rfn::Trainer<Scalar> trainer(cfg, out);
  trainer.train(dataset);
  std::cout << "checkpoint: " << (fs::path(out) / "checkpoint.rfn").string() << "\n"
            << "loss log:   " << (fs::path(out) / "loss.csv").string() << "\n";
  return 0;
}

// Architecture keys are pinned by the checkpoint; attempting to override one
// with a different value is a configuration error naming the key.
rfn::RunConfig checkpoint_config_with_overrides(const rfn::CheckpointData& data,
                                                const CommonOpts& common) {
  rfn::RunConfig cfg = data.config;
  for (const auto& kv : common.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw rfn::ConfigError("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq);
    std::string value = kv.substr(eq + 1);
    if (key.rfind("model.", 0) == 0 || key.rfind("anchors.", 0) == 0) {
      rfn::RunConfig probe = cfg;
      rfn::set_config_key(probe, key, value);
      if (rfn::serialize_config(probe) != rfn::serialize_config(cfg))
        throw rfn::ConfigError("checkpoint/config mismatch on key '" + key +
                               "': architecture keys are fixed by the checkpoint");
      continue;
    }
    rfn::set_config_key(cfg, key, value);
  }
  rfn::validate_config(cfg);
  return cfg;
}

int cmd_eval(const CommonOpts& common, const std::string& ckpt_path, const std::string& data,
             double iou, const std::string& out) {
  auto data_ckpt = rfn::load_checkpoint_data(ckpt_path);
  rfn::RunConfig cfg = checkpoint_config_with_overrides(data_ckpt, common);
  if (iou > 0) cfg.eval_iou = iou;
  auto model = rfn::load_checkpoint<Scalar>(ckpt_path);
  model->config() = cfg;

  auto dataset = rfn::load_dataset(data_dir_or_env(data));
  int threads = cfg.threads > 0 ? static_cast<int>(cfg.threads)
                                : static_cast<int>(std::thread::hardware_concurrency());
  rfn::EvalReport rep = rfn::run_eval(*model, dataset, cfg.eval_iou, threads);

  std::ostringstream text;
  text << std::fixed << std::setprecision(2);
  text << "Precision: " << rep.metrics.precision * 100.0 << "%\n";
  text << "Recall: " << rep.metrics.recall * 100.0 << "%\n";
  text << "F-measure: " << rep.metrics.f_measure * 100.0 << "%\n";
  text << "tp=" << rep.tp << " fp=" << rep.fp << " fn=" << rep.fn << "\n";
  for (size_t i = 0; i < rep.count_thresholds.size(); ++i)
    text << "matched@" << rep.count_thresholds[i] << ": " << rep.matched_counts[i] << "\n";
  std::cout << text.str();

  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream metrics(fs::path(out) / "metrics.txt");
    metrics << text.str();
    rfn::write_pr_csv(rep.pr, (fs::path(out) / "pr_curve.csv").string());
    rfn::write_matched_counts_csv(rep.count_thresholds, rep.matched_counts,
                                  (fs::path(out) / "matched_counts.csv").string());
    std::cout << "reports under " << out << "\n";
  }
  return 0;
}

int cmd_infer(const CommonOpts& common, const std::string& ckpt_path, const std::string& input,
              const std::string& out, bool overlay) {
  auto data_ckpt = rfn::load_checkpoint_data(ckpt_path);
  rfn::RunConfig cfg = checkpoint_config_with_overrides(data_ckpt, common);
  auto model = rfn::load_checkpoint<Scalar>(ckpt_path);
  model->config() = cfg;

  std::vector<fs::path> inputs;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(input);
  }
  if (inputs.empty()) throw std::runtime_error("infer: no .png inputs under " + input);

  fs::create_directories(out);
  int failures = 0;
  for (const auto& path : inputs) {
    rfn::ImageU8 img;
    try {
      img = rfn::read_png(path.string());
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << path << ": " << e.what() << "\n";
      ++failures;
      continue;
    }
    auto tensor = rfn::image_to_tensor<Scalar>(img);
    auto dets = rfn::detect(*model, tensor);

    std::string stem = path.stem().string();
    std::ofstream res(fs::path(out) / ("res_" + stem + ".txt"));
    for (const auto& d : dets) {
      for (int k = 0; k < 4; ++k)
        res << static_cast<long>(std::lround(d.box[k].x)) << ','
            << static_cast<long>(std::lround(d.box[k].y)) << ',';
      res << d.overall << '\n';
    }
    if (overlay) {
      rfn::ImageU8 vis = img;
      for (const auto& d : dets) rfn::draw_quad(vis, d.box, 255, 32, 32);
      rfn::write_png(vis, (fs::path(out) / (stem + "_overlay.png")).string());
    }
  }
  if (failures == static_cast<int>(inputs.size()))
    throw std::runtime_error("infer: all inputs unreadable");
  std::cout << "results for " << (inputs.size() - static_cast<size_t>(failures)) << " image(s) in "
            << out << "\n";
  return 0;
}

int cmd_plot_pr(const std::string& csv_path, const std::string& out_path) {
  std::ifstream in(csv_path);
  if (!in) throw std::runtime_error("plot-pr: cannot open " + csv_path);
  std::string header;
  std::getline(in, header);
  if (header.rfind("threshold,precision,recall", 0) != 0)
    throw std::runtime_error("plot-pr: unexpected CSV header '" + header + "'");
  std::vector<std::pair<double, double>> points;  // (recall, precision)
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double t, p, r;
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &t, &p, &r) != 3)
      throw std::runtime_error("plot-pr: bad CSV row '" + line + "'");
    points.emplace_back(r, p);
  }

  const int size = 512, margin = 48;
  rfn::ImageU8 img(size, size);
  std::fill(img.rgb.begin(), img.rgb.end(), uint8_t(255));
  auto px = [&](double r) { return margin + r * (size - 2 * margin); };
  auto py = [&](double p) { return size - margin - p * (size - 2 * margin); };
  rfn::draw_line(img, {px(0), py(0)}, {px(1), py(0)}, 0, 0, 0);
  rfn::draw_line(img, {px(0), py(0)}, {px(0), py(1)}, 0, 0, 0);
  for (double tick : {0.25, 0.5, 0.75, 1.0}) {
    rfn::draw_line(img, {px(tick), py(0) - 3}, {px(tick), py(0) + 3}, 0, 0, 0);
    rfn::draw_line(img, {px(0) - 3, py(tick)}, {px(0) + 3, py(tick)}, 0, 0, 0);
  }
  for (size_t i = 1; i < points.size(); ++i)
    rfn::draw_line(img, {px(points[i - 1].first), py(points[i - 1].second)},
                   {px(points[i].first), py(points[i].second)}, 200, 30, 30);
  rfn::write_png(img, out_path);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"oriented industrial-text detector: synthesis, training, evaluation"};
  app.require_subcommand(1);

  CommonOpts synth_common, train_common, eval_common, infer_common;
  long synth_n = -1, synth_seed = -1;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, synth_common);
  synth->add_option("--n", synth_n, "number of images");
  synth->add_option("--seed", synth_seed, "master seed");
  synth->add_option("--out", synth_out, "output dataset directory")->required();

  std::string train_data, train_out;
  int train_sff = -1, train_apr = -1, train_rescore = -1;
  auto* train = app.add_subcommand("train", "train a detector");
  add_common(train, train_common);
  train->add_option("--data", train_data, "dataset directory (default $RFN_DATA_DIR)");
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--sff", train_sff, "toggle the attention module (0/1)");
  train->add_option("--apr", train_apr, "toggle proposal refinement (0/1)");
  train->add_option("--rescore", train_rescore, "toggle re-scoring (0/1)");

  std::string eval_ckpt, eval_data, eval_out;
  double eval_iou = -1.0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_common);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory (default $RFN_DATA_DIR)");
  eval->add_option("--iou", eval_iou, "IoU threshold for matching");
  eval->add_option("--out", eval_out, "report directory (metrics, PR csv)");

  std::string infer_ckpt, infer_in, infer_out;
  bool infer_overlay = false;
  auto* infer = app.add_subcommand("infer", "run detection on images");
  add_common(infer, infer_common);
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint file")->required();
  infer->add_option("--input", infer_in, "image file or directory")->required();
  infer->add_option("--out", infer_out, "output directory")->required();
  infer->add_flag("--overlay", infer_overlay, "also write overlay PNGs");

  std::string plot_csv, plot_out;
  auto* plot = app.add_subcommand("plot-pr", "render a PR curve CSV as a PNG");
  plot->add_option("--csv", plot_csv, "pr_curve.csv from eval")->required();
  plot->add_option("--out", plot_out, "output PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(synth_common, synth_n, synth_seed, synth_out);
    if (*train)
      return cmd_train(train_common, train_data, train_out, train_sff, train_apr, train_rescore);
    if (*eval) return cmd_eval(eval_common, eval_ckpt, eval_data, eval_iou, eval_out);
    if (*infer) return cmd_infer(infer_common, infer_ckpt, infer_in, infer_out, infer_overlay);
    if (*plot) return cmd_plot_pr(plot_csv, plot_out);
  } catch (const rfn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
