#pragma once

// Flat `key = value` run configuration with '#' comments. Unknown keys are
// rejected, every numeric key is range-checked, and parse -> serialize ->
// parse is the identity. Command-line flags overwrite file values.

#include <array>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfn/apr.hpp"
#include "rfn/backbone.hpp"
#include "rfn/sff.hpp"
#include "rfn/synthdata.hpp"

namespace rfn {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // general
  long seed = 0;
  bool deterministic = true;
  long threads = 0;  // 0 = hardware concurrency

  // model
  long model_channels = 64;
  std::string model_stage_channels = "32,64,128,128";
  long model_blocks_per_stage = 2;
  long model_low_convs = 2;
  long model_head_convs = 4;
  bool model_share_heads = true;
  double model_cls_prior = 0.01;
  long model_refine_hidden = 256;
  long model_se_reduction = 4;

  // anchors
  std::string anchor_ratios = "1,2,3,5,7.5,0.5,0.25,0.16666667";
  double anchor_scale_per_stride = 4.0;

  // matching
  double match_pos_iou = 0.5;
  double match_neg_iou = 0.4;
  bool match_force_best = true;

  // losses
  double loss_gamma = 0.1;        // seg-loss balance
  double loss_delta_scale = 0.01; // false-positive allowance fraction
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;

  // module toggles
  bool toggle_sff = true;
  bool toggle_apr = true;
  bool toggle_rescore = true;

  // apr
  long apr_beta = 1000;
  double apr_binarize_threshold = 0.5;
  std::string apr_roi_mode = "sum_all_levels";  // or fpn_assign
  bool apr_train_add_gt = true;
  long apr_train_rois = 256;
  double apr_train_pos_fraction = 0.25;
  double apr_pos_iou = 0.5;

  // postprocess
  double post_mu = 0.5;
  double post_score_floor = 0.05;
  double post_nms_iou = 0.3;

  // optimizer / schedule
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  long lr_halve_epochs = 15;
  double clip_grad_norm = 10.0;
  long epochs = 40;
  long batch_size = 8;
  long image_size = 256;

  // evaluation
  double eval_iou = 0.5;

  // synthesis
  long synth_n = 300;
  long synth_image_size = 256;
  long synth_min_instances = 1;
  long synth_max_instances = 5;
  double synth_rot_min = -30.0;
  double synth_rot_max = 30.0;
  double synth_scale_min = 2.5;
  double synth_scale_max = 5.0;
  double synth_contrast_gap = 0.4;
  std::string synth_texture = "mixed";
  std::string synth_charset = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-";
  long synth_len_min = 3;
  long synth_len_max = 7;
};

namespace config_detail {

enum class Kind { kLong, kDouble, kBool, kString };

struct KeyDef {
  const char* name;
  Kind kind;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  double lo = 0.0;
  double hi = 0.0;  // lo==hi means unbounded
};

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::vector<KeyDef>& registry() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    auto add_long = [&d](const char* name, long RunConfig::*mem, double lo, double hi) {
      d.push_back({name, Kind::kLong,
                   [mem](const RunConfig& c) { return std::to_string(c.*mem); },
                   [mem, name, lo, hi](RunConfig& c, const std::string& v) {
                     size_t used = 0;
                     long x;
                     try {
                       x = std::stol(v, &used);
                     } catch (const std::exception&) {
                       throw ConfigError(std::string("config: key ") + name +
                                         " expects an integer, got '" + v + "'");
                     }
                     if (used != v.size())
                       throw ConfigError(std::string("config: key ") + name +
                                         " expects an integer, got '" + v + "'");
                     if (lo != hi && (x < lo || x > hi))
                       throw ConfigError(std::string("config: key ") + name + " = " + v +
                                         " out of range [" + fmt_double(lo) + "," +
                                         fmt_double(hi) + "]");
                     c.*mem = x;
                   },
                   lo, hi});
    };
    auto add_double = [&d](const char* name, double RunConfig::*mem, double lo, double hi) {
      d.push_back({name, Kind::kDouble,
                   [mem](const RunConfig& c) { return fmt_double(c.*mem); },
                   [mem, name, lo, hi](RunConfig& c, const std::string& v) {
                     size_t used = 0;
                     double x;
                     try {
                       x = std::stod(v, &used);
                     } catch (const std::exception&) {
                       throw ConfigError(std::string("config: key ") + name +
                                         " expects a number, got '" + v + "'");
                     }
                     if (used != v.size() || !std::isfinite(x))
                       throw ConfigError(std::string("config: key ") + name +
                                         " expects a number, got '" + v + "'");
                     if (lo != hi && (x < lo || x > hi))
                       throw ConfigError(std::string("config: key ") + name + " = " + v +
                                         " out of range [" + fmt_double(lo) + "," +
                                         fmt_double(hi) + "]");
                     c.*mem = x;
                   },
                   lo, hi});
    };
    auto add_bool = [&d](const char* name, bool RunConfig::*mem) {
      d.push_back({name, Kind::kBool,
                   [mem](const RunConfig& c) { return c.*mem ? "true" : "false"; },
                   [mem, name](RunConfig& c, const std::string& v) {
                     if (v == "true" || v == "1")
                       c.*mem = true;
                     else if (v == "false" || v == "0")
                       c.*mem = false;
                     else
                       throw ConfigError(std::string("config: key ") + name +
                                         " expects true/false, got '" + v + "'");
                   }});
    };
    auto add_string = [&d](const char* name, std::string RunConfig::*mem) {
      d.push_back({name, Kind::kString,
                   [mem](const RunConfig& c) { return c.*mem; },
                   [mem](RunConfig& c, const std::string& v) { c.*mem = v; }});
    };

    add_long("seed", &RunConfig::seed, 0, 1e18);
    add_bool("deterministic", &RunConfig::deterministic);
    add_long("threads", &RunConfig::threads, 0, 256);

    add_long("model.channels", &RunConfig::model_channels, 1, 512);
    add_string("model.stage_channels", &RunConfig::model_stage_channels);
    add_long("model.blocks_per_stage", &RunConfig::model_blocks_per_stage, 1, 8);
    add_long("model.low_convs", &RunConfig::model_low_convs, 1, 8);
    add_long("model.head_convs", &RunConfig::model_head_convs, 1, 8);
    add_bool("model.share_heads_across_levels", &RunConfig::model_share_heads);
    add_double("model.cls_prior", &RunConfig::model_cls_prior, 1e-6, 0.999999);
    add_long("model.refine_hidden", &RunConfig::model_refine_hidden, 1, 4096);
    add_long("model.se_reduction", &RunConfig::model_se_reduction, 1, 64);

    add_string("anchors.ratios", &RunConfig::anchor_ratios);
    add_double("anchors.scale_per_stride", &RunConfig::anchor_scale_per_stride, 0.1, 64);

    add_double("match.pos_iou", &RunConfig::match_pos_iou, 0.01, 0.999);
    add_double("match.neg_iou", &RunConfig::match_neg_iou, 0.0, 0.999);
    add_bool("match.force_best", &RunConfig::match_force_best);

    add_double("loss.gamma", &RunConfig::loss_gamma, 1e-9, 1e9);
    add_double("loss.delta_scale", &RunConfig::loss_delta_scale, 0.0, 1.0);
    add_double("loss.focal_alpha", &RunConfig::focal_alpha, 0.0, 1.0);
    add_double("loss.focal_gamma", &RunConfig::focal_gamma, 0.0, 16.0);
    add_double("loss.lambda1", &RunConfig::lambda1, 0.0, 1e9);
    add_double("loss.lambda2", &RunConfig::lambda2, 0.0, 1e9);
    add_double("loss.lambda3", &RunConfig::lambda3, 0.0, 1e9);

    add_bool("toggle.sff", &RunConfig::toggle_sff);
    add_bool("toggle.apr", &RunConfig::toggle_apr);
    add_bool("toggle.rescore", &RunConfig::toggle_rescore);

    add_long("apr.beta", &RunConfig::apr_beta, 1, 1000000);
    add_double("apr.binarize_threshold", &RunConfig::apr_binarize_threshold, 1e-6, 0.999999);
    add_string("apr.roi_mode", &RunConfig::apr_roi_mode);
    add_bool("apr.train_add_gt", &RunConfig::apr_train_add_gt);
    add_long("apr.train_rois", &RunConfig::apr_train_rois, 1, 100000);
    add_double("apr.train_pos_fraction", &RunConfig::apr_train_pos_fraction, 0.0, 1.0);
    add_double("apr.pos_iou", &RunConfig::apr_pos_iou, 0.01, 0.999);

    add_double("post.mu", &RunConfig::post_mu, 0.0, 1e6);
    add_double("post.score_floor", &RunConfig::post_score_floor, 0.0, 1.0);
    add_double("post.nms_iou", &RunConfig::post_nms_iou, 0.01, 0.99);

    add_double("optim.lr", &RunConfig::lr, 0.0, 1e3);
    add_double("optim.momentum", &RunConfig::momentum, 0.0, 0.999999);
    add_double("optim.weight_decay", &RunConfig::weight_decay, 0.0, 1.0);
    add_long("optim.lr_halve_epochs", &RunConfig::lr_halve_epochs, 1, 100000);
    add_double("optim.clip_grad_norm", &RunConfig::clip_grad_norm, 0.0, 1e9);
    add_long("train.epochs", &RunConfig::epochs, 1, 100000);
    add_long("train.batch_size", &RunConfig::batch_size, 1, 4096);
    add_long("train.image_size", &RunConfig::image_size, 64, 8192);

    add_double("eval.iou", &RunConfig::eval_iou, 0.01, 0.99);

    add_long("synth.n", &RunConfig::synth_n, 1, 10000000);
    add_long("synth.image_size", &RunConfig::synth_image_size, 64, 8192);
    add_long("synth.min_instances", &RunConfig::synth_min_instances, 0, 1000);
    add_long("synth.max_instances", &RunConfig::synth_max_instances, 0, 1000);
    add_double("synth.rot_min", &RunConfig::synth_rot_min, -180, 180);
    add_double("synth.rot_max", &RunConfig::synth_rot_max, -180, 180);
    add_double("synth.scale_min", &RunConfig::synth_scale_min, 0.5, 256);
    add_double("synth.scale_max", &RunConfig::synth_scale_max, 0.5, 256);
    add_double("synth.contrast_gap", &RunConfig::synth_contrast_gap, 0.0, 1.0);
    add_string("synth.texture", &RunConfig::synth_texture);
    add_string("synth.charset", &RunConfig::synth_charset);
    add_long("synth.len_min", &RunConfig::synth_len_min, 1, 64);
    add_long("synth.len_max", &RunConfig::synth_len_max, 1, 64);
    return d;
  }();
  return defs;
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace config_detail

inline std::vector<long> parse_int_list(const std::string& csv, size_t expected,
                                        const char* what) {
  std::vector<long> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stol(config_detail::trim(item)));
    } catch (const std::exception&) {
      throw ConfigError(std::string("config: ") + what + " has non-integer entry '" + item + "'");
    }
  }
  if (expected != 0 && out.size() != expected)
    throw ConfigError(std::string("config: ") + what + " must have " + std::to_string(expected) +
                      " entries, got " + std::to_string(out.size()));
  return out;
}

inline std::vector<double> parse_double_list(const std::string& csv, const char* what) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(config_detail::trim(item)));
    } catch (const std::exception&) {
      throw ConfigError(std::string("config: ") + what + " has non-numeric entry '" + item + "'");
    }
  }
  return out;
}

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& def : config_detail::registry()) {
    if (key == def.name) {
      def.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

// Cross-field checks that single-key ranges cannot express.
inline void validate_config(const RunConfig& cfg) {
  auto stages = parse_int_list(cfg.model_stage_channels, 4, "model.stage_channels");
  for (long c : stages)
    if (c < 1 || c > 2048) throw ConfigError("config: model.stage_channels entry out of range");
  auto ratios = parse_double_list(cfg.anchor_ratios, "anchors.ratios");
  if (ratios.empty()) throw ConfigError("config: anchors.ratios must be non-empty");
  for (double r : ratios)
    if (!(r > 0)) throw ConfigError("config: anchors.ratios entries must be positive");
  if (cfg.match_neg_iou > cfg.match_pos_iou)
    throw ConfigError("config: match.neg_iou must not exceed match.pos_iou");
  if (cfg.image_size % 32 != 0) throw ConfigError("config: train.image_size must be divisible by 32");
  if (cfg.synth_image_size % 32 != 0)
    throw ConfigError("config: synth.image_size must be divisible by 32");
  if (cfg.synth_max_instances < cfg.synth_min_instances)
    throw ConfigError("config: synth.max_instances < synth.min_instances");
  if (cfg.synth_rot_max < cfg.synth_rot_min) throw ConfigError("config: bad synth rotation range");
  if (cfg.synth_scale_max < cfg.synth_scale_min) throw ConfigError("config: bad synth scale range");
  if (cfg.synth_len_max < cfg.synth_len_min) throw ConfigError("config: bad synth length range");
  if (cfg.apr_roi_mode != "sum_all_levels" && cfg.apr_roi_mode != "fpn_assign")
    throw ConfigError("config: apr.roi_mode must be sum_all_levels or fpn_assign");
  if (cfg.synth_texture != "noise" && cfg.synth_texture != "brushed" &&
      cfg.synth_texture != "gradient" && cfg.synth_texture != "mixed")
    throw ConfigError("config: synth.texture must be noise|brushed|gradient|mixed");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
    std::string key = config_detail::trim(line.substr(0, eq));
    std::string value = config_detail::trim(line.substr(eq + 1));
    set_config_key(base, key, value);
  }
  validate_config(base);
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text, base);
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& def : config_detail::registry())
    out << def.name << " = " << def.get(cfg) << '\n';
  return out.str();
}

inline void save_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("config: cannot write " + path);
  out << serialize_config(cfg);
}

// Named presets. "desk" is the default-constructed config; "paper" restores
// the published training scale.
inline RunConfig preset_config(const std::string& name) {
  if (name == "desk" || name.empty()) return RunConfig{};
  if (name == "paper") {
    RunConfig cfg;
    cfg.image_size = 768;
    cfg.synth_image_size = 768;
    cfg.batch_size = 12;
    cfg.epochs = 200;
    cfg.lr_halve_epochs = 50;
    cfg.model_channels = 64;
    cfg.model_stage_channels = "64,128,256,512";
    cfg.model_blocks_per_stage = 3;
    return cfg;
  }
  throw ConfigError("config: unknown preset '" + name + "' (expected desk or paper)");
}

// ------------------------------------------------------- derived structures

inline BackboneConfig backbone_config(const RunConfig& cfg) {
  BackboneConfig b;
  auto stages = parse_int_list(cfg.model_stage_channels, 4, "model.stage_channels");
  for (int i = 0; i < 4; ++i) b.stage_channels[size_t(i)] = static_cast<int>(stages[size_t(i)]);
  b.blocks_per_stage = static_cast<int>(cfg.model_blocks_per_stage);
  b.fpn_channels = static_cast<int>(cfg.model_channels);
  return b;
}

inline SffConfig sff_config(const RunConfig& cfg) {
  SffConfig s;
  s.channels = static_cast<int>(cfg.model_channels);
  s.low_convs = static_cast<int>(cfg.model_low_convs);
  s.se_reduction = static_cast<int>(cfg.model_se_reduction);
  return s;
}

inline HeadsConfig heads_config(const RunConfig& cfg) {
  HeadsConfig h;
  h.channels = static_cast<int>(cfg.model_channels);
  h.convs = static_cast<int>(cfg.model_head_convs);
  h.num_ratios = static_cast<int>(parse_double_list(cfg.anchor_ratios, "anchors.ratios").size());
  h.share_across_levels = cfg.model_share_heads;
  h.cls_prior = cfg.model_cls_prior;
  return h;
}

inline RefineConfig refine_config(const RunConfig& cfg) {
  RefineConfig r;
  r.channels = static_cast<int>(cfg.model_channels);
  r.hidden = static_cast<int>(cfg.model_refine_hidden);
  r.roi_mode = cfg.apr_roi_mode == "fpn_assign" ? RoiMode::kFpnAssign : RoiMode::kSumAllLevels;
  return r;
}

inline SynthConfig synth_config(const RunConfig& cfg) {
  SynthConfig s;
  s.image_h = s.image_w = static_cast<int>(cfg.synth_image_size);
  s.min_instances = static_cast<int>(cfg.synth_min_instances);
  s.max_instances = static_cast<int>(cfg.synth_max_instances);
  s.rot_min_deg = cfg.synth_rot_min;
  s.rot_max_deg = cfg.synth_rot_max;
  s.scale_min = cfg.synth_scale_min;
  s.scale_max = cfg.synth_scale_max;
  s.contrast_gap = cfg.synth_contrast_gap;
  s.texture = cfg.synth_texture == "noise"
                  ? TextureKind::kNoise
                  : cfg.synth_texture == "brushed"
                        ? TextureKind::kBrushed
                        : cfg.synth_texture == "gradient" ? TextureKind::kGradient
                                                          : TextureKind::kMixed;
  s.charset = cfg.synth_charset;
  s.len_min = static_cast<int>(cfg.synth_len_min);
  s.len_max = static_cast<int>(cfg.synth_len_max);
  s.seed = static_cast<uint64_t>(cfg.seed);
  return s;
}

inline MatchConfig match_config(const RunConfig& cfg) {
  MatchConfig m;
  m.pos_iou = cfg.match_pos_iou;
  m.neg_iou = cfg.match_neg_iou;
  m.force_best = cfg.match_force_best;
  return m;
}

inline std::vector<AnchorGrid> make_anchor_grids(const RunConfig& cfg, int image_h, int image_w) {
  auto ratios = parse_double_list(cfg.anchor_ratios, "anchors.ratios");
  std::vector<AnchorGrid> grids;
  for (size_t li = 0; li < 4; ++li) {
    int stride = kPyramidStrides[li];
    AnchorGrid g = generate_anchors(image_h / stride, image_w / stride, stride,
                                    cfg.anchor_scale_per_stride * stride, ratios);
    g.level_index = static_cast<int>(li) + 1;
    grids.push_back(std::move(g));
  }
  return grids;
}

}  // namespace rfn
