#pragma once

// Classification / regression sub-networks applied to each reweighted
// pyramid level. Both branches share the same structure with separate
// parameters: a stack of 3x3 convs with ReLU followed by a 3x5 conv (padding
// 1,2) for oriented text. Classification emits 8 sigmoid scores per grid
// point (one per anchor ratio); regression emits 8x8 corner offsets.

#include <string>
#include <vector>

#include "rfn/geometry.hpp"
#include "rfn/nn/layers.hpp"

namespace rfn {

struct HeadsConfig {
  int channels = 64;
  int convs = 4;
  int num_ratios = 8;
  bool share_across_levels = true;
  double cls_prior = 0.01;  // initial foreground probability via final bias
};

template <typename T>
struct HeadMaps {
  nn::Var<T> scores;   // (num_ratios, h, w), sigmoid applied
  nn::Var<T> offsets;  // (num_ratios*8, h, w); channel = ratio*8 + corner coord
};

// One level's decoded candidates. Boxes are ordered row-major by
// (y, x, ratio index), matching AnchorGrid.
struct DetectionSet {
  int level_index = 0;
  std::vector<QuadBox> boxes;
  std::vector<double> scores;
  std::vector<Offsets8> raw_offsets;
};

template <typename T>
class CrHeads {
 public:
  CrHeads() = default;
  CrHeads(nn::ParamStore<T>& store, const HeadsConfig& cfg) : cfg_(cfg) {
    int copies = cfg.share_across_levels ? 1 : 4;
    for (int s = 0; s < copies; ++s) {
      std::string prefix =
          cfg.share_across_levels ? std::string("heads") : "heads.level" + std::to_string(s + 1);
      branches_.push_back({make_branch(store, prefix + ".cls", cfg, cfg.num_ratios,
                                       static_cast<T>(-std::log((1.0 - cfg.cls_prior) /
                                                                cfg.cls_prior)),
                                       /*zero_final=*/false),
                           make_branch(store, prefix + ".reg", cfg, cfg.num_ratios * 8, T(0),
                                       /*zero_final=*/true)});
    }
  }

  // One (scores, offsets) pair per pyramid level.
  std::vector<HeadMaps<T>> forward(const std::vector<nn::Var<T>>& levels) const {
    if (levels.size() != 4) throw std::invalid_argument("cr_heads: expected 4 levels");
    std::vector<HeadMaps<T>> out;
    for (size_t s = 0; s < levels.size(); ++s) {
      const Branch& br = branches_[cfg_.share_across_levels ? 0 : s];
      HeadMaps<T> m;
      m.scores = nn::sigmoid_v(run_branch(br.cls, levels[s]));
      m.offsets = run_branch(br.reg, levels[s]);
      out.push_back(std::move(m));
    }
    return out;
  }

  const HeadsConfig& config() const { return cfg_; }

 private:
  struct BranchNet {
    std::vector<nn::Conv2d<T>> convs;
    nn::Conv2d<T> final;  // 3x5, padding (1,2)
  };
  struct Branch {
    BranchNet cls;
    BranchNet reg;
  };

  static BranchNet make_branch(nn::ParamStore<T>& store, const std::string& name,
                               const HeadsConfig& cfg, int out_channels, T final_bias,
                               bool zero_final) {
    BranchNet b;
    for (int i = 0; i < cfg.convs; ++i)
      b.convs.emplace_back(store, name + ".conv" + std::to_string(i), cfg.channels, cfg.channels,
                           3, 3, 1, 1, 1);
    b.final = nn::Conv2d<T>(store, name + ".out", cfg.channels, out_channels, 3, 5, 1, 1, 2,
                            zero_final ? 0.0 : 0.01, final_bias);
    return b;
  }

  nn::Var<T> run_branch(const BranchNet& b, const nn::Var<T>& x) const {
    nn::Var<T> y = x;
    for (const auto& conv : b.convs) y = nn::relu_v(conv.forward(y));
    return b.final.forward(y);
  }

  HeadsConfig cfg_;
  std::vector<Branch> branches_;
};

// Decode one level's head maps against its anchor grid.
template <typename T>
inline DetectionSet decode_detections(const nn::Tensor<T>& score_map,
                                      const nn::Tensor<T>& offset_map, const AnchorGrid& anchors,
                                      int level_index) {
  int nr = static_cast<int>(anchors.ratios.size());
  if (score_map.dim(0) != nr || score_map.dim(1) != anchors.height ||
      score_map.dim(2) != anchors.width)
    throw std::invalid_argument("decode_detections: score map " + score_map.shape_str() +
                                " does not match anchor grid");
  if (offset_map.dim(0) != nr * 8 || offset_map.dim(1) != anchors.height ||
      offset_map.dim(2) != anchors.width)
    throw std::invalid_argument("decode_detections: offset map " + offset_map.shape_str() +
                                " does not match anchor grid");

  DetectionSet out;
  out.level_index = level_index;
  out.boxes.reserve(static_cast<size_t>(anchors.num_anchors()));
  out.scores.reserve(out.boxes.capacity());
  out.raw_offsets.reserve(out.boxes.capacity());
  for (int y = 0; y < anchors.height; ++y) {
    for (int x = 0; x < anchors.width; ++x) {
      for (int r = 0; r < nr; ++r) {
        Offsets8 off;
        for (int j = 0; j < 8; ++j)
          off[static_cast<size_t>(j)] = static_cast<double>(offset_map.at(r * 8 + j, y, x));
        out.boxes.push_back(decode_offsets(anchors.box(y, x, r), off));
        out.scores.push_back(static_cast<double>(score_map.at(r, y, x)));
        out.raw_offsets.push_back(off);
      }
    }
  }
  return out;
}

}  // namespace rfn
