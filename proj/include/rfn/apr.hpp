#pragma once

// Attentive proposal refinement: binarize the attention map, keep only the
// per-point best-scoring boxes whose grid points fall on predicted
// foreground, take the top beta by score, and re-classify / re-regress each
// survivor from ROI features pooled off the pyramid.

#include <algorithm>
#include <string>
#include <vector>

#include "rfn/backbone.hpp"
#include "rfn/cr_heads.hpp"
#include "rfn/geometry.hpp"
#include "rfn/losses.hpp"
#include "rfn/nn/layers.hpp"

namespace rfn {

// F = 1 where A >= threshold (inclusive boundary).
template <typename T>
inline BinaryMask binarize_attention(const nn::Tensor<T>& attention, double threshold) {
  if (attention.ndim() != 3 || attention.dim(0) != 1)
    throw std::invalid_argument("binarize_attention: expected (1,h,w) map");
  BinaryMask f(attention.dim(1), attention.dim(2));
  for (size_t i = 0; i < f.values.size(); ++i)
    f.values[i] = static_cast<double>(attention[i]) >= threshold ? 1 : 0;
  return f;
}

// Nearest-neighbor resample; preserves binarity.
inline BinaryMask mask_resize_nearest(const BinaryMask& m, int oh, int ow) {
  BinaryMask out(oh, ow);
  for (int y = 0; y < oh; ++y) {
    int sy = std::min(m.height - 1, static_cast<int>((y + 0.5) * m.height / oh));
    for (int x = 0; x < ow; ++x) {
      int sx = std::min(m.width - 1, static_cast<int>((x + 0.5) * m.width / ow));
      out.at(y, x) = m.at(sy, sx);
    }
  }
  return out;
}

struct Candidate {
  int level_index = 0;  // 1..4
  int grid_y = 0;
  int grid_x = 0;
  int ratio = 0;
  QuadBox box;
  double score = 0.0;
  bool fallback = false;  // selected from a background grid point
};

struct CandidatePool {
  std::vector<Candidate> entries;  // descending score
  int beta = 0;
};

// Selection: per grid point with F_i = 1 exactly one of the ratio boxes
// survives (max score, ties to the lower ratio index); the union across
// levels is sorted by score and truncated to beta. If foreground supplies
// fewer than beta, the highest-scoring background-point winners fill the
// remaining slots (flagged fallback).
inline CandidatePool select_candidates(const std::vector<DetectionSet>& dets,
                                       const std::vector<AnchorGrid>& grids, const BinaryMask& f,
                                       int beta, bool allow_fallback = true) {
  if (beta < 1) throw std::invalid_argument("select_candidates: beta must be >= 1");
  if (dets.size() != grids.size())
    throw std::invalid_argument("select_candidates: detections/grids mismatch");

  std::vector<Candidate> fg, bg;
  for (size_t li = 0; li < dets.size(); ++li) {
    const AnchorGrid& g = grids[li];
    const DetectionSet& d = dets[li];
    if (static_cast<int>(d.boxes.size()) != g.num_anchors())
      throw std::invalid_argument("select_candidates: detection count mismatch at level " +
                                  std::to_string(li + 1));
    BinaryMask fi = mask_resize_nearest(f, g.height, g.width);
    int nr = static_cast<int>(g.ratios.size());
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        int best_r = 0;
        double best_s = d.scores[static_cast<size_t>(g.index_of(y, x, 0))];
        for (int r = 1; r < nr; ++r) {
          double s = d.scores[static_cast<size_t>(g.index_of(y, x, r))];
          if (s > best_s) {
            best_s = s;
            best_r = r;
          }
        }
        Candidate c;
        c.level_index = d.level_index;
        c.grid_y = y;
        c.grid_x = x;
        c.ratio = best_r;
        c.box = d.boxes[static_cast<size_t>(g.index_of(y, x, best_r))];
        c.score = best_s;
        c.fallback = fi.at(y, x) == 0;
        (c.fallback ? bg : fg).push_back(c);
      }
  }

  auto by_score = [](const Candidate& a, const Candidate& b) { return a.score > b.score; };
  std::stable_sort(fg.begin(), fg.end(), by_score);
  if (static_cast<int>(fg.size()) > beta) fg.resize(static_cast<size_t>(beta));
  if (allow_fallback && static_cast<int>(fg.size()) < beta && !bg.empty()) {
    std::stable_sort(bg.begin(), bg.end(), by_score);
    size_t need = static_cast<size_t>(beta) - fg.size();
    fg.insert(fg.end(), bg.begin(), bg.begin() + std::min(need, bg.size()));
  }
  std::stable_sort(fg.begin(), fg.end(), by_score);

  CandidatePool pool;
  pool.beta = beta;
  pool.entries = std::move(fg);
  return pool;
}

enum class RoiMode { kSumAllLevels, kFpnAssign };

struct RefineConfig {
  int channels = 64;
  int roi_size = 7;
  int hidden = 256;
  RoiMode roi_mode = RoiMode::kSumAllLevels;
};

template <typename T>
struct RefineOutputs {
  nn::Var<T> scores;          // (K), sigmoid
  nn::Var<T> offsets;         // (K,8), decoded against each candidate box
  std::vector<int> kept;      // indices into the input pool
  int dropped_degenerate = 0;
};

template <typename T>
class RefineHead {
 public:
  RefineHead() = default;
  RefineHead(nn::ParamStore<T>& store, const RefineConfig& cfg) : cfg_(cfg) {
    fc_ = nn::Linear<T>(store, "refine.fc", cfg.channels * cfg.roi_size * cfg.roi_size,
                        cfg.hidden);
    cls_ = nn::Linear<T>(store, "refine.cls", cfg.hidden, 1);
    // zero-initialized regression: refined boxes start at the candidates
    reg_ = nn::Linear<T>(store, "refine.reg", cfg.hidden, 8, /*weight_scale=*/0.0);
  }

  // pyramid: the backbone levels (strides 4..32), image-coordinate boxes.
  RefineOutputs<T> forward(const std::vector<Candidate>& candidates,
                           const FeaturePyramid<T>& pyramid) const {
    if (candidates.empty()) throw std::invalid_argument("refine: empty candidate pool");
    RefineOutputs<T> out;
    std::vector<nn::Var<T>> rows;
    for (size_t i = 0; i < candidates.size(); ++i) {
      const QuadBox& q = candidates[i].box;
      double bx0 = q.min_x(), bx1 = q.max_x(), by0 = q.min_y(), by1 = q.max_y();
      if (!(bx1 > bx0) || !(by1 > by0) || !q.finite()) {
        ++out.dropped_degenerate;
        continue;
      }
      nn::Var<T> crop;
      if (cfg_.roi_mode == RoiMode::kSumAllLevels) {
        for (size_t li = 0; li < pyramid.levels.size(); ++li) {
          double s = kPyramidStrides[li];
          auto c = nn::roi_bilinear(pyramid.levels[li], bx0 / s, by0 / s, bx1 / s, by1 / s,
                                    cfg_.roi_size, cfg_.roi_size);
          crop = crop.defined() ? nn::add(crop, c) : c;
        }
      } else {
        size_t li = assign_level(q);
        double s = kPyramidStrides[li];
        crop = nn::roi_bilinear(pyramid.levels[li], bx0 / s, by0 / s, bx1 / s, by1 / s,
                                cfg_.roi_size, cfg_.roi_size);
      }
      rows.push_back(nn::reshape(crop, {cfg_.channels * cfg_.roi_size * cfg_.roi_size}));
      out.kept.push_back(static_cast<int>(i));
    }
    if (rows.empty()) throw std::invalid_argument("refine: all candidates degenerate");

    auto feats = nn::relu_v(fc_.forward(nn::stack_rows(rows)));
    out.scores = nn::reshape(nn::sigmoid_v(cls_.forward(feats)), {static_cast<int>(rows.size())});
    out.offsets = reg_.forward(feats);
    return out;
  }

  const RefineConfig& config() const { return cfg_; }

 private:
  static size_t assign_level(const QuadBox& q) {
    // scale-based FPN assignment against the per-level anchor scales
    double side = std::sqrt(std::max(1.0, quad_area(q)));
    size_t best = 0;
    double best_d = 1e30;
    for (size_t li = 0; li < 4; ++li) {
      double scale = 4.0 * kPyramidStrides[li];
      double d = std::abs(std::log2(side / scale));
      if (d < best_d) {
        best_d = d;
        best = li;
      }
    }
    return best;
  }

  RefineConfig cfg_;
  nn::Linear<T> fc_, cls_, reg_;
};

// Decode refined offsets against their candidate boxes.
template <typename T>
inline std::vector<std::pair<double, QuadBox>> decode_refined(
    const std::vector<Candidate>& candidates, const RefineOutputs<T>& ref) {
  std::vector<std::pair<double, QuadBox>> out;
  for (size_t r = 0; r < ref.kept.size(); ++r) {
    const Candidate& c = candidates[static_cast<size_t>(ref.kept[r])];
    Offsets8 off;
    for (int j = 0; j < 8; ++j)
      off[static_cast<size_t>(j)] = static_cast<double>(ref.offsets.value().at(static_cast<int>(r), j));
    out.emplace_back(static_cast<double>(ref.scores.value()[r]), decode_offsets(c.box, off));
  }
  return out;
}

}  // namespace rfn
