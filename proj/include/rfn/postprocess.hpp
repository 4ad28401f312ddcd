#pragma once

// Re-scoring and final decode: every surviving box gets an instance score
// (mean attention under the box), the overall score S' = e^{S_c} (1 + mu *
// e^{2*S_I - 1}) keys the final rotated NMS.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "rfn/geometry.hpp"
#include "rfn/nn/tensor.hpp"

namespace rfn {

struct DegenerateBoxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mean attention value over pixels whose centers fall inside the box. The
// box must already be in attention-map coordinates (image coords / stride).
template <typename T>
inline double instance_score(const QuadBox& box, const nn::Tensor<T>& attention) {
  if (attention.ndim() != 3 || attention.dim(0) != 1)
    throw std::invalid_argument("instance_score: expected (1,h,w) attention map");
  int h = attention.dim(1), w = attention.dim(2);
  int x0 = std::max(0, static_cast<int>(std::floor(box.min_x() - 0.5)));
  int x1 = std::min(w - 1, static_cast<int>(std::ceil(box.max_x())));
  int y0 = std::max(0, static_cast<int>(std::floor(box.min_y() - 0.5)));
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(box.max_y())));
  double sum = 0.0;
  long count = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (point_in_quad(box, Point{x + 0.5, y + 0.5})) {
        sum += static_cast<double>(attention.at(0, y, x));
        ++count;
      }
  if (count == 0) throw DegenerateBoxError("instance_score: box covers no attention pixels");
  return sum / static_cast<double>(count);
}

// S' = e^{S_c} (1 + mu * e^{S_I} / e^{1-S_I}) = e^{S_c} (1 + mu * e^{2 S_I - 1})
inline double rescore(double cls_score, double inst_score, double mu) {
  if (mu < 0.0) throw std::invalid_argument("rescore: mu must be >= 0");
  return std::exp(cls_score) * (1.0 + mu * std::exp(2.0 * inst_score - 1.0));
}

struct ScoredDetection {
  QuadBox box;             // image coordinates
  double cls_score = 0.0;  // S_c
  double inst_score = 0.0; // S_I
  double overall = 0.0;    // S'
};

struct PostprocessConfig {
  double mu = 0.5;
  double score_floor = 0.05;
  double nms_iou = 0.3;
  double attention_stride = 4.0;  // attention map lives at pyramid level 1
};

// Drop below the floor, re-score, NMS on S', return sorted by S' descending.
// Boxes covering zero attention pixels are dropped.
template <typename T>
inline std::vector<ScoredDetection> final_detections(
    const std::vector<std::pair<double, QuadBox>>& refined, const nn::Tensor<T>& attention,
    const PostprocessConfig& cfg = {}) {
  std::vector<ScoredDetection> scored;
  for (const auto& [cls, box] : refined) {
    if (cls < cfg.score_floor) continue;
    ScoredDetection d;
    d.box = box;
    d.cls_score = cls;
    try {
      d.inst_score = instance_score(box.scaled(1.0 / cfg.attention_stride), attention);
    } catch (const DegenerateBoxError&) {
      continue;
    }
    d.overall = rescore(d.cls_score, d.inst_score, cfg.mu);
    scored.push_back(d);
  }

  std::vector<std::pair<QuadBox, double>> for_nms;
  for_nms.reserve(scored.size());
  for (const auto& d : scored) for_nms.emplace_back(d.box, d.overall);
  std::vector<int> kept = rotated_nms(for_nms, cfg.nms_iou);

  std::vector<ScoredDetection> out;
  out.reserve(kept.size());
  for (int i : kept) out.push_back(scored[static_cast<size_t>(i)]);
  return out;  // rotated_nms emits descending-score order
}

}  // namespace rfn
