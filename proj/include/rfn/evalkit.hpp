#pragma once

// ICDAR-style detection evaluation: greedy one-to-one IoU matching with
// ignore-region handling, precision/recall/F-measure, matched-box counts at
// multiple IoU thresholds and PR curves.

#include <algorithm>
#include <fstream>
#include <numeric>
#include <tuple>
#include <vector>

#include "rfn/annotations.hpp"
#include "rfn/geometry.hpp"

namespace rfn {

struct EvalRecord {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<std::tuple<int, int, double>> matches;  // (pred index, gt index, IoU)
  int ignored_preds = 0;
};

// Predictions sorted by score descending; each matches the highest-IoU
// unmatched non-ignore gt with IoU >= iou_t. An unmatched prediction whose
// overlap with some ignore gt reaches 0.5 counts neither as tp nor fp.
inline EvalRecord match_detections(const std::vector<std::pair<QuadBox, double>>& preds,
                                   const std::vector<Annotation>& gts, double iou_t) {
  if (!(iou_t > 0.0 && iou_t < 1.0))
    throw std::invalid_argument("match_detections: iou threshold must be in (0,1)");

  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return preds[size_t(i)].second > preds[size_t(j)].second; });

  EvalRecord rec;
  std::vector<char> gt_used(gts.size(), 0);
  int num_valid_gts = 0;
  for (const auto& g : gts) num_valid_gts += g.ignore ? 0 : 1;

  for (int pi : order) {
    const QuadBox& p = preds[size_t(pi)].first;
    double best_iou = 0.0;
    int best_gt = -1;
    double best_ignore = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      double iou = quad_iou(p, gts[gi].quad);
      if (gts[gi].ignore) {
        best_ignore = std::max(best_ignore, iou);
      } else if (!gt_used[gi] && iou > best_iou) {
        best_iou = iou;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_t) {
      gt_used[size_t(best_gt)] = 1;
      rec.matches.emplace_back(pi, best_gt, best_iou);
      ++rec.tp;
    } else if (best_ignore >= 0.5) {
      ++rec.ignored_preds;
    } else {
      ++rec.fp;
    }
  }
  rec.fn = num_valid_gts - rec.tp;
  return rec;
}

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f_measure = 0.0;
};

// Any 0/0 maps to 0.
inline Prf prf(const EvalRecord& rec) {
  Prf r;
  r.precision = (rec.tp + rec.fp) > 0 ? static_cast<double>(rec.tp) / (rec.tp + rec.fp) : 0.0;
  r.recall = (rec.tp + rec.fn) > 0 ? static_cast<double>(rec.tp) / (rec.tp + rec.fn) : 0.0;
  r.f_measure = (r.precision + r.recall) > 0.0
                    ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                    : 0.0;
  return r;
}

inline Prf prf(double precision, double recall) {
  Prf r;
  r.precision = precision;
  r.recall = recall;
  r.f_measure = (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  return r;
}

// tp counts per IoU threshold; non-increasing in the threshold.
inline std::vector<int> matched_count_at(const std::vector<std::pair<QuadBox, double>>& preds,
                                         const std::vector<Annotation>& gts,
                                         const std::vector<double>& thresholds) {
  std::vector<int> counts;
  counts.reserve(thresholds.size());
  for (double t : thresholds) counts.push_back(match_detections(preds, gts, t).tp);
  return counts;
}

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

// Sweep the distinct score values descending; one (P,R) per threshold plus a
// trailing endpoint at threshold 0 (all predictions).
inline std::vector<PrPoint> pr_curve(const std::vector<std::pair<QuadBox, double>>& preds,
                                     const std::vector<Annotation>& gts, double iou_t) {
  if (preds.empty()) return {PrPoint{1.0, 0.0, 0.0}};

  std::vector<double> scores;
  scores.reserve(preds.size());
  for (const auto& p : preds) scores.push_back(p.second);
  std::sort(scores.begin(), scores.end(), std::greater<double>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  if (scores.back() != 0.0) scores.push_back(0.0);

  std::vector<PrPoint> curve;
  for (double t : scores) {
    std::vector<std::pair<QuadBox, double>> kept;
    for (const auto& p : preds)
      if (p.second >= t) kept.push_back(p);
    Prf m = prf(match_detections(kept, gts, iou_t));
    curve.push_back(PrPoint{t, m.precision, m.recall});
  }
  return curve;
}

inline void write_pr_csv(const std::vector<PrPoint>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_pr_csv: cannot open " + path);
  out << "threshold,precision,recall\n";
  for (const auto& p : curve) out << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
}

inline void write_matched_counts_csv(const std::vector<double>& thresholds,
                                     const std::vector<int>& counts, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_matched_counts_csv: cannot open " + path);
  out << "iou_threshold,matched_count\n";
  for (size_t i = 0; i < thresholds.size(); ++i) out << thresholds[i] << ',' << counts[i] << '\n';
}

}  // namespace rfn
