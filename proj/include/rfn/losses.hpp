#pragma once

// Training objectives: the segmentation loss on the attention map (dice plus
// a guarded false-negative/false-positive term), the detection loss over all
// default boxes (focal classification + smooth-L1 regression normalized by
// the non-ignored anchor count), the ROI refinement loss, and the weighted
// total. Indicator functions inside the segmentation loss are treated as
// constants during backprop.

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "rfn/cr_heads.hpp"
#include "rfn/geometry.hpp"
#include "rfn/nn/ops.hpp"

namespace rfn {

inline constexpr double kSegEps = 1e-6;
inline constexpr double kScoreClamp = 1e-7;

// ----------------------------------------------------------------- scalar ops

// Alpha-balanced focal loss on a single score. Scores are clamped to
// (kScoreClamp, 1-kScoreClamp) before the log.
template <typename T>
inline T focal_loss(T score, int label, T alpha, T gamma) {
  T p = std::clamp(score, static_cast<T>(kScoreClamp), static_cast<T>(1.0 - kScoreClamp));
  if (label == 1) return -alpha * std::pow(T(1) - p, gamma) * std::log(p);
  return -(T(1) - alpha) * std::pow(p, gamma) * std::log(T(1) - p);
}

// d focal / d score; zero in the clamped region.
template <typename T>
inline T focal_loss_grad(T score, int label, T alpha, T gamma) {
  if (score <= static_cast<T>(kScoreClamp) || score >= static_cast<T>(1.0 - kScoreClamp))
    return T(0);
  T p = score;
  if (label == 1) {
    T base = gamma > T(0) ? std::pow(T(1) - p, gamma - T(1)) : T(0);
    return alpha * gamma * base * std::log(p) - alpha * std::pow(T(1) - p, gamma) / p;
  }
  T base = gamma > T(0) ? std::pow(p, gamma - T(1)) : T(0);
  return -(T(1) - alpha) * (gamma * base * std::log(T(1) - p) - std::pow(p, gamma) / (T(1) - p));
}

template <typename T>
inline T smooth_l1_scalar(T x) {
  return std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5);
}

template <typename T>
inline T smooth_l1_scalar_grad(T x) {
  return std::clamp(x, T(-1), T(1));
}

// Smooth-L1 summed over the 8 components of a corner-offset vector.
template <typename T>
inline T smooth_l1(const std::array<T, 8>& pred, const std::array<T, 8>& target) {
  T s = 0;
  for (int i = 0; i < 8; ++i) s += smooth_l1_scalar(pred[size_t(i)] - target[size_t(i)]);
  return s;
}

inline double smooth_l1(const Offsets8& pred, const Offsets8& target) {
  double s = 0;
  for (int i = 0; i < 8; ++i) s += smooth_l1_scalar(pred[size_t(i)] - target[size_t(i)]);
  return s;
}

// ------------------------------------------------------------- seg loss (Var)

struct SegLossBreakdown {
  double dice = 0;      // L_d
  double fn_coeff = 0;  // D_a
  double fp_coeff = 0;  // D_b
  double guard = 0;     // L_g
  double total = 0;     // L_seg
  double delta_used = 0;
  double gamma = 0;
};

// L_d = 1 - (2*sum(pred*gt) + eps) / (sum(pred) + sum(gt) + eps)
template <typename T>
inline nn::Var<T> dice_loss_var(const nn::Var<T>& pred, const nn::Tensor<T>& gt) {
  nn::check_same_shape(pred.value(), gt, "dice_loss");
  auto gtc = nn::Var<T>::constant(gt);
  auto inter = nn::sum_all(nn::mul(pred, gtc));
  auto numer = nn::affine(inter, T(2), static_cast<T>(kSegEps));
  auto denom = nn::affine(nn::sum_all(pred), T(1), gt.sum() + static_cast<T>(kSegEps));
  return nn::affine(nn::div(numer, denom), T(-1), T(1));
}

template <typename T>
inline double dice_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& gt) {
  return static_cast<double>(dice_loss_var(nn::Var<T>::constant(pred), gt).scalar());
}

// D_a and D_b of the guarded term. Indicator masks are computed from the
// current values and enter the graph as constants.
template <typename T>
inline std::pair<nn::Var<T>, nn::Var<T>> fn_fp_coeffs_var(const nn::Var<T>& pred,
                                                          const nn::Tensor<T>& gt) {
  nn::check_same_shape(pred.value(), gt, "fn_fp_coeffs");
  const auto& pv = pred.value();
  nn::Tensor<T> mask_fn(pv.dims());
  nn::Tensor<T> mask_fp(pv.dims());
  for (size_t i = 0; i < pv.size(); ++i) {
    T wd = gt[i] - pv[i];
    if (wd >= T(0.5)) mask_fn[i] = T(1);
    if (-wd >= T(0.5)) mask_fp[i] = T(1);
  }
  auto denom = nn::affine(nn::sum_all(pred), T(1), static_cast<T>(kSegEps));
  auto da = nn::div(nn::sum_all(nn::mul(nn::affine(pred, T(-1), T(1)),
                                        nn::Var<T>::constant(std::move(mask_fn)))),
                    denom);
  auto db = nn::div(nn::sum_all(nn::mul(pred, nn::Var<T>::constant(std::move(mask_fp)))), denom);
  return {da, db};
}

template <typename T>
inline std::pair<double, double> fn_fp_coeffs(const nn::Tensor<T>& pred, const nn::Tensor<T>& gt) {
  auto [da, db] = fn_fp_coeffs_var(nn::Var<T>::constant(pred), gt);
  return {static_cast<double>(da.scalar()), static_cast<double>(db.scalar())};
}

// Full segmentation loss:
//   L_g   = D_a                 if D_b < delta
//           D_a + D_b - delta   otherwise
//   L_seg = L_d + exp(-L_d * gamma) * L_g
// with delta = delta_scale * sum(gt) / (sum(pred) + eps), i.e. the allowance
// compares false-positive mass against a fraction of the foreground mass.
template <typename T>
struct SegLossResult {
  nn::Var<T> total;
  SegLossBreakdown breakdown;
};

template <typename T>
inline SegLossResult<T> seg_loss_var(const nn::Var<T>& pred, const nn::Tensor<T>& gt, T gamma,
                                     T delta_scale) {
  if (!(gamma > T(0))) throw std::invalid_argument("seg_loss: gamma must be positive");
  auto ld = dice_loss_var(pred, gt);
  auto [da, db] = fn_fp_coeffs_var(pred, gt);

  auto denom = nn::affine(nn::sum_all(pred), T(1), static_cast<T>(kSegEps));
  auto delta = nn::div(nn::Var<T>::constant(nn::Tensor<T>::scalar(delta_scale * gt.sum())), denom);

  nn::Var<T> lg;
  if (static_cast<double>(db.scalar()) < static_cast<double>(delta.scalar())) {
    lg = da;
  } else {
    lg = nn::sub(nn::add(da, db), delta);
  }
  auto total = nn::add(ld, nn::mul(nn::exp_v(nn::affine(ld, -gamma, T(0))), lg));

  SegLossResult<T> r;
  r.total = total;
  r.breakdown.dice = static_cast<double>(ld.scalar());
  r.breakdown.fn_coeff = static_cast<double>(da.scalar());
  r.breakdown.fp_coeff = static_cast<double>(db.scalar());
  r.breakdown.guard = static_cast<double>(lg.scalar());
  r.breakdown.delta_used = static_cast<double>(delta.scalar());
  r.breakdown.gamma = static_cast<double>(gamma);
  r.breakdown.total = static_cast<double>(total.scalar());
  return r;
}

template <typename T>
inline SegLossBreakdown seg_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& gt, T gamma,
                                 T delta_scale) {
  return seg_loss_var(nn::Var<T>::constant(pred), gt, gamma, delta_scale).breakdown;
}

// --------------------------------------------------------- anchor assignment

enum class AnchorLabel : int8_t { kNegative = 0, kPositive = 1, kIgnore = 2 };

struct PositiveAnchor {
  int32_t anchor_index = 0;  // flat index across all levels
  int32_t gt_index = 0;
  Offsets8 target{};
};

struct MatchAssignment {
  std::vector<int8_t> labels;  // one per anchor, flattened level by level
  std::vector<PositiveAnchor> positives;
  std::vector<int> level_offsets;  // start index of each level's anchors
  int64_t num_non_ignored = 0;     // M in the detection loss
};

struct MatchConfig {
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  double ignore_region_iou = 0.5;
  bool force_best = true;  // every gt claims its best-IoU anchor
};

// gts carries (quad, ignore) pairs.
inline MatchAssignment match_anchors(const std::vector<AnchorGrid>& grids,
                                     const std::vector<std::pair<QuadBox, bool>>& gts,
                                     const MatchConfig& cfg = {}) {
  MatchAssignment out;
  int total = 0;
  for (const auto& g : grids) {
    out.level_offsets.push_back(total);
    total += g.num_anchors();
  }
  out.labels.assign(static_cast<size_t>(total), static_cast<int8_t>(AnchorLabel::kNegative));

  struct Best {
    double iou = 0.0;
    int32_t anchor = -1;
  };
  std::vector<Best> best_for_gt(gts.size());
  std::vector<int32_t> anchor_gt(static_cast<size_t>(total), -1);

  for (size_t li = 0; li < grids.size(); ++li) {
    const AnchorGrid& g = grids[li];
    int base = out.level_offsets[li];
    for (int a = 0; a < g.num_anchors(); ++a) {
      const QuadBox& box = g.boxes[static_cast<size_t>(a)];
      double bx0 = box.min_x(), bx1 = box.max_x(), by0 = box.min_y(), by1 = box.max_y();
      double best_iou = 0.0;
      int32_t best_gt = -1;
      double ignore_iou = 0.0;
      for (size_t gi = 0; gi < gts.size(); ++gi) {
        const QuadBox& q = gts[gi].first;
        if (q.max_x() <= bx0 || q.min_x() >= bx1 || q.max_y() <= by0 || q.min_y() >= by1) continue;
        double iou = quad_iou(box, q);
        if (gts[gi].second) {
          ignore_iou = std::max(ignore_iou, iou);
          continue;
        }
        if (iou > best_iou) {
          best_iou = iou;
          best_gt = static_cast<int32_t>(gi);
        }
        if (iou > best_for_gt[gi].iou) {
          best_for_gt[gi].iou = iou;
          best_for_gt[gi].anchor = base + a;
        }
      }
      size_t idx = static_cast<size_t>(base + a);
      if (best_iou >= cfg.pos_iou) {
        out.labels[idx] = static_cast<int8_t>(AnchorLabel::kPositive);
        anchor_gt[idx] = best_gt;
      } else if (best_iou >= cfg.neg_iou) {
        out.labels[idx] = static_cast<int8_t>(AnchorLabel::kIgnore);
      } else if (ignore_iou >= cfg.ignore_region_iou) {
        out.labels[idx] = static_cast<int8_t>(AnchorLabel::kIgnore);
      }
    }
  }

  if (cfg.force_best) {
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (gts[gi].second || best_for_gt[gi].anchor < 0 || best_for_gt[gi].iou <= 0.0) continue;
      size_t idx = static_cast<size_t>(best_for_gt[gi].anchor);
      out.labels[idx] = static_cast<int8_t>(AnchorLabel::kPositive);
      anchor_gt[idx] = static_cast<int32_t>(gi);
    }
  }

  for (size_t li = 0; li < grids.size(); ++li) {
    const AnchorGrid& g = grids[li];
    int base = out.level_offsets[li];
    for (int a = 0; a < g.num_anchors(); ++a) {
      size_t idx = static_cast<size_t>(base + a);
      if (out.labels[idx] == static_cast<int8_t>(AnchorLabel::kPositive)) {
        PositiveAnchor p;
        p.anchor_index = base + a;
        p.gt_index = anchor_gt[idx];
        p.target =
            encode_offsets(g.boxes[static_cast<size_t>(a)], gts[static_cast<size_t>(p.gt_index)].first);
        out.positives.push_back(p);
      }
      if (out.labels[idx] != static_cast<int8_t>(AnchorLabel::kIgnore)) ++out.num_non_ignored;
    }
  }
  return out;
}

// ------------------------------------------------------------ detection loss

// L_det = (1/M) sum_i [ tau_i * smoothL1(offsets_i, target_i) + focal(s_i) ]
// over non-ignored anchors. score_maps are post-sigmoid (num_ratios,h,w);
// offset_maps are (num_ratios*8,h,w). One custom node; gradients are written
// analytically into the maps.
template <typename T>
inline nn::Var<T> detection_loss_var(const std::vector<nn::Var<T>>& score_maps,
                                     const std::vector<nn::Var<T>>& offset_maps,
                                     std::shared_ptr<const MatchAssignment> assignment, T alpha,
                                     T gamma_f) {
  if (score_maps.size() != offset_maps.size() ||
      score_maps.size() != assignment->level_offsets.size())
    throw std::invalid_argument("detection_loss: level count mismatch");
  if (assignment->num_non_ignored == 0)
    throw std::invalid_argument("detection_loss: no non-ignored anchors (degenerate batch)");

  const T inv_m = T(1) / static_cast<T>(assignment->num_non_ignored);
  const size_t nlev = score_maps.size();

  // index positives per level for the regression term
  std::vector<std::vector<const PositiveAnchor*>> pos_by_level(nlev);
  for (const auto& p : assignment->positives) {
    size_t lev = nlev - 1;
    for (size_t li = 0; li + 1 < nlev; ++li) {
      if (p.anchor_index < assignment->level_offsets[li + 1]) {
        lev = li;
        break;
      }
    }
    pos_by_level[lev].push_back(&p);
  }

  double total = 0.0;
  for (size_t li = 0; li < nlev; ++li) {
    const auto& sv = score_maps[li].value();
    int nr = sv.dim(0), h = sv.dim(1), w = sv.dim(2);
    if (h * w * nr + assignment->level_offsets[li] >
        (li + 1 < nlev ? assignment->level_offsets[li + 1]
                       : static_cast<int>(assignment->labels.size())))
      throw std::invalid_argument("detection_loss: maps do not match assignment");
    int base = assignment->level_offsets[li];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int r = 0; r < nr; ++r) {
          int8_t lab = assignment->labels[static_cast<size_t>(base + (y * w + x) * nr + r)];
          if (lab == static_cast<int8_t>(AnchorLabel::kIgnore)) continue;
          total += static_cast<double>(
              focal_loss(sv.at(r, y, x), lab == static_cast<int8_t>(AnchorLabel::kPositive) ? 1 : 0,
                         alpha, gamma_f));
        }
    const auto& ov = offset_maps[li].value();
    for (const PositiveAnchor* p : pos_by_level[li]) {
      int a = p->anchor_index - base;
      int r = a % nr;
      int cell = a / nr;
      int y = cell / w, x = cell % w;
      for (int j = 0; j < 8; ++j)
        total += static_cast<double>(
            smooth_l1_scalar(ov.at(r * 8 + j, y, x) - static_cast<T>(p->target[size_t(j)])));
    }
  }

  std::vector<std::shared_ptr<nn::Node<T>>> parents;
  for (const auto& v : score_maps) parents.push_back(v.node());
  for (const auto& v : offset_maps) parents.push_back(v.node());
  auto n = nn::make_node<T>(nn::Tensor<T>::scalar(static_cast<T>(total) * inv_m), parents);
  if (n->requires_grad) {
    nn::Node<T>* on = n.get();
    std::vector<nn::Node<T>*> snodes, onodes;
    for (const auto& v : score_maps) snodes.push_back(v.node().get());
    for (const auto& v : offset_maps) onodes.push_back(v.node().get());
    n->backprop = [on, snodes, onodes, assignment, alpha, gamma_f, inv_m, nlev, pos_by_level]() {
      T g = on->grad[0] * inv_m;
      for (size_t li = 0; li < nlev; ++li) {
        nn::Node<T>* sn = snodes[li];
        int nr = sn->value.dim(0), h = sn->value.dim(1), w = sn->value.dim(2);
        int base = assignment->level_offsets[li];
        if (sn->requires_grad) {
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
              for (int r = 0; r < nr; ++r) {
                int8_t lab = assignment->labels[static_cast<size_t>(base + (y * w + x) * nr + r)];
                if (lab == static_cast<int8_t>(AnchorLabel::kIgnore)) continue;
                sn->grad.at(r, y, x) +=
                    g * focal_loss_grad(sn->value.at(r, y, x),
                                        lab == static_cast<int8_t>(AnchorLabel::kPositive) ? 1 : 0,
                                        alpha, gamma_f);
              }
        }
        nn::Node<T>* onn = onodes[li];
        if (onn->requires_grad) {
          for (const PositiveAnchor* p : pos_by_level[li]) {
            int a = p->anchor_index - base;
            int r = a % nr;
            int cell = a / nr;
            int y = cell / w, x = cell % w;
            for (int j = 0; j < 8; ++j)
              onn->grad.at(r * 8 + j, y, x) +=
                  g * smooth_l1_scalar_grad(onn->value.at(r * 8 + j, y, x) -
                                            static_cast<T>(p->target[size_t(j)]));
          }
        }
      }
    };
  }
  return nn::Var<T>(n);
}

template <typename T>
inline double detection_loss(const std::vector<nn::Tensor<T>>& score_maps,
                             const std::vector<nn::Tensor<T>>& offset_maps,
                             const MatchAssignment& assignment, T alpha, T gamma_f) {
  std::vector<nn::Var<T>> s, o;
  for (const auto& t : score_maps) s.push_back(nn::Var<T>::constant(t));
  for (const auto& t : offset_maps) o.push_back(nn::Var<T>::constant(t));
  auto a = std::make_shared<MatchAssignment>(assignment);
  return static_cast<double>(detection_loss_var(s, o, a, alpha, gamma_f).scalar());
}

// ----------------------------------------------------------- refinement loss

// Binary cross-entropy on ROI scores plus smooth-L1 on positive ROIs'
// offsets, normalized by the sampled ROI count.
// scores: (K), offsets: (K,8); labels / offset targets are constants.
template <typename T>
inline nn::Var<T> refinement_loss_var(const nn::Var<T>& scores, const nn::Var<T>& offsets,
                                      const std::vector<int>& labels,
                                      const std::vector<Offsets8>& targets) {
  int k = static_cast<int>(labels.size());
  if (static_cast<int>(scores.value().size()) != k || offsets.value().dim(0) != k)
    throw std::invalid_argument("refinement_loss: batch size mismatch");

  nn::Tensor<T> pos({k});
  nn::Tensor<T> neg({k});
  nn::Tensor<T> tgt({k, 8});
  nn::Tensor<T> rowmask({k, 8});
  for (int i = 0; i < k; ++i) {
    pos[size_t(i)] = labels[size_t(i)] == 1 ? T(1) : T(0);
    neg[size_t(i)] = labels[size_t(i)] == 1 ? T(0) : T(1);
    for (int j = 0; j < 8; ++j) {
      tgt.at(i, j) = static_cast<T>(targets[size_t(i)][size_t(j)]);
      rowmask.at(i, j) = pos[size_t(i)];
    }
  }

  auto s = nn::clamp_v(scores, static_cast<T>(kScoreClamp), static_cast<T>(1.0 - kScoreClamp));
  auto bce_pos = nn::mul(nn::log_v(s), nn::Var<T>::constant(std::move(pos)));
  auto bce_neg =
      nn::mul(nn::log_v(nn::affine(s, T(-1), T(1))), nn::Var<T>::constant(std::move(neg)));
  auto bce = nn::affine(nn::add(nn::sum_all(bce_pos), nn::sum_all(bce_neg)), T(-1), T(0));

  auto diff = nn::sub(offsets, nn::Var<T>::constant(std::move(tgt)));
  auto reg = nn::sum_all(nn::mul(nn::smooth_l1_v(diff), nn::Var<T>::constant(std::move(rowmask))));

  return nn::affine(nn::add(bce, reg), T(1) / static_cast<T>(k), T(0));
}

// ------------------------------------------------------------------- total

template <typename T>
inline nn::Var<T> total_loss_var(const nn::Var<T>& l_seg, const nn::Var<T>& l_det,
                                 const nn::Var<T>& l_ref, T lambda1, T lambda2, T lambda3) {
  return nn::add(nn::add(nn::affine(l_seg, lambda1, T(0)), nn::affine(l_det, lambda2, T(0))),
                 nn::affine(l_ref, lambda3, T(0)));
}

inline double total_loss(double l_seg, double l_det, double l_ref, double lambda1, double lambda2,
                         double lambda3) {
  if (!std::isfinite(l_seg) || !std::isfinite(l_det) || !std::isfinite(l_ref))
    throw std::invalid_argument("total_loss: non-finite component");
  return lambda1 * l_seg + lambda2 * l_det + lambda3 * l_ref;
}

}  // namespace rfn
