#pragma once

// Dataset loading, the training loop (data-parallel over per-image worker
// replicas with a fixed reduction order, so runs are reproducible), and the
// evaluation / inference paths.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <thread>
#include <vector>

#include "rfn/config.hpp"
#include "rfn/evalkit.hpp"
#include "rfn/image.hpp"
#include "rfn/losses.hpp"
#include "rfn/model.hpp"
#include "rfn/nn/optim.hpp"
#include "rfn/png_io.hpp"
#include "rfn/postprocess.hpp"
#include "rfn/synthdata.hpp"

namespace rfn {

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataSample {
  std::string stem;  // "000123"
  ImageU8 image;
  std::vector<Annotation> annotations;
};

// Reads the manifest-driven layout written by generate_dataset.
inline std::vector<DataSample> load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  std::ifstream manifest(root / "manifest.txt");
  if (!manifest)
    throw std::runtime_error("load_dataset: missing manifest.txt in " + dir);
  std::vector<DataSample> out;
  std::string name;
  long count;
  uint64_t seed;
  while (manifest >> name >> count >> seed) {
    DataSample s;
    s.stem = name.substr(0, name.rfind('.'));
    s.image = read_png((root / "images" / name).string());
    s.annotations = read_annotations((root / "labels" / ("gt_" + s.stem + ".txt")).string());
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("load_dataset: empty manifest in " + dir);
  return out;
}

// Run fn(i) for i in [0,n) on up to `threads` workers; outputs must be
// written to per-index slots by the caller.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[static_cast<size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

template <typename T>
struct PreparedSample {
  nn::Tensor<T> image;   // (3,h,w) in [0,1]
  nn::Tensor<T> seg_gt;  // (1,h/4,w/4) rasterized from non-ignore quads
  std::shared_ptr<MatchAssignment> assignment;
  std::vector<std::pair<QuadBox, bool>> gts;  // (quad, ignore)
};

template <typename T>
inline PreparedSample<T> prepare_sample(const DataSample& s, const RunConfig& cfg,
                                        const std::vector<AnchorGrid>& grids) {
  if (s.image.height != cfg.image_size || s.image.width != cfg.image_size)
    throw std::runtime_error("prepare_sample: image " + s.stem + " is " +
                             std::to_string(s.image.width) + "x" + std::to_string(s.image.height) +
                             " but train.image_size = " + std::to_string(cfg.image_size));
  PreparedSample<T> p;
  p.image = image_to_tensor<T>(s.image);
  std::vector<QuadBox> fg_quads;
  for (const auto& a : s.annotations) {
    p.gts.emplace_back(a.quad, a.ignore);
    if (!a.ignore) fg_quads.push_back(a.quad.scaled(0.25));
  }
  BinaryMask mask = rasterize_mask(fg_quads, cfg.image_size / 4, cfg.image_size / 4);
  p.seg_gt = nn::Tensor<T>({1, mask.height, mask.width});
  for (size_t i = 0; i < mask.values.size(); ++i) p.seg_gt[i] = static_cast<T>(mask.values[i]);
  p.assignment = std::make_shared<MatchAssignment>(match_anchors(grids, p.gts, match_config(cfg)));
  return p;
}

// --------------------------------------------------------------- loss build

template <typename T>
struct ImageLosses {
  nn::Var<T> total;
  double seg = 0.0;
  double det = 0.0;
  double ref = 0.0;
};

// Candidate pool used for refinement training: the APR selection on the
// current attention map, plus the ground-truth boxes so positives exist from
// the first step (standard two-stage practice). ROIs are the top-scoring
// positives and negatives at up to the configured positive fraction.
template <typename T>
inline ImageLosses<T> image_losses(const RfnModel<T>& model, const PreparedSample<T>& sample,
                                   const std::vector<AnchorGrid>& grids) {
  const RunConfig& cfg = model.config();
  ModelForward<T> fwd = model.forward(sample.image);

  std::vector<nn::Var<T>> score_maps, offset_maps;
  for (const auto& m : fwd.heads) {
    score_maps.push_back(m.scores);
    offset_maps.push_back(m.offsets);
  }
  ImageLosses<T> out;
  auto l_det = detection_loss_var<T>(score_maps, offset_maps, sample.assignment,
                                     static_cast<T>(cfg.focal_alpha),
                                     static_cast<T>(cfg.focal_gamma));
  out.det = static_cast<double>(l_det.scalar());

  nn::Var<T> l_seg = nn::Var<T>::constant(nn::Tensor<T>::scalar(T(0)));
  if (cfg.toggle_sff) {
    auto seg = seg_loss_var<T>(fwd.attention, sample.seg_gt, static_cast<T>(cfg.loss_gamma),
                               static_cast<T>(cfg.loss_delta_scale));
    l_seg = seg.total;
    out.seg = seg.breakdown.total;
  }

  nn::Var<T> l_ref = nn::Var<T>::constant(nn::Tensor<T>::scalar(T(0)));
  if (cfg.toggle_apr) {
    auto dets = model.decode_all(fwd, grids);
    BinaryMask f = binarize_attention(fwd.attention.value(), cfg.apr_binarize_threshold);
    CandidatePool pool =
        select_candidates(dets, grids, f, static_cast<int>(cfg.apr_beta));
    std::vector<Candidate> cands = pool.entries;
    if (cfg.apr_train_add_gt) {
      // gt boxes plus fixed jittered variants; the variants give the
      // regression head nonzero targets from the first step
      static constexpr double kJitter[][2] = {{0.0, 0.0},  {0.08, 0.05},  {-0.08, -0.05},
                                              {0.06, -0.07}, {-0.05, 0.08}};
      for (const auto& [quad, ignore] : sample.gts) {
        if (ignore) continue;
        double w = quad.width(), h = quad.height();
        for (const auto& j : kJitter) {
          Candidate c;
          c.box = quad;
          for (auto& p : c.box.corners) {
            p.x += j[0] * w;
            p.y += j[1] * h;
          }
          c.score = 1.0;
          cands.push_back(c);
        }
      }
    }

    // label candidates against gt
    struct Labeled {
      const Candidate* cand;
      int label;
      Offsets8 target;
    };
    std::vector<Labeled> pos, neg;
    for (const auto& c : cands) {
      if (!(c.box.width() > 0) || !(c.box.height() > 0)) continue;
      double best = 0.0;
      const QuadBox* best_gt = nullptr;
      for (const auto& [quad, ignore] : sample.gts) {
        if (ignore) continue;
        double iou = quad_iou(c.box, quad);
        if (iou > best) {
          best = iou;
          best_gt = &quad;
        }
      }
      if (best_gt && best >= cfg.apr_pos_iou)
        pos.push_back({&c, 1, encode_offsets(c.box, *best_gt)});
      else
        neg.push_back({&c, 0, Offsets8{}});
    }
    // deterministic sampling: highest scores first
    auto by_score = [](const Labeled& a, const Labeled& b) {
      return a.cand->score > b.cand->score;
    };
    std::stable_sort(pos.begin(), pos.end(), by_score);
    std::stable_sort(neg.begin(), neg.end(), by_score);
    size_t max_pos = static_cast<size_t>(cfg.apr_train_rois * cfg.apr_train_pos_fraction);
    if (pos.size() > max_pos) pos.resize(max_pos);
    size_t max_neg = static_cast<size_t>(cfg.apr_train_rois) - pos.size();
    if (neg.size() > max_neg) neg.resize(max_neg);

    std::vector<Candidate> sampled;
    std::vector<int> labels;
    std::vector<Offsets8> targets;
    for (const auto& l : pos) {
      sampled.push_back(*l.cand);
      labels.push_back(1);
      targets.push_back(l.target);
    }
    for (const auto& l : neg) {
      sampled.push_back(*l.cand);
      labels.push_back(0);
      targets.push_back(l.target);
    }

    if (!sampled.empty()) {
      auto ref = model.refine().forward(sampled, fwd.pyramid);
      std::vector<int> kept_labels;
      std::vector<Offsets8> kept_targets;
      for (int idx : ref.kept) {
        kept_labels.push_back(labels[static_cast<size_t>(idx)]);
        kept_targets.push_back(targets[static_cast<size_t>(idx)]);
      }
      l_ref = refinement_loss_var(ref.scores, ref.offsets, kept_labels, kept_targets);
      out.ref = static_cast<double>(l_ref.scalar());
    }
  }

  out.total = total_loss_var(l_seg, l_det, l_ref, static_cast<T>(cfg.lambda1),
                             static_cast<T>(cfg.lambda2), static_cast<T>(cfg.lambda3));
  return out;
}

// ------------------------------------------------------------------ trainer

struct EpochRow {
  int epoch = 0;
  double seg = 0.0;
  double det = 0.0;
  double ref = 0.0;
  double total = 0.0;
};

template <typename T>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::string run_dir)
      : cfg_(cfg), run_dir_(std::move(run_dir)), master_(cfg) {
    validate_config(cfg_);
    std::filesystem::create_directories(run_dir_);
    save_config(cfg_, (std::filesystem::path(run_dir_) / "config.echo").string());
    grids_ = make_anchor_grids(cfg_, static_cast<int>(cfg_.image_size),
                               static_cast<int>(cfg_.image_size));
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    threads_ = cfg_.threads > 0 ? static_cast<int>(cfg_.threads) : std::max(1, hw);
    threads_ = std::min<int>(threads_, static_cast<int>(cfg_.batch_size));
    for (int w = 0; w < threads_; ++w) workers_.emplace_back(std::make_unique<RfnModel<T>>(cfg_));
  }

  RfnModel<T>& model() { return master_; }
  const std::vector<EpochRow>& history() const { return history_; }

  // Trains on the dataset, writes loss.csv and checkpoint.rfn under run_dir.
  void train(const std::vector<DataSample>& data) {
    if (data.empty()) throw std::runtime_error("train: empty dataset");

    set_normalization(data);
    std::vector<PreparedSample<T>> prepared(data.size());
    parallel_for(static_cast<int>(data.size()), threads_, [&](int i) {
      prepared[static_cast<size_t>(i)] = prepare_sample<T>(data[static_cast<size_t>(i)], cfg_, grids_);
    });

    nn::Sgd<T> opt(cfg_.lr, cfg_.momentum, cfg_.weight_decay, cfg_.clip_grad_norm);
    std::ofstream csv(std::filesystem::path(run_dir_) / "loss.csv");
    csv << "epoch,L_seg,L_det,L_ref,total\n";

    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      opt.set_lr(cfg_.lr * std::pow(0.5, epoch / cfg_.lr_halve_epochs));
      std::mt19937_64 shuffle_rng(static_cast<uint64_t>(cfg_.seed) * 1000003ull +
                                  static_cast<uint64_t>(epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);

      EpochRow row;
      row.epoch = epoch;
      int images_seen = 0;
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg_.batch_size)) {
        size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg_.batch_size));
        std::vector<int> batch(order.begin() + static_cast<long>(start),
                               order.begin() + static_cast<long>(stop));

        for (auto& w : workers_) {
          w->copy_values_from(master_);
          w->store().zero_grads();
        }
        std::vector<ImageLosses<T>> losses(batch.size());
        // contiguous chunks keep the gradient reduction order fixed
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(threads_));
        size_t chunk = (batch.size() + static_cast<size_t>(threads_) - 1) /
                       static_cast<size_t>(threads_);
        for (int w = 0; w < threads_; ++w) {
          pool.emplace_back([&, w]() {
            try {
              size_t lo = static_cast<size_t>(w) * chunk;
              size_t hi = std::min(batch.size(), lo + chunk);
              for (size_t bi = lo; bi < hi; ++bi) {
                auto& sample = prepared[static_cast<size_t>(batch[bi])];
                ImageLosses<T> l = image_losses(*workers_[static_cast<size_t>(w)], sample, grids_);
                nn::backward(l.total);
                losses[bi] = std::move(l);
              }
            } catch (...) {
              errors[static_cast<size_t>(w)] = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);

        double scale = 1.0 / static_cast<double>(batch.size());
        for (size_t bi = 0; bi < batch.size(); ++bi) {
          double t = static_cast<double>(losses[bi].total.scalar());
          if (!std::isfinite(t))
            throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", image index " + std::to_string(batch[bi]));
          row.seg += losses[bi].seg;
          row.det += losses[bi].det;
          row.ref += losses[bi].ref;
          row.total += t;
          ++images_seen;
        }

        master_.store().zero_grads();
        for (int w = 0; w < threads_; ++w) {
          auto& ws = workers_[static_cast<size_t>(w)]->store();
          for (size_t p = 0; p < ws.params.size(); ++p) {
            const auto& g = ws.params[p].second.grad();
            auto& mg = master_.store().params[p].second;
            mg.node()->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
              mg.node()->grad[i] += static_cast<T>(scale) * g[i];
          }
        }
        opt.step(master_.store());
      }

      row.seg /= images_seen;
      row.det /= images_seen;
      row.ref /= images_seen;
      row.total /= images_seen;
      history_.push_back(row);
      csv << row.epoch << ',' << row.seg << ',' << row.det << ',' << row.ref << ',' << row.total
          << '\n';
      csv.flush();
    }

    save_checkpoint(master_, (std::filesystem::path(run_dir_) / "checkpoint.rfn").string());
  }

 private:
  void set_normalization(const std::vector<DataSample>& data) {
    double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    long n = 0;
    for (const auto& s : data) {
      for (int y = 0; y < s.image.height; ++y)
        for (int x = 0; x < s.image.width; ++x)
          for (int c = 0; c < 3; ++c) {
            double v = s.image.at(y, x, c) / 255.0;
            sum[c] += v;
            sq[c] += v * v;
          }
      n += static_cast<long>(s.image.height) * s.image.width;
    }
    for (int c = 0; c < 3; ++c) {
      double mean = sum[c] / n;
      double var = std::max(1e-6, sq[c] / n - mean * mean);
      master_.backbone().norm_mean[static_cast<size_t>(c)] = static_cast<T>(mean);
      master_.backbone().norm_std[static_cast<size_t>(c)] = static_cast<T>(std::sqrt(var));
    }
    for (auto& w : workers_) {
      w->backbone().norm_mean = master_.backbone().norm_mean;
      w->backbone().norm_std = master_.backbone().norm_std;
    }
  }

  RunConfig cfg_;
  std::string run_dir_;
  RfnModel<T> master_;
  std::vector<std::unique_ptr<RfnModel<T>>> workers_;
  std::vector<AnchorGrid> grids_;
  std::vector<EpochRow> history_;
  int threads_ = 1;
};

// ---------------------------------------------------------------- inference

// Full detection path for one image; honors the module toggles.
template <typename T>
inline std::vector<ScoredDetection> detect(const RfnModel<T>& model, const nn::Tensor<T>& image) {
  const RunConfig& cfg = model.config();
  auto grids = make_anchor_grids(cfg, image.dim(1), image.dim(2));
  ModelForward<T> fwd = model.forward(image);
  auto dets = model.decode_all(fwd, grids);

  std::vector<std::pair<double, QuadBox>> refined;
  if (cfg.toggle_apr) {
    BinaryMask f = binarize_attention(fwd.attention.value(), cfg.apr_binarize_threshold);
    CandidatePool pool = select_candidates(dets, grids, f, static_cast<int>(cfg.apr_beta));
    if (!pool.entries.empty()) {
      auto ref = model.refine().forward(pool.entries, fwd.pyramid);
      refined = decode_refined(pool.entries, ref);
    }
  } else {
    for (const auto& d : dets)
      for (size_t i = 0; i < d.boxes.size(); ++i)
        if (d.scores[i] >= cfg.post_score_floor) refined.emplace_back(d.scores[i], d.boxes[i]);
  }

  PostprocessConfig post;
  post.mu = cfg.toggle_rescore ? cfg.post_mu : 0.0;
  post.score_floor = cfg.post_score_floor;
  post.nms_iou = cfg.post_nms_iou;
  return final_detections(refined, fwd.attention.value(), post);
}

struct EvalReport {
  Prf metrics;
  int tp = 0, fp = 0, fn = 0;
  std::vector<double> count_thresholds{0.6, 0.8};
  std::vector<int> matched_counts;
  std::vector<PrPoint> pr;
};

template <typename T>
inline EvalReport run_eval(const RfnModel<T>& model, const std::vector<DataSample>& data,
                           double iou_t, int threads = 1) {
  std::vector<std::vector<std::pair<QuadBox, double>>> preds(data.size());
  parallel_for(static_cast<int>(data.size()), threads, [&](int i) {
    auto img = image_to_tensor<T>(data[static_cast<size_t>(i)].image);
    for (const auto& d : detect(model, img))
      preds[static_cast<size_t>(i)].emplace_back(d.box, d.overall);
  });

  EvalReport rep;
  std::vector<double> scores;
  for (size_t i = 0; i < data.size(); ++i) {
    auto rec = match_detections(preds[i], data[i].annotations, iou_t);
    rep.tp += rec.tp;
    rep.fp += rec.fp;
    rep.fn += rec.fn;
    for (const auto& p : preds[i]) scores.push_back(p.second);
  }
  EvalRecord agg;
  agg.tp = rep.tp;
  agg.fp = rep.fp;
  agg.fn = rep.fn;
  rep.metrics = prf(agg);

  rep.matched_counts.assign(rep.count_thresholds.size(), 0);
  for (size_t i = 0; i < data.size(); ++i) {
    auto counts = matched_count_at(preds[i], data[i].annotations, rep.count_thresholds);
    for (size_t t = 0; t < counts.size(); ++t) rep.matched_counts[t] += counts[t];
  }

  // dataset-level PR sweep over the distinct score values
  std::sort(scores.begin(), scores.end(), std::greater<double>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  if (scores.empty()) {
    rep.pr.push_back(PrPoint{1.0, 0.0, 0.0});
  } else {
    if (scores.back() != 0.0) scores.push_back(0.0);
    for (double t : scores) {
      int tp = 0, fp = 0, fn = 0;
      for (size_t i = 0; i < data.size(); ++i) {
        std::vector<std::pair<QuadBox, double>> kept;
        for (const auto& p : preds[i])
          if (p.second >= t) kept.push_back(p);
        auto rec = match_detections(kept, data[i].annotations, iou_t);
        tp += rec.tp;
        fp += rec.fp;
        fn += rec.fn;
      }
      EvalRecord r;
      r.tp = tp;
      r.fp = fp;
      r.fn = fn;
      Prf m = prf(r);
      rep.pr.push_back(PrPoint{t, m.precision, m.recall});
    }
  }
  return rep;
}

}  // namespace rfn
