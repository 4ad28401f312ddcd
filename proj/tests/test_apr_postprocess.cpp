#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "rfn/apr.hpp"
#include "rfn/postprocess.hpp"
#include "testutil.hpp"

using namespace rfn;
using nn::Tensor;
using nn::Var;
using Catch::Approx;

namespace {

// Independent reference: enumerate all points, filter by the scaled mask,
// per-point argmax (ties to lower ratio), global stable sort, truncate,
// then fallback fill from background winners.
CandidatePool reference_select(const std::vector<DetectionSet>& dets,
                               const std::vector<AnchorGrid>& grids, const BinaryMask& f,
                               int beta, bool allow_fallback) {
  std::vector<Candidate> fg, bg;
  for (size_t li = 0; li < grids.size(); ++li) {
    const auto& g = grids[li];
    BinaryMask fi = mask_resize_nearest(f, g.height, g.width);
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        int best = 0;
        for (int r = 1; r < static_cast<int>(g.ratios.size()); ++r)
          if (dets[li].scores[size_t(g.index_of(y, x, r))] >
              dets[li].scores[size_t(g.index_of(y, x, best))])
            best = r;
        Candidate c;
        c.level_index = dets[li].level_index;
        c.grid_y = y;
        c.grid_x = x;
        c.ratio = best;
        c.box = dets[li].boxes[size_t(g.index_of(y, x, best))];
        c.score = dets[li].scores[size_t(g.index_of(y, x, best))];
        c.fallback = fi.at(y, x) == 0;
        (c.fallback ? bg : fg).push_back(c);
      }
  }
  auto cmp = [](const Candidate& a, const Candidate& b) { return a.score > b.score; };
  std::stable_sort(fg.begin(), fg.end(), cmp);
  if (static_cast<int>(fg.size()) > beta) fg.resize(size_t(beta));
  if (allow_fallback && static_cast<int>(fg.size()) < beta) {
    std::stable_sort(bg.begin(), bg.end(), cmp);
    size_t need = size_t(beta) - fg.size();
    fg.insert(fg.end(), bg.begin(), bg.begin() + std::min(need, bg.size()));
  }
  std::stable_sort(fg.begin(), fg.end(), cmp);
  CandidatePool p;
  p.beta = beta;
  p.entries = std::move(fg);
  return p;
}

std::pair<std::vector<DetectionSet>, std::vector<AnchorGrid>> random_setup(uint64_t seed,
                                                                           int image = 64) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<AnchorGrid> grids;
  std::vector<DetectionSet> dets;
  for (int li = 0; li < 4; ++li) {
    int stride = kPyramidStrides[size_t(li)];
    auto g = generate_anchors(image / stride, image / stride, stride, 4.0 * stride);
    DetectionSet d;
    d.level_index = li + 1;
    for (int i = 0; i < g.num_anchors(); ++i) {
      d.boxes.push_back(g.boxes[size_t(i)]);
      d.scores.push_back(u(rng));
      d.raw_offsets.push_back({});
    }
    grids.push_back(std::move(g));
    dets.push_back(std::move(d));
  }
  return {dets, grids};
}

bool same_pool(const CandidatePool& a, const CandidatePool& b) {
  if (a.entries.size() != b.entries.size()) return false;
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const auto& x = a.entries[i];
    const auto& y = b.entries[i];
    if (x.level_index != y.level_index || x.grid_y != y.grid_y || x.grid_x != y.grid_x ||
        x.ratio != y.ratio || x.score != y.score || x.fallback != y.fallback)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("binarize_attention threshold conventions", "[apr]") {
  auto a = Tensor<double>::full({1, 4, 4}, 0.7);
  CHECK(binarize_attention(a, 0.5).count_ones() == 16u);
  a.fill(0.3);
  CHECK(binarize_attention(a, 0.5).count_ones() == 0u);
  a.fill(0.5);  // exactly at threshold -> 1
  CHECK(binarize_attention(a, 0.5).count_ones() == 16u);
}

TEST_CASE("mask_resize_nearest preserves binarity", "[apr]") {
  BinaryMask m(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 4; ++x) m.at(y, x) = 1;
  auto up = mask_resize_nearest(m, 16, 16);
  auto down = mask_resize_nearest(m, 2, 2);
  for (uint8_t v : up.values) CHECK((v == 0 || v == 1));
  CHECK(down.at(0, 0) == 1);
  CHECK(down.at(0, 1) == 0);
}

TEST_CASE("select_candidates: foreground gating and per-point argmax", "[apr]") {
  auto [dets, grids] = random_setup(1);

  // F all ones, beta larger than the point count: every point's winner kept
  BinaryMask all_fg(16, 16);
  std::fill(all_fg.values.begin(), all_fg.values.end(), uint8_t(1));
  int total_points = 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2;
  auto pool = select_candidates(dets, grids, all_fg, 10000);
  CHECK(static_cast<int>(pool.entries.size()) == total_points);
  for (size_t i = 1; i < pool.entries.size(); ++i)
    CHECK(pool.entries[i - 1].score >= pool.entries[i].score);
  for (const auto& e : pool.entries) CHECK_FALSE(e.fallback);

  // single foreground point contributes exactly its best-scoring ratio box
  BinaryMask one(16, 16);
  one.at(5, 7) = 1;
  auto pool1 = select_candidates(dets, grids, one, 10000, /*allow_fallback=*/false);
  // levels 2..4 map (5,7) to their own cells; level 1 contributes exactly one
  int level1_entries = 0;
  for (const auto& e : pool1.entries)
    if (e.level_index == 1) {
      ++level1_entries;
      CHECK(e.grid_y == 5);
      CHECK(e.grid_x == 7);
      double best = 0;
      for (int r = 0; r < 8; ++r)
        best = std::max(best, dets[0].scores[size_t(grids[0].index_of(5, 7, r))]);
      CHECK(e.score == Approx(best));
    }
  CHECK(level1_entries == 1);

  // F all zero -> pure fallback fill
  BinaryMask none(16, 16);
  auto pool0 = select_candidates(dets, grids, none, 37);
  CHECK(pool0.entries.size() == 37u);
  for (const auto& e : pool0.entries) CHECK(e.fallback);
  // and with fallback disabled the pool is empty
  CHECK(select_candidates(dets, grids, none, 37, false).entries.empty());

  CHECK_THROWS_AS(select_candidates(dets, grids, none, 0), std::invalid_argument);
}

TEST_CASE("select_candidates equals the brute-force reference", "[apr]") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    auto [dets, grids] = random_setup(seed + 100);
    std::mt19937_64 rng(seed);
    BinaryMask f(16, 16);
    for (auto& v : f.values) v = (rng() & 3) == 0 ? 1 : 0;
    int beta = 1 + static_cast<int>(rng() % 200);
    bool fallback = (rng() & 1) != 0;
    auto got = select_candidates(dets, grids, f, beta, fallback);
    auto want = reference_select(dets, grids, f, beta, fallback);
    CHECK(same_pool(got, want));
    CHECK(static_cast<int>(got.entries.size()) <= beta);
  }
}

TEST_CASE("select_candidates monotone under foreground growth", "[apr]") {
  auto [dets, grids] = random_setup(55);
  std::mt19937_64 rng(56);
  BinaryMask f(16, 16);
  for (auto& v : f.values) v = (rng() & 7) == 0 ? 1 : 0;
  auto base = select_candidates(dets, grids, f, 100000, false);
  BinaryMask grown = f;
  for (auto& v : grown.values)
    if ((rng() & 3) == 0) v = 1;
  auto more = select_candidates(dets, grids, grown, 100000, false);
  for (const auto& e : base.entries) {
    bool still = false;
    for (const auto& e2 : more.entries)
      if (e2.level_index == e.level_index && e2.grid_y == e.grid_y && e2.grid_x == e.grid_x &&
          e2.ratio == e.ratio)
        still = true;
    CHECK(still);
  }
}

TEST_CASE("refine: cardinality, identity decode, shapes", "[apr]") {
  RefineConfig cfg;
  cfg.channels = 4;
  cfg.hidden = 16;
  nn::ParamStore<double> store;
  store.rng.seed(60);
  RefineHead<double> head(store, cfg);

  FeaturePyramid<double> pyr;
  pyr.channels = 4;
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int li = 0; li < 4; ++li) {
    int sz = 16 >> li;
    Tensor<double> t({4, sz, sz});
    for (size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    pyr.levels.push_back(Var<double>::constant(t));
  }

  std::vector<Candidate> cands;
  for (int i = 0; i < 5; ++i) {
    Candidate c;
    c.box = QuadBox::rect(4.0 + i * 3, 6.0, 24.0 + i * 3, 18.0);
    c.score = 0.5;
    cands.push_back(c);
  }
  auto out = head.forward(cands, pyr);
  CHECK(out.kept.size() == 5u);
  CHECK(out.scores.value().dims() == std::vector<int>{5});
  CHECK(out.offsets.value().dims() == std::vector<int>{5, 8});
  for (size_t i = 0; i < 5; ++i) {
    CHECK(out.scores.value()[i] > 0.0);
    CHECK(out.scores.value()[i] < 1.0);
  }

  // zero-initialized regression head: refined boxes equal the candidates
  auto refined = decode_refined(cands, out);
  REQUIRE(refined.size() == 5u);
  for (size_t i = 0; i < 5; ++i)
    for (int k = 0; k < 4; ++k) {
      CHECK(refined[i].second[k].x == Approx(cands[i].box[k].x).margin(1e-9));
      CHECK(refined[i].second[k].y == Approx(cands[i].box[k].y).margin(1e-9));
    }

  // degenerate candidate dropped with a count
  Candidate degen;
  degen.box = QuadBox{{Point{5, 5}, {5, 5}, {5, 5}, {5, 5}}};
  auto cands2 = cands;
  cands2.push_back(degen);
  auto out2 = head.forward(cands2, pyr);
  CHECK(out2.kept.size() == 5u);
  CHECK(out2.dropped_degenerate == 1);

  CHECK_THROWS_AS(head.forward({}, pyr), std::invalid_argument);

  // fpn_assign mode also produces one output per candidate
  RefineConfig cfg2 = cfg;
  cfg2.roi_mode = RoiMode::kFpnAssign;
  nn::ParamStore<double> store2;
  store2.rng.seed(62);
  RefineHead<double> head2(store2, cfg2);
  CHECK(head2.forward(cands, pyr).kept.size() == 5u);
}

TEST_CASE("instance_score examples", "[postprocess]") {
  auto a = Tensor<double>::full({1, 16, 16}, 0.7);
  CHECK(instance_score(QuadBox::rect(2, 2, 10, 9), a) == Approx(0.7).margin(1e-12));

  // checkerboard over an even box -> 0.5
  Tensor<double> cb({1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) cb.at(0, y, x) = (x + y) % 2 == 0 ? 1.0 : 0.0;
  CHECK(instance_score(QuadBox::rect(2, 2, 10, 10), cb) == Approx(0.5).margin(1e-12));

  // half 0.2 / half 0.8
  Tensor<double> halves({1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) halves.at(0, y, x) = y < 8 ? 0.2 : 0.8;
  CHECK(instance_score(QuadBox::rect(0, 0, 16, 16), halves) == Approx(0.5).margin(1e-9));

  CHECK_THROWS_AS(instance_score(QuadBox::rect(100, 100, 101, 101), a), DegenerateBoxError);
}

TEST_CASE("rescore closed forms and derivative", "[postprocess]") {
  CHECK(rescore(0.37, 0.9, 0.0) == Approx(std::exp(0.37)).margin(1e-12));
  CHECK(rescore(0.0, 0.5, 0.5) == Approx(1.5).margin(1e-12));
  CHECK(rescore(1.0, 1.0, 0.5) == Approx(6.4129).margin(1e-3));
  CHECK(rescore(0.85, 0.0, 0.5) == Approx(2.7700).margin(1e-3));
  CHECK(rescore(0.80, 1.0, 0.5) == Approx(5.2506).margin(1e-3));
  CHECK_THROWS_AS(rescore(0.5, 0.5, -0.1), std::invalid_argument);

  // dS'/dS_I = 2 mu e^{S_c} e^{2 S_I - 1} > 0, increasing in S_I; checked
  // against central differences
  std::mt19937_64 rng(70);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double prev_grad = 0.0;
  for (double si : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    double sc = u(rng);
    double h = 1e-6;
    double num = (rescore(sc, si + h, 0.5) - rescore(sc, si - h, 0.5)) / (2 * h);
    double ana = 2.0 * 0.5 * std::exp(sc) * std::exp(2.0 * si - 1.0);
    CHECK(testutil::rel_err(ana, num) < 1e-6);
    CHECK(ana > 0.0);
    double fixed_sc = 2.0 * 0.5 * std::exp(0.3) * std::exp(2.0 * si - 1.0);
    CHECK(fixed_sc > prev_grad);  // increasing in S_I
    prev_grad = fixed_sc;
  }

  // strictly increasing in S_c and S_I
  CHECK(rescore(0.6, 0.5, 0.5) > rescore(0.5, 0.5, 0.5));
  CHECK(rescore(0.5, 0.6, 0.5) > rescore(0.5, 0.5, 0.5));
}

TEST_CASE("final_detections: re-scored NMS behavior", "[postprocess]") {
  Tensor<double> a({1, 16, 16});  // attention at stride 4 covering 64x64 image

  // empty input -> empty output
  CHECK(final_detections<double>({}, a).empty());

  // two fully overlapping boxes; the instance-score winner survives
  QuadBox box = QuadBox::rect(8, 8, 40, 40);  // image coords; /4 -> (2,2)-(10,10)
  for (int y = 2; y < 10; ++y)
    for (int x = 2; x < 10; ++x) a.at(0, y, x) = 1.0;
  // (S_c=0.85, S_I=0) needs zero attention under an overlapping box; use a
  // second box over an empty region but fully overlapping is required, so
  // instead verify via the score ordering of the same box pair computed at
  // the formula level plus a same-box NMS dedup.
  Tensor<double> zero_a({1, 16, 16});
  std::vector<std::pair<double, QuadBox>> pair_dets{{0.85, box}, {0.80, box}};

  // attention = 1 under the box: S_I = 1 for both; relative ranking driven by
  // the combined formula. Build the spec pair explicitly:
  PostprocessConfig cfg;
  cfg.mu = 0.5;
  // S_c=0.85 with S_I=0.0 vs S_c=0.80 with S_I=1.0
  double s_low = rescore(0.85, 0.0, cfg.mu);
  double s_high = rescore(0.80, 1.0, cfg.mu);
  CHECK(s_high == Approx(5.2506).margin(1e-3));
  CHECK(s_low == Approx(2.7700).margin(1e-3));
  CHECK(s_high > s_low);

  // run the pipeline: attention 1 under the box makes the S_c=0.80 box win
  // only through re-scoring if its S_I advantage is real; emulate the spec
  // pair by giving the boxes different attention footprints
  Tensor<double> split({1, 16, 16});
  QuadBox hot = QuadBox::rect(8, 8, 40, 40);
  QuadBox cold = QuadBox::rect(44, 8, 60, 40);  // disjoint cold region
  for (int y = 2; y < 10; ++y)
    for (int x = 2; x < 10; ++x) split.at(0, y, x) = 1.0;
  auto out = final_detections<double>({{0.85, cold}, {0.80, hot}}, split, cfg);
  REQUIRE(out.size() == 2u);  // disjoint -> both kept
  CHECK(out[0].cls_score == Approx(0.80));
  CHECK(out[0].inst_score == Approx(1.0));
  CHECK(out[0].overall > out[1].overall);

  // identical boxes, higher S_I vs higher S_c: NMS keeps the re-scored winner
  Tensor<double> attn({1, 16, 16});
  for (int y = 2; y < 10; ++y)
    for (int x = 2; x < 10; ++x) attn.at(0, y, x) = 1.0;
  QuadBox shifted = QuadBox::rect(10, 8, 42, 40);  // big overlap with `hot`
  // `hot` sits on attention 1; `shifted` hangs half off it
  auto duel = final_detections<double>({{0.85, shifted}, {0.80, hot}}, attn, cfg);
  REQUIRE(duel.size() == 1u);
  CHECK(duel[0].cls_score == Approx(0.80));

  // mu = 0 reduces to plain classification-score NMS (identical kept set)
  std::mt19937_64 rng(80);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<std::pair<double, QuadBox>> dets;
  for (int i = 0; i < 25; ++i)
    dets.emplace_back(u(rng), testutil::random_convex_quad(rng, 0.0, 60.0));
  Tensor<double> ra({1, 16, 16});
  for (size_t i = 0; i < ra.size(); ++i) ra[i] = 0.5 * (1 + std::sin(static_cast<double>(i)));
  PostprocessConfig mu0;
  mu0.mu = 0.0;
  auto rescored = final_detections<double>(dets, ra, mu0);
  std::vector<std::pair<QuadBox, double>> plain;
  for (const auto& [s, b] : dets)
    if (s >= mu0.score_floor) {
      // drop zero-coverage boxes exactly like the pipeline
      try {
        instance_score(b.scaled(0.25), ra);
        plain.emplace_back(b, s);
      } catch (const DegenerateBoxError&) {
      }
    }
  auto kept = rotated_nms(plain, mu0.nms_iou);
  REQUIRE(rescored.size() == kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    CHECK(rescored[i].cls_score == Approx(plain[size_t(kept[i])].second));
  }

  // score_floor drops low classification scores
  PostprocessConfig floor_cfg;
  floor_cfg.score_floor = 0.9;
  CHECK(final_detections<double>({{0.5, hot}}, attn, floor_cfg).empty());
}
