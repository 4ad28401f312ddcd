#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <random>

#include "rfn/evalkit.hpp"
#include "rfn/synthdata.hpp"
#include "testutil.hpp"

using namespace rfn;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

std::vector<Annotation> boxes_to_gts(const std::vector<QuadBox>& quads) {
  std::vector<Annotation> out;
  for (const auto& q : quads) out.push_back(make_annotation(q, "TEXT"));
  return out;
}

double mean_luma(const ImageU8& img, int y, int x) {
  return (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / (3.0 * 255.0);
}

}  // namespace

TEST_CASE("match_detections: perfect, one-to-one, ignore", "[evalkit]") {
  std::vector<QuadBox> quads = {QuadBox::rect(0, 0, 10, 10), QuadBox::rect(20, 0, 35, 10),
                                QuadBox::rect(0, 20, 10, 38)};
  auto gts = boxes_to_gts(quads);

  std::vector<std::pair<QuadBox, double>> preds;
  for (const auto& q : quads) preds.emplace_back(q, 0.9);
  auto rec = match_detections(preds, gts, 0.5);
  CHECK(rec.tp == 3);
  CHECK(rec.fp == 0);
  CHECK(rec.fn == 0);
  CHECK(rec.matches.size() == 3u);

  // two preds on one gt -> tp 1, fp 1
  auto rec2 = match_detections({{quads[0], 0.9}, {quads[0], 0.8}}, boxes_to_gts({quads[0]}), 0.5);
  CHECK(rec2.tp == 1);
  CHECK(rec2.fp == 1);
  CHECK(rec2.fn == 0);

  // single pred inside an ignore region: neither tp nor fp
  auto ignore_gt = make_annotation(QuadBox::rect(0, 0, 10, 10), "###");
  auto rec3 = match_detections({{QuadBox::rect(1, 1, 9, 9), 0.9}}, {ignore_gt}, 0.5);
  CHECK(rec3.tp == 0);
  CHECK(rec3.fp == 0);
  CHECK(rec3.ignored_preds == 1);

  // tp + fn == number of non-ignore gts
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    std::vector<Annotation> g;
    int n_valid = 0;
    for (int i = 0; i < 6; ++i) {
      bool ig = (rng() & 3) == 0;
      g.push_back(make_annotation(testutil::random_convex_quad(rng, 0.0, 80.0), ig ? "###" : "X"));
      n_valid += ig ? 0 : 1;
    }
    std::vector<std::pair<QuadBox, double>> p;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 5; ++i) p.emplace_back(testutil::random_convex_quad(rng, 0.0, 80.0), u(rng));
    auto r = match_detections(p, g, 0.5);
    CHECK(r.tp + r.fn == n_valid);
  }
}

TEST_CASE("match_detections invariant to pred input order", "[evalkit]") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Annotation> gts;
  for (int i = 0; i < 5; ++i)
    gts.push_back(make_annotation(testutil::random_convex_quad(rng, 0.0, 60.0), "T"));
  std::vector<std::pair<QuadBox, double>> preds;
  for (int i = 0; i < 8; ++i) {
    double s;
    do s = u(rng); while (s == 0.0);
    preds.emplace_back(testutil::random_convex_quad(rng, 0.0, 60.0), s);
  }
  auto base = match_detections(preds, gts, 0.5);
  auto shuffled = preds;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto other = match_detections(shuffled, gts, 0.5);
  CHECK(base.tp == other.tp);
  CHECK(base.fp == other.fp);
  CHECK(base.fn == other.fn);
}

TEST_CASE("prf reproduces the published reference rows", "[evalkit]") {
  // full-model row: P 89.30, R 83.33 -> F 86.21
  auto full = prf(0.8930, 0.8333);
  CHECK(full.f_measure * 100.0 == Approx(86.21).margin(0.01));
  // baseline row: P 82.41, R 79.22 -> F 80.78
  auto base = prf(0.8241, 0.7922);
  CHECK(base.f_measure * 100.0 == Approx(80.78).margin(0.01));

  // P == R -> F == P
  auto eq = prf(0.77, 0.77);
  CHECK(eq.f_measure == Approx(0.77).margin(1e-12));

  // exact formula conformance against a scalar oracle
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 200; ++t) {
    double p = u(rng), r = u(rng);
    auto m = prf(p, r);
    double expect = (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    CHECK(m.f_measure == Approx(expect).margin(1e-12));
    CHECK(m.f_measure <= (p + r) / 2.0 + 1e-12);
  }

  // 0/0 -> 0
  EvalRecord empty;
  auto z = prf(empty);
  CHECK(z.precision == 0.0);
  CHECK(z.recall == 0.0);
  CHECK(z.f_measure == 0.0);
}

TEST_CASE("matched_count_at thresholds", "[evalkit]") {
  std::vector<QuadBox> quads = {QuadBox::rect(0, 0, 10, 10), QuadBox::rect(30, 30, 44, 40)};
  auto gts = boxes_to_gts(quads);
  std::vector<std::pair<QuadBox, double>> perfect;
  for (const auto& q : quads) perfect.emplace_back(q, 0.9);
  auto counts = matched_count_at(perfect, gts, {0.6, 0.8});
  CHECK(counts == std::vector<int>{2, 2});

  // a pred at IoU ~0.7 with its gt: counted at 0.6, not at 0.8
  QuadBox gt = QuadBox::rect(0, 0, 10, 10);
  QuadBox pred = QuadBox::rect(0, 0, 10, 7);  // IoU 0.7
  REQUIRE(quad_iou(gt, pred) == Approx(0.7).margin(1e-9));
  auto c2 = matched_count_at({{pred, 0.9}}, boxes_to_gts({gt}), {0.6, 0.8});
  CHECK(c2 == std::vector<int>{1, 0});

  // monotone non-increasing over random inputs
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 25; ++t) {
    std::vector<Annotation> g;
    for (int i = 0; i < 4; ++i)
      g.push_back(make_annotation(testutil::random_convex_quad(rng, 0.0, 60.0), "T"));
    std::vector<std::pair<QuadBox, double>> p;
    for (int i = 0; i < 6; ++i)
      p.emplace_back(testutil::random_convex_quad(rng, 0.0, 60.0), u(rng));
    auto c = matched_count_at(p, g, {0.3, 0.5, 0.6, 0.8});
    for (size_t i = 1; i < c.size(); ++i) CHECK(c[i] <= c[i - 1]);
  }
}

TEST_CASE("pr_curve endpoints and recall monotonicity", "[evalkit]") {
  QuadBox q = QuadBox::rect(0, 0, 10, 10);
  auto curve = pr_curve({{q, 0.8}}, boxes_to_gts({q}), 0.5);
  bool has_perfect = false;
  for (const auto& p : curve)
    if (p.precision == 1.0 && p.recall == 1.0) has_perfect = true;
  CHECK(has_perfect);

  auto empty = pr_curve({}, boxes_to_gts({q}), 0.5);
  REQUIRE(empty.size() == 1u);
  CHECK(empty[0].precision == 0.0);
  CHECK(empty[0].recall == 0.0);

  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<Annotation> g;
    for (int i = 0; i < 5; ++i)
      g.push_back(make_annotation(testutil::random_convex_quad(rng, 0.0, 70.0), "T"));
    std::vector<std::pair<QuadBox, double>> p;
    for (int i = 0; i < 10; ++i)
      p.emplace_back(testutil::random_convex_quad(rng, 0.0, 70.0), u(rng));
    auto c = pr_curve(p, g, 0.5);
    for (size_t i = 1; i < c.size(); ++i) {
      CHECK(c[i].threshold < c[i - 1].threshold);  // strictly descending
      CHECK(c[i].recall >= c[i - 1].recall);       // recall non-decreasing
    }
  }
}

TEST_CASE("annotation round trip, ignore flag, parse errors", "[synthdata]") {
  auto dir = fs::temp_directory_path() / "rfn_anno_test";
  fs::create_directories(dir);
  auto path = (dir / "gt_test.txt").string();

  std::mt19937_64 rng(23);
  std::vector<Annotation> annos;
  for (int i = 0; i < 50; ++i) {
    QuadBox q = testutil::random_convex_quad(rng, 0.0, 200.0);
    for (auto& p : q.corners) {
      p.x = std::round(p.x);
      p.y = std::round(p.y);
    }
    annos.push_back(make_annotation(q, i % 7 == 0 ? "###" : "AB" + std::to_string(i)));
  }
  write_annotations(annos, path);
  auto back = read_annotations(path);
  REQUIRE(back.size() == annos.size());
  for (size_t i = 0; i < annos.size(); ++i) {
    CHECK(back[i].transcription == annos[i].transcription);
    CHECK(back[i].ignore == annos[i].ignore);
    for (int k = 0; k < 4; ++k) {
      CHECK(back[i].quad[k].x == annos[i].quad[k].x);
      CHECK(back[i].quad[k].y == annos[i].quad[k].y);
    }
  }

  {
    std::ofstream f(path);
    f << "0,0,10,0,10,5,0,5,###\n";
  }
  auto ignored = read_annotations(path);
  REQUIRE(ignored.size() == 1u);
  CHECK(ignored[0].ignore);

  {
    std::ofstream f(path);
    f << "0,0,10,0,10,5\n";
  }
  try {
    read_annotations(path);
    FAIL("expected parse error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  CHECK_THROWS_AS(make_annotation(QuadBox::rect(0, 0, 1, 1), ""), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("synth_image determinism and annotation contracts", "[synthdata]") {
  SynthConfig cfg;
  cfg.image_h = cfg.image_w = 128;
  cfg.min_instances = 3;
  cfg.max_instances = 3;

  auto a = synth_image(42, cfg);
  auto b = synth_image(42, cfg);
  CHECK(a.image.rgb == b.image.rgb);
  REQUIRE(a.annotations.size() == b.annotations.size());
  for (size_t i = 0; i < a.annotations.size(); ++i)
    CHECK(a.annotations[i].transcription == b.annotations[i].transcription);

  auto c = synth_image(43, cfg);
  CHECK(a.image.rgb != c.image.rgb);  // different seed, different image

  CHECK(a.annotations.size() == 3u);
  for (const auto& an : a.annotations) {
    CHECK(quad_is_clockwise(an.quad));
    CHECK(quad_is_convex(an.quad));
    CHECK(an.quad.min_x() >= 0.0);
    CHECK(an.quad.min_y() >= 0.0);
    CHECK(an.quad.max_x() <= 128.0);
    CHECK(an.quad.max_y() <= 128.0);
    CHECK_FALSE(an.ignore);
  }

  // instances do not overlap
  for (size_t i = 0; i < a.annotations.size(); ++i)
    for (size_t j = i + 1; j < a.annotations.size(); ++j)
      CHECK(quad_intersection_area(a.annotations[i].quad, a.annotations[j].quad) <
            2.0);  // integer rounding can introduce sub-pixel slivers

  // texts are sparse: rasterized foreground fraction < 0.5
  std::vector<QuadBox> quads;
  for (const auto& an : a.annotations) quads.push_back(an.quad);
  auto mask = rasterize_mask(quads, 128, 128);
  CHECK(static_cast<double>(mask.count_ones()) / (128.0 * 128.0) < 0.5);
}

TEST_CASE("synth_image low-contrast photometric contract", "[synthdata]") {
  SynthConfig cfg;
  cfg.image_h = cfg.image_w = 128;
  cfg.min_instances = 2;
  cfg.max_instances = 2;
  cfg.contrast_gap = 0.08;

  for (uint64_t seed : {1u, 2u, 3u, 4u}) {
    auto sample = synth_image(seed, cfg);
    for (const auto& an : sample.annotations) {
      auto inside = rasterize_mask({an.quad}, 128, 128);
      // 3-px ring: dilated minus inside
      QuadBox grown = an.quad;
      Point c{(an.quad.min_x() + an.quad.max_x()) / 2, (an.quad.min_y() + an.quad.max_y()) / 2};
      for (auto& p : grown.corners) {
        double dx = p.x - c.x, dy = p.y - c.y;
        double len = std::hypot(dx, dy);
        p.x += 3.0 * dx / len;
        p.y += 3.0 * dy / len;
      }
      auto dilated = rasterize_mask({grown}, 128, 128);
      double in_sum = 0, ring_sum = 0;
      long in_n = 0, ring_n = 0;
      for (int y = 0; y < 128; ++y)
        for (int x = 0; x < 128; ++x) {
          if (inside.at(y, x)) {
            in_sum += mean_luma(sample.image, y, x);
            ++in_n;
          } else if (dilated.at(y, x)) {
            ring_sum += mean_luma(sample.image, y, x);
            ++ring_n;
          }
        }
      REQUIRE(in_n > 0);
      REQUIRE(ring_n > 0);
      CHECK(std::abs(in_sum / in_n - ring_sum / ring_n) <= 0.12);
    }
  }
}

TEST_CASE("generate_dataset layout and reproducibility", "[synthdata]") {
  SynthConfig cfg;
  cfg.image_h = cfg.image_w = 96;
  cfg.max_instances = 2;
  cfg.seed = 7;
  auto dir = fs::temp_directory_path() / "rfn_ds_test";
  fs::remove_all(dir);
  generate_dataset(cfg, 4, dir.string());

  CHECK(fs::exists(dir / "manifest.txt"));
  for (int i = 0; i < 4; ++i) {
    char stem[16];
    std::snprintf(stem, sizeof(stem), "%06d", i);
    CHECK(fs::exists(dir / "images" / (std::string(stem) + ".png")));
    CHECK(fs::exists(dir / "labels" / ("gt_" + std::string(stem) + ".txt")));
  }

  auto read_file = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  };
  auto manifest1 = read_file(dir / "manifest.txt");
  auto img1 = read_file(dir / "images" / "000002.png");

  generate_dataset(cfg, 4, dir.string());  // rerun with the same seed
  CHECK(read_file(dir / "manifest.txt") == manifest1);
  CHECK(read_file(dir / "images" / "000002.png") == img1);

  // PNG round trip preserves bytes
  auto img = read_png((dir / "images" / "000000.png").string());
  auto tmp = (dir / "roundtrip.png").string();
  write_png(img, tmp);
  auto img2 = read_png(tmp);
  CHECK(img.rgb == img2.rgb);

  fs::remove_all(dir);
}
