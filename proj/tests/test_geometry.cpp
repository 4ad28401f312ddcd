#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "rfn/geometry.hpp"
#include "testutil.hpp"

using rfn::QuadBox;
using Catch::Approx;

TEST_CASE("quad_area basics", "[geometry]") {
  QuadBox unit = QuadBox::rect(0, 0, 1, 1);
  CHECK(rfn::quad_area(unit) == Approx(1.0));
  CHECK(rfn::quad_is_clockwise(unit));

  QuadBox degenerate{{rfn::Point{3, 3}, {3, 3}, {3, 3}, {3, 3}}};
  CHECK(rfn::quad_area(degenerate) == 0.0);

  CHECK(rfn::quad_area(QuadBox::rect(2, 1, 5, 3)) == Approx(6.0));

  QuadBox bad = unit;
  bad[2].x = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(rfn::quad_area(bad), std::invalid_argument);
}

TEST_CASE("quad_iou identity, disjoint, half shift", "[geometry]") {
  QuadBox r = QuadBox::rect(2, 3, 10, 7);
  CHECK(rfn::quad_iou(r, r) == Approx(1.0));

  CHECK(rfn::quad_iou(QuadBox::rect(0, 0, 1, 1), QuadBox::rect(5, 0, 6, 1)) == 0.0);

  // unit square vs itself shifted by 0.5: inter 0.5, union 1.5
  double iou = rfn::quad_iou(QuadBox::rect(0, 0, 1, 1), QuadBox::rect(0.5, 0, 1.5, 1));
  CHECK(iou == Approx(1.0 / 3.0).margin(1e-12));

  // Frozen Monte-Carlo cross-check of the same pair (1e6 samples -> 0.3333..)
  double mc = testutil::monte_carlo_iou(QuadBox::rect(0, 0, 1, 1), QuadBox::rect(0.5, 0, 1.5, 1),
                                        1000000, 42);
  CHECK(std::abs(iou - mc) < 5e-3);
}

TEST_CASE("quad_iou symmetric and equal to Monte-Carlo on random pairs", "[geometry]") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 60; ++t) {
    QuadBox a = testutil::random_convex_quad(rng);
    QuadBox b = testutil::random_convex_quad(rng);
    double ab = rfn::quad_iou(a, b);
    double ba = rfn::quad_iou(b, a);
    CHECK(ab == Approx(ba).margin(1e-12));
    CHECK(rfn::quad_iou(a, a) == 1.0);
    double mc = testutil::monte_carlo_iou(a, b, 200000, 1000 + static_cast<uint64_t>(t));
    CHECK(std::abs(ab - mc) < 8e-3);
  }
}

TEST_CASE("rotated_nms small cases", "[geometry]") {
  using Det = std::pair<QuadBox, double>;
  QuadBox a = QuadBox::rect(0, 0, 10, 10);

  CHECK(rfn::rotated_nms({{a, 0.5}}, 0.5) == std::vector<int>{0});
  CHECK(rfn::rotated_nms({}, 0.5).empty());

  // exact duplicate suppressed, higher score first
  std::vector<Det> dup{{a, 0.8}, {a, 0.9}};
  CHECK(rfn::rotated_nms(dup, 0.5) == std::vector<int>{1});

  // A(0.9), B overlaps A with IoU 0.6 (0.8), C disjoint (0.7)
  QuadBox b = QuadBox::rect(0, 0, 10, 7.5);  // IoU with a = 0.75
  REQUIRE(rfn::quad_iou(a, b) > 0.5);
  QuadBox c = QuadBox::rect(50, 50, 60, 60);
  std::vector<Det> dets{{a, 0.9}, {b, 0.8}, {c, 0.7}};
  CHECK(rfn::rotated_nms(dets, 0.5) == std::vector<int>{0, 2});

  CHECK_THROWS_AS(rfn::rotated_nms(dets, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(rfn::rotated_nms(dets, 1.0), std::invalid_argument);
}

TEST_CASE("rotated_nms equals brute force on random sets", "[geometry]") {
  for (uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> nd(0, 50);
    std::uniform_real_distribution<double> sd(0.0, 1.0);
    int n = nd(rng);
    std::vector<std::pair<QuadBox, double>> dets;
    for (int i = 0; i < n; ++i)
      dets.emplace_back(testutil::random_convex_quad(rng, 0.0, 60.0), sd(rng));
    CHECK(rfn::rotated_nms(dets, 0.4) == testutil::brute_force_nms(dets, 0.4));
  }
}

TEST_CASE("generate_anchors counts, centers, areas", "[geometry]") {
  auto grid = rfn::generate_anchors(2, 2, 8.0, 32.0);
  CHECK(grid.num_anchors() == 32);
  CHECK(static_cast<int>(grid.boxes.size()) == 32);

  // grid point (0,0), stride 8 -> center (4,4)
  const QuadBox& first = grid.box(0, 0, 0);
  CHECK((first.min_x() + first.max_x()) / 2 == Approx(4.0));
  CHECK((first.min_y() + first.max_y()) / 2 == Approx(4.0));

  // ratio 2, scale 32 -> width 32*sqrt(2), height 32/sqrt(2), area 1024
  const QuadBox& r2 = grid.box(0, 0, 1);
  CHECK(r2.width() == Approx(45.254834).margin(1e-5));
  CHECK(r2.height() == Approx(22.627417).margin(1e-5));
  CHECK(rfn::quad_area(r2) == Approx(1024.0).margin(1e-6));

  for (const auto& b : grid.boxes) CHECK(rfn::quad_area(b) == Approx(1024.0).margin(1e-6));

  CHECK_THROWS_AS(rfn::generate_anchors(2, 2, 0.0, 32.0), std::invalid_argument);
  CHECK_THROWS_AS(rfn::generate_anchors(2, 2, 8.0, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(rfn::generate_anchors(0, 2, 8.0, 32.0), std::invalid_argument);
}

TEST_CASE("offset encode/decode round trip", "[geometry]") {
  QuadBox anchor = QuadBox::rect(10, 10, 42, 42);

  auto zero = rfn::encode_offsets(anchor, anchor);
  for (double v : zero) CHECK(v == Approx(0.0).margin(1e-15));

  // 32x32 anchor, gt shifted +16 px in x: x-offsets 0.5, y-offsets 0
  QuadBox shifted = anchor;
  for (auto& p : shifted.corners) p.x += 16.0;
  auto off = rfn::encode_offsets(anchor, shifted);
  for (int k = 0; k < 4; ++k) {
    CHECK(off[size_t(2 * k)] == Approx(0.5));
    CHECK(off[size_t(2 * k + 1)] == Approx(0.0).margin(1e-15));
  }

  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    QuadBox a = testutil::random_convex_quad(rng);
    QuadBox g = testutil::random_convex_quad(rng);
    QuadBox back = rfn::decode_offsets(a, rfn::encode_offsets(a, g));
    for (int k = 0; k < 4; ++k) {
      CHECK(std::abs(back[k].x - g[k].x) < 1e-6);
      CHECK(std::abs(back[k].y - g[k].y) < 1e-6);
    }
  }

  QuadBox flat{{rfn::Point{0, 0}, {10, 0}, {10, 0}, {0, 0}}};
  CHECK_THROWS_AS(rfn::encode_offsets(flat, anchor), std::invalid_argument);
}

TEST_CASE("rasterize_mask coverage and monotonicity", "[geometry]") {
  auto full = rfn::rasterize_mask({QuadBox::rect(-1, -1, 65, 65)}, 64, 64);
  CHECK(full.count_ones() == 64u * 64u);

  auto empty = rfn::rasterize_mask({}, 16, 16);
  CHECK(empty.count_ones() == 0u);

  // left half of a 64x64 image -> fraction 0.5 within 1/64
  auto half = rfn::rasterize_mask({QuadBox::rect(0, 0, 32, 64)}, 64, 64);
  double frac = static_cast<double>(half.count_ones()) / (64.0 * 64.0);
  CHECK(std::abs(frac - 0.5) <= 1.0 / 64.0);

  // adding a quad never clears a pixel
  std::mt19937_64 rng(11);
  std::vector<QuadBox> quads;
  rfn::BinaryMask prev(48, 48);
  for (int t = 0; t < 8; ++t) {
    quads.push_back(testutil::random_convex_quad(rng, 0.0, 48.0));
    auto cur = rfn::rasterize_mask(quads, 48, 48);
    for (size_t i = 0; i < cur.values.size(); ++i) {
      if (prev.values[i]) CHECK(cur.values[i] == 1);
    }
    prev = cur;
  }

  CHECK_THROWS_AS(rfn::rasterize_mask({}, 0, 5), std::invalid_argument);
}
