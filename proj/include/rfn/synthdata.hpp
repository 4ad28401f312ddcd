#pragma once

// Deterministic synthetic industrial-text image generator: procedural
// metal-like backgrounds (value noise, brushed streaks, illumination
// gradients) with serial-code style strings rendered from the built-in 5x7
// font at random rotation/scale/contrast. Identical (seed, config) inputs
// produce identical bytes.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "rfn/annotations.hpp"
#include "rfn/font5x7.hpp"
#include "rfn/geometry.hpp"
#include "rfn/image.hpp"
#include "rfn/png_io.hpp"

namespace rfn {

enum class TextureKind { kNoise, kBrushed, kGradient, kMixed };

struct SynthConfig {
  int image_h = 256;
  int image_w = 256;
  int min_instances = 1;
  int max_instances = 5;
  double rot_min_deg = -30.0;
  double rot_max_deg = 30.0;
  double scale_min = 2.5;  // pixels per font cell
  double scale_max = 5.0;
  double contrast_gap = 0.4;  // upper bound on text/background separation
  TextureKind texture = TextureKind::kMixed;
  std::string charset = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-";
  int len_min = 3;
  int len_max = 7;
  uint64_t seed = 0;  // master seed for dataset generation

  void validate() const {
    if (image_h % 32 != 0 || image_w % 32 != 0)
      throw std::invalid_argument("synth: image size must be divisible by 32");
    if (image_h < 64 || image_w < 64) throw std::invalid_argument("synth: image too small");
    if (min_instances < 0 || max_instances < min_instances)
      throw std::invalid_argument("synth: bad instance range");
    if (!(rot_max_deg >= rot_min_deg)) throw std::invalid_argument("synth: bad rotation range");
    if (!(scale_min > 0) || !(scale_max >= scale_min))
      throw std::invalid_argument("synth: bad scale range");
    if (contrast_gap < 0.0 || contrast_gap > 1.0)
      throw std::invalid_argument("synth: contrast_gap must be in [0,1]");
    if (charset.empty()) throw std::invalid_argument("synth: empty charset");
    if (len_min < 1 || len_max < len_min) throw std::invalid_argument("synth: bad length range");
  }
};

namespace synth_detail {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline double u01(std::mt19937_64& rng) { return (rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + u01(rng) * (hi - lo);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

inline double hash01(uint64_t seed, int64_t x, int64_t y) {
  uint64_t h = splitmix64(seed ^ (static_cast<uint64_t>(x) * 0xC2B2AE3D27D4EB4Full) ^
                          (static_cast<uint64_t>(y) * 0x165667B19E3779F9ull));
  return (h >> 11) * 0x1.0p-53;
}

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Lattice value noise with smooth interpolation.
inline double value_noise(uint64_t seed, double x, double y, double cell) {
  double fx = x / cell, fy = y / cell;
  int64_t x0 = static_cast<int64_t>(std::floor(fx));
  int64_t y0 = static_cast<int64_t>(std::floor(fy));
  double tx = smoothstep(fx - x0);
  double ty = smoothstep(fy - y0);
  double v00 = hash01(seed, x0, y0), v10 = hash01(seed, x0 + 1, y0);
  double v01 = hash01(seed, x0, y0 + 1), v11 = hash01(seed, x0 + 1, y0 + 1);
  double top = v00 + tx * (v10 - v00);
  double bot = v01 + tx * (v11 - v01);
  return top + ty * (bot - top);
}

struct TextLayout {
  std::string text;
  double cell = 0.0;   // pixels per font cell
  double angle = 0.0;  // radians, clockwise on screen
  double cx = 0.0, cy = 0.0;
  // tight glyph extent in local pixel coords, relative to the block center
  double ex0 = 0, ey0 = 0, ex1 = 0, ey1 = 0;
  double half_w = 0, half_h = 0;  // full block half-size

  Point to_image(double lx, double ly) const {
    double c = std::cos(angle), s = std::sin(angle);
    return {cx + c * lx - s * ly, cy + s * lx + c * ly};
  }
  // inverse map from image coords to block-centered local coords
  Point to_local(double ix, double iy) const {
    double c = std::cos(angle), s = std::sin(angle);
    double dx = ix - cx, dy = iy - cy;
    return {c * dx + s * dy, -s * dx + c * dy};
  }

  QuadBox tight_quad() const {
    QuadBox q;
    q[0] = to_image(ex0, ey0);
    q[1] = to_image(ex1, ey0);
    q[2] = to_image(ex1, ey1);
    q[3] = to_image(ex0, ey1);
    return q;
  }
};

inline bool text_cell_on(const std::string& text, double col, double row) {
  if (row < 0 || row >= font::kGlyphH || col < 0) return false;
  int ci = static_cast<int>(col / font::kAdvance);
  if (ci < 0 || ci >= static_cast<int>(text.size())) return false;
  double within = col - ci * font::kAdvance;
  if (within >= font::kGlyphW) return false;  // inter-character spacing
  return font::glyph_cell(text[static_cast<size_t>(ci)], static_cast<int>(row),
                          static_cast<int>(within));
}

inline std::string random_text(std::mt19937_64& rng, const SynthConfig& cfg) {
  std::string letters, digits;
  for (char c : cfg.charset) {
    if (c >= 'A' && c <= 'Z') letters += c;
    if (c >= '0' && c <= '9') digits += c;
  }
  bool has_hyphen = cfg.charset.find('-') != std::string::npos;
  int n = uniform_int(rng, cfg.len_min, cfg.len_max);
  auto pick = [&](const std::string& set) {
    return set[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(set.size()) - 1))];
  };

  std::string s;
  if (!letters.empty() && !digits.empty()) {
    // serial-code pattern: a letter prefix, a digit suffix, optional hyphen
    int split = uniform_int(rng, 1, std::max(1, n - 1));
    for (int i = 0; i < n; ++i) s += i < split ? pick(letters) : pick(digits);
    if (has_hyphen && n >= 5 && split >= 1 && split < n && u01(rng) < 0.35)
      s[static_cast<size_t>(split)] = '-';
  } else {
    for (int i = 0; i < n; ++i) s += pick(cfg.charset);
  }
  // at least two renderable non-hyphen cells so the extent is 2-d
  int alnum = 0;
  for (char c : s) alnum += c != '-' ? 1 : 0;
  if (alnum < 2) {
    const std::string& set = !letters.empty() ? letters : (!digits.empty() ? digits : cfg.charset);
    s = std::string(2, set[0]);
  }
  return s;
}

}  // namespace synth_detail

struct SynthSample {
  ImageU8 image;
  std::vector<Annotation> annotations;
};

inline SynthSample synth_image(uint64_t seed, const SynthConfig& cfg) {
  using namespace synth_detail;
  cfg.validate();
  std::mt19937_64 rng(splitmix64(seed));
  const int h = cfg.image_h, w = cfg.image_w;

  // ---- background ----
  TextureKind kind = cfg.texture;
  if (kind == TextureKind::kMixed)
    kind = static_cast<TextureKind>(uniform_int(rng, 0, 2));
  double base = uniform(rng, 0.35, 0.6);
  uint64_t tex_seed = rng();
  uint64_t fine_seed = rng();
  double grad_angle = uniform(rng, 0.0, 6.283185307);
  double grad_amp = uniform(rng, 0.05, 0.15);
  double hl_x = uniform(rng, 0.0, w), hl_y = uniform(rng, 0.0, h);
  double hl_amp = uniform(rng, 0.0, 0.12);
  double hl_sigma = uniform(rng, 0.3, 0.6) * std::min(h, w);
  double tint[3] = {uniform(rng, 0.96, 1.04), uniform(rng, 0.96, 1.04), uniform(rng, 0.96, 1.04)};

  std::vector<double> lum(static_cast<size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double v = base;
      switch (kind) {
        case TextureKind::kNoise:
          v += 0.10 * (value_noise(tex_seed, x, y, 24.0) - 0.5) +
               0.06 * (value_noise(fine_seed, x, y, 7.0) - 0.5);
          break;
        case TextureKind::kBrushed:
          // long horizontal correlation, fine vertical grain
          v += 0.10 * (value_noise(tex_seed, x * 0.08, y, 3.0) - 0.5) +
               0.04 * (value_noise(fine_seed, x, y, 2.0) - 0.5);
          break;
        case TextureKind::kGradient:
        default: {
          double t = (x * std::cos(grad_angle) + y * std::sin(grad_angle)) / std::max(h, w);
          v += grad_amp * t + 0.04 * (value_noise(fine_seed, x, y, 9.0) - 0.5);
          break;
        }
      }
      double dx = x - hl_x, dy = y - hl_y;
      v += hl_amp * std::exp(-(dx * dx + dy * dy) / (2.0 * hl_sigma * hl_sigma));
      lum[static_cast<size_t>(y) * w + x] = std::clamp(v, 0.02, 0.98);
    }
  }

  // ---- text instances ----
  int want = uniform_int(rng, cfg.min_instances, cfg.max_instances);
  std::vector<TextLayout> placed;
  std::vector<QuadBox> placed_quads;
  int attempts = 0;
  while (static_cast<int>(placed.size()) < want && attempts < 100) {
    ++attempts;
    TextLayout tl;
    tl.text = random_text(rng, cfg);
    int wc = static_cast<int>(tl.text.size()) * font::kAdvance - 1;
    tl.cell = uniform(rng, cfg.scale_min, cfg.scale_max);
    // keep the block placeable inside the frame
    tl.cell = std::min(tl.cell, 0.55 * std::min(h, w) / wc);
    if (tl.cell < 1.0) continue;
    tl.angle = uniform(rng, cfg.rot_min_deg, cfg.rot_max_deg) * 3.14159265358979 / 180.0;

    // tight glyph extent in cells
    int c0 = wc, c1 = -1, r0 = font::kGlyphH, r1 = -1;
    for (int ci = 0; ci < static_cast<int>(tl.text.size()); ++ci)
      for (int row = 0; row < font::kGlyphH; ++row)
        for (int col = 0; col < font::kGlyphW; ++col)
          if (font::glyph_cell(tl.text[static_cast<size_t>(ci)], row, col)) {
            c0 = std::min(c0, ci * font::kAdvance + col);
            c1 = std::max(c1, ci * font::kAdvance + col);
            r0 = std::min(r0, row);
            r1 = std::max(r1, row);
          }
    if (c1 < c0 || r1 < r0) continue;

    tl.half_w = 0.5 * wc * tl.cell;
    tl.half_h = 0.5 * font::kGlyphH * tl.cell;
    tl.ex0 = c0 * tl.cell - tl.half_w;
    tl.ex1 = (c1 + 1) * tl.cell - tl.half_w;
    tl.ey0 = r0 * tl.cell - tl.half_h;
    tl.ey1 = (r1 + 1) * tl.cell - tl.half_h;

    double half_diag = std::hypot(tl.half_w, tl.half_h) + 2.0;
    if (2 * half_diag >= std::min(h, w)) continue;
    tl.cx = uniform(rng, half_diag, w - half_diag);
    tl.cy = uniform(rng, half_diag, h - half_diag);

    QuadBox q = tl.tight_quad();
    bool overlaps = false;
    for (const auto& other : placed_quads)
      if (quad_intersection_area(q, other) > 1e-9) {
        overlaps = true;
        break;
      }
    if (overlaps) continue;

    placed.push_back(tl);
    placed_quads.push_back(q);
  }

  // render each instance with 2x2 supersampling
  std::vector<Annotation> annos;
  for (const auto& tl : placed) {
    // local background around the block center decides the polarity
    int icx = std::clamp(static_cast<int>(tl.cx), 1, w - 2);
    int icy = std::clamp(static_cast<int>(tl.cy), 1, h - 2);
    double local = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) local += lum[static_cast<size_t>(icy + dy) * w + icx + dx];
    local /= 9.0;
    double gap = cfg.contrast_gap * uniform(rng, 0.6, 1.0);
    double sign = u01(rng) < 0.5 ? 1.0 : -1.0;
    if (local + sign * gap > 0.98 || local + sign * gap < 0.02) sign = -sign;
    double offset = sign * gap;

    QuadBox q = tl.tight_quad();
    int bx0 = std::max(0, static_cast<int>(std::floor(q.min_x())) - 1);
    int bx1 = std::min(w - 1, static_cast<int>(std::ceil(q.max_x())) + 1);
    int by0 = std::max(0, static_cast<int>(std::floor(q.min_y())) - 1);
    int by1 = std::min(h - 1, static_cast<int>(std::ceil(q.max_y())) + 1);
    for (int y = by0; y <= by1; ++y)
      for (int x = bx0; x <= bx1; ++x) {
        double cov = 0.0;
        for (double sy : {0.25, 0.75})
          for (double sx : {0.25, 0.75}) {
            Point local_pt = tl.to_local(x + sx, y + sy);
            double col = (local_pt.x + tl.half_w) / tl.cell;
            double row = (local_pt.y + tl.half_h) / tl.cell;
            cov += synth_detail::text_cell_on(tl.text, col, row) ? 0.25 : 0.0;
          }
        if (cov > 0.0) {
          size_t idx = static_cast<size_t>(y) * w + x;
          lum[idx] = std::clamp(lum[idx] + cov * offset, 0.02, 0.98);
        }
      }

    // integer-rounded corners so file round trips are exact
    for (auto& p : q.corners) {
      p.x = std::lround(p.x);
      p.y = std::lround(p.y);
    }
    annos.push_back(make_annotation(q, tl.text));
  }

  SynthSample out;
  out.image = ImageU8(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out.image.at(y, x, c) = static_cast<uint8_t>(
            std::lround(std::clamp(lum[static_cast<size_t>(y) * w + x] * tint[c], 0.0, 1.0) *
                        255.0));
  out.annotations = std::move(annos);
  return out;
}

// Dataset layout: images/NNNNNN.png, labels/gt_NNNNNN.txt, manifest.txt with
// one "filename instance_count seed" line per image.
inline void generate_dataset(const SynthConfig& cfg, int count, const std::string& out_dir) {
  cfg.validate();
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "labels");

  std::ofstream manifest(fs::path(out_dir) / "manifest.txt");
  if (!manifest) throw std::runtime_error("generate_dataset: cannot write manifest in " + out_dir);
  for (int i = 0; i < count; ++i) {
    uint64_t seed = synth_detail::splitmix64(cfg.seed * 0x9E3779B97F4A7C15ull +
                                             static_cast<uint64_t>(i) * 0xC2B2AE3D27D4EB4Full);
    SynthSample sample = synth_image(seed, cfg);
    char stem[16];
    std::snprintf(stem, sizeof(stem), "%06d", i);
    write_png(sample.image, (fs::path(out_dir) / "images" / (std::string(stem) + ".png")).string());
    write_annotations(sample.annotations,
                      (fs::path(out_dir) / "labels" / ("gt_" + std::string(stem) + ".txt")).string());
    manifest << stem << ".png " << sample.annotations.size() << ' ' << seed << '\n';
  }
}

}  // namespace rfn
