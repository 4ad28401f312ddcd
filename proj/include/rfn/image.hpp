#pragma once

// 8-bit RGB image buffer plus conversions to the float tensors the network
// consumes, and simple overlay drawing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "rfn/geometry.hpp"
#include "rfn/nn/tensor.hpp"

namespace rfn {

struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  ImageU8() = default;
  ImageU8(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0) {}

  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const {
    return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
  }
};

template <typename T>
inline nn::Tensor<T> image_to_tensor(const ImageU8& img) {
  nn::Tensor<T> t({3, img.height, img.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(c, y, x) = static_cast<T>(img.at(y, x, c)) / T(255);
  return t;
}

template <typename T>
inline ImageU8 tensor_to_image(const nn::Tensor<T>& t) {
  ImageU8 img(t.dim(1), t.dim(2));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double v = std::clamp(static_cast<double>(t.at(c, y, x)), 0.0, 1.0);
        img.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

inline void draw_line(ImageU8& img, Point a, Point b, uint8_t r, uint8_t g, uint8_t bcol) {
  int steps = static_cast<int>(std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    double t = steps == 0 ? 0.0 : static_cast<double>(i) / steps;
    int x = static_cast<int>(std::lround(a.x + t * (b.x - a.x)));
    int y = static_cast<int>(std::lround(a.y + t * (b.y - a.y)));
    if (x < 0 || x >= img.width || y < 0 || y >= img.height) continue;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = bcol;
  }
}

inline void draw_quad(ImageU8& img, const QuadBox& q, uint8_t r, uint8_t g, uint8_t b) {
  for (int k = 0; k < 4; ++k) draw_line(img, q[k], q[(k + 1) % 4], r, g, b);
}

}  // namespace rfn
