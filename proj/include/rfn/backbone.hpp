#pragma once

// Residual backbone with a top-down feature pyramid. Produces the four
// multi-scale maps X1..X4 at strides {4,8,16,32}, all with the same channel
// count. Small enough to train on a CPU; depth and width are configurable.

#include <array>
#include <string>
#include <vector>

#include "rfn/nn/layers.hpp"

namespace rfn {

inline constexpr std::array<int, 4> kPyramidStrides{4, 8, 16, 32};

struct BackboneConfig {
  std::array<int, 4> stage_channels{32, 64, 128, 128};
  int blocks_per_stage = 2;
  int fpn_channels = 64;
};

template <typename T>
struct FeaturePyramid {
  std::vector<nn::Var<T>> levels;  // X1..X4, each (c, H/stride, W/stride)
  int channels = 0;
};

namespace detail {

template <typename T>
struct ResidualBlock {
  nn::Conv2d<T> conv1, conv2;
  nn::BatchNorm2d<T> bn1, bn2;
  nn::Conv2d<T> proj;  // 1x1, used when stride or channels change
  nn::BatchNorm2d<T> proj_bn;
  bool has_proj = false;

  ResidualBlock() = default;
  ResidualBlock(nn::ParamStore<T>& store, const std::string& name, int ci, int co, int stride) {
    conv1 = nn::Conv2d<T>(store, name + ".conv1", ci, co, 3, 3, stride, 1, 1);
    bn1 = nn::BatchNorm2d<T>(store, name + ".bn1", co);
    conv2 = nn::Conv2d<T>(store, name + ".conv2", co, co, 3, 3, 1, 1, 1);
    bn2 = nn::BatchNorm2d<T>(store, name + ".bn2", co);
    has_proj = (stride != 1 || ci != co);
    if (has_proj) {
      proj = nn::Conv2d<T>(store, name + ".proj", ci, co, 1, 1, stride, 0, 0);
      proj_bn = nn::BatchNorm2d<T>(store, name + ".proj_bn", co);
    }
  }

  nn::Var<T> forward(const nn::Var<T>& x) const {
    auto y = nn::relu_v(bn1.forward(conv1.forward(x)));
    y = bn2.forward(conv2.forward(y));
    auto skip = has_proj ? proj_bn.forward(proj.forward(x)) : x;
    return nn::relu_v(nn::add(y, skip));
  }
};

}  // namespace detail

template <typename T>
class PyramidBackbone {
 public:
  PyramidBackbone() = default;
  PyramidBackbone(nn::ParamStore<T>& store, const BackboneConfig& cfg) : cfg_(cfg) {
    stem1_ = nn::ConvBnRelu<T>(store, "backbone.stem1", 3, cfg.stage_channels[0], 3, 2, 1);
    stem2_ = nn::ConvBnRelu<T>(store, "backbone.stem2", cfg.stage_channels[0],
                               cfg.stage_channels[0], 3, 2, 1);
    int ci = cfg.stage_channels[0];
    for (int s = 0; s < 4; ++s) {
      int co = cfg.stage_channels[static_cast<size_t>(s)];
      std::vector<detail::ResidualBlock<T>> blocks;
      for (int b = 0; b < cfg.blocks_per_stage; ++b) {
        int stride = (b == 0 && s > 0) ? 2 : 1;
        blocks.emplace_back(store,
                            "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                            b == 0 ? ci : co, co, stride);
      }
      stages_.push_back(std::move(blocks));
      ci = co;
      lateral_[static_cast<size_t>(s)] =
          nn::Conv2d<T>(store, "backbone.lateral" + std::to_string(s + 1), co, cfg.fpn_channels, 1,
                        1, 1, 0, 0);
      smooth_[static_cast<size_t>(s)] =
          nn::Conv2d<T>(store, "backbone.smooth" + std::to_string(s + 1), cfg.fpn_channels,
                        cfg.fpn_channels, 3, 3, 1, 1, 1);
    }
  }

  // Raw [0,1] RGB image (3,H,W); H and W must be >= 64 and divisible by 32.
  FeaturePyramid<T> forward(const nn::Var<T>& image) const {
    const auto& v = image.value();
    if (v.ndim() != 3 || v.dim(0) != 3)
      throw std::invalid_argument("extract_pyramid: expected (3,H,W) image, got " + v.shape_str());
    int h = v.dim(1), w = v.dim(2);
    if (h % 32 != 0 || w % 32 != 0)
      throw std::invalid_argument("extract_pyramid: dims " + std::to_string(h) + "x" +
                                  std::to_string(w) + " not divisible by 32");
    if (h < 64 || w < 64)
      throw std::invalid_argument("extract_pyramid: image smaller than 64x64");

    auto x = nn::channel_affine(image, norm_mean, norm_inv_std());
    x = stem2_.forward(stem1_.forward(x));

    std::vector<nn::Var<T>> c;  // stage outputs, strides 4..32
    for (const auto& stage : stages_) {
      for (const auto& block : stage) x = block.forward(x);
      c.push_back(x);
    }

    // top-down merge
    std::vector<nn::Var<T>> p(4);
    p[3] = lateral_[3].forward(c[3]);
    for (int s = 2; s >= 0; --s) {
      auto lat = lateral_[static_cast<size_t>(s)].forward(c[static_cast<size_t>(s)]);
      auto up = nn::bilinear_resize(p[static_cast<size_t>(s) + 1], lat.value().dim(1),
                                    lat.value().dim(2));
      p[static_cast<size_t>(s)] = nn::add(lat, up);
    }

    FeaturePyramid<T> pyr;
    pyr.channels = cfg_.fpn_channels;
    for (int s = 0; s < 4; ++s)
      pyr.levels.push_back(smooth_[static_cast<size_t>(s)].forward(p[static_cast<size_t>(s)]));
    return pyr;
  }

  const BackboneConfig& config() const { return cfg_; }

  // Per-channel input normalization; measured on the training set and stored
  // in the checkpoint.
  std::vector<T> norm_mean{T(0.5), T(0.5), T(0.5)};
  std::vector<T> norm_std{T(0.25), T(0.25), T(0.25)};

 private:
  std::vector<T> norm_inv_std() const {
    return {T(1) / norm_std[0], T(1) / norm_std[1], T(1) / norm_std[2]};
  }

  BackboneConfig cfg_;
  nn::ConvBnRelu<T> stem1_, stem2_;
  std::vector<std::vector<detail::ResidualBlock<T>>> stages_;
  std::array<nn::Conv2d<T>, 4> lateral_;
  std::array<nn::Conv2d<T>, 4> smooth_;
};

}  // namespace rfn
