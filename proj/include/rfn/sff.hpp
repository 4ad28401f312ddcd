#pragma once

// Segmentation-based foreground-focus module. The low-level branch amplifies
// X1 with an exponential of its channel-pooled response; the high-level
// branch exchanges information between X2..X4 in parallel, fuses the results
// at the finest resolution with channel-wise attention, and both are combined
// into a single-channel attention map A. Every pyramid level is then
// reweighted by 1 + e^A resampled to its resolution.

#include <string>
#include <vector>

#include "rfn/backbone.hpp"
#include "rfn/nn/layers.hpp"

namespace rfn {

struct SffConfig {
  int channels = 64;    // pyramid channel count c
  int low_convs = 2;    // depth of the low-level conv stack
  int se_reduction = 4; // squeeze-excitation bottleneck factor
};

template <typename T>
struct SffOutputs {
  nn::Var<T> low;              // L at (c, h1, w1)
  nn::Var<T> high;             // H at (c, h1, w1)
  std::vector<nn::Var<T>> y;   // Y2..Y4 at native resolutions
  nn::Var<T> attention;        // A at (1, h1, w1), sigmoid range
};

template <typename T>
class Sff {
 public:
  Sff() = default;
  Sff(nn::ParamStore<T>& store, const SffConfig& cfg) : cfg_(cfg) {
    int c = cfg.channels;
    for (int i = 0; i < cfg.low_convs; ++i)
      low_stack_.emplace_back(store, "sff.low" + std::to_string(i), c, c, 3, 1, 1);

    // f[i][k]: transform from level i to resolution k (indices 0..2 for X2..X4).
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) {
        std::string name = "sff.fuse.f" + std::to_string(i + 2) + std::to_string(k + 2);
        if (i == k) {
          same_[idx(i, k)] = nn::Conv2d<T>(store, name, c, c, 3, 3, 1, 1, 1);
        } else if (i < k) {
          // downsample: one stride-2 3x3 conv per factor-2 step
          for (int s = 0; s < k - i; ++s)
            down_[idx(i, k)].emplace_back(store, name + ".s" + std::to_string(s), c, c, 3, 3, 2, 1,
                                          1);
        } else {
          up_[idx(i, k)] = nn::Conv2d<T>(store, name, c, c, 1, 1, 1, 0, 0);
        }
      }
      to_s1_[static_cast<size_t>(i)] =
          nn::Conv2d<T>(store, "sff.fuse.t" + std::to_string(i + 2), c, c, 1, 1, 1, 0, 0);
    }

    int cc = 3 * c;
    int hidden = std::max(1, cc / cfg.se_reduction);
    se_fc1_ = nn::Linear<T>(store, "sff.se.fc1", cc, hidden);
    se_fc2_ = nn::Linear<T>(store, "sff.se.fc2", hidden, cc);
    reduce_ = nn::Conv2d<T>(store, "sff.reduce", cc, c, 1, 1, 1, 0, 0);

    // zero init: the fused attention map starts at sigmoid(0) = 0.5
    fuse_attn_ = nn::Conv2d<T>(store, "sff.attn", 2 * c, 1, 1, 1, 1, 0, 0, /*weight_scale=*/0.0);
  }

  // L = X1 * exp(mean_c(convs(X1))), broadcast over channels.
  nn::Var<T> low_level_branch(const nn::Var<T>& x1) const {
    nn::Var<T> y = x1;
    for (const auto& cbr : low_stack_) y = cbr.forward(y);
    auto pooled = nn::channel_mean(y);
    return nn::mul_spatial(x1, nn::exp_v(pooled));
  }

  // Y_k = sum_i F(X_i, s_k); H = reduce(se(concat(T(Y_k, s1)))).
  std::pair<std::vector<nn::Var<T>>, nn::Var<T>> high_level_fuse(
      const nn::Var<T>& x2, const nn::Var<T>& x3, const nn::Var<T>& x4, int h1, int w1) const {
    const nn::Var<T> xs[3] = {x2, x3, x4};
    for (int i = 0; i < 2; ++i) {
      if (xs[i].value().dim(0) != xs[i + 1].value().dim(0))
        throw std::invalid_argument("high_level_fuse: channel mismatch across levels");
      if (xs[i].value().dim(1) != 2 * xs[i + 1].value().dim(1) ||
          xs[i].value().dim(2) != 2 * xs[i + 1].value().dim(2))
        throw std::invalid_argument("high_level_fuse: levels must halve in resolution");
    }

    std::vector<nn::Var<T>> ys;
    for (int k = 0; k < 3; ++k) {
      int th = xs[k].value().dim(1), tw = xs[k].value().dim(2);
      nn::Var<T> acc;
      for (int i = 0; i < 3; ++i) {
        nn::Var<T> t;
        if (i == k) {
          t = same_[idx(i, k)].forward(xs[i]);
        } else if (i < k) {
          t = xs[i];
          for (const auto& conv : down_[idx(i, k)]) t = conv.forward(t);
        } else {
          t = nn::bilinear_resize(up_[idx(i, k)].forward(xs[i]), th, tw);
        }
        acc = acc.defined() ? nn::add(acc, t) : t;
      }
      ys.push_back(acc);
    }

    std::vector<nn::Var<T>> lifted;
    for (int k = 0; k < 3; ++k)
      lifted.push_back(
          nn::bilinear_resize(to_s1_[static_cast<size_t>(k)].forward(ys[static_cast<size_t>(k)]),
                              h1, w1));
    auto cat = nn::concat_channels(lifted);

    // channel-wise attention (squeeze-excitation), then 1x1 reduction to c
    auto squeezed = nn::global_avg_pool(cat);
    auto gates = nn::sigmoid_v(se_fc2_.forward(nn::relu_v(se_fc1_.forward(squeezed))));
    auto gated = nn::mul_channel(cat, gates);
    auto high = reduce_.forward(gated);
    return {std::move(ys), high};
  }

  // A = sigmoid(1x1 conv(L || H)), single channel at s1.
  nn::Var<T> fuse_attention(const nn::Var<T>& low, const nn::Var<T>& high) const {
    nn::check_same_shape(low.value(), high.value(), "fuse_attention");
    return nn::sigmoid_v(fuse_attn_.forward(nn::concat_channels<T>({low, high})));
  }

  SffOutputs<T> forward(const FeaturePyramid<T>& pyramid) const {
    SffOutputs<T> out;
    int h1 = pyramid.levels[0].value().dim(1);
    int w1 = pyramid.levels[0].value().dim(2);
    out.low = low_level_branch(pyramid.levels[0]);
    auto [ys, high] = high_level_fuse(pyramid.levels[1], pyramid.levels[2], pyramid.levels[3], h1,
                                      w1);
    out.y = std::move(ys);
    out.high = high;
    out.attention = fuse_attention(out.low, out.high);
    return out;
  }

  const SffConfig& config() const { return cfg_; }

 private:
  static size_t idx(int i, int k) { return static_cast<size_t>(i * 3 + k); }

  SffConfig cfg_;
  std::vector<nn::ConvBnRelu<T>> low_stack_;
  std::array<nn::Conv2d<T>, 9> same_;
  std::array<std::vector<nn::Conv2d<T>>, 9> down_;
  std::array<nn::Conv2d<T>, 9> up_;
  std::array<nn::Conv2d<T>, 3> to_s1_;
  nn::Linear<T> se_fc1_, se_fc2_;
  nn::Conv2d<T> reduce_;
  nn::Conv2d<T> fuse_attn_;
};

// X_hat = X * (1 + exp(A resampled to X's resolution)), broadcast over
// channels. Multiplier range is [2, 1+e] for A in [0,1].
template <typename T>
inline nn::Var<T> apply_attention(const nn::Var<T>& x, const nn::Var<T>& attention) {
  const auto& av = attention.value();
  if (av.dim(0) != 1) throw std::invalid_argument("apply_attention: attention must be (1,h,w)");
  auto resampled = nn::bilinear_resize(attention, x.value().dim(1), x.value().dim(2));
  return nn::mul_spatial(x, nn::affine(nn::exp_v(resampled), T(1), T(1)));
}

}  // namespace rfn
