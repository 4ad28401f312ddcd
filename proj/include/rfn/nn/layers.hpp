#pragma once

// Parameterized building blocks. Each layer registers its tensors in a
// ParamStore under a dotted name so the optimizer and the checkpoint code can
// enumerate them.

#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfn/nn/ops.hpp"

namespace rfn::nn {

template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Var<T>>> params;
  std::mt19937_64 rng{0};

  Var<T> add(const std::string& name, Tensor<T> init) {
    for (const auto& [n, v] : params)
      if (n == name) throw std::logic_error("ParamStore: duplicate param " + name);
    Var<T> v = Var<T>::leaf(std::move(init));
    params.emplace_back(name, v);
    return v;
  }

  Var<T>* find(const std::string& name) {
    for (auto& [n, v] : params)
      if (n == name) return &v;
    return nullptr;
  }

  void zero_grads() {
    for (auto& [n, v] : params) v.zero_grad();
  }

  size_t total_size() const {
    size_t s = 0;
    for (const auto& [n, v] : params) s += v.value().size();
    return s;
  }
};

template <typename T>
struct Conv2d {
  Var<T> weight;  // (co,ci,kh,kw)
  Var<T> bias;    // (co)
  int stride = 1;
  int pad_h = 0;
  int pad_w = 0;

  Conv2d() = default;
  // He fan-in init; weight_scale 0 gives an all-zero layer.
  Conv2d(ParamStore<T>& store, const std::string& name, int ci, int co, int kh, int kw,
         int stride_, int pad_h_, int pad_w_, double weight_scale = 1.0, T bias_init = T(0)) {
    stride = stride_;
    pad_h = pad_h_;
    pad_w = pad_w_;
    double fan_in = static_cast<double>(ci) * kh * kw;
    T stddev = static_cast<T>(weight_scale * std::sqrt(2.0 / fan_in));
    weight = store.add(name + ".weight",
                       weight_scale == 0.0 ? Tensor<T>({co, ci, kh, kw})
                                           : randn<T>({co, ci, kh, kw}, store.rng, stddev));
    bias = store.add(name + ".bias", Tensor<T>::full({co}, bias_init));
  }

  Var<T> forward(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad_h, pad_w); }
};

template <typename T>
struct BatchNorm2d {
  Var<T> gamma;
  Var<T> beta;
  T eps = static_cast<T>(1e-5);

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& store, const std::string& name, int c) {
    gamma = store.add(name + ".gamma", Tensor<T>::full({c}, T(1)));
    beta = store.add(name + ".beta", Tensor<T>({c}));
  }

  Var<T> forward(const Var<T>& x) const { return batchnorm2d(x, gamma, beta, eps); }
};

template <typename T>
struct Linear {
  Var<T> weight;  // (m,n)
  Var<T> bias;    // (m)

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int nin, int nout,
         double weight_scale = 1.0) {
    T stddev = static_cast<T>(weight_scale * std::sqrt(2.0 / nin));
    weight = store.add(name + ".weight", weight_scale == 0.0
                                             ? Tensor<T>({nout, nin})
                                             : randn<T>({nout, nin}, store.rng, stddev));
    bias = store.add(name + ".bias", Tensor<T>({nout}));
  }

  Var<T> forward(const Var<T>& x) const {
    return x.value().ndim() == 2 ? linear_rows(x, weight, bias) : linear(x, weight, bias);
  }
};

// conv -> batchnorm -> relu
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;

  ConvBnRelu() = default;
  ConvBnRelu(ParamStore<T>& store, const std::string& name, int ci, int co, int k, int stride,
             int pad)
      : conv(store, name + ".conv", ci, co, k, k, stride, pad, pad), bn(store, name + ".bn", co) {}

  Var<T> forward(const Var<T>& x) const { return relu_v(bn.forward(conv.forward(x))); }
};

}  // namespace rfn::nn
