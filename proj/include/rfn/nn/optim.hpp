#pragma once

// SGD with momentum, weight decay and optional global-norm gradient clipping.

#include <cmath>
#include <vector>

#include "rfn/nn/layers.hpp"

namespace rfn::nn {

template <typename T>
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay, double clip_grad_norm = 0.0)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay), clip_(clip_grad_norm) {}

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void step(ParamStore<T>& store) {
    if (velocity_.size() != store.params.size()) {
      velocity_.clear();
      for (auto& [name, v] : store.params) velocity_.emplace_back(v.value().dims());
    }

    double scale = 1.0;
    if (clip_ > 0.0) {
      double sq = 0.0;
      for (auto& [name, v] : store.params)
        for (size_t i = 0; i < v.grad().size(); ++i)
          sq += static_cast<double>(v.grad()[i]) * static_cast<double>(v.grad()[i]);
      double norm = std::sqrt(sq);
      if (norm > clip_) scale = clip_ / norm;
    }

    for (size_t p = 0; p < store.params.size(); ++p) {
      auto& v = store.params[p].second;
      Tensor<T>& vel = velocity_[p];
      Tensor<T>& val = v.value();
      const Tensor<T>& grad = v.grad();
      for (size_t i = 0; i < val.size(); ++i) {
        T g = static_cast<T>(scale) * grad[i] + static_cast<T>(weight_decay_) * val[i];
        vel[i] = static_cast<T>(momentum_) * vel[i] + g;
        val[i] -= static_cast<T>(lr_) * vel[i];
      }
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  double clip_;
  std::vector<Tensor<T>> velocity_;
};

}  // namespace rfn::nn
