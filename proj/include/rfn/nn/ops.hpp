#pragma once

// Differentiable tensor ops used to assemble the detector. Feature maps are
// (c,h,w); matrices are (rows,cols). Each op builds one graph node; backward
// closures only run when some input requires gradients.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "rfn/nn/autodiff.hpp"
#include "rfn/nn/tensor.hpp"

namespace rfn::nn {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// ---------------------------------------------------------------- elementwise

template <typename T>
inline Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto n = make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    Node<T>* bn = b.node().get();
    n->backprop = [on, an, bn]() {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto n = make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    Node<T>* bn = b.node().get();
    n->backprop = [on, an, bn]() {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto n = make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    Node<T>* bn = b.node().get();
    n->backprop = [on, an, bn]() {
      if (an->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i)
          an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < on->grad.size(); ++i)
          bn->grad[i] += on->grad[i] * an->value[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> div(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  auto n = make_node<T>(std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    Node<T>* bn = b.node().get();
    n->backprop = [on, an, bn]() {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        T bv = bn->value[i];
        if (an->requires_grad) an->grad[i] += on->grad[i] / bv;
        if (bn->requires_grad) bn->grad[i] -= on->grad[i] * an->value[i] / (bv * bv);
      }
    };
  }
  return Var<T>(n);
}

// k*a + c elementwise with scalar constants.
template <typename T>
inline Var<T> affine(const Var<T>& a, T k, T c) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = k * out[i] + c;
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an, k]() {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += k * on->grad[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> exp_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->value[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> log_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] / an->value[i];
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> sigmoid_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) {
    T z = out[i];
    out[i] = z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
  }
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        T s = on->value[i];
        an->grad[i] += on->grad[i] * s * (T(1) - s);
      }
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> relu_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], T(0));
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > T(0)) an->grad[i] += on->grad[i];
    };
  }
  return Var<T>(n);
}

// Gradient passes only through the strict interior.
template <typename T>
inline Var<T> clamp_v(const Var<T>& a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], lo, hi);
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an, lo, hi]() {
      for (size_t i = 0; i < on->grad.size(); ++i) {
        T v = an->value[i];
        if (v > lo && v < hi) an->grad[i] += on->grad[i];
      }
    };
  }
  return Var<T>(n);
}

// Elementwise smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
template <typename T>
inline Var<T> smooth_l1_v(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (size_t i = 0; i < out.size(); ++i) {
    T x = out[i];
    out[i] = std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5);
  }
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * std::clamp(an->value[i], T(-1), T(1));
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- reductions

template <typename T>
inline Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.value().sum());
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      T g = on->grad[0];
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> mean_all(const Var<T>& a) {
  return affine(sum_all(a), T(1) / static_cast<T>(a.value().size()), T(0));
}

// (c,h,w) -> (c): spatial average per channel.
template <typename T>
inline Var<T> global_avg_pool(const Var<T>& a) {
  const auto& v = a.value();
  int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  Tensor<T> out({c});
  T inv = T(1) / static_cast<T>(h * w);
  for (int ch = 0; ch < c; ++ch) {
    T s = 0;
    const T* p = v.data() + static_cast<size_t>(ch) * h * w;
    for (int i = 0; i < h * w; ++i) s += p[i];
    out[static_cast<size_t>(ch)] = s * inv;
  }
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an, c, h, w, inv]() {
      for (int ch = 0; ch < c; ++ch) {
        T g = on->grad[static_cast<size_t>(ch)] * inv;
        T* p = an->grad.data() + static_cast<size_t>(ch) * h * w;
        for (int i = 0; i < h * w; ++i) p[i] += g;
      }
    };
  }
  return Var<T>(n);
}

// (c,h,w) -> (1,h,w): mean over the channel axis.
template <typename T>
inline Var<T> channel_mean(const Var<T>& a) {
  const auto& v = a.value();
  int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  Tensor<T> out({1, h, w});
  T inv = T(1) / static_cast<T>(c);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i)
      out[static_cast<size_t>(i)] += v[static_cast<size_t>(ch) * h * w + i] * inv;
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an, c, h, w, inv]() {
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i)
          an->grad[static_cast<size_t>(ch) * h * w + i] += on->grad[static_cast<size_t>(i)] * inv;
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- broadcasts

// (c,h,w) * (1,h,w), map broadcast over channels.
template <typename T>
inline Var<T> mul_spatial(const Var<T>& x, const Var<T>& m) {
  const auto& xv = x.value();
  const auto& mv = m.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (mv.dim(0) != 1 || mv.dim(1) != h || mv.dim(2) != w)
    throw std::invalid_argument("mul_spatial: map shape mismatch");
  Tensor<T> out = xv;
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i) out[static_cast<size_t>(ch) * h * w + i] *= mv[static_cast<size_t>(i)];
  auto n = make_node<T>(std::move(out), {x.node(), m.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* mn = m.node().get();
    n->backprop = [on, xn, mn, c, h, w]() {
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) {
          size_t xi = static_cast<size_t>(ch) * h * w + i;
          T g = on->grad[xi];
          if (xn->requires_grad) xn->grad[xi] += g * mn->value[static_cast<size_t>(i)];
          if (mn->requires_grad) mn->grad[static_cast<size_t>(i)] += g * xn->value[xi];
        }
    };
  }
  return Var<T>(n);
}

// (x - shift_c) * scale_c per channel, constant coefficients.
template <typename T>
inline Var<T> channel_affine(const Var<T>& x, const std::vector<T>& shift,
                             const std::vector<T>& scale) {
  const auto& xv = x.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (static_cast<int>(shift.size()) != c || static_cast<int>(scale.size()) != c)
    throw std::invalid_argument("channel_affine: coefficient size mismatch");
  Tensor<T> out = xv;
  for (int ch = 0; ch < c; ++ch) {
    T* p = out.data() + static_cast<size_t>(ch) * h * w;
    for (int i = 0; i < h * w; ++i) p[i] = (p[i] - shift[static_cast<size_t>(ch)]) * scale[static_cast<size_t>(ch)];
  }
  auto n = make_node<T>(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    n->backprop = [on, xn, scale, c, h, w]() {
      for (int ch = 0; ch < c; ++ch) {
        size_t base = static_cast<size_t>(ch) * h * w;
        T s = scale[static_cast<size_t>(ch)];
        for (int i = 0; i < h * w; ++i) xn->grad[base + i] += on->grad[base + i] * s;
      }
    };
  }
  return Var<T>(n);
}

// (c,h,w) * (c), per-channel gates.
template <typename T>
inline Var<T> mul_channel(const Var<T>& x, const Var<T>& s) {
  const auto& xv = x.value();
  const auto& sv = s.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (static_cast<int>(sv.size()) != c) throw std::invalid_argument("mul_channel: gate size mismatch");
  Tensor<T> out = xv;
  for (int ch = 0; ch < c; ++ch) {
    T g = sv[static_cast<size_t>(ch)];
    T* p = out.data() + static_cast<size_t>(ch) * h * w;
    for (int i = 0; i < h * w; ++i) p[i] *= g;
  }
  auto n = make_node<T>(std::move(out), {x.node(), s.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* sn = s.node().get();
    n->backprop = [on, xn, sn, c, h, w]() {
      for (int ch = 0; ch < c; ++ch) {
        size_t base = static_cast<size_t>(ch) * h * w;
        if (xn->requires_grad) {
          T g = sn->value[static_cast<size_t>(ch)];
          for (int i = 0; i < h * w; ++i) xn->grad[base + i] += on->grad[base + i] * g;
        }
        if (sn->requires_grad) {
          T acc = 0;
          for (int i = 0; i < h * w; ++i) acc += on->grad[base + i] * xn->value[base + i];
          sn->grad[static_cast<size_t>(ch)] += acc;
        }
      }
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- structure

template <typename T>
inline Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input");
  int h = xs[0].value().dim(1), w = xs[0].value().dim(2);
  int ctot = 0;
  for (const auto& x : xs) {
    if (x.value().dim(1) != h || x.value().dim(2) != w)
      throw std::invalid_argument("concat_channels: spatial mismatch");
    ctot += x.value().dim(0);
  }
  Tensor<T> out({ctot, h, w});
  size_t off = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.value().size(), out.data() + off);
    off += x.value().size();
    parents.push_back(x.node());
  }
  auto n = make_node<T>(std::move(out), parents);
  if (n->requires_grad) {
    Node<T>* on = n.get();
    std::vector<Node<T>*> ps;
    for (const auto& x : xs) ps.push_back(x.node().get());
    n->backprop = [on, ps]() {
      size_t off = 0;
      for (Node<T>* p : ps) {
        size_t sz = p->value.size();
        if (p->requires_grad)
          for (size_t i = 0; i < sz; ++i) p->grad[i] += on->grad[off + i];
        off += sz;
      }
    };
  }
  return Var<T>(n);
}

template <typename T>
inline Var<T> reshape(const Var<T>& a, std::vector<int> dims) {
  Tensor<T> out(dims);
  if (out.size() != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
  auto n = make_node<T>(std::move(out), {a.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* an = a.node().get();
    n->backprop = [on, an]() {
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
  }
  return Var<T>(n);
}

// Stack K same-length vectors into a (K,n) matrix.
template <typename T>
inline Var<T> stack_rows(const std::vector<Var<T>>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
  int ncol = static_cast<int>(rows[0].value().size());
  Tensor<T> out({static_cast<int>(rows.size()), ncol});
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int>(rows[r].value().size()) != ncol)
      throw std::invalid_argument("stack_rows: ragged rows");
    std::copy(rows[r].value().data(), rows[r].value().data() + ncol,
              out.data() + r * static_cast<size_t>(ncol));
    parents.push_back(rows[r].node());
  }
  auto n = make_node<T>(std::move(out), parents);
  if (n->requires_grad) {
    Node<T>* on = n.get();
    std::vector<Node<T>*> ps;
    for (const auto& r : rows) ps.push_back(r.node().get());
    n->backprop = [on, ps, ncol]() {
      for (size_t r = 0; r < ps.size(); ++r) {
        if (!ps[r]->requires_grad) continue;
        for (int i = 0; i < ncol; ++i)
          ps[r]->grad[static_cast<size_t>(i)] += on->grad[r * static_cast<size_t>(ncol) + i];
      }
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- conv / bn

namespace detail {

template <typename T>
inline void im2col(const Tensor<T>& x, int kh, int kw, int stride, int ph, int pw, int oh, int ow,
                   Tensor<T>& col) {
  int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  // col is (ci*kh*kw, oh*ow)
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        int row = (c * kh + ky) * kw + kx;
        T* dst = col.data() + static_cast<size_t>(row) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - ph + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst + static_cast<size_t>(oy) * ow, dst + static_cast<size_t>(oy + 1) * ow,
                      T(0));
            continue;
          }
          const T* src = x.data() + (static_cast<size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pw + kx;
            dst[static_cast<size_t>(oy) * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
inline void col2im_add(const Tensor<T>& col, int ci, int h, int w, int kh, int kw, int stride,
                       int ph, int pw, int oh, int ow, Tensor<T>& dx) {
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        int row = (c * kh + ky) * kw + kx;
        const T* src = col.data() + static_cast<size_t>(row) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - ph + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = dx.data() + (static_cast<size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pw + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[static_cast<size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: (ci,h,w), weight: (co,ci,kh,kw), bias: (co). Output floor-sized:
// oh = (h + 2*ph - kh)/stride + 1.
template <typename T>
inline Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride,
                     int pad_h, int pad_w) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  int ci = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci) +
                                " != weight channels " + std::to_string(wv.dim(1)));
  int oh = (h + 2 * pad_h - kh) / stride + 1;
  int ow = (w + 2 * pad_w - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output would be empty");

  int krows = ci * kh * kw;
  Tensor<T> col({krows, oh * ow});
  detail::im2col(xv, kh, kw, stride, pad_h, pad_w, oh, ow, col);

  Tensor<T> out({co, oh, ow});
  {
    CMapRM<T> wm(wv.data(), co, krows);
    CMapRM<T> cm(col.data(), krows, oh * ow);
    MapRM<T> om(out.data(), co, oh * ow);
    om.noalias() = wm * cm;
    for (int c = 0; c < co; ++c) om.row(c).array() += bias.value()[static_cast<size_t>(c)];
  }

  auto n = make_node<T>(std::move(out), {x.node(), weight.node(), bias.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* wn = weight.node().get();
    Node<T>* bn = bias.node().get();
    auto saved_col = std::make_shared<Tensor<T>>(std::move(col));
    n->backprop = [on, xn, wn, bn, saved_col, ci, h, w, co, kh, kw, stride, pad_h, pad_w, oh,
                   ow]() {
      int krows = ci * kh * kw;
      CMapRM<T> gm(on->grad.data(), co, oh * ow);
      if (bn->requires_grad) {
        for (int c = 0; c < co; ++c) bn->grad[static_cast<size_t>(c)] += gm.row(c).sum();
      }
      if (wn->requires_grad) {
        CMapRM<T> cm(saved_col->data(), krows, oh * ow);
        MapRM<T> wg(wn->grad.data(), co, krows);
        wg.noalias() += gm * cm.transpose();
      }
      if (xn->requires_grad) {
        CMapRM<T> wm(wn->value.data(), co, krows);
        Tensor<T> dcol({krows, oh * ow});
        MapRM<T> dcm(dcol.data(), krows, oh * ow);
        dcm.noalias() = wm.transpose() * gm;
        detail::col2im_add(dcol, ci, h, w, kh, kw, stride, pad_h, pad_w, oh, ow, xn->grad);
      }
    };
  }
  return Var<T>(n);
}

// Batch normalization over the spatial extent of a single (c,h,w) map.
// Statistics always come from the input itself (single-image batches).
template <typename T>
inline Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const auto& xv = x.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  int nsp = h * w;
  if (static_cast<int>(gamma.value().size()) != c || static_cast<int>(beta.value().size()) != c)
    throw std::invalid_argument("batchnorm2d: affine param size mismatch");

  auto xhat = std::make_shared<Tensor<T>>(std::vector<int>{c, h, w});
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(c));
  Tensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const T* p = xv.data() + static_cast<size_t>(ch) * nsp;
    T mean = 0;
    for (int i = 0; i < nsp; ++i) mean += p[i];
    mean /= static_cast<T>(nsp);
    T var = 0;
    for (int i = 0; i < nsp; ++i) {
      T d = p[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(nsp);
    T is = T(1) / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(ch)] = is;
    T g = gamma.value()[static_cast<size_t>(ch)];
    T b = beta.value()[static_cast<size_t>(ch)];
    T* xh = xhat->data() + static_cast<size_t>(ch) * nsp;
    T* o = out.data() + static_cast<size_t>(ch) * nsp;
    for (int i = 0; i < nsp; ++i) {
      xh[i] = (p[i] - mean) * is;
      o[i] = g * xh[i] + b;
    }
  }

  auto n = make_node<T>(std::move(out), {x.node(), gamma.node(), beta.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* gn = gamma.node().get();
    Node<T>* bn = beta.node().get();
    n->backprop = [on, xn, gn, bn, xhat, istd, c, nsp]() {
      for (int ch = 0; ch < c; ++ch) {
        const T* g = on->grad.data() + static_cast<size_t>(ch) * nsp;
        const T* xh = xhat->data() + static_cast<size_t>(ch) * nsp;
        T sum_g = 0, sum_gx = 0;
        for (int i = 0; i < nsp; ++i) {
          sum_g += g[i];
          sum_gx += g[i] * xh[i];
        }
        if (bn->requires_grad) bn->grad[static_cast<size_t>(ch)] += sum_g;
        if (gn->requires_grad) gn->grad[static_cast<size_t>(ch)] += sum_gx;
        if (xn->requires_grad) {
          T gam = gn->value[static_cast<size_t>(ch)];
          T is = (*istd)[static_cast<size_t>(ch)];
          T invn = T(1) / static_cast<T>(nsp);
          T* dx = xn->grad.data() + static_cast<size_t>(ch) * nsp;
          for (int i = 0; i < nsp; ++i)
            dx[i] += gam * is * (g[i] - sum_g * invn - xh[i] * sum_gx * invn);
        }
      }
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- resampling

namespace detail {

struct LerpTap {
  int lo = 0;
  int hi = 0;
  double w_hi = 0.0;  // weight of hi; lo gets 1-w_hi
};

// Half-pixel mapping, clamped to the valid range.
inline LerpTap lerp_tap(int out_i, int out_n, int in_n) {
  double src = (out_i + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
  if (src < 0) src = 0;
  if (src > in_n - 1) src = static_cast<double>(in_n - 1);
  LerpTap t;
  t.lo = static_cast<int>(std::floor(src));
  t.hi = std::min(t.lo + 1, in_n - 1);
  t.w_hi = src - t.lo;
  return t;
}

}  // namespace detail

template <typename T>
inline Var<T> bilinear_resize(const Var<T>& x, int oh, int ow) {
  const auto& xv = x.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear_resize: bad target size");
  std::vector<detail::LerpTap> ty(static_cast<size_t>(oh)), tx(static_cast<size_t>(ow));
  for (int i = 0; i < oh; ++i) ty[static_cast<size_t>(i)] = detail::lerp_tap(i, oh, h);
  for (int i = 0; i < ow; ++i) tx[static_cast<size_t>(i)] = detail::lerp_tap(i, ow, w);

  Tensor<T> out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    const T* p = xv.data() + static_cast<size_t>(ch) * h * w;
    T* o = out.data() + static_cast<size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const auto& y = ty[static_cast<size_t>(oy)];
      for (int ox = 0; ox < ow; ++ox) {
        const auto& xt = tx[static_cast<size_t>(ox)];
        T v00 = p[y.lo * w + xt.lo], v01 = p[y.lo * w + xt.hi];
        T v10 = p[y.hi * w + xt.lo], v11 = p[y.hi * w + xt.hi];
        T top = v00 + static_cast<T>(xt.w_hi) * (v01 - v00);
        T bot = v10 + static_cast<T>(xt.w_hi) * (v11 - v10);
        o[oy * ow + ox] = top + static_cast<T>(y.w_hi) * (bot - top);
      }
    }
  }

  auto n = make_node<T>(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    n->backprop = [on, xn, ty, tx, c, h, w, oh, ow]() {
      for (int ch = 0; ch < c; ++ch) {
        T* dx = xn->grad.data() + static_cast<size_t>(ch) * h * w;
        const T* g = on->grad.data() + static_cast<size_t>(ch) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const auto& y = ty[static_cast<size_t>(oy)];
          for (int ox = 0; ox < ow; ++ox) {
            const auto& xt = tx[static_cast<size_t>(ox)];
            T gv = g[oy * ow + ox];
            T wy1 = static_cast<T>(y.w_hi), wy0 = T(1) - wy1;
            T wx1 = static_cast<T>(xt.w_hi), wx0 = T(1) - wx1;
            dx[y.lo * w + xt.lo] += gv * wy0 * wx0;
            dx[y.lo * w + xt.hi] += gv * wy0 * wx1;
            dx[y.hi * w + xt.lo] += gv * wy1 * wx0;
            dx[y.hi * w + xt.hi] += gv * wy1 * wx1;
          }
        }
      }
    };
  }
  return Var<T>(n);
}

// Crop the axis-aligned rectangle [x0,x1]x[y0,y1] (feature coordinates) to a
// fixed (c,oh,ow) patch, sampling each bin center bilinearly with border
// clamping.
template <typename T>
inline Var<T> roi_bilinear(const Var<T>& x, double x0, double y0, double x1, double y1, int oh,
                           int ow) {
  const auto& xv = x.value();
  int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  auto clampd = [](double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); };

  struct Tap {
    int lo, hi;
    T whi;
  };
  auto make_taps = [&](double a, double b, int n, int limit) {
    std::vector<Tap> taps(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      double src = a + (i + 0.5) * (b - a) / n;
      src = clampd(src, 0.0, limit - 1.0);
      Tap t;
      t.lo = static_cast<int>(std::floor(src));
      t.hi = std::min(t.lo + 1, limit - 1);
      t.whi = static_cast<T>(src - t.lo);
      taps[static_cast<size_t>(i)] = t;
    }
    return taps;
  };
  auto ty = make_taps(y0, y1, oh, h);
  auto tx = make_taps(x0, x1, ow, w);

  Tensor<T> out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    const T* p = xv.data() + static_cast<size_t>(ch) * h * w;
    T* o = out.data() + static_cast<size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const auto& yt = ty[static_cast<size_t>(oy)];
        const auto& xt = tx[static_cast<size_t>(ox)];
        T v00 = p[yt.lo * w + xt.lo], v01 = p[yt.lo * w + xt.hi];
        T v10 = p[yt.hi * w + xt.lo], v11 = p[yt.hi * w + xt.hi];
        T top = v00 + xt.whi * (v01 - v00);
        T bot = v10 + xt.whi * (v11 - v10);
        o[oy * ow + ox] = top + yt.whi * (bot - top);
      }
  }

  auto n = make_node<T>(std::move(out), {x.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    n->backprop = [on, xn, ty, tx, c, h, w, oh, ow]() {
      for (int ch = 0; ch < c; ++ch) {
        T* dx = xn->grad.data() + static_cast<size_t>(ch) * h * w;
        const T* g = on->grad.data() + static_cast<size_t>(ch) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const auto& yt = ty[static_cast<size_t>(oy)];
            const auto& xt = tx[static_cast<size_t>(ox)];
            T gv = g[oy * ow + ox];
            T wy1 = yt.whi, wy0 = T(1) - wy1;
            T wx1 = xt.whi, wx0 = T(1) - wx1;
            dx[yt.lo * w + xt.lo] += gv * wy0 * wx0;
            dx[yt.lo * w + xt.hi] += gv * wy0 * wx1;
            dx[yt.hi * w + xt.lo] += gv * wy1 * wx0;
            dx[yt.hi * w + xt.hi] += gv * wy1 * wx1;
          }
      }
    };
  }
  return Var<T>(n);
}

// ---------------------------------------------------------------- dense

// x: (n) vector, weight: (m,n), bias: (m) -> (m).
template <typename T>
inline Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  int nin = static_cast<int>(xv.size());
  int m = wv.dim(0);
  if (wv.dim(1) != nin) throw std::invalid_argument("linear: weight/input mismatch");
  Tensor<T> out({m});
  {
    CMapRM<T> wm(wv.data(), m, nin);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xm(xv.data(), nin);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> om(out.data(), m);
    om.noalias() = wm * xm;
    for (int i = 0; i < m; ++i) out[static_cast<size_t>(i)] += bias.value()[static_cast<size_t>(i)];
  }
  auto n = make_node<T>(std::move(out), {x.node(), weight.node(), bias.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* wn = weight.node().get();
    Node<T>* bn = bias.node().get();
    n->backprop = [on, xn, wn, bn, m, nin]() {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gm(on->grad.data(), m);
      if (bn->requires_grad)
        for (int i = 0; i < m; ++i) bn->grad[static_cast<size_t>(i)] += on->grad[static_cast<size_t>(i)];
      if (wn->requires_grad) {
        MapRM<T> wg(wn->grad.data(), m, nin);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xm(xn->value.data(), nin);
        wg.noalias() += gm * xm.transpose();
      }
      if (xn->requires_grad) {
        CMapRM<T> wm(wn->value.data(), m, nin);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> xg(xn->grad.data(), nin);
        xg.noalias() += wm.transpose() * gm;
      }
    };
  }
  return Var<T>(n);
}

// X: (k,n), weight: (m,n), bias: (m) -> (k,m). Row-wise dense layer.
template <typename T>
inline Var<T> linear_rows(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  int k = xv.dim(0), nin = xv.dim(1), m = wv.dim(0);
  if (wv.dim(1) != nin) throw std::invalid_argument("linear_rows: weight/input mismatch");
  Tensor<T> out({k, m});
  {
    CMapRM<T> xm(xv.data(), k, nin);
    CMapRM<T> wm(wv.data(), m, nin);
    MapRM<T> om(out.data(), k, m);
    om.noalias() = xm * wm.transpose();
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < m; ++j) out.at(r, j) += bias.value()[static_cast<size_t>(j)];
  }
  auto n = make_node<T>(std::move(out), {x.node(), weight.node(), bias.node()});
  if (n->requires_grad) {
    Node<T>* on = n.get();
    Node<T>* xn = x.node().get();
    Node<T>* wn = weight.node().get();
    Node<T>* bn = bias.node().get();
    n->backprop = [on, xn, wn, bn, k, nin, m]() {
      CMapRM<T> gm(on->grad.data(), k, m);
      if (bn->requires_grad)
        for (int j = 0; j < m; ++j) bn->grad[static_cast<size_t>(j)] += gm.col(j).sum();
      if (wn->requires_grad) {
        CMapRM<T> xm(xn->value.data(), k, nin);
        MapRM<T> wg(wn->grad.data(), m, nin);
        wg.noalias() += gm.transpose() * xm;
      }
      if (xn->requires_grad) {
        CMapRM<T> wm(wn->value.data(), m, nin);
        MapRM<T> xg(xn->grad.data(), k, nin);
        xg.noalias() += gm * wm;
      }
    };
  }
  return Var<T>(n);
}

}  // namespace rfn::nn
