// Differentiable operators on Var. Rank-3 activations are (C, H, W); a scalar
// is a [1,1,1] tensor.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "lsirr/autograd.hpp"
#include "lsirr/kernels.hpp"

namespace lsirr::ad {

namespace detail {

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

// Element-wise map with derivative expressed through (input, output).
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F f, D df) {
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return Var<T>::make(std::move(y), {x}, [df](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    const auto& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < n.grad.size(); ++i) (*gx)[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "add");
  return Var<T>::make(a.value() + b.value(), {a, b}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
    if (auto* g = grad_of(n, 1)) *g += n.grad;
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "sub");
  return Var<T>::make(a.value() - b.value(), {a, b}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
    if (auto* g = grad_of(n, 1)) *g -= n.grad;
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return Var<T>::make(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& x, T s) {
  return Var<T>::make(x.value() * s, {x}, [s](Node<T>& n) {
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T s) {
  Tensor<T> y = x.value();
  for (auto& v : y.vec()) v += s;
  return Var<T>::make(std::move(y), {x}, [](Node<T>& n) {
    if (auto* g = grad_of(n, 0)) *g += n.grad;
  });
}

// 1 - x
template <class T>
Var<T> one_minus(const Var<T>& x) {
  return add_scalar(scale(x, T{-1}), T{1});
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "div");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] / b.value()[i];
  return Var<T>::make(std::move(y), {a, b}, [](Node<T>& n) {
    const auto& bv = n.inputs[1]->value;
    if (auto* g = grad_of(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] / bv[i];
    if (auto* g = grad_of(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i] * n.value[i] / bv[i];
  });
}

// x[C,H,W] * s[C,1,1]
template <class T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& s) {
  const auto& xv = x.value();
  if (s.value().size() != xv.channels()) throw std::invalid_argument("mul_channels: gate size mismatch");
  Tensor<T> y(xv.shape());
  const std::size_t hw = xv.plane_size();
  for (std::size_t c = 0; c < xv.channels(); ++c)
    for (std::size_t i = 0; i < hw; ++i) y.plane(c)[i] = xv.plane(c)[i] * s.value()[c];
  return Var<T>::make(std::move(y), {x, s}, [hw](Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& sv = n.inputs[1]->value;
    auto* gx = grad_of(n, 0);
    auto* gs = grad_of(n, 1);
    for (std::size_t c = 0; c < xv.channels(); ++c) {
      const T* g = n.grad.plane(c);
      if (gx)
        for (std::size_t i = 0; i < hw; ++i) gx->plane(c)[i] += g[i] * sv[c];
      if (gs) {
        T acc{0};
        for (std::size_t i = 0; i < hw; ++i) acc += g[i] * xv.plane(c)[i];
        (*gs)[c] += acc;
      }
    }
  });
}

// x[C,H,W] * m[1,H,W]
template <class T>
Var<T> mul_plane(const Var<T>& x, const Var<T>& m) {
  const auto& xv = x.value();
  const auto& mv = m.value();
  if (mv.channels() != 1 || mv.height() != xv.height() || mv.width() != xv.width())
    throw std::invalid_argument("mul_plane: mask must be [1,H,W] matching the input");
  Tensor<T> y(xv.shape());
  const std::size_t hw = xv.plane_size();
  for (std::size_t c = 0; c < xv.channels(); ++c)
    for (std::size_t i = 0; i < hw; ++i) y.plane(c)[i] = xv.plane(c)[i] * mv[i];
  return Var<T>::make(std::move(y), {x, m}, [hw](Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& mv = n.inputs[1]->value;
    auto* gx = grad_of(n, 0);
    auto* gm = grad_of(n, 1);
    for (std::size_t c = 0; c < xv.channels(); ++c) {
      const T* g = n.grad.plane(c);
      for (std::size_t i = 0; i < hw; ++i) {
        if (gx) gx->plane(c)[i] += g[i] * mv[i];
        if (gm) (*gm)[i] += g[i] * xv.plane(c)[i];
      }
    }
  });
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride = 1, Pad pad = Pad::reflect) {
  const bool has_bias = b.defined();
  Tensor<T> y = kernels::conv2d_forward(x.value(), w.value(), has_bias ? &b.value() : nullptr, stride, pad);
  std::vector<Var<T>> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return Var<T>::make(std::move(y), std::move(inputs), [stride, pad](Node<T>& n) {
    kernels::conv2d_backward(n.inputs[0]->value, n.inputs[1]->value, n.grad, stride, pad, grad_of(n, 0),
                             grad_of(n, 1), grad_of(n, 2));
  });
}

template <class T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, Pad pad = Pad::reflect) {
  return Var<T>::make(kernels::depthwise_forward(x.value(), w.value(), pad), {x, w}, [pad](Node<T>& n) {
    kernels::depthwise_backward(n.inputs[0]->value, n.inputs[1]->value, n.grad, pad, grad_of(n, 0), grad_of(n, 1));
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return detail::unary(
      x, [slope](T v) { return v > T{0} ? v : slope * v; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return T{1} / (T{1} + std::exp(-v)); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

// Hard clamp; gradient passes only where lo <= x <= hi.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T{1} : T{0}; });
}

// max(x, 0)^p with p >= 1.
template <class T>
Var<T> pow(const Var<T>& x, T p) {
  return detail::unary(
      x, [p](T v) { return v > T{0} ? std::pow(v, p) : T{0}; },
      [p](T v, T) { return v > T{0} ? p * std::pow(v, p - T{1}) : T{0}; });
}

// log(max(x, floor)).
template <class T>
Var<T> log_clamped(const Var<T>& x, T floor) {
  return detail::unary(
      x, [floor](T v) { return std::log(std::max(v, floor)); },
      [floor](T v, T) { return v > floor ? T{1} / v : T{0}; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

// sqrt(x + eps)
template <class T>
Var<T> sqrt_eps(const Var<T>& x, T eps) {
  return detail::unary(
      x, [eps](T v) { return std::sqrt(v + eps); }, [](T, T y) { return T{0.5} / y; });
}

// Per-channel parametric ReLU, slope a[C].
template <class T>
Var<T> prelu(const Var<T>& x, const Var<T>& a) {
  const auto& xv = x.value();
  if (a.value().size() != xv.channels()) throw std::invalid_argument("prelu: slope count mismatch");
  Tensor<T> y(xv.shape());
  const std::size_t hw = xv.plane_size();
  for (std::size_t c = 0; c < xv.channels(); ++c) {
    const T s = a.value()[c];
    for (std::size_t i = 0; i < hw; ++i) {
      const T v = xv.plane(c)[i];
      y.plane(c)[i] = v > T{0} ? v : s * v;
    }
  }
  return Var<T>::make(std::move(y), {x, a}, [hw](Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    const auto& av = n.inputs[1]->value;
    auto* gx = grad_of(n, 0);
    auto* ga = grad_of(n, 1);
    for (std::size_t c = 0; c < xv.channels(); ++c) {
      const T* g = n.grad.plane(c);
      T acc{0};
      for (std::size_t i = 0; i < hw; ++i) {
        const T v = xv.plane(c)[i];
        if (v > T{0}) {
          if (gx) gx->plane(c)[i] += g[i];
        } else {
          if (gx) gx->plane(c)[i] += g[i] * av[c];
          acc += g[i] * v;
        }
      }
      if (ga) (*ga)[c] += acc;
    }
  });
}

// [C,H,W] -> [C,1,1]
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t hw = xv.plane_size();
  Tensor<T> y = Tensor<T>::chw(xv.channels(), 1, 1);
  for (std::size_t c = 0; c < xv.channels(); ++c) {
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += xv.plane(c)[i];
    y[c] = s / static_cast<T>(hw);
  }
  return Var<T>::make(std::move(y), {x}, [hw](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < gx->channels(); ++c) {
      const T g = n.grad[c] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) gx->plane(c)[i] += g;
    }
  });
}

// [C,H,W] -> [C,1,1]; gradient routes to the first arg-max.
template <class T>
Var<T> global_max_pool(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t hw = xv.plane_size();
  Tensor<T> y = Tensor<T>::chw(xv.channels(), 1, 1);
  std::vector<std::size_t> arg(xv.channels());
  for (std::size_t c = 0; c < xv.channels(); ++c) {
    const T* p = xv.plane(c);
    arg[c] = static_cast<std::size_t>(std::max_element(p, p + hw) - p);
    y[c] = p[arg[c]];
  }
  return Var<T>::make(std::move(y), {x}, [arg](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < arg.size(); ++c) gx->plane(c)[arg[c]] += n.grad[c];
  });
}

// [C,H,W] -> [1,H,W]
template <class T>
Var<T> channel_mean(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t hw = xv.plane_size(), ch = xv.channels();
  Tensor<T> y = Tensor<T>::chw(1, xv.height(), xv.width());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t i = 0; i < hw; ++i) y[i] += xv.plane(c)[i];
  for (auto& v : y.vec()) v /= static_cast<T>(ch);
  return Var<T>::make(std::move(y), {x}, [hw, ch](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < hw; ++i) gx->plane(c)[i] += n.grad[i] / static_cast<T>(ch);
  });
}

// [C,H,W] -> [1,H,W]
template <class T>
Var<T> channel_max(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t hw = xv.plane_size();
  Tensor<T> y = Tensor<T>::chw(1, xv.height(), xv.width());
  std::vector<std::size_t> arg(hw, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    T best = xv.plane(0)[i];
    for (std::size_t c = 1; c < xv.channels(); ++c)
      if (xv.plane(c)[i] > best) {
        best = xv.plane(c)[i];
        arg[i] = c;
      }
    y[i] = best;
  }
  return Var<T>::make(std::move(y), {x}, [arg, hw](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < hw; ++i) gx->plane(arg[i])[i] += n.grad[i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const std::size_t h = parts[0].value().height(), w = parts[0].value().width();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().height() != h || p.value().width() != w)
      throw std::invalid_argument("concat: spatial size mismatch");
    total += p.value().channels();
  }
  Tensor<T> y = Tensor<T>::chw(total, h, w);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), y.data() + off);
    off += p.value().size();
  }
  return Var<T>::make(std::move(y), parts, [](Node<T>& n) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      const std::size_t sz = n.inputs[i]->value.size();
      if (auto* g = grad_of(n, i))
        for (std::size_t j = 0; j < sz; ++j) (*g)[j] += n.grad[off + j];
      off += sz;
    }
  });
}

// Channels [c0, c1).
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t c0, std::size_t c1) {
  const auto& xv = x.value();
  if (c0 >= c1 || c1 > xv.channels()) throw std::invalid_argument("slice_channels: bad range");
  const std::size_t hw = xv.plane_size();
  Tensor<T> y = Tensor<T>::chw(c1 - c0, xv.height(), xv.width());
  std::copy(xv.plane(c0), xv.plane(c0) + (c1 - c0) * hw, y.data());
  return Var<T>::make(std::move(y), {x}, [c0, hw](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    T* dst = gx->plane(c0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
  });
}

template <class T>
Var<T> resize(const Var<T>& x, std::size_t oh, std::size_t ow) {
  if (x.value().height() == oh && x.value().width() == ow) return x;
  return Var<T>::make(kernels::resize_forward(x.value(), oh, ow), {x}, [](Node<T>& n) {
    if (auto* gx = grad_of(n, 0)) kernels::resize_backward(n.grad, *gx);
  });
}

// 2x2 max pooling with stride 2 (odd trailing row/column dropped).
template <class T>
Var<T> max_pool2(const Var<T>& x) {
  const auto& xv = x.value();
  const std::size_t oh = std::max<std::size_t>(1, xv.height() / 2), ow = std::max<std::size_t>(1, xv.width() / 2);
  Tensor<T> y = Tensor<T>::chw(xv.channels(), oh, ow);
  std::vector<std::size_t> arg(y.size());
  for (std::size_t c = 0; c < xv.channels(); ++c)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t bi = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t sy = std::min(oy * 2 + dy, xv.height() - 1);
            const std::size_t sx = std::min(ox * 2 + dx, xv.width() - 1);
            const std::size_t si = (c * xv.height() + sy) * xv.width() + sx;
            if (xv[si] > best) {
              best = xv[si];
              bi = si;
            }
          }
        const std::size_t oi = (c * oh + oy) * ow + ox;
        y[oi] = best;
        arg[oi] = bi;
      }
  return Var<T>::make(std::move(y), {x}, [arg](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) (*gx)[arg[i]] += n.grad[i];
  });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().span()) s += v;
  return Var<T>::make(Tensor<T>::scalar(s), {x}, [](Node<T>& n) {
    auto* gx = grad_of(n, 0);
    if (!gx) return;
    const T g = n.grad[0];
    for (auto& v : gx->vec()) v += g;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

// mean((a - b)^2)
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "mse");
  const std::size_t n_el = a.value().size();
  T s{0};
  for (std::size_t i = 0; i < n_el; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return Var<T>::make(Tensor<T>::scalar(s / static_cast<T>(n_el)), {a, b}, [n_el](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    const T k = T{2} * n.grad[0] / static_cast<T>(n_el);
    auto* ga = grad_of(n, 0);
    auto* gb = grad_of(n, 1);
    for (std::size_t i = 0; i < n_el; ++i) {
      const T d = k * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// mean(|a - b|); subgradient 0 at equality.
template <class T>
Var<T> l1(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a, b, "l1");
  const std::size_t n_el = a.value().size();
  T s{0};
  for (std::size_t i = 0; i < n_el; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return Var<T>::make(Tensor<T>::scalar(s / static_cast<T>(n_el)), {a, b}, [n_el](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    const T k = n.grad[0] / static_cast<T>(n_el);
    auto* ga = grad_of(n, 0);
    auto* gb = grad_of(n, 1);
    for (std::size_t i = 0; i < n_el; ++i) {
      const T d = av[i] - bv[i];
      const T sgn = d > T{0} ? k : (d < T{0} ? -k : T{0});
      if (ga) (*ga)[i] += sgn;
      if (gb) (*gb)[i] -= sgn;
    }
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}
template <class T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  return sub(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  return mul(a, b);
}
template <class T>
Var<T> operator*(const Var<T>& a, T s) {
  return scale(a, s);
}

}  // namespace lsirr::ad
