// Tensor-level compute kernels shared by the image operators and the autograd
// ops: same-padded 2-D convolution (dense and depthwise), and bilinear resampling.
// Convolutions are cross-correlations (the CNN convention).
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lsirr/tensor.hpp"

namespace lsirr {

enum class Pad { reflect, zero };

namespace kernels {

// Mirror index without repeating the edge sample ("reflect-101"); valid for any
// offset and for n == 1.
inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride) {
  return (in + 2 * (k / 2) - k) / stride + 1;
}

// map[o * k + t] = source index feeding output o through tap t, or -1 for zero padding.
inline std::vector<long> axis_map(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, Pad pad) {
  std::vector<long> m(out * k);
  const long half = static_cast<long>(k / 2);
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t t = 0; t < k; ++t) {
      long s = static_cast<long>(o * stride + t) - half;
      if (s < 0 || s >= static_cast<long>(in)) s = pad == Pad::reflect ? reflect_index(s, static_cast<long>(in)) : -1;
      m[o * k + t] = s;
    }
  }
  return m;
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

constexpr std::size_t kColBudget = std::size_t{1} << 21;

struct ConvGeometry {
  std::size_t cin, h, w, cout, k, stride, ho, wo;
  std::vector<long> rows, cols;
};

template <class T>
ConvGeometry geometry(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, Pad pad) {
  if (x.rank() != 3 || w.rank() != 4) throw std::invalid_argument("conv2d expects x[C,H,W] and w[O,C,k,k]");
  if (w.shape()[1] != x.channels())
    throw std::invalid_argument("conv2d channel mismatch: input " + shape_string(x.shape()) + ", weight " +
                                shape_string(w.shape()));
  const std::size_t k = w.shape()[2];
  if (k % 2 == 0 || w.shape()[3] != k) throw std::invalid_argument("conv2d kernel must be square and odd-sized");
  if (stride == 0) throw std::invalid_argument("conv2d stride must be positive");
  ConvGeometry g{x.channels(), x.height(), x.width(), w.shape()[0], k, stride, 0, 0, {}, {}};
  g.ho = conv_out_size(g.h, k, stride);
  g.wo = conv_out_size(g.w, k, stride);
  g.rows = axis_map(g.h, g.ho, k, stride, pad);
  g.cols = axis_map(g.w, g.wo, k, stride, pad);
  return g;
}

// Output columns [lo, hi) whose tap kx reads in-bounds source column
// ox * stride + kx - k/2 without padding.
inline std::pair<std::size_t, std::size_t> interior(const ConvGeometry& g, std::size_t kx) {
  const long half = static_cast<long>(g.k / 2);
  const long s = static_cast<long>(g.stride);
  const long off = static_cast<long>(kx) - half;
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const long last = static_cast<long>(g.w) - 1 - off;
  long hi = last < 0 ? 0 : last / s + 1;
  hi = std::clamp(hi, 0L, static_cast<long>(g.wo));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <class T>
void im2col(const Tensor<T>& x, const ConvGeometry& g, std::size_t oy0, std::size_t oy1, RowMat<T>& cols) {
  const std::size_t p = (oy1 - oy0) * g.wo;
  cols.resize(static_cast<Eigen::Index>(g.cin * g.k * g.k), static_cast<Eigen::Index>(p));
  for (std::size_t kx = 0; kx < g.k; ++kx) {
    const auto [lo, hi] = interior(g, kx);
    const long off = static_cast<long>(kx) - static_cast<long>(g.k / 2);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      const T* src = x.plane(ci);
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        T* dst = cols.data() + ((ci * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = oy0; oy < oy1; ++oy, dst += g.wo) {
          const long sy = g.rows[oy * g.k + ky];
          if (sy < 0) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(sy) * g.w;
          for (std::size_t ox = 0; ox < lo; ++ox) {
            const long sx = g.cols[ox * g.k + kx];
            dst[ox] = sx < 0 ? T{0} : srow[sx];
          }
          if (g.stride == 1) {
            std::copy(srow + static_cast<long>(lo) + off, srow + static_cast<long>(hi) + off, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = srow[static_cast<long>(ox * g.stride) + off];
          }
          for (std::size_t ox = hi; ox < g.wo; ++ox) {
            const long sx = g.cols[ox * g.k + kx];
            dst[ox] = sx < 0 ? T{0} : srow[sx];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const RowMat<T>& cols, const ConvGeometry& g, std::size_t oy0, std::size_t oy1, Tensor<T>& gx) {
  const std::size_t p = (oy1 - oy0) * g.wo;
  for (std::size_t kx = 0; kx < g.k; ++kx) {
    const auto [lo, hi] = interior(g, kx);
    const long off = static_cast<long>(kx) - static_cast<long>(g.k / 2);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
      T* dst = gx.plane(ci);
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const T* src = cols.data() + ((ci * g.k + ky) * g.k + kx) * p;
        for (std::size_t oy = oy0; oy < oy1; ++oy, src += g.wo) {
          const long sy = g.rows[oy * g.k + ky];
          if (sy < 0) continue;
          T* drow = dst + static_cast<std::size_t>(sy) * g.w;
          for (std::size_t ox = 0; ox < lo; ++ox) {
            const long sx = g.cols[ox * g.k + kx];
            if (sx >= 0) drow[sx] += src[ox];
          }
          if (g.stride == 1) {
            T* d = drow + static_cast<long>(lo) + off;
            for (std::size_t ox = lo; ox < hi; ++ox) d[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) drow[static_cast<long>(ox * g.stride) + off] += src[ox];
          }
          for (std::size_t ox = hi; ox < g.wo; ++ox) {
            const long sx = g.cols[ox * g.k + kx];
            if (sx >= 0) drow[sx] += src[ox];
          }
        }
      }
    }
  }
}

inline std::size_t chunk_rows(const ConvGeometry& g) {
  const std::size_t per_row = std::max<std::size_t>(1, g.cin * g.k * g.k * g.wo);
  return std::clamp<std::size_t>(kColBudget / per_row, 1, g.ho);
}

}  // namespace detail

// y[Cout,Ho,Wo] = w (*) x + b, padding k/2 on each side.
template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, std::size_t stride, Pad pad) {
  auto g = detail::geometry(x, w, stride, pad);
  Tensor<T> y = Tensor<T>::chw(g.cout, g.ho, g.wo);
  const auto kdim = static_cast<Eigen::Index>(g.cin * g.k * g.k);
  Eigen::Map<const detail::RowMat<T>> wm(w.data(), static_cast<Eigen::Index>(g.cout), kdim);
  detail::RowMat<T> cols;
  const std::size_t step = detail::chunk_rows(g);
  for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += step) {
    const std::size_t oy1 = std::min(g.ho, oy0 + step);
    detail::im2col(x, g, oy0, oy1, cols);
    detail::Strided<T> out(y.data() + oy0 * g.wo, static_cast<Eigen::Index>(g.cout),
                           static_cast<Eigen::Index>((oy1 - oy0) * g.wo),
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(g.ho * g.wo)));
    out.noalias() = wm * cols;
  }
  if (bias) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      T* p = y.plane(o);
      const T b = (*bias)[o];
      for (std::size_t i = 0; i < g.ho * g.wo; ++i) p[i] += b;
    }
  }
  return y;
}

// Accumulates into whichever of gx / gw / gb is non-null.
template <class T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, std::size_t stride, Pad pad,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  auto g = detail::geometry(x, w, stride, pad);
  const auto kdim = static_cast<Eigen::Index>(g.cin * g.k * g.k);
  const auto cout = static_cast<Eigen::Index>(g.cout);
  Eigen::Map<const detail::RowMat<T>> wm(w.data(), cout, kdim);
  if (gb) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      const T* p = gy.plane(o);
      T s{0};
      for (std::size_t i = 0; i < g.ho * g.wo; ++i) s += p[i];
      (*gb)[o] += s;
    }
  }
  if (!gx && !gw) return;
  detail::RowMat<T> cols;
  const std::size_t step = detail::chunk_rows(g);
  for (std::size_t oy0 = 0; oy0 < g.ho; oy0 += step) {
    const std::size_t oy1 = std::min(g.ho, oy0 + step);
    const auto p = static_cast<Eigen::Index>((oy1 - oy0) * g.wo);
    detail::ConstStrided<T> gyc(gy.data() + oy0 * g.wo, cout, p,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(g.ho * g.wo)));
    if (gw) {
      detail::im2col(x, g, oy0, oy1, cols);
      Eigen::Map<detail::RowMat<T>> gwm(gw->data(), cout, kdim);
      gwm.noalias() += gyc * cols.transpose();
    }
    if (gx) {
      cols.noalias() = wm.transpose() * gyc;
      detail::col2im(cols, g, oy0, oy1, *gx);
    }
  }
}

// Per-channel convolution, stride 1: w[C,1,k,k].
template <class T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& w, Pad pad) {
  if (w.rank() != 4 || w.shape()[0] != x.channels() || w.shape()[1] != 1)
    throw std::invalid_argument("depthwise conv expects w[C,1,k,k] matching input channels");
  const std::size_t k = w.shape()[2];
  if (k % 2 == 0 || w.shape()[3] != k) throw std::invalid_argument("depthwise kernel must be square and odd-sized");
  const std::size_t h = x.height(), wd = x.width();
  const auto rows = axis_map(h, h, k, 1, pad);
  const auto cols = axis_map(wd, wd, k, 1, pad);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < x.channels(); ++c) {
    const T* src = x.plane(c);
    const T* kern = w.data() + c * k * k;
    T* dst = y.plane(c);
    for (std::size_t oy = 0; oy < h; ++oy) {
      for (std::size_t ox = 0; ox < wd; ++ox) {
        T acc{0};
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long sy = rows[oy * k + ky];
          if (sy < 0) continue;
          const T* srow = src + static_cast<std::size_t>(sy) * wd;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long sx = cols[ox * k + kx];
            if (sx >= 0) acc += kern[ky * k + kx] * srow[sx];
          }
        }
        dst[oy * wd + ox] = acc;
      }
    }
  }
  return y;
}

template <class T>
void depthwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Pad pad, Tensor<T>* gx,
                        Tensor<T>* gw) {
  const std::size_t k = w.shape()[2];
  const std::size_t h = x.height(), wd = x.width();
  const auto rows = axis_map(h, h, k, 1, pad);
  const auto cols = axis_map(wd, wd, k, 1, pad);
  for (std::size_t c = 0; c < x.channels(); ++c) {
    const T* src = x.plane(c);
    const T* kern = w.data() + c * k * k;
    const T* g = gy.plane(c);
    T* gsrc = gx ? gx->plane(c) : nullptr;
    T* gkern = gw ? gw->data() + c * k * k : nullptr;
    for (std::size_t oy = 0; oy < h; ++oy) {
      for (std::size_t ox = 0; ox < wd; ++ox) {
        const T go = g[oy * wd + ox];
        if (go == T{0}) continue;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long sy = rows[oy * k + ky];
          if (sy < 0) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long sx = cols[ox * k + kx];
            if (sx < 0) continue;
            const std::size_t si = static_cast<std::size_t>(sy) * wd + static_cast<std::size_t>(sx);
            if (gsrc) gsrc[si] += kern[ky * k + kx] * go;
            if (gkern) gkern[ky * k + kx] += src[si] * go;
          }
        }
      }
    }
  }
}

// Linear interpolation taps along one axis. Corner-aligned: output samples
// 0 and out-1 land exactly on input samples 0 and in-1; a single output sample
// reads the input midpoint.
struct LinearTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline LinearTaps linear_taps(std::size_t in, std::size_t out) {
  LinearTaps t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = out == 1 ? 0.5 * static_cast<double>(in - 1)
                          : static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(src);
    t.lo[o] = lo;
    t.hi[o] = std::min(lo + 1, in - 1);
    t.frac[o] = src - static_cast<double>(lo);
  }
  return t;
}

template <class T>
Tensor<T> resize_forward(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0) throw std::invalid_argument("bilinear resize: zero target dimension");
  const auto ty = linear_taps(x.height(), oh);
  const auto tx = linear_taps(x.width(), ow);
  Tensor<T> y = Tensor<T>::chw(x.channels(), oh, ow);
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T top = x(c, ty.lo[oy], tx.lo[ox]) * (T{1} - fx) + x(c, ty.lo[oy], tx.hi[ox]) * fx;
        const T bot = x(c, ty.hi[oy], tx.lo[ox]) * (T{1} - fx) + x(c, ty.hi[oy], tx.hi[ox]) * fx;
        y(c, oy, ox) = top * (T{1} - fy) + bot * fy;
      }
    }
  }
  return y;
}

template <class T>
void resize_backward(const Tensor<T>& gy, Tensor<T>& gx) {
  const auto ty = linear_taps(gx.height(), gy.height());
  const auto tx = linear_taps(gx.width(), gy.width());
  for (std::size_t c = 0; c < gy.channels(); ++c) {
    for (std::size_t oy = 0; oy < gy.height(); ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      for (std::size_t ox = 0; ox < gy.width(); ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T g = gy(c, oy, ox);
        gx(c, ty.lo[oy], tx.lo[ox]) += g * (T{1} - fy) * (T{1} - fx);
        gx(c, ty.lo[oy], tx.hi[ox]) += g * (T{1} - fy) * fx;
        gx(c, ty.hi[oy], tx.lo[ox]) += g * fy * (T{1} - fx);
        gx(c, ty.hi[oy], tx.hi[ox]) += g * fy * fx;
      }
    }
  }
}

}  // namespace kernels
}  // namespace lsirr
