// Deterministic image operators used throughout the pipeline. Images are
// planar float rasters (channels, rows, cols) with values nominally in [0, 1].
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lsirr/kernels.hpp"
#include "lsirr/tensor.hpp"

namespace lsirr {

using Image = Tensor<float>;

namespace imagecore {

inline constexpr double kDefaultGamma = 2.2;

// Square filter with an odd number of taps per side.
template <class T>
class Kernel2D {
 public:
  Kernel2D(std::size_t k, std::vector<T> taps) : k_(k), taps_(std::move(taps)) {
    if (k_ % 2 == 0) throw std::invalid_argument("kernel size must be odd, got " + std::to_string(k_));
    if (taps_.size() != k_ * k_) throw std::invalid_argument("kernel tap count does not match size");
  }
  std::size_t size() const { return k_; }
  std::size_t radius() const { return k_ / 2; }
  T& at(std::size_t y, std::size_t x) { return taps_[y * k_ + x]; }
  const T& at(std::size_t y, std::size_t x) const { return taps_[y * k_ + x]; }
  const std::vector<T>& taps() const { return taps_; }
  T sum() const {
    T s{0};
    for (T v : taps_) s += v;
    return s;
  }

  // Replicated as a depthwise weight w[C,1,k,k].
  Tensor<T> depthwise(std::size_t channels) const {
    Tensor<T> w(Shape{channels, 1, k_, k_});
    for (std::size_t c = 0; c < channels; ++c) std::copy(taps_.begin(), taps_.end(), w.data() + c * k_ * k_);
    return w;
  }

 private:
  std::size_t k_;
  std::vector<T> taps_;
};

template <class T = float>
Kernel2D<T> laplacian_kernel() {
  return Kernel2D<T>(3, {0, -1, 0, -1, 4, -1, 0, -1, 0});
}

template <class T = float>
Kernel2D<T> identity_kernel(std::size_t k = 3) {
  std::vector<T> taps(k * k, T{0});
  taps[(k / 2) * k + k / 2] = T{1};
  return Kernel2D<T>(k, std::move(taps));
}

template <class T = float>
Kernel2D<T> box_kernel(std::size_t k) {
  return Kernel2D<T>(k, std::vector<T>(k * k, T{1} / static_cast<T>(k * k)));
}

// Isotropic Gaussian truncated at radius ceil(3 sigma), taps normalized to sum 1.
template <class T = float>
Kernel2D<T> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive");
  const auto r = static_cast<std::size_t>(std::ceil(3.0 * sigma));
  const std::size_t k = 2 * r + 1;
  std::vector<double> taps(k * k);
  double total = 0.0;
  for (std::size_t y = 0; y < k; ++y) {
    for (std::size_t x = 0; x < k; ++x) {
      const double dy = static_cast<double>(y) - static_cast<double>(r);
      const double dx = static_cast<double>(x) - static_cast<double>(r);
      taps[y * k + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += taps[y * k + x];
    }
  }
  std::vector<T> out(k * k);
  for (std::size_t i = 0; i < k * k; ++i) out[i] = static_cast<T>(taps[i] / total);
  return Kernel2D<T>(k, std::move(out));
}

// v -> v^(1/gamma).
template <class T>
Tensor<T> gamma_correct(const Tensor<T>& img, double gamma = kDefaultGamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<T>(std::pow(std::max(0.0, static_cast<double>(img[i])), 1.0 / gamma));
  return out;
}

// v -> v^gamma.
template <class T>
Tensor<T> inverse_gamma(const Tensor<T>& img, double gamma = kDefaultGamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<T>(std::pow(std::max(0.0, static_cast<double>(img[i])), gamma));
  return out;
}

// Same-size convolution of every channel with one kernel.
template <class T>
Tensor<T> conv2d(const Tensor<T>& img, const Kernel2D<T>& kernel, Pad pad) {
  return kernels::depthwise_forward(img, kernel.depthwise(img.channels()), pad);
}

// Separable form of conv2d(img, gaussian_kernel(sigma), pad): the 2-D kernel is
// the outer product of the normalised 1-D profile.
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma, Pad pad) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian sigma must be positive");
  const auto r = static_cast<long>(std::ceil(3.0 * sigma));
  const std::size_t k = static_cast<std::size_t>(2 * r + 1);
  std::vector<double> prof(k);
  double total = 0.0;
  for (long i = -r; i <= r; ++i) total += prof[static_cast<std::size_t>(i + r)] = std::exp(-double(i * i) / (2.0 * sigma * sigma));
  std::vector<T> taps(k);
  for (std::size_t i = 0; i < k; ++i) taps[i] = static_cast<T>(prof[i] / total);
  const std::size_t h = img.height(), w = img.width();
  const auto rows = kernels::axis_map(h, h, k, 1, pad);
  const auto cols = kernels::axis_map(w, w, k, 1, pad);
  Tensor<T> tmp(img.shape()), out(img.shape());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const T* src = img.plane(c);
    T* mid = tmp.plane(c);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        T acc{0};
        for (std::size_t t = 0; t < k; ++t) {
          const long sx = cols[x * k + t];
          if (sx >= 0) acc += taps[t] * src[y * w + static_cast<std::size_t>(sx)];
        }
        mid[y * w + x] = acc;
      }
    T* dst = out.plane(c);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        T acc{0};
        for (std::size_t t = 0; t < k; ++t) {
          const long sy = rows[y * k + t];
          if (sy >= 0) acc += taps[t] * mid[static_cast<std::size_t>(sy) * w + x];
        }
        dst[y * w + x] = acc;
      }
  }
  return out;
}

template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& img, std::size_t out_h, std::size_t out_w) {
  return kernels::resize_forward(img, out_h, out_w);
}

// Resize by 1/divisor (divisor in {1, 2, 4, 8}); dimensions must divide evenly.
template <class T>
Tensor<T> downscale(const Tensor<T>& img, std::size_t divisor) {
  if (divisor == 0 || img.height() % divisor != 0 || img.width() % divisor != 0)
    throw std::invalid_argument("downscale: dimensions not divisible by " + std::to_string(divisor));
  if (divisor == 1) return img;
  return kernels::resize_forward(img, img.height() / divisor, img.width() / divisor);
}

template <class T>
Tensor<T> clamp01(Tensor<T> img) {
  for (auto& v : img.vec()) v = std::clamp(v, T{0}, T{1});
  return img;
}

// Max over channels, then divide by the global maximum (all zeros if that is 0).
template <class T>
Tensor<T> normalize_response(const Tensor<T>& response) {
  Tensor<T> out = Tensor<T>::chw(1, response.height(), response.width());
  for (std::size_t c = 0; c < response.channels(); ++c) {
    const T* p = response.plane(c);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], std::abs(p[i]));
  }
  const T peak = max_abs(out);
  if (peak > T{0})
    for (auto& v : out.vec()) v /= peak;
  else
    out.fill(T{0});
  return out;
}

template <class T>
Tensor<T> laplacian_map(const Tensor<T>& img) {
  if (img.empty()) throw std::invalid_argument("laplacian_map: empty image");
  return normalize_response(conv2d(img, laplacian_kernel<T>(), Pad::reflect));
}

// Forward-difference gradient magnitude. The difference past the last row or
// column reads the reflected neighbour.
template <class T>
Tensor<T> gradient_magnitude(const Tensor<T>& img) {
  const std::size_t h = img.height(), w = img.width();
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const auto yn = static_cast<std::size_t>(kernels::reflect_index(static_cast<long>(y) + 1, static_cast<long>(h)));
      for (std::size_t x = 0; x < w; ++x) {
        const auto xn =
            static_cast<std::size_t>(kernels::reflect_index(static_cast<long>(x) + 1, static_cast<long>(w)));
        const T dx = img(c, y, xn) - img(c, y, x);
        const T dy = img(c, yn, x) - img(c, y, x);
        out(c, y, x) = std::sqrt(dx * dx + dy * dy);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> edge_map(const Tensor<T>& img) {
  if (img.empty()) throw std::invalid_argument("edge_map: empty image");
  return normalize_response(gradient_magnitude(img));
}

template <class T>
Tensor<T> inverse_map(Tensor<T> map) {
  for (auto& v : map.vec()) v = T{1} - v;
  return map;
}

// Luma (0.299, 0.587, 0.114) replicated to three channels.
template <class T>
Tensor<T> to_grayscale(const Tensor<T>& img) {
  if (img.channels() == 1) {
    Tensor<T> out = Tensor<T>::chw(3, img.height(), img.width());
    for (std::size_t c = 0; c < 3; ++c) std::copy(img.plane(0), img.plane(0) + img.plane_size(), out.plane(c));
    return out;
  }
  if (img.channels() != 3) throw std::invalid_argument("to_grayscale expects 1 or 3 channels");
  Tensor<T> out(img.shape());
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    const T l = static_cast<T>(0.299) * img.plane(0)[i] + static_cast<T>(0.587) * img.plane(1)[i] +
                static_cast<T>(0.114) * img.plane(2)[i];
    out.plane(0)[i] = out.plane(1)[i] = out.plane(2)[i] = l;
  }
  return out;
}

// Counter-clockwise rotation by quarter_turns * 90 degrees.
template <class T>
Tensor<T> rotate90(const Tensor<T>& img, int quarter_turns) {
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  if (quarter_turns == 0) return img;
  const std::size_t h = img.height(), w = img.width();
  const bool swap = quarter_turns % 2 == 1;
  Tensor<T> out = Tensor<T>::chw(img.channels(), swap ? w : h, swap ? h : w);
  for (std::size_t c = 0; c < img.channels(); ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const T v = img(c, y, x);
        switch (quarter_turns) {
          case 1: out(c, w - 1 - x, y) = v; break;
          case 2: out(c, h - 1 - y, w - 1 - x) = v; break;
          default: out(c, x, h - 1 - y) = v; break;
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> flip_horizontal(const Tensor<T>& img) {
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) out(c, y, img.width() - 1 - x) = img(c, y, x);
  return out;
}

template <class T>
Tensor<T> crop(const Tensor<T>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > img.height() || x0 + w > img.width()) throw std::invalid_argument("crop window outside image");
  Tensor<T> out = Tensor<T>::chw(img.channels(), h, w);
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(&img(c, y0 + y, x0), w, &out(c, y, 0));
  return out;
}

// Reflect-pads bottom/right so both dimensions are multiples of `multiple`.
template <class T>
Tensor<T> pad_to_multiple(const Tensor<T>& img, std::size_t multiple) {
  const std::size_t h = img.height(), w = img.width();
  const std::size_t ph = (h + multiple - 1) / multiple * multiple;
  const std::size_t pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return img;
  Tensor<T> out = Tensor<T>::chw(img.channels(), ph, pw);
  for (std::size_t c = 0; c < img.channels(); ++c)
    for (std::size_t y = 0; y < ph; ++y) {
      const auto sy = static_cast<std::size_t>(kernels::reflect_index(static_cast<long>(y), static_cast<long>(h)));
      for (std::size_t x = 0; x < pw; ++x) {
        const auto sx = static_cast<std::size_t>(kernels::reflect_index(static_cast<long>(x), static_cast<long>(w)));
        out(c, y, x) = img(c, sy, sx);
      }
    }
  return out;
}

}  // namespace imagecore
}  // namespace lsirr
