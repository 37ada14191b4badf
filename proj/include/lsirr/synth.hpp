// Synthetic training triples: I = clamp(alpha * T + R) in linear space with the
// reflection blurred (optionally ghosted, optionally grayscale) and attenuated
// by a Gaussian beta map, then gamma-corrected and rotated/flipped jointly.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/imagecore.hpp"
#include "lsirr/random.hpp"

namespace lsirr::synth {

using lsirr::Image;

struct AugmentConfig {
  double p_ghost = 0.2;
  double p_gray = 0.3;  // applied only when ghosting was not drawn
  std::array<double, 2> blur_sigma_range{2.0, 5.0};
  std::array<double, 2> alpha_range{0.7, 1.0};
  std::size_t ghost_kernel_size = 9;
  std::size_t beta_source_size = 560;
  double beta_sigma = 3.0;  // the source map spans +-beta_sigma standard deviations
  std::size_t crop_size = 256;
  double gamma = imagecore::kDefaultGamma;
  bool blur_grayscale = true;
  bool rotate_flip = true;

  // Standard deviation of the beta map in pixels.
  double beta_sigma_px() const { return static_cast<double>(beta_source_size) / (2.0 * beta_sigma); }

  void validate() const {
    if (p_ghost < 0 || p_gray < 0 || p_ghost > 1 || p_gray > 1 || p_ghost + p_gray > 1)
      throw std::invalid_argument("augment probabilities must lie in [0,1] with p_ghost + p_gray <= 1");
    if (!(blur_sigma_range[0] > 0) || blur_sigma_range[0] > blur_sigma_range[1])
      throw std::invalid_argument("blur_sigma_range must satisfy 0 < lo <= hi");
    if (!(alpha_range[0] > 0) || alpha_range[0] > alpha_range[1] || alpha_range[1] > 1)
      throw std::invalid_argument("alpha_range must satisfy 0 < lo <= hi <= 1");
    if (ghost_kernel_size % 2 == 0 || ghost_kernel_size < 5)
      throw std::invalid_argument("ghost_kernel_size must be odd and at least 5");
    if (crop_size == 0 || crop_size > beta_source_size)
      throw std::invalid_argument("crop_size must be positive and no larger than the beta map");
    if (!(beta_sigma > 0) || !(gamma > 0)) throw std::invalid_argument("beta_sigma and gamma must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentConfig, p_ghost, p_gray, blur_sigma_range, alpha_range,
                                                ghost_kernel_size, beta_source_size, beta_sigma, crop_size, gamma,
                                                blur_grayscale, rotate_flip)

enum class Branch { blur, ghost, gray };

NLOHMANN_JSON_SERIALIZE_ENUM(Branch, {{Branch::blur, "blur"}, {Branch::ghost, "ghost"}, {Branch::gray, "gray"}})

struct AugmentRecord {
  std::uint64_t seed = 0;
  double alpha = 1.0;
  Branch branch = Branch::blur;
  double sigma = 0.0;
  std::array<int, 2> ghost_offset{0, 0};  // (dy, dx) of the second pulse
  std::array<std::size_t, 2> beta_origin{0, 0};  // (y, x) of the beta crop
  int rotation = 0;  // quarter turns, counter-clockwise
  bool flip = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentRecord, seed, alpha, branch, sigma, ghost_offset, beta_origin,
                                                rotation, flip)

// I, T, R are gamma-corrected; blend_alpha relates their inverse-gamma forms.
struct TrainingTriple {
  Image input;
  Image transmission;
  Image reflection;
  double blend_alpha = 1.0;
  AugmentRecord record;
};

inline Image linear_synthesize(const Image& t, const Image& r, double alpha) {
  if (!t.same_shape(r)) throw std::invalid_argument("linear_synthesize: T and R dimensions differ");
  Image out(t.shape());
  const auto a = static_cast<float>(alpha);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a * t[i] + r[i], 0.0f, 1.0f);
  return out;
}

// Window of the beta source map with origin (y0, x0); values are
// exp(-d^2 / (2 s^2)) with d the distance to the map centre.
inline Image beta_window(const AugmentConfig& cfg, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > cfg.beta_source_size || x0 + w > cfg.beta_source_size)
    throw std::invalid_argument("beta window outside the source map");
  const double centre = static_cast<double>(cfg.beta_source_size) / 2.0;
  const double s = cfg.beta_sigma_px();
  Image out = Image::chw(3, h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y0 + y) - centre, dx = static_cast<double>(x0 + x) - centre;
      const auto v = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * s * s)));
      for (std::size_t c = 0; c < 3; ++c) out(c, y, x) = v;
    }
  return out;
}

struct BetaMap {
  Image map;
  std::array<std::size_t, 2> origin;
};

// Uniformly placed h x w crop (default crop_size square) of the beta source map.
inline BetaMap make_beta_map(Rng& rng, const AugmentConfig& cfg, std::size_t h = 0, std::size_t w = 0) {
  if (h == 0) h = cfg.crop_size;
  if (w == 0) w = cfg.crop_size;
  if (h > cfg.beta_source_size || w > cfg.beta_source_size)
    throw std::invalid_argument("crop larger than the beta source map");
  const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(cfg.beta_source_size - h)));
  const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(cfg.beta_source_size - w)));
  return {beta_window(cfg, y0, x0, h, w), {y0, x0}};
}

// Offsets at Chebyshev distance 2..(k/2) from the centre of a k x k support.
inline std::vector<std::array<int, 2>> ghost_offsets(std::size_t k) {
  const int r = static_cast<int>(k / 2);
  std::vector<std::array<int, 2>> out;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      if (std::max(std::abs(dx), std::abs(dy)) >= 2) out.push_back({dy, dx});
  return out;
}

// Two-pulse kernel: 1 - sqrt(alpha) at the centre, sqrt(alpha) - alpha at the offset.
inline imagecore::Kernel2D<float> two_pulse_kernel(std::size_t k, double alpha, std::array<int, 2> offset) {
  const int r = static_cast<int>(k / 2);
  if (std::max(std::abs(offset[0]), std::abs(offset[1])) > r) throw std::invalid_argument("pulse offset outside kernel");
  std::vector<float> taps(k * k, 0.0f);
  const double s = std::sqrt(alpha);
  taps[static_cast<std::size_t>(r) * k + static_cast<std::size_t>(r)] += static_cast<float>(1.0 - s);
  taps[static_cast<std::size_t>(r + offset[0]) * k + static_cast<std::size_t>(r + offset[1])] += static_cast<float>(s - alpha);
  return imagecore::Kernel2D<float>(k, std::move(taps));
}

inline Image apply_beta(const Image& r, const Image& beta) {
  if (!r.same_shape(beta)) throw std::invalid_argument("beta map dimensions differ from the reflection");
  Image out(r.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(beta[i] * r[i], 0.0f, 1.0f);
  return out;
}

// beta * (K (x) R), clamped.
inline Image blur_reflection(const Image& r, const Image& beta, double sigma) {
  return apply_beta(imagecore::gaussian_blur(r, sigma, Pad::reflect), beta);
}

inline Image blur_reflection(const Image& r, const Image& beta, Rng& rng, const AugmentConfig& cfg, double* sigma_out = nullptr) {
  const double sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
  if (sigma_out) *sigma_out = sigma;
  return blur_reflection(r, beta, sigma);
}

// beta * (H (x) K (x) R), clamped.
inline Image ghosting_reflection(const Image& r, double alpha, const Image& beta, double sigma,
                                 std::array<int, 2> offset, std::size_t kernel_size = 9) {
  const auto blurred = imagecore::gaussian_blur(r, sigma, Pad::reflect);
  return apply_beta(imagecore::conv2d(blurred, two_pulse_kernel(kernel_size, alpha, offset), Pad::reflect), beta);
}

inline Image ghosting_reflection(const Image& r, double alpha, const Image& beta, Rng& rng, const AugmentConfig& cfg,
                                 AugmentRecord* rec = nullptr) {
  const double sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
  const auto offsets = ghost_offsets(cfg.ghost_kernel_size);
  const auto offset = offsets[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(offsets.size()) - 1))];
  if (rec) {
    rec->sigma = sigma;
    rec->ghost_offset = offset;
  }
  return ghosting_reflection(r, alpha, beta, sigma, offset, cfg.ghost_kernel_size);
}

// Test hooks that pin individual random draws.
struct AugmentOverrides {
  std::optional<Branch> branch;
  std::optional<double> sigma;
  std::optional<double> alpha;
  bool unit_beta = false;
};

// Full augmentation of a linear-space (T, R) source pair of equal size. Draw
// order: alpha, branch, beta origin, sigma (and ghost offset), rotation, flip.
inline TrainingTriple augment(const Image& t, const Image& r, std::uint64_t seed, const AugmentConfig& cfg,
                              const AugmentOverrides& ov = {}) {
  cfg.validate();
  if (!t.same_shape(r) || t.channels() != 3) throw std::invalid_argument("augment expects equal-size RGB T and R");
  Rng rng(seed);
  AugmentRecord rec;
  rec.seed = seed;
  rec.alpha = rng.uniform(cfg.alpha_range[0], cfg.alpha_range[1]);
  if (ov.alpha) rec.alpha = *ov.alpha;
  const bool ghost = rng.bernoulli(cfg.p_ghost);
  const bool gray = !ghost && rng.bernoulli(cfg.p_gray);
  rec.branch = ghost ? Branch::ghost : gray ? Branch::gray : Branch::blur;
  if (ov.branch) rec.branch = *ov.branch;

  auto beta = make_beta_map(rng, cfg, t.height(), t.width());
  rec.beta_origin = beta.origin;
  if (ov.unit_beta) beta.map.fill(1.0f);

  Image refl;
  if (rec.branch == Branch::ghost) {
    refl = ghosting_reflection(r, rec.alpha, beta.map, rng, cfg, &rec);
    if (ov.sigma) {
      rec.sigma = *ov.sigma;
      refl = ghosting_reflection(r, rec.alpha, beta.map, rec.sigma, rec.ghost_offset, cfg.ghost_kernel_size);
    }
  } else {
    const Image src = rec.branch == Branch::gray ? imagecore::to_grayscale(r) : r;
    rec.sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
    if (ov.sigma) rec.sigma = *ov.sigma;
    const bool skip_blur = rec.branch == Branch::gray && !cfg.blur_grayscale;
    refl = skip_blur ? apply_beta(src, beta.map) : blur_reflection(src, beta.map, rec.sigma);
  }

  const Image composite = linear_synthesize(t, refl, rec.alpha);
  TrainingTriple out{imagecore::gamma_correct(composite, cfg.gamma), imagecore::gamma_correct(t, cfg.gamma),
                     imagecore::gamma_correct(refl, cfg.gamma), rec.alpha, rec};
  if (cfg.rotate_flip) {
    out.record.rotation = static_cast<int>(rng.uniform_int(0, 3));
    out.record.flip = rng.bernoulli(0.5);
    for (Image* img : {&out.input, &out.transmission, &out.reflection}) {
      *img = imagecore::rotate90(*img, out.record.rotation);
      if (out.record.flip) *img = imagecore::flip_horizontal(*img);
    }
  }
  return out;
}

// Largest |inverse_gamma(I) - (alpha inverse_gamma(T) + inverse_gamma(R))| over
// pixels whose linear composite is not saturated.
inline double recomposition_error(const TrainingTriple& tr, double gamma = imagecore::kDefaultGamma) {
  const auto i = imagecore::inverse_gamma(tr.input, gamma);
  const auto t = imagecore::inverse_gamma(tr.transmission, gamma);
  const auto r = imagecore::inverse_gamma(tr.reflection, gamma);
  double worst = 0.0;
  for (std::size_t k = 0; k < i.size(); ++k) {
    const double recomposed = tr.blend_alpha * t[k] + r[k];
    if (recomposed >= 1.0 || i[k] >= 1.0f) continue;
    worst = std::max(worst, std::abs(static_cast<double>(i[k]) - recomposed));
  }
  return worst;
}

// Recomposition check for 8-bit stored triples: each stored code q stands for
// the linear interval [((q-0.5)/255)^g, ((q+0.5)/255)^g]. Returns the largest
// gap between the I interval and the recomposed alpha T + R interval over
// non-saturated pixels (0 when they overlap).
inline double quantized_recomposition_gap(const TrainingTriple& tr, double gamma = imagecore::kDefaultGamma) {
  auto bounds = [gamma](float v) {
    const double q = std::round(static_cast<double>(v) * 255.0);
    const double lo = std::max(0.0, (q - 0.5) / 255.0), hi = std::min(1.0, (q + 0.5) / 255.0);
    return std::array<double, 2>{std::pow(lo, gamma), std::pow(hi, gamma)};
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < tr.input.size(); ++k) {
    const auto bi = bounds(tr.input[k]), bt = bounds(tr.transmission[k]), br = bounds(tr.reflection[k]);
    const double lo = tr.blend_alpha * bt[0] + br[0], hi = tr.blend_alpha * bt[1] + br[1];
    if (lo >= 1.0 || bi[1] >= 1.0) continue;
    const double gap = std::max({0.0, bi[0] - hi, lo - bi[1]});
    worst = std::max(worst, gap);
  }
  return worst;
}

// Sigma range for epoch k of `epochs`: endpoints move linearly from `start` to `end`.
inline std::array<double, 2> blur_range_for_epoch(std::size_t k, std::size_t epochs = 60,
                                                  std::array<double, 2> start = {2.0, 5.0},
                                                  std::array<double, 2> end = {0.8, 5.8}) {
  const double f = epochs == 0 ? 1.0 : std::min(1.0, static_cast<double>(k) / static_cast<double>(epochs));
  return {start[0] + (end[0] - start[0]) * f, start[1] + (end[1] - start[1]) * f};
}

// Smooth random RGB scene for hermetic runs: a colour gradient plus a few soft
// blobs and oriented stripes.
inline Image procedural_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  Rng rng(seed);
  Image img = Image::chw(3, h, w);
  std::array<double, 3> base{}, gx{}, gy{};
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.7);
    gx[c] = rng.uniform(-0.3, 0.3);
    gy[c] = rng.uniform(-0.3, 0.3);
  }
  struct Blob { double cy, cx, rad; std::array<double, 3> amp; };
  std::vector<Blob> blobs(4);
  for (auto& b : blobs) {
    b.cy = rng.uniform(0, 1);
    b.cx = rng.uniform(0, 1);
    b.rad = rng.uniform(0.05, 0.25);
    for (auto& a : b.amp) a = rng.uniform(-0.35, 0.35);
  }
  const double freq = rng.uniform(4.0, 14.0), angle = rng.uniform(0, 3.14159265358979), stripe = rng.uniform(0.0, 0.15);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(h), fx = static_cast<double>(x) / static_cast<double>(w);
      const double wave = stripe * std::sin(freq * (fx * std::cos(angle) + fy * std::sin(angle)) * 6.28318530717959);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c] + gx[c] * (fx - 0.5) + gy[c] * (fy - 0.5) + wave;
        for (const auto& b : blobs) {
          const double d2 = (fy - b.cy) * (fy - b.cy) + (fx - b.cx) * (fx - b.cx);
          v += b.amp[c] * std::exp(-d2 / (2 * b.rad * b.rad));
        }
        img(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return img;
}

}  // namespace lsirr::synth
