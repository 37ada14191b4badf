// Independent reference computations used as expected values in tests.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lsirr/losses.hpp"
#include "lsirr/random.hpp"

namespace oracles {

using lsirr::Tensor;

// Mean SSIM by direct summation: 11x11 Gaussian window (sigma 1.5, weights
// normalised over the full window), pixels outside the image count as zero.
inline double ssim(const Tensor<double>& x, const Tensor<double>& y) {
  constexpr int r = 5;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double wsum = 0;
  double g[2 * r + 1][2 * r + 1];
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) wsum += g[dy + r][dx + r] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  const int h = static_cast<int>(x.height()), w = static_cast<int>(x.width());
  double total = 0;
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx) {
            const int yy = py + dy, xx = px + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            const double k = g[dy + r][dx + r] / wsum;
            const double a = x(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            const double b = y(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            mx += k * a;
            my += k * b;
            sxx += k * a * a;
            syy += k * b * b;
            sxy += k * a * b;
          }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
  return total / static_cast<double>(x.size());
}

enum class Term { pixel, ssim, confidence, residual };

// Weight each iteration carries in a multi-iteration loss term, measured as the
// ratio of the gradient with respect to that iteration's output to the gradient
// of the same term evaluated on a one-iteration trace with identical outputs.
inline std::vector<double> measured_iteration_weights(Term term, std::size_t n, double theta, std::uint64_t seed = 3) {
  using D = double;
  using V = lsirr::ad::Var<D>;
  lsirr::Rng rng(seed);
  auto rnd = [&](lsirr::Shape s, double lo, double hi) {
    Tensor<D> t(std::move(s));
    for (auto& v : t.vec()) v = rng.uniform(lo, hi);
    return t;
  };
  constexpr std::size_t hw = 16;
  const auto tv = rnd({3, hw, hw}, 0.1, 0.9), rv = rnd({3, hw, hw}, 0.05, 0.4), cv = rnd({1, hw, hw}, 0.1, 0.9);
  const auto th = rnd({3, hw / 2, hw / 2}, 0.1, 0.9), tq = rnd({3, hw / 4, hw / 4}, 0.1, 0.9);
  const auto i = rnd({3, hw, hw}, 0.2, 0.8), t = rnd({3, hw, hw}, 0.2, 0.8), r = rnd({3, hw, hw}, 0.0, 0.2);
  auto make = [&](std::size_t count) {
    lsirr::model::Trace<D> trace(count);
    for (auto& it : trace) {
      it.transmission = V(tv, true);
      it.reflection = V(rv, true);
      it.confidence = V(cv, true);
      it.transmission_half = V(th, true);
      it.transmission_quarter = V(tq, true);
    }
    return trace;
  };
  auto loss = [&](const lsirr::model::Trace<D>& trace) {
    switch (term) {
      case Term::pixel: return lsirr::losses::loss_pixel(trace, t, theta);
      case Term::ssim: return lsirr::losses::loss_ssim(trace, t, theta);
      case Term::confidence: return lsirr::losses::loss_confidence(trace, i, t, r, theta);
      case Term::residual: return lsirr::losses::loss_residual(trace, i, t, 0.8, theta, lsirr::imagecore::kDefaultGamma);
    }
    throw std::logic_error("unknown term");
  };
  auto probe = [&](lsirr::model::IterationOutput<D>& it) -> V& {
    switch (term) {
      case Term::confidence: return it.confidence;
      case Term::residual: return it.reflection;
      default: return it.transmission;
    }
  };
  auto single = make(1);
  loss(single).backward();
  const auto g1 = probe(single[0]).grad();
  auto full = make(n);
  loss(full).backward();
  std::vector<double> out;
  for (auto& it : full) {
    const auto gk = probe(it).grad();
    double num = 0, den = 0;
    for (std::size_t k = 0; k < g1.size(); ++k) {
      num += gk[k] * g1[k];
      den += g1[k] * g1[k];
    }
    out.push_back(num / den);
  }
  return out;
}

}  // namespace oracles
