// PSNR / SSIM scoring and dataset sweeps with plain-text reports.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/dataset.hpp"
#include "lsirr/losses.hpp"

namespace lsirr::metrics {

namespace fs = std::filesystem;
using lsirr::Image;

inline constexpr double kPsnrCap = 99.0;

struct Psnr {
  double db = 0;
  bool capped = false;  // identical images: infinite PSNR reported as kPsnrCap
};

template <class T>
double mse(const Tensor<T>& x, const Tensor<T>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("metrics: image dimensions differ");
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

// 10 log10(1 / MSE), peak 1.
template <class T>
Psnr psnr(const Tensor<T>& x, const Tensor<T>& y) {
  const double m = mse(x, y);
  if (m == 0.0) return {kPsnrCap, true};
  return {std::min(kPsnrCap, 10.0 * std::log10(1.0 / m)), false};
}

// Shared with the training loss.
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y) {
  return losses::ssim(x, y);
}

struct ImageScore {
  std::string id;
  double psnr = 0;
  double ssim = 0;
  bool psnr_capped = false;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ImageScore, id, psnr, ssim, psnr_capped)

struct EvalRecord {
  std::string dataset;
  std::vector<ImageScore> images;  // sorted by id
  double mean_psnr = 0;
  double mean_ssim = 0;
  std::size_t count = 0;
  std::vector<std::string> skipped;

  // Means accumulate in id order, so they do not depend on input ordering.
  void finalize() {
    std::sort(images.begin(), images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    count = images.size();
    double p = 0, s = 0;
    for (const auto& im : images) {
      p += im.psnr;
      s += im.ssim;
    }
    mean_psnr = count ? p / static_cast<double>(count) : 0.0;
    mean_ssim = count ? s / static_cast<double>(count) : 0.0;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalRecord, dataset, images, mean_psnr, mean_ssim, count, skipped)

struct EvalOptions {
  std::size_t crop_border = 0;  // pixels removed from every side before scoring
  fs::path output_dir;          // when set, predictions are written here
};

// Maps one sample to its transmission estimate; optionally also fills a
// confidence map for visualisation.
using Restorer = std::function<Image(const dataset::Sample&, Image* confidence)>;

inline Image crop_border(const Image& img, std::size_t b) {
  if (b == 0) return img;
  if (2 * b >= img.height() || 2 * b >= img.width()) throw std::invalid_argument("crop_border too large for image");
  return imagecore::crop(img, b, b, img.height() - 2 * b, img.width() - 2 * b);
}

inline ImageScore score(const std::string& id, const Image& prediction, const Image& target, std::size_t border = 0) {
  const auto p = crop_border(prediction, border), t = crop_border(target, border);
  const auto ps = psnr(p, t);
  return {id, ps.db, ssim(p, t), ps.capped};
}

inline EvalRecord evaluate_samples(const std::string& name, const std::vector<dataset::Sample>& samples,
                                   const Restorer& restore, const EvalOptions& opt = {}) {
  EvalRecord rec;
  rec.dataset = name;
  for (const auto& s : samples) {
    Image conf;
    const Image pred = restore(s, opt.output_dir.empty() ? nullptr : &conf);
    if (!pred.same_shape(s.transmission)) throw std::logic_error("restorer changed the image size for " + s.id);
    rec.images.push_back(score(s.id, pred, s.transmission, opt.crop_border));
    if (!opt.output_dir.empty()) {
      write_png(opt.output_dir / name / (s.id + "_pred.png"), pred);
      if (!conf.empty()) write_png(opt.output_dir / name / (s.id + "_rcmap.png"), conf);
    }
  }
  rec.finalize();
  return rec;
}

inline EvalRecord evaluate_dataset(const fs::path& dir, const Restorer& restore, const EvalOptions& opt = {},
                                   std::string name = {}) {
  if (name.empty()) name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  auto loaded = dataset::load_dataset(dir);
  auto rec = evaluate_samples(name, loaded.samples, restore, opt);
  rec.skipped = loaded.skipped;
  return rec;
}

inline Restorer identity_restorer() {
  return [](const dataset::Sample& s, Image*) { return s.input; };
}

inline Restorer oracle_restorer() {
  return [](const dataset::Sample& s, Image*) { return s.transmission; };
}

struct Report {
  std::vector<EvalRecord> datasets;
  double average_psnr = 0;  // image-weighted over all datasets
  double average_ssim = 0;
  std::size_t total = 0;

  explicit Report(std::vector<EvalRecord> recs) : datasets(std::move(recs)) {
    double p = 0, s = 0;
    for (const auto& r : datasets) {
      p += r.mean_psnr * static_cast<double>(r.count);
      s += r.mean_ssim * static_cast<double>(r.count);
      total += r.count;
    }
    average_psnr = total ? p / static_cast<double>(total) : 0.0;
    average_ssim = total ? s / static_cast<double>(total) : 0.0;
  }

  nlohmann::json to_json() const {
    return {{"datasets", datasets},
            {"average", {{"psnr", average_psnr}, {"ssim", average_ssim}, {"count", total}}}};
  }

  std::string to_text() const {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %10s %8s %7s\n", "Dataset (size)", "PSNR", "SSIM", "Count");
    out += line;
    auto row = [&](const std::string& label, std::size_t n, double p, double s) {
      const std::string name = label + " (" + std::to_string(n) + ")";
      std::snprintf(line, sizeof line, "%-24s %10.3f %8.3f %7zu\n", name.c_str(), p, s, n);
      out += line;
    };
    for (const auto& r : datasets) row(r.dataset, r.count, r.mean_psnr, r.mean_ssim);
    row("Average", total, average_psnr, average_ssim);
    return out;
  }
};

}  // namespace lsirr::metrics
