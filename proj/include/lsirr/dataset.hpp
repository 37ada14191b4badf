// On-disk datasets. A directory holds synthetic triples
//   {id}_I.png {id}_T.png {id}_R.png {id}.json   (json = augmentation record)
// and/or real pairs {id}_I.png {id}_T.png, plus an optional manifest.json.
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/errors.hpp"
#include "lsirr/image_io.hpp"
#include "lsirr/losses.hpp"
#include "lsirr/synth.hpp"

namespace lsirr::dataset {

namespace fs = std::filesystem;
using lsirr::Image;

struct Sample {
  std::string id;
  Image input;
  Image transmission;
  std::optional<Image> reflection;
  std::optional<double> alpha;

  bool synthetic() const { return reflection.has_value() && alpha.has_value(); }

  losses::Targets<float> targets() const { return {input, transmission, reflection, alpha}; }

  static Sample from_triple(std::string id, const synth::TrainingTriple& t) {
    return {std::move(id), t.input, t.transmission, t.reflection, t.blend_alpha};
  }
};

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << text;
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline std::string sample_id(std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

inline void write_triple(const fs::path& dir, const std::string& id, const synth::TrainingTriple& t) {
  write_png(dir / (id + "_I.png"), t.input);
  write_png(dir / (id + "_T.png"), t.transmission);
  write_png(dir / (id + "_R.png"), t.reflection);
  write_text(dir / (id + ".json"), nlohmann::json(t.record).dump(2) + "\n");
}

struct LoadResult {
  std::vector<Sample> samples;
  std::vector<std::string> skipped;  // ids that could not be read
};

// Ids come from manifest.json when present, otherwise from *_I.png files in
// lexicographic order. Unreadable samples are skipped with a warning.
inline LoadResult load_dataset(const fs::path& dir, std::ostream* warn = &std::cerr) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::vector<std::string> ids;
  const auto manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    const auto m = read_json(manifest);
    if (!m.contains("ids")) throw DataError("manifest.json has no ids list");
    ids = m.at("ids").get<std::vector<std::string>>();
  } else {
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.size() > 6 && name.ends_with("_I.png")) ids.push_back(name.substr(0, name.size() - 6));
    }
    std::sort(ids.begin(), ids.end());
  }
  LoadResult out;
  for (const auto& id : ids) {
    try {
      Sample s;
      s.id = id;
      s.input = read_png(dir / (id + "_I.png"));
      s.transmission = read_png(dir / (id + "_T.png"));
      if (!s.input.same_shape(s.transmission)) throw DataError("I and T sizes differ");
      const auto rpath = dir / (id + "_R.png");
      const auto jpath = dir / (id + ".json");
      if (fs::exists(rpath) && fs::exists(jpath)) {
        s.reflection = read_png(rpath);
        if (!s.reflection->same_shape(s.input)) throw DataError("R size differs");
        s.alpha = read_json(jpath).at("alpha").get<double>();
      }
      out.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      if (warn) *warn << "warning: skipping sample " << id << " in " << dir.string() << ": " << e.what() << "\n";
      out.skipped.push_back(id);
    }
  }
  return out;
}

// Reconstructs the triple (with its record) from stored files.
inline synth::TrainingTriple read_triple(const fs::path& dir, const std::string& id) {
  synth::TrainingTriple t;
  t.input = read_png(dir / (id + "_I.png"));
  t.transmission = read_png(dir / (id + "_T.png"));
  t.reflection = read_png(dir / (id + "_R.png"));
  t.record = read_json(dir / (id + ".json")).get<synth::AugmentRecord>();
  t.blend_alpha = t.record.alpha;
  return t;
}

// Linear-space source images for synthesis. Stored images are display-encoded
// and are linearised with the augmentation gamma on entry.
class SourcePool {
 public:
  static SourcePool from_directory(const fs::path& dir, double gamma, std::ostream* warn = &std::cerr) {
    if (!fs::is_directory(dir)) throw DataError("source directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    SourcePool pool;
    for (const auto& f : files) {
      try {
        pool.images_.push_back(imagecore::inverse_gamma(read_png(f), gamma));
      } catch (const ImageIoError& e) {
        if (warn) *warn << "warning: skipping source " << f.string() << ": " << e.what() << "\n";
      }
    }
    if (pool.images_.size() < 1) throw DataError("source pool is empty: no readable PNG images in " + dir.string());
    return pool;
  }

  static SourcePool procedural(std::size_t count, std::size_t h, std::size_t w, std::uint64_t seed, double gamma) {
    SourcePool pool;
    for (std::size_t i = 0; i < count; ++i)
      pool.images_.push_back(imagecore::inverse_gamma(synth::procedural_image(derive_seed(seed, i), h, w), gamma));
    if (pool.images_.empty()) throw DataError("source pool is empty");
    return pool;
  }

  std::size_t size() const { return images_.size(); }
  const Image& operator[](std::size_t i) const { return images_[i]; }

  // Triple `index` of a run rooted at `root_seed`: picks a T and an R source
  // (distinct when possible), takes random crops of size x size and augments.
  synth::TrainingTriple make_triple(std::uint64_t root_seed, std::uint64_t index, const synth::AugmentConfig& cfg,
                                    std::size_t size) const {
    const std::uint64_t seed = derive_seed(root_seed, index);
    Rng pick(derive_seed(seed, 0x70a1));
    const auto n = static_cast<long>(images_.size());
    const auto ti = static_cast<std::size_t>(pick.uniform_int(0, n - 1));
    auto ri = static_cast<std::size_t>(pick.uniform_int(0, n - 1));
    if (n > 1 && ri == ti) ri = (ri + 1) % images_.size();
    const auto t = random_crop(images_[ti], size, pick);
    const auto r = random_crop(images_[ri], size, pick);
    return synth::augment(t, r, seed, cfg);
  }

 private:
  static Image random_crop(const Image& img, std::size_t size, Rng& rng) {
    Image src = img;
    if (src.height() < size || src.width() < size) {
      const double s = std::max(static_cast<double>(size) / static_cast<double>(src.height()),
                                static_cast<double>(size) / static_cast<double>(src.width()));
      src = imagecore::bilinear_resize(src, std::max(size, static_cast<std::size_t>(std::ceil(src.height() * s))),
                                       std::max(size, static_cast<std::size_t>(std::ceil(src.width() * s))));
    }
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(src.height() - size)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(src.width() - size)));
    return imagecore::crop(src, y0, x0, size, size);
  }

  std::vector<Image> images_;
};

}  // namespace lsirr::dataset
