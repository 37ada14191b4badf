// Run configuration: one JSON document with sections model, train, loss,
// augment, discriminator and perceptual. Unknown keys are rejected.
#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/checkpoint.hpp"
#include "lsirr/errors.hpp"
#include "lsirr/losses.hpp"
#include "lsirr/synth.hpp"

namespace lsirr::config {

struct FinetuneConfig {
  double lr = 3e-5;
  std::array<double, 2> blur_sigma{0.5, 3.5};
  std::size_t epochs = 1;
  std::size_t max_steps = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FinetuneConfig, lr, blur_sigma, epochs, max_steps)

struct TrainConfig {
  double lr = 2e-4;
  std::array<double, 2> betas{0.5, 0.99};
  double eps = 1e-8;
  std::size_t batch_size = 2;
  std::size_t epochs = 60;
  std::size_t samples_per_epoch = 4000;
  double real_fraction = 0.3;  // 1200 of 4000; 0 when no real pairs are supplied
  std::size_t max_steps = 0;   // 0: run all epochs
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  std::size_t crop_size = 256;       // on-the-fly synthesis crop
  std::array<double, 2> blur_start{2.0, 5.0};
  std::array<double, 2> blur_end{0.8, 5.8};
  double clip = 0.25;
  bool global_clip = false;
  bool train_discriminator = true;
  FinetuneConfig finetune;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("train.lr must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
    if (samples_per_epoch == 0) throw ConfigError("train.samples_per_epoch must be positive");
    if (!(real_fraction >= 0 && real_fraction <= 1)) throw ConfigError("train.real_fraction must lie in [0,1]");
    if (!(betas[0] >= 0 && betas[0] < 1 && betas[1] >= 0 && betas[1] < 1)) throw ConfigError("train.betas must lie in [0,1)");
    if (!(clip > 0)) throw ConfigError("train.clip must be positive");
    if (!(finetune.lr >= 0)) throw ConfigError("train.finetune.lr must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lr, betas, eps, batch_size, epochs, samples_per_epoch,
                                                real_fraction, max_steps, seed, checkpoint_every, crop_size, blur_start,
                                                blur_end, clip, global_clip, train_discriminator, finetune)

struct PerceptualConfig {
  std::string extractor = "hermetic";  // hermetic | vgg19
  std::string weights;                 // checkpoint archive with convB_L/{w,b} arrays (vgg19)
  std::uint64_t seed = losses::RandomConvExtractor<float>::kDefaultSeed;
  std::vector<std::string> taps = losses::Vgg19Extractor<float>::default_taps();
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PerceptualConfig, extractor, weights, seed, taps)

struct RunConfig {
  model::ModelConfig model;
  TrainConfig train;
  losses::LossWeights loss;
  synth::AugmentConfig augment;
  losses::DiscriminatorConfig discriminator;
  PerceptualConfig perceptual;

  void validate() const {
    try {
      model.validate();
      loss.validate();
      augment.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    train.validate();
    if (perceptual.extractor != "hermetic" && perceptual.extractor != "vgg19")
      throw ConfigError("perceptual.extractor must be hermetic or vgg19");
  }

  // Identifies the parameter layout a checkpoint was produced with.
  std::string architecture_hash() const {
    nlohmann::json j{{"model", model}, {"discriminator", discriminator}};
    return checkpoint::fnv1a_hex(j.dump());
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, model, train, loss, augment, discriminator, perceptual)

namespace detail {

// Rejects keys of `user` that do not appear in `reference`, recursing into
// nested objects.
inline void check_keys(const nlohmann::json& user, const nlohmann::json& reference, const std::string& where) {
  if (!user.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown configuration key '" + path + "'");
    const auto& ref = reference.at(it.key());
    if (ref.is_object() && it->is_object()) check_keys(*it, ref, path);
  }
}

}  // namespace detail

// Overlays `user` onto `base`.
inline RunConfig from_json(const nlohmann::json& user, const RunConfig& base = {}) {
  const nlohmann::json reference = base;
  detail::check_keys(user, reference, "");
  nlohmann::json merged = reference;
  merged.merge_patch(user);
  RunConfig cfg;
  try {
    cfg = merged.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid configuration: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load(const std::filesystem::path& path, const RunConfig& base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j, base);
}

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"wo_rdm_tsm", "wo_tsm", "wo_lstm", "c_from_ift", "slsm", "fix_mlsm", "edge"};
  return names;
}

inline void apply_ablation(model::ModelConfig& m, const std::string& name) {
  if (name == "wo_rdm_tsm") {
    m.use_rdm = false;
    m.use_tsm = false;
  } else if (name == "wo_tsm") {
    m.use_tsm = false;
  } else if (name == "wo_lstm") {
    m.use_lstm = false;
  } else if (name == "c_from_ift") {
    m.rcmap_source = model::RcmapSource::image_features;
  } else if (name == "slsm") {
    m.mlsm_scales = {1};
  } else if (name == "fix_mlsm") {
    m.mlsm_learnable = false;
  } else if (name == "edge") {
    m.feature_mode = model::FeatureMode::edge;
  } else {
    std::string valid;
    for (const auto& n : ablation_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation '" + name + "'; valid names: " + valid);
  }
}

inline std::unique_ptr<losses::FeatureExtractor<float>> make_extractor(const PerceptualConfig& p) {
  if (p.extractor == "hermetic") return std::make_unique<losses::RandomConvExtractor<float>>(p.seed);
  if (p.extractor != "vgg19") throw ConfigError("unknown perceptual extractor " + p.extractor);
  if (p.weights.empty()) throw ConfigError("perceptual.weights is required for the vgg19 extractor");
  const auto archive = checkpoint::load(p.weights);
  nn::ParamStore<float> store;
  for (const auto& [name, t] : archive.arrays) store.create(name, t, false);
  return std::make_unique<losses::Vgg19Extractor<float>>(std::move(store), p.taps);
}

}  // namespace lsirr::config
