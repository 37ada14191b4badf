// Recurrent two-stage reflection removal network.
//
// Every iteration i takes the input I and the previous transmission estimate
// T_{i-1} (T_0 = I):
//   stage 1: multi-scale Laplacian features -> reflection detection head (RCMap C_i),
//            Laplacian features refined and masked by C_i, concatenated with image
//            features, fed to a ConvLSTM cell and decoded into the reflection R_i.
//   stage 2: an attention autoencoder over [I, T_{i-1}, R_i, 1 - C_i] predicts T_i
//            plus side outputs at 1/2 and 1/4 resolution.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/imagecore.hpp"
#include "lsirr/nn.hpp"

namespace lsirr::model {

enum class FeatureMode { laplacian, edge };
enum class RcmapSource { mlsm, image_features };

NLOHMANN_JSON_SERIALIZE_ENUM(FeatureMode, {{FeatureMode::laplacian, "laplacian"}, {FeatureMode::edge, "edge"}})
NLOHMANN_JSON_SERIALIZE_ENUM(RcmapSource, {{RcmapSource::mlsm, "mlsm"}, {RcmapSource::image_features, "image_features"}})

inline constexpr std::size_t kInputChannels = 6;  // [I, T_{i-1}]
inline constexpr std::size_t kStage2Inputs = 10;  // [I, T_{i-1}, R_i, 1 - C_i]
inline constexpr std::size_t kSpatialMultiple = 8;
inline constexpr double kMlsmClip = 0.25;

struct ModelConfig {
  std::size_t base_channels = 16;
  std::size_t n_iterations = 3;
  bool mlsm_learnable = true;
  std::vector<std::size_t> mlsm_scales{1, 2, 4, 8};  // downsampling divisors
  bool use_rdm = true;
  bool use_tsm = true;
  bool use_lstm = true;
  FeatureMode feature_mode = FeatureMode::laplacian;
  RcmapSource rcmap_source = RcmapSource::mlsm;
  std::size_t rdm_blocks = 3;
  std::size_t tsm_blocks = 3;
  std::size_t reflection_blocks = 4;
  std::size_t encoder_layers = 3;
  std::size_t stage2_levels = 3;
  std::uint64_t init_seed = 0;

  std::size_t hidden_channels() const { return 2 * base_channels; }
  std::size_t mlsm_channels() const { return kInputChannels * mlsm_scales.size(); }

  bool needs_mlsm() const { return (use_rdm && rcmap_source == RcmapSource::mlsm) || use_tsm; }

  void validate() const {
    if (base_channels == 0) throw std::invalid_argument("base_channels must be positive");
    if (n_iterations == 0) throw std::invalid_argument("n_iterations must be at least 1");
    if (std::find(mlsm_scales.begin(), mlsm_scales.end(), 1) == mlsm_scales.end())
      throw std::invalid_argument("mlsm_scales must include 1");
    for (auto s : mlsm_scales)
      if (s != 1 && s != 2 && s != 4 && s != 8) throw std::invalid_argument("mlsm_scales must be drawn from {1,2,4,8}");
    if (encoder_layers == 0) throw std::invalid_argument("encoder_layers must be positive");
    if (stage2_levels < 2 || stage2_levels > 3) throw std::invalid_argument("stage2_levels must be 2 or 3");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, base_channels, n_iterations, mlsm_learnable, mlsm_scales,
                                                use_rdm, use_tsm, use_lstm, feature_mode, rcmap_source, rdm_blocks,
                                                tsm_blocks, reflection_blocks, encoder_layers, stage2_levels, init_seed)

template <class T>
using Var = ad::Var<T>;

template <class T>
struct Stage1Output {
  Var<T> reflection;  // [3,H,W] in [0,1]
  Var<T> confidence;  // [1,H,W] in (0,1)
  nn::RecurrentState<T> state;
};

template <class T>
struct Stage2Output {
  Var<T> transmission;          // full resolution
  Var<T> transmission_half;     // 1/2
  Var<T> transmission_quarter;  // 1/4
};

template <class T>
struct IterationOutput {
  Var<T> transmission;
  Var<T> reflection;
  Var<T> confidence;
  Var<T> transmission_half;
  Var<T> transmission_quarter;
  nn::RecurrentState<T> state;
};

template <class T>
using Trace = std::vector<IterationOutput<T>>;

inline std::string mlsm_path(std::size_t scale) { return "mlsm/s" + std::to_string(scale) + "/w"; }
inline bool is_mlsm_path(const std::string& path) { return path.rfind("mlsm/", 0) == 0; }

template <class T>
Tensor<T> laplacian_depthwise(std::size_t channels) {
  return imagecore::laplacian_kernel<T>().depthwise(channels);
}

template <class T>
class Network {
 public:
  explicit Network(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  static void check_dims(const Tensor<T>& img) {
    if (img.rank() != 3 || img.channels() != 3)
      throw std::invalid_argument("network input must be a 3-channel image");
    if (img.height() % kSpatialMultiple != 0 || img.width() % kSpatialMultiple != 0 || img.height() == 0 ||
        img.width() == 0)
      throw std::invalid_argument("network input dimensions must be positive multiples of 8, got " +
                                  shape_string(img.shape()));
  }

  // Concat(Lap(X), U(Lap(X down j))) over the configured scales.
  Var<T> mlsm(const Var<T>& x_in) const {
    const auto& xv = x_in.value();
    if (xv.height() % kSpatialMultiple != 0 || xv.width() % kSpatialMultiple != 0)
      throw std::invalid_argument("mlsm: spatial dims must be divisible by 8");
    std::vector<Var<T>> parts;
    for (auto s : cfg_.mlsm_scales) {
      auto x = ad::resize(x_in, xv.height() / s, xv.width() / s);
      Var<T> f = cfg_.feature_mode == FeatureMode::laplacian ? ad::depthwise_conv2d(x, params_[mlsm_path(s)])
                                                             : edge_features(x);
      parts.push_back(ad::resize(f, xv.height(), xv.width()));
    }
    return parts.size() == 1 ? parts.front() : ad::concat(parts);
  }

  // C = sigmoid(conv(f_lap(features))).
  Var<T> rdm(const Var<T>& features) const {
    auto x = nn::prelu(params_, "rdm/in_act", nn::conv(params_, "rdm/in", features));
    for (std::size_t b = 0; b < cfg_.rdm_blocks; ++b) x = nn::se_block(params_, block("rdm/se", b), x);
    return ad::sigmoid(nn::conv(params_, "rdm/out", x));
  }

  // Refine the Laplacian features, then mask them by the RCMap.
  Var<T> tsm(const Var<T>& lap_features, const Var<T>& confidence) const {
    return ad::mul_plane(tsm_refine(lap_features), confidence);
  }

  Var<T> tsm_refine(const Var<T>& lap_features) const {
    auto x = nn::prelu(params_, "tsm/in_act", nn::conv(params_, "tsm/in", lap_features));
    for (std::size_t b = 0; b < cfg_.tsm_blocks; ++b) x = nn::se_block(params_, block("tsm/se", b), x);
    return x;
  }

  Var<T> image_encoder(const Var<T>& x_in) const {
    Var<T> x = x_in;
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) x = ad::relu(nn::conv(params_, block("enc", l), x));
    return x;
  }

  Stage1Output<T> stage1(const Var<T>& input, const Var<T>& prev_transmission,
                         const nn::RecurrentState<T>& state) const {
    auto x_in = ad::concat<T>({input, prev_transmission});
    auto features = image_encoder(x_in);
    Var<T> lap;
    if (cfg_.needs_mlsm()) lap = mlsm(x_in);

    Var<T> confidence;
    if (cfg_.use_rdm) {
      confidence = rdm(cfg_.rcmap_source == RcmapSource::mlsm ? lap : features);
    } else {
      const auto& v = input.value();
      confidence = ad::constant(Tensor<T>::chw(1, v.height(), v.width(), T{1}));
    }

    auto rec_in = cfg_.use_tsm ? ad::concat<T>({features, tsm(lap, confidence)}) : features;
    Stage1Output<T> out;
    Var<T> hidden;
    if (cfg_.use_lstm) {
      out.state = nn::conv_lstm_step(params_, "lstm", rec_in, state, cfg_.hidden_channels());
      hidden = out.state.hidden;
    } else {
      hidden = ad::relu(nn::conv(params_, "fuse", rec_in));
    }

    auto r = nn::prelu(params_, "refl/in_act", nn::conv(params_, "refl/in", hidden));
    for (std::size_t b = 0; b < cfg_.reflection_blocks; ++b) r = nn::se_block(params_, block("refl/se", b), r);
    out.reflection = ad::clamp(nn::conv(params_, "refl/out", r), T{0}, T{1});
    out.confidence = confidence;
    return out;
  }

  Stage2Output<T> stage2(const Var<T>& input, const Var<T>& prev_transmission, const Var<T>& reflection,
                         const Var<T>& inv_confidence, std::vector<nn::CbamGates<T>>* gates = nullptr) const {
    const std::size_t levels = cfg_.stage2_levels;
    auto attend = [&](const std::string& name, const Var<T>& x) {
      nn::CbamGates<T> g;
      auto y = nn::cbam(params_, name + "/cbam", x, gates ? &g : nullptr);
      if (gates) gates->push_back(std::move(g));
      return y;
    };

    std::vector<Var<T>> skips;
    auto x = ad::concat<T>({input, prev_transmission, reflection, inv_confidence});
    x = attend("ae/enc0", ad::relu(nn::conv(params_, "ae/enc0", x)));
    skips.push_back(x);
    for (std::size_t l = 1; l <= levels; ++l) {
      x = attend(block("ae/enc", l), ad::relu(nn::conv(params_, block("ae/enc", l), x, 2)));
      skips.push_back(x);
    }

    Stage2Output<T> out;
    for (std::size_t l = levels; l-- > 0;) {
      const auto& skip = skips[l];
      auto up = ad::resize(x, skip.value().height(), skip.value().width());
      const auto name = block("ae/dec", l);
      x = attend(name, ad::relu(nn::conv(params_, name, ad::concat<T>({up, skip}))));
      if (l == 2) out.transmission_quarter = residual_output("ae/side_q", x, prev_transmission, 4);
      if (l == 1) out.transmission_half = residual_output("ae/side_h", x, prev_transmission, 2);
      if (l == 0) out.transmission = residual_output("ae/out", x, prev_transmission, 1);
    }
    if (!out.transmission_quarter.defined()) out.transmission_quarter = residual_output("ae/side_q", skips[2], prev_transmission, 4);
    return out;
  }

  Trace<T> forward(const Var<T>& input) const {
    check_dims(input.value());
    Trace<T> trace;
    Var<T> prev = input;
    nn::RecurrentState<T> state;
    for (std::size_t i = 0; i < cfg_.n_iterations; ++i) {
      auto s1 = stage1(input, prev, state);
      auto s2 = stage2(input, prev, s1.reflection, ad::one_minus(s1.confidence));
      trace.push_back({s2.transmission, s1.reflection, s1.confidence, s2.transmission_half,
                       s2.transmission_quarter, s1.state});
      prev = s2.transmission;
      state = cfg_.use_lstm ? s1.state : nn::RecurrentState<T>{};
    }
    return trace;
  }

  Trace<T> forward(const Tensor<T>& input) const { return forward(ad::constant(input)); }

  // Final transmission estimate without recording a graph.
  Tensor<T> restore(const Tensor<T>& input) const {
    ad::NoGradGuard guard;
    return forward(input).back().transmission.value();
  }

 private:
  static std::string block(const std::string& prefix, std::size_t i) { return prefix + std::to_string(i); }

  Var<T> edge_features(const Var<T>& x) const {
    const std::size_t c = x.value().channels();
    Tensor<T> kx(Shape{c, 1, 3, 3}), ky(Shape{c, 1, 3, 3});
    for (std::size_t i = 0; i < c; ++i) {
      kx[i * 9 + 4] = T{-1};
      kx[i * 9 + 5] = T{1};
      ky[i * 9 + 4] = T{-1};
      ky[i * 9 + 7] = T{1};
    }
    auto dx = ad::depthwise_conv2d(x, ad::constant(kx));
    auto dy = ad::depthwise_conv2d(x, ad::constant(ky));
    return ad::sqrt_eps(ad::add(ad::square(dx), ad::square(dy)), static_cast<T>(1e-4));
  }

  // Each iteration corrects the previous estimate (the input itself on the first pass).
  Var<T> residual_output(const std::string& name, const Var<T>& features, const Var<T>& previous,
                         std::size_t divisor) const {
    const auto& pv = previous.value();
    auto base = divisor == 1 ? previous : ad::resize(previous, pv.height() / divisor, pv.width() / divisor);
    return ad::clamp(ad::add(base, nn::conv(params_, name, features)), T{0}, T{1});
  }

  void build(Rng& rng) {
    const std::size_t c = cfg_.base_channels;
    const std::size_t hidden = cfg_.hidden_channels();
    if (cfg_.needs_mlsm())
      for (auto s : cfg_.mlsm_scales)
        params_.create(mlsm_path(s), laplacian_depthwise<T>(kInputChannels), cfg_.mlsm_learnable);

    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l)
      nn::declare_conv(params_, rng, block("enc", l), l == 0 ? kInputChannels : c, c, 3);

    if (cfg_.use_rdm) {
      const std::size_t rdm_in = cfg_.rcmap_source == RcmapSource::mlsm ? cfg_.mlsm_channels() : c;
      nn::declare_conv(params_, rng, "rdm/in", rdm_in, c, 3);
      nn::declare_prelu(params_, "rdm/in_act", c);
      for (std::size_t b = 0; b < cfg_.rdm_blocks; ++b) nn::declare_se_block(params_, rng, block("rdm/se", b), c);
      nn::declare_conv(params_, rng, "rdm/out", c, 1, 3);
    }
    if (cfg_.use_tsm) {
      nn::declare_conv(params_, rng, "tsm/in", cfg_.mlsm_channels(), c, 3);
      nn::declare_prelu(params_, "tsm/in_act", c);
      for (std::size_t b = 0; b < cfg_.tsm_blocks; ++b) nn::declare_se_block(params_, rng, block("tsm/se", b), c);
    }
    const std::size_t rec_in = cfg_.use_tsm ? 2 * c : c;
    if (cfg_.use_lstm)
      nn::declare_conv_lstm(params_, rng, "lstm", rec_in, hidden);
    else
      nn::declare_conv(params_, rng, "fuse", rec_in, hidden, 3);

    nn::declare_conv(params_, rng, "refl/in", hidden, c, 3);
    nn::declare_prelu(params_, "refl/in_act", c);
    for (std::size_t b = 0; b < cfg_.reflection_blocks; ++b) nn::declare_se_block(params_, rng, block("refl/se", b), c);
    nn::declare_conv(params_, rng, "refl/out", c, 3, 3);

    // Autoencoder: level l has c * 2^l channels at 1/2^l resolution.
    const std::size_t levels = cfg_.stage2_levels;
    auto width = [c](std::size_t l) { return c << l; };
    nn::declare_conv(params_, rng, "ae/enc0", kStage2Inputs, width(0), 3);
    nn::declare_cbam(params_, rng, "ae/enc0/cbam", width(0));
    for (std::size_t l = 1; l <= levels; ++l) {
      nn::declare_conv(params_, rng, block("ae/enc", l), width(l - 1), width(l), 3);
      nn::declare_cbam(params_, rng, block("ae/enc", l) + "/cbam", width(l));
    }
    for (std::size_t l = levels; l-- > 0;) {
      const auto name = block("ae/dec", l);
      nn::declare_conv(params_, rng, name, width(l + 1) + width(l), width(l), 3);
      nn::declare_cbam(params_, rng, name + "/cbam", width(l));
    }
    nn::declare_conv(params_, rng, "ae/side_q", width(2), 3, 3);
    nn::declare_conv(params_, rng, "ae/side_h", width(1), 3, 3);
    nn::declare_conv(params_, rng, "ae/out", width(0), 3, 3);
  }

  ModelConfig cfg_;
  nn::ParamStore<T> params_;
};

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

// Clamp MLSM kernel gradients element-wise to [-threshold, threshold]; with
// `all_params` every gradient is clamped. Returns the largest remaining |g| over
// MLSM kernels.
template <class T>
T clip_mlsm_gradients(GradMap<T>& grads, T threshold = static_cast<T>(kMlsmClip), bool all_params = false) {
  T largest{0};
  for (auto& [path, g] : grads) {
    const bool mlsm = is_mlsm_path(path);
    if (!mlsm && !all_params) continue;
    for (auto& v : g.vec()) v = std::clamp(v, -threshold, threshold);
    if (mlsm) largest = std::max(largest, max_abs(g));
  }
  return largest;
}

template <class T>
T clip_mlsm_gradients(nn::ParamStore<T>& params, T threshold = static_cast<T>(kMlsmClip), bool all_params = false) {
  T largest{0};
  for (auto& [path, p] : params.entries()) {
    const bool mlsm = is_mlsm_path(path);
    if ((!mlsm && !all_params) || !p.has_grad()) continue;
    auto& g = p.grad_buffer();
    for (auto& v : g.vec()) v = std::clamp(v, -threshold, threshold);
    if (mlsm) largest = std::max(largest, max_abs(g));
  }
  return largest;
}

}  // namespace lsirr::model
