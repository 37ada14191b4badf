// Training objectives: composition (confidence + residual), multi-scale
// perceptual, pixel/SSIM mixture and adversarial terms, and the discriminator.
#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsirr/errors.hpp"
#include "lsirr/model.hpp"

namespace lsirr::losses {

template <class T>
using Var = ad::Var<T>;

struct LossWeights {
  double lambda_comp = 0.4;
  double lambda_perceptual = 0.2;
  double lambda_mix = 0.4;
  double lambda_adv = 0.01;
  double theta = 0.85;
  double mix_alpha = 0.84;
  std::vector<double> gamma_scales{1.0, 0.8, 0.6};  // scales 1, 1/2, 1/4
  double gamma = imagecore::kDefaultGamma;
  bool pseudo_reflection = true;  // real pairs: R = clamp(I - T, 0, 1) for the confidence term
  // Loss-drop switches; a dropped term contributes zero and the rest keep their weights.
  bool use_comp = true;
  bool use_perceptual = true;
  bool use_pixel = true;
  bool use_ssim = true;
  bool use_adv = true;

  void validate() const {
    for (double w : {lambda_comp, lambda_perceptual, lambda_mix, lambda_adv})
      if (!(w >= 0)) throw std::invalid_argument("loss weights must be non-negative");
    if (!(theta > 0 && theta <= 1)) throw std::invalid_argument("theta must lie in (0, 1]");
    if (!(mix_alpha >= 0 && mix_alpha <= 1)) throw std::invalid_argument("mix_alpha must lie in [0, 1]");
    if (gamma_scales.size() != 3) throw std::invalid_argument("gamma_scales needs one weight per scale (1, 1/2, 1/4)");
    for (double g : gamma_scales)
      if (!(g >= 0)) throw std::invalid_argument("gamma_scales must be non-negative");
    if (!(gamma > 0)) throw std::invalid_argument("gamma must be positive");
  }

  static const std::vector<std::string>& drop_names() {
    static const std::vector<std::string> names{"pixel", "ssim", "perceptual", "comp", "adv"};
    return names;
  }

  void drop(const std::string& term) {
    if (term == "pixel") use_pixel = false;
    else if (term == "ssim") use_ssim = false;
    else if (term == "perceptual") use_perceptual = false;
    else if (term == "comp") use_comp = false;
    else if (term == "adv") use_adv = false;
    else throw ConfigError("unknown loss term '" + term + "'");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossWeights, lambda_comp, lambda_perceptual, lambda_mix, lambda_adv,
                                                theta, mix_alpha, gamma_scales, gamma, pseudo_reflection, use_comp,
                                                use_perceptual, use_pixel, use_ssim, use_adv)

struct LossReport {
  double comp = 0;
  double c_term = 0;
  double residual = 0;
  double perceptual = 0;
  double pixel = 0;
  double ssim = 0;  // sum_i theta^(N-i) (1 - SSIM(T, T_i))
  double mix = 0;
  double adversarial = 0;
  double total = 0;
  bool residual_skipped = false;
  bool pseudo_reflection = false;

  LossReport& operator+=(const LossReport& o) {
    comp += o.comp;
    c_term += o.c_term;
    residual += o.residual;
    perceptual += o.perceptual;
    pixel += o.pixel;
    ssim += o.ssim;
    mix += o.mix;
    adversarial += o.adversarial;
    total += o.total;
    residual_skipped = residual_skipped || o.residual_skipped;
    pseudo_reflection = pseudo_reflection || o.pseudo_reflection;
    return *this;
  }
  LossReport& operator*=(double s) {
    for (double* v : {&comp, &c_term, &residual, &perceptual, &pixel, &ssim, &mix, &adversarial, &total}) *v *= s;
    return *this;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossReport, comp, c_term, residual, perceptual, pixel, ssim, mix,
                                                adversarial, total, residual_skipped, pseudo_reflection)

inline double loss_total(const LossReport& r, const LossWeights& w) {
  return w.lambda_comp * r.comp + w.lambda_perceptual * r.perceptual + w.lambda_mix * r.mix +
         w.lambda_adv * r.adversarial;
}

// theta^(N-i) for i = 1..N.
inline std::vector<double> theta_weights(std::size_t n, double theta) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::pow(theta, static_cast<double>(n - 1 - i));
  return w;
}

// Ground truth for one sample. Real pairs carry no reflection and no alpha.
template <class T>
struct Targets {
  Tensor<T> input;
  Tensor<T> transmission;
  std::optional<Tensor<T>> reflection;
  std::optional<double> alpha;

  bool synthetic() const { return reflection.has_value() && alpha.has_value(); }
};

namespace detail {

template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<double>& weights) {
  Var<T> acc;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    auto t = ad::scale(terms[i], static_cast<T>(weights[i]));
    acc = acc.defined() ? ad::add(acc, t) : t;
  }
  return acc.defined() ? acc : ad::constant(Tensor<T>::scalar(T{0}));
}

template <class T>
Var<T> zero() {
  return ad::constant(Tensor<T>::scalar(T{0}));
}

template <class T>
Var<T> inverse_gamma(const Var<T>& x, double gamma) {
  return ad::pow(x, static_cast<T>(gamma));
}

}  // namespace detail

// I_hat = (1 - C) * T + R with C broadcast over channels; not clamped.
template <class T>
Var<T> compose_image(const Var<T>& confidence, const Var<T>& t, const Var<T>& r) {
  return ad::add(ad::mul_plane(t, ad::one_minus(confidence)), r);
}

template <class T>
Var<T> loss_confidence(const model::Trace<T>& trace, const Tensor<T>& input, const Tensor<T>& t,
                       const Tensor<T>& r, double theta) {
  const auto w = theta_weights(trace.size(), theta);
  const auto iv = ad::constant(input), tv = ad::constant(t), rv = ad::constant(r);
  std::vector<Var<T>> terms;
  for (const auto& it : trace) terms.push_back(ad::mse(iv, compose_image(it.confidence, tv, rv)));
  return detail::weighted_sum(terms, w);
}

enum class ResidualForm { ground_truth_transmission, predicted_transmission };

// Linear recomposition in inverse-gamma space compared with the inverse-gamma input:
//   ground_truth_transmission: alpha * T~   + R~_i
//   predicted_transmission:    alpha * T~_i + R~_i
template <class T>
Var<T> loss_residual_form(const model::Trace<T>& trace, const Tensor<T>& input, const Tensor<T>& t, double alpha,
                          double theta, double gamma, ResidualForm form) {
  const auto w = theta_weights(trace.size(), theta);
  const auto target = ad::constant(imagecore::inverse_gamma(input, gamma));
  const auto t_lin = ad::constant(imagecore::inverse_gamma(t, gamma) * static_cast<T>(alpha));
  std::vector<Var<T>> terms;
  for (const auto& it : trace) {
    auto r_lin = detail::inverse_gamma(it.reflection, gamma);
    auto trans = form == ResidualForm::ground_truth_transmission
                     ? t_lin
                     : ad::scale(detail::inverse_gamma(it.transmission, gamma), static_cast<T>(alpha));
    terms.push_back(ad::mse(target, ad::add(trans, r_lin)));
  }
  return detail::weighted_sum(terms, w);
}

template <class T>
Var<T> loss_residual(const model::Trace<T>& trace, const Tensor<T>& input, const Tensor<T>& t, double alpha,
                     double theta, double gamma) {
  return ad::add(loss_residual_form(trace, input, t, alpha, theta, gamma, ResidualForm::ground_truth_transmission),
                 loss_residual_form(trace, input, t, alpha, theta, gamma, ResidualForm::predicted_transmission));
}

template <class T>
Var<T> loss_pixel(const model::Trace<T>& trace, const Tensor<T>& t, double theta) {
  const auto w = theta_weights(trace.size(), theta);
  const auto tv = ad::constant(t);
  std::vector<Var<T>> terms;
  for (const auto& it : trace) terms.push_back(ad::l1(tv, it.transmission));
  return detail::weighted_sum(terms, w);
}

// ---- SSIM ----------------------------------------------------------------

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

// Normalised 11x11 Gaussian window.
template <class T>
imagecore::Kernel2D<T> ssim_window() {
  auto k = imagecore::gaussian_kernel<T>(kSsimSigma);
  if (k.size() != kSsimWindow) throw std::logic_error("unexpected SSIM window size");
  return k;
}

// Mean SSIM map over all pixels and channels. Local statistics use the Gaussian
// window with zero padding, so the map has the input's size.
template <class T>
Var<T> ssim(const Var<T>& x, const Var<T>& y) {
  ad::detail::require_same(x, y, "ssim");
  const std::size_t c = x.value().channels();
  const auto win = ad::constant(ssim_window<T>().depthwise(c));
  auto blur = [&](const Var<T>& v) { return ad::depthwise_conv2d(v, win, Pad::zero); };
  const T c1 = static_cast<T>(kSsimK1 * kSsimK1);
  const T c2 = static_cast<T>(kSsimK2 * kSsimK2);
  auto mu_x = blur(x), mu_y = blur(y);
  auto mu_xx = ad::mul(mu_x, mu_x), mu_yy = ad::mul(mu_y, mu_y), mu_xy = ad::mul(mu_x, mu_y);
  auto s_xx = ad::sub(blur(ad::mul(x, x)), mu_xx);
  auto s_yy = ad::sub(blur(ad::mul(y, y)), mu_yy);
  auto s_xy = ad::sub(blur(ad::mul(x, y)), mu_xy);
  auto num = ad::mul(ad::add_scalar(ad::scale(mu_xy, T{2}), c1), ad::add_scalar(ad::scale(s_xy, T{2}), c2));
  auto den = ad::mul(ad::add_scalar(ad::add(mu_xx, mu_yy), c1), ad::add_scalar(ad::add(s_xx, s_yy), c2));
  return ad::mean(ad::div(num, den));
}

template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("ssim: image dimensions differ");
  ad::NoGradGuard guard;
  return static_cast<double>(ssim(ad::constant(x), ad::constant(y)).value().item());
}

// sum_i theta^(N-i) (1 - SSIM(T, T_i))
template <class T>
Var<T> loss_ssim(const model::Trace<T>& trace, const Tensor<T>& t, double theta) {
  const auto w = theta_weights(trace.size(), theta);
  const auto tv = ad::constant(t);
  std::vector<Var<T>> terms;
  for (const auto& it : trace) terms.push_back(ad::one_minus(ssim(tv, it.transmission)));
  return detail::weighted_sum(terms, w);
}

template <class T>
Var<T> loss_mix(const model::Trace<T>& trace, const Tensor<T>& t, const LossWeights& w) {
  const auto a = static_cast<T>(w.mix_alpha);
  auto s = w.use_ssim ? ad::scale(loss_ssim(trace, t, w.theta), a) : detail::zero<T>();
  auto p = w.use_pixel ? ad::scale(loss_pixel(trace, t, w.theta), T{1} - a) : detail::zero<T>();
  return ad::add(s, p);
}

// ---- perceptual features ----------------------------------------------------

template <class T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<std::string> tap_names() const = 0;
  // One activation per tap, in tap_names() order.
  virtual std::vector<Var<T>> features(const Var<T>& image) const = 0;
};

// Fixed, untrained stack of stride-2 3x3 conv + ReLU stages with channel
// doubling; each stage output is a tap. He-normal weights are regenerated from
// the seed, so every instance with the same arguments is identical.
template <class T>
class RandomConvExtractor : public FeatureExtractor<T> {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eed'f00d;

  explicit RandomConvExtractor(std::uint64_t seed = kDefaultSeed, std::size_t stages = 4,
                               std::size_t base_channels = 8) {
    Rng rng(seed);
    std::size_t cin = 3, cout = base_channels;
    for (std::size_t s = 1; s <= stages; ++s, cin = cout, cout *= 2) {
      const std::string name = "stage" + std::to_string(s);
      const double std = std::sqrt(2.0 / static_cast<double>(cin * 9));
      params_.create(name + "/w", nn::normal_tensor<T>({cout, cin, 3, 3}, rng, std), false);
      params_.create(name + "/b", Tensor<T>(Shape{cout}), false);
      names_.push_back(name);
    }
  }

  std::vector<std::string> tap_names() const override { return names_; }

  std::vector<Var<T>> features(const Var<T>& image) const override {
    std::vector<Var<T>> out;
    Var<T> x = image;
    for (const auto& name : names_) {
      x = ad::relu(nn::conv(params_, name, x, 2));
      out.push_back(x);
    }
    return out;
  }

  const nn::ParamStore<T>& params() const { return params_; }

 private:
  nn::ParamStore<T> params_;
  std::vector<std::string> names_;
};

// VGG-19 convolutional trunk with weights supplied by the caller under the
// names "convB_L/w" and "convB_L/b". Inputs are ImageNet-normalised; taps are
// post-ReLU activations of the named layers.
template <class T>
class Vgg19Extractor : public FeatureExtractor<T> {
 public:
  static std::vector<std::string> default_taps() { return {"conv2_2", "conv3_1", "conv4_2", "conv5_2"}; }

  Vgg19Extractor(nn::ParamStore<T> weights, std::vector<std::string> taps = default_taps())
      : params_(std::move(weights)), taps_(std::move(taps)) {
    static const std::size_t per_block[] = {2, 2, 4, 4, 4};
    for (std::size_t b = 0; b < 5; ++b)
      for (std::size_t l = 1; l <= per_block[b]; ++l) layers_.push_back("conv" + std::to_string(b + 1) + "_" + std::to_string(l));
    for (const auto& tap : taps_) {
      if (std::find(layers_.begin(), layers_.end(), tap) == layers_.end())
        throw ConfigError("VGG-19 has no layer named " + tap);
    }
    last_ = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (std::find(taps_.begin(), taps_.end(), layers_[i]) != taps_.end()) last_ = i;
    for (std::size_t i = 0; i <= last_; ++i)
      if (!params_.contains(layers_[i] + "/w") || !params_.contains(layers_[i] + "/b"))
        throw ConfigError("VGG-19 weights are missing layer " + layers_[i] + " needed for the requested taps");
    for (auto& [_, v] : params_.entries()) v.set_requires_grad(false);
  }

  std::vector<std::string> tap_names() const override { return taps_; }

  std::vector<Var<T>> features(const Var<T>& image) const override {
    static const T mean[] = {T(0.485), T(0.456), T(0.406)};
    static const T stdv[] = {T(0.229), T(0.224), T(0.225)};
    Tensor<T> shift = Tensor<T>::chw(3, image.value().height(), image.value().width());
    Tensor<T> gain = shift;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < shift.plane_size(); ++i) {
        shift.plane(c)[i] = -mean[c] / stdv[c];
        gain.plane(c)[i] = T{1} / stdv[c];
      }
    Var<T> x = ad::add(ad::mul(image, ad::constant(gain)), ad::constant(shift));
    std::vector<Var<T>> found(taps_.size());
    for (std::size_t i = 0; i <= last_; ++i) {
      const auto& name = layers_[i];
      if (i > 0 && name.back() == '1') x = ad::max_pool2(x);
      x = ad::relu(ad::conv2d(x, params_[name + "/w"], params_[name + "/b"], 1, Pad::zero));
      for (std::size_t t = 0; t < taps_.size(); ++t)
        if (taps_[t] == name) found[t] = x;
    }
    return found;
  }

 private:
  nn::ParamStore<T> params_;
  std::vector<std::string> taps_;
  std::vector<std::string> layers_;
  std::size_t last_ = 0;
};

// sum_j gamma_j sum_taps MSE(feat(T^j), feat(T_N^j)) over scales 1, 1/2, 1/4.
template <class T>
Var<T> loss_perceptual(const FeatureExtractor<T>& extractor, const Tensor<T>& t, const model::Trace<T>& trace,
                       const std::vector<double>& gamma_scales) {
  if (gamma_scales.size() != 3) throw std::invalid_argument("loss_perceptual needs three scale weights");
  const auto& last = trace.back();
  const Var<T> preds[] = {last.transmission, last.transmission_half, last.transmission_quarter};
  const std::size_t divisors[] = {1, 2, 4};
  const std::size_t expected = extractor.tap_names().size();
  std::vector<Var<T>> terms;
  for (std::size_t j = 0; j < 3; ++j) {
    const auto target = ad::constant(imagecore::downscale(t, divisors[j]));
    std::vector<Var<T>> ft, fp;
    {
      ad::NoGradGuard guard;
      ft = extractor.features(target);
    }
    fp = extractor.features(preds[j]);
    if (ft.size() != expected || fp.size() != expected) throw ConfigError("feature extractor returned missing taps");
    std::vector<Var<T>> per_tap;
    for (std::size_t k = 0; k < expected; ++k) {
      if (!fp[k].defined()) throw ConfigError("feature extractor is missing tap " + extractor.tap_names()[k]);
      per_tap.push_back(ad::mse(ad::constant(ft[k].value()), fp[k]));
    }
    terms.push_back(detail::weighted_sum(per_tap, std::vector<double>(per_tap.size(), 1.0)));
  }
  return detail::weighted_sum(terms, gamma_scales);
}

// ---- adversarial --------------------------------------------------------------

inline constexpr double kLogFloor = 1e-8;

struct DiscriminatorConfig {
  std::size_t base_channels = 16;
  double leak = 0.2;
  std::uint64_t init_seed = 1;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, base_channels, leak, init_seed)

// Conditional patch discriminator over [T, candidate]: four stride-2 3x3 convs
// with leaky ReLU between them; the probability is the mean patch sigmoid.
template <class T>
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.base_channels == 0) throw std::invalid_argument("discriminator base_channels must be positive");
    Rng rng(cfg_.init_seed);
    const std::size_t c = cfg_.base_channels;
    nn::declare_conv(params_, rng, "disc/conv1", 6, c, 3);
    nn::declare_conv(params_, rng, "disc/conv2", c, 2 * c, 3);
    nn::declare_conv(params_, rng, "disc/conv3", 2 * c, 4 * c, 3);
    nn::declare_conv(params_, rng, "disc/conv4", 4 * c, 1, 3);
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  Var<T> logits(const Var<T>& reference, const Var<T>& candidate) const {
    const T leak = static_cast<T>(cfg_.leak);
    auto x = ad::concat<T>({reference, candidate});
    x = ad::leaky_relu(nn::conv(params_, "disc/conv1", x, 2), leak);
    x = ad::leaky_relu(nn::conv(params_, "disc/conv2", x, 2), leak);
    x = ad::leaky_relu(nn::conv(params_, "disc/conv3", x, 2), leak);
    return nn::conv(params_, "disc/conv4", x, 2);
  }

  Var<T> probability(const Var<T>& reference, const Var<T>& candidate) const {
    return probability_from_logits(logits(reference, candidate));
  }

  static Var<T> probability_from_logits(const Var<T>& logits) { return ad::mean(ad::sigmoid(logits)); }

 private:
  DiscriminatorConfig cfg_;
  nn::ParamStore<T> params_;
};

// -log max(p, floor)
template <class T>
Var<T> neg_log(const Var<T>& p) {
  return ad::scale(ad::log_clamped(p, static_cast<T>(kLogFloor)), T{-1});
}

template <class T>
Var<T> generator_term_from_logits(const Var<T>& logits) {
  return neg_log(Discriminator<T>::probability_from_logits(logits));
}

// -log D(T, T_N)
template <class T>
Var<T> adversarial_generator(const Discriminator<T>& d, const Tensor<T>& t, const Var<T>& prediction) {
  return generator_term_from_logits(d.logits(ad::constant(t), prediction));
}

// -log D(T, T) - log(1 - D(T, T_N)); the prediction is treated as a constant.
template <class T>
Var<T> adversarial_discriminator(const Discriminator<T>& d, const Tensor<T>& t, const Tensor<T>& prediction) {
  const auto tv = ad::constant(t);
  auto real = neg_log(d.probability(tv, tv));
  auto fake = neg_log(ad::one_minus(d.probability(tv, ad::constant(prediction))));
  return ad::add(real, fake);
}

// ---- total ---------------------------------------------------------------------

template <class T>
struct LossResult {
  Var<T> total;
  LossReport report;
};

// Weighted objective for one sample. `extractor` / `disc` may be null when the
// corresponding term is dropped.
template <class T>
LossResult<T> compute_losses(const model::Trace<T>& trace, const Targets<T>& tg, const LossWeights& w,
                             const FeatureExtractor<T>* extractor, const Discriminator<T>* disc) {
  LossReport rep;
  auto value = [](const Var<T>& v) { return static_cast<double>(v.value().item()); };
  Var<T> comp = detail::zero<T>();
  if (w.use_comp) {
    std::optional<Tensor<T>> r = tg.reflection;
    if (!r && w.pseudo_reflection) {
      Tensor<T> pseudo = tg.input - tg.transmission;
      r = imagecore::clamp01(std::move(pseudo));
      rep.pseudo_reflection = true;
    }
    Var<T> c_term = r ? loss_confidence(trace, tg.input, tg.transmission, *r, w.theta) : detail::zero<T>();
    Var<T> residual = detail::zero<T>();
    if (tg.synthetic())
      residual = loss_residual(trace, tg.input, tg.transmission, *tg.alpha, w.theta, w.gamma);
    else
      rep.residual_skipped = true;
    rep.c_term = value(c_term);
    rep.residual = value(residual);
    comp = ad::add(c_term, residual);
    rep.comp = value(comp);
  }
  Var<T> perceptual = detail::zero<T>();
  if (w.use_perceptual) {
    if (!extractor) throw ConfigError("perceptual loss enabled without a feature extractor");
    perceptual = loss_perceptual(*extractor, tg.transmission, trace, w.gamma_scales);
    rep.perceptual = value(perceptual);
  }
  Var<T> mix = detail::zero<T>();
  if (w.use_pixel || w.use_ssim) {
    const auto a = static_cast<T>(w.mix_alpha);
    Var<T> s = detail::zero<T>(), p = detail::zero<T>();
    if (w.use_ssim) {
      auto raw = loss_ssim(trace, tg.transmission, w.theta);
      rep.ssim = value(raw);
      s = ad::scale(raw, a);
    }
    if (w.use_pixel) {
      auto raw = loss_pixel(trace, tg.transmission, w.theta);
      rep.pixel = value(raw);
      p = ad::scale(raw, T{1} - a);
    }
    mix = ad::add(s, p);
    rep.mix = value(mix);
  }
  Var<T> adv = detail::zero<T>();
  if (w.use_adv) {
    if (!disc) throw ConfigError("adversarial loss enabled without a discriminator");
    adv = adversarial_generator(*disc, tg.transmission, trace.back().transmission);
    rep.adversarial = value(adv);
  }
  rep.total = loss_total(rep, w);
  auto total = ad::add(ad::add(ad::scale(comp, static_cast<T>(w.lambda_comp)),
                               ad::scale(perceptual, static_cast<T>(w.lambda_perceptual))),
                       ad::add(ad::scale(mix, static_cast<T>(w.lambda_mix)), ad::scale(adv, static_cast<T>(w.lambda_adv))));
  return {total, rep};
}

}  // namespace lsirr::losses
