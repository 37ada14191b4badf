// Named gradient-check cases covering every differentiable operator, network
// block and loss term, shared by the unit tests and the acceptance binary.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "lsirr/losses.hpp"
#include "lsirr/model.hpp"

namespace gradcases {

using namespace lsirr;
using gradcheck::V;
using D = double;

struct Case {
  std::string name;
  std::function<gradcheck::Result()> run;
};

inline constexpr std::size_t kSize = 8;
inline constexpr std::size_t kBase = 4;

inline V leaf(Shape s, Rng& rng, double lo = 0.1, double hi = 0.9) {
  return V(gradcheck::random_tensor(std::move(s), rng, lo, hi), true);
}

inline V image(Rng& rng, std::size_t c = 3) { return leaf({c, kSize, kSize}, rng); }

// Re-draws parameters at a scale where activations stay O(1) through the
// network, so gradients are generic rather than vanishing.
inline void randomize(nn::ParamStore<D>& ps, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& [path, p] : ps.entries()) {
    auto& v = p.mutable_value();
    if (model::is_mlsm_path(path)) {
      for (auto& x : v.vec()) x += rng.normal(0.0, 0.05);
    } else if (v.rank() == 4) {
      const double fan_in = static_cast<double>(v.shape()[1] * v.shape()[2] * v.shape()[3]);
      for (auto& x : v.vec()) x = rng.normal(0.0, std::sqrt(2.0 / fan_in));
    } else if (path.ends_with("/slope")) {
      for (auto& x : v.vec()) x = rng.uniform(0.1, 0.4);
    } else {
      // Positive biases keep the narrow excitation MLPs out of dead ReLU regions.
      for (auto& x : v.vec()) x = rng.uniform(0.05, 0.3);
    }
  }
}

inline model::ModelConfig small_model(std::size_t n = 3) {
  model::ModelConfig m;
  m.base_channels = kBase;
  m.n_iterations = n;
  return m;
}

// Leaves for every parameter of a store, with names for diagnostics.
inline void add_params(nn::ParamStore<D>& ps, std::vector<V*>& leaves, std::vector<std::string>& names) {
  for (auto& [path, p] : ps.entries()) {
    leaves.push_back(&p);
    names.push_back(path);
  }
}

inline gradcheck::Result unary_case(std::function<V(const V&)> op, double lo, double hi, std::uint64_t seed) {
  Rng rng(seed);
  auto x = leaf({2, 3, 4}, rng, lo, hi);
  return gradcheck::check([&] { return gradcheck::random_projection(op(x), seed + 1); }, {&x});
}

inline std::vector<Case> operator_cases() {
  std::vector<Case> cases;
  auto binary = [](std::function<V(const V&, const V&)> op, double lo, double hi, std::uint64_t seed) {
    Rng rng(seed);
    auto a = leaf({2, 3, 4}, rng, lo, hi), b = leaf({2, 3, 4}, rng, lo, hi);
    return gradcheck::check([&] { return gradcheck::random_projection(op(a, b), seed + 1); }, {&a, &b});
  };
  cases.push_back({"op/add", [=] { return binary([](auto& a, auto& b) { return ad::add(a, b); }, -1, 1, 1); }});
  cases.push_back({"op/sub", [=] { return binary([](auto& a, auto& b) { return ad::sub(a, b); }, -1, 1, 2); }});
  cases.push_back({"op/mul", [=] { return binary([](auto& a, auto& b) { return ad::mul(a, b); }, -1, 1, 3); }});
  cases.push_back({"op/div", [=] { return binary([](auto& a, auto& b) { return ad::div(a, b); }, 0.5, 2, 4); }});
  cases.push_back({"op/mse", [=] { return binary([](auto& a, auto& b) { return ad::mse(a, b); }, -1, 1, 5); }});
  cases.push_back({"op/l1", [=] { return binary([](auto& a, auto& b) { return ad::l1(a, b); }, -1, 1, 6); }});
  cases.push_back({"op/scale", [] { return unary_case([](auto& x) { return ad::scale(x, 1.7); }, -1, 1, 10); }});
  cases.push_back({"op/add_scalar", [] { return unary_case([](auto& x) { return ad::add_scalar(x, 0.3); }, -1, 1, 11); }});
  cases.push_back({"op/one_minus", [] { return unary_case([](auto& x) { return ad::one_minus(x); }, -1, 1, 12); }});
  cases.push_back({"op/relu", [] { return unary_case([](auto& x) { return ad::relu(x); }, -1, 1, 13); }});
  cases.push_back({"op/leaky_relu", [] { return unary_case([](auto& x) { return ad::leaky_relu(x, 0.2); }, -1, 1, 14); }});
  cases.push_back({"op/sigmoid", [] { return unary_case([](auto& x) { return ad::sigmoid(x); }, -3, 3, 15); }});
  cases.push_back({"op/tanh", [] { return unary_case([](auto& x) { return ad::tanh(x); }, -2, 2, 16); }});
  cases.push_back({"op/clamp", [] { return unary_case([](auto& x) { return ad::clamp(x, 0.0, 1.0); }, -0.5, 1.5, 17); }});
  cases.push_back({"op/pow", [] { return unary_case([](auto& x) { return ad::pow(x, 2.2); }, 0.05, 1, 18); }});
  cases.push_back({"op/log_clamped", [] { return unary_case([](auto& x) { return ad::log_clamped(x, 1e-8); }, 0.01, 1, 19); }});
  cases.push_back({"op/square", [] { return unary_case([](auto& x) { return ad::square(x); }, -1, 1, 20); }});
  cases.push_back({"op/sqrt_eps", [] { return unary_case([](auto& x) { return ad::sqrt_eps(x, 1e-4); }, 0.01, 1, 21); }});
  cases.push_back({"op/global_avg_pool", [] { return unary_case([](auto& x) { return ad::global_avg_pool(x); }, -1, 1, 22); }});
  cases.push_back({"op/global_max_pool", [] { return unary_case([](auto& x) { return ad::global_max_pool(x); }, -1, 1, 23); }});
  cases.push_back({"op/channel_mean", [] { return unary_case([](auto& x) { return ad::channel_mean(x); }, -1, 1, 24); }});
  cases.push_back({"op/channel_max", [] { return unary_case([](auto& x) { return ad::channel_max(x); }, -1, 1, 25); }});
  cases.push_back({"op/max_pool2", [] { return unary_case([](auto& x) { return ad::max_pool2(x); }, -1, 1, 26); }});
  cases.push_back({"op/sum", [] { return unary_case([](auto& x) { return ad::sum(x); }, -1, 1, 27); }});
  cases.push_back({"op/mean", [] { return unary_case([](auto& x) { return ad::mean(x); }, -1, 1, 28); }});
  cases.push_back({"op/slice_channels", [] { return unary_case([](auto& x) { return ad::slice_channels(x, 1, 2); }, -1, 1, 29); }});
  cases.push_back({"op/resize_up", [] { return unary_case([](auto& x) { return ad::resize(x, 7, 9); }, -1, 1, 30); }});
  cases.push_back({"op/resize_down", [] { return unary_case([](auto& x) { return ad::resize(x, 2, 2); }, -1, 1, 31); }});
  cases.push_back({"op/concat", [] {
    Rng rng(32);
    auto a = leaf({2, 3, 4}, rng, -1, 1), b = leaf({1, 3, 4}, rng, -1, 1);
    return gradcheck::check([&] { return gradcheck::random_projection(ad::concat<D>({a, b, a}), 33); }, {&a, &b});
  }});
  cases.push_back({"op/mul_channels", [] {
    Rng rng(34);
    auto x = leaf({3, 4, 4}, rng, -1, 1), s = leaf({3, 1, 1}, rng, -1, 1);
    return gradcheck::check([&] { return gradcheck::random_projection(ad::mul_channels(x, s), 35); }, {&x, &s});
  }});
  cases.push_back({"op/mul_plane", [] {
    Rng rng(36);
    auto x = leaf({3, 4, 4}, rng, -1, 1), m = leaf({1, 4, 4}, rng, -1, 1);
    return gradcheck::check([&] { return gradcheck::random_projection(ad::mul_plane(x, m), 37); }, {&x, &m});
  }});
  cases.push_back({"op/prelu", [] {
    Rng rng(38);
    auto x = leaf({3, 4, 4}, rng, -1, 1), a = leaf({3}, rng, 0.1, 0.4);
    return gradcheck::check([&] { return gradcheck::random_projection(ad::prelu(x, a), 39); }, {&x, &a});
  }});
  for (std::size_t stride : {1u, 2u})
    for (Pad pad : {Pad::reflect, Pad::zero}) {
      const std::string tag = "s" + std::to_string(stride) + (pad == Pad::reflect ? "_reflect" : "_zero");
      cases.push_back({"op/conv2d_" + tag, [stride, pad] {
        Rng rng(40 + stride);
        auto x = leaf({3, kSize, kSize}, rng, -1, 1), w = leaf({4, 3, 3, 3}, rng, -0.5, 0.5), b = leaf({4}, rng, -0.1, 0.1);
        return gradcheck::check(
            [&] { return gradcheck::random_projection(ad::conv2d(x, w, b, stride, pad), 41); }, {&x, &w, &b},
            {}, {"x", "w", "b"});
      }});
      if (stride == 1)
        cases.push_back({"op/depthwise_" + tag, [pad] {
          Rng rng(44);
          auto x = leaf({3, kSize, kSize}, rng, -1, 1), w = leaf({3, 1, 5, 5}, rng, -0.5, 0.5);
          return gradcheck::check([&] { return gradcheck::random_projection(ad::depthwise_conv2d(x, w, pad), 45); },
                                  {&x, &w}, {}, {"x", "w"});
        }});
    }
  cases.push_back({"op/conv2d_1x1", [] {
    Rng rng(46);
    auto x = leaf({4, 1, 1}, rng, -1, 1), w = leaf({2, 4, 1, 1}, rng, -0.5, 0.5), b = leaf({2}, rng, -0.1, 0.1);
    return gradcheck::check([&] { return gradcheck::random_projection(ad::conv2d(x, w, b), 47); }, {&x, &w, &b});
  }});
  return cases;
}

// Runs `body` on a parameter store and input leaves; all parameters are checked.
inline gradcheck::Result block_check(nn::ParamStore<D>& ps, std::vector<V*> inputs,
                                     const std::function<V()>& body, std::size_t coords = 3) {
  std::vector<V*> leaves = inputs;
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) names.push_back("input" + std::to_string(i));
  add_params(ps, leaves, names);
  gradcheck::Options opt;
  opt.coords_per_leaf = coords;
  return gradcheck::check(body, leaves, opt, names);
}

inline std::vector<Case> block_cases() {
  std::vector<Case> cases;
  cases.push_back({"block/se_residual", [] {
    Rng rng(100);
    nn::ParamStore<D> ps;
    nn::declare_se_block(ps, rng, "se", kBase);
    randomize(ps, 101);
    auto x = leaf({kBase, kSize, kSize}, rng, -1, 1);
    return block_check(ps, {&x}, [&] { return gradcheck::random_projection(nn::se_block(ps, "se", x), 102); });
  }});
  cases.push_back({"block/cbam", [] {
    Rng rng(110);
    nn::ParamStore<D> ps;
    nn::declare_cbam(ps, rng, "cbam", kBase);
    randomize(ps, 111);
    auto x = leaf({kBase, kSize, kSize}, rng, -1, 1);
    return block_check(ps, {&x}, [&] { return gradcheck::random_projection(nn::cbam(ps, "cbam", x), 112); });
  }});
  cases.push_back({"block/conv_lstm", [] {
    Rng rng(120);
    nn::ParamStore<D> ps;
    nn::declare_conv_lstm(ps, rng, "lstm", kBase, 2 * kBase);
    randomize(ps, 121);
    auto x1 = leaf({kBase, kSize, kSize}, rng, -1, 1), x2 = leaf({kBase, kSize, kSize}, rng, -1, 1);
    // Two steps so the recurrent path (hidden and cell) is exercised.
    return block_check(ps, {&x1, &x2}, [&] {
      auto s1 = nn::conv_lstm_step<D>(ps, "lstm", x1, {}, 2 * kBase);
      auto s2 = nn::conv_lstm_step<D>(ps, "lstm", x2, s1, 2 * kBase);
      return ad::add(gradcheck::random_projection(s2.hidden, 122), gradcheck::random_projection(s2.cell, 123));
    });
  }});

  auto network_case = [](const std::string& name, std::function<void(model::ModelConfig&)> tweak,
                         std::function<V(const model::Network<D>&, const V&)> body, std::uint64_t seed) {
    return Case{name, [=] {
      auto cfg = small_model();
      tweak(cfg);
      model::Network<D> net(cfg);
      randomize(net.params(), seed);
      Rng rng(seed + 1);
      auto x = image(rng);
      return block_check(net.params(), {&x}, [&] { return body(net, x); }, 2);
    }};
  };
  auto nop = [](model::ModelConfig&) {};
  cases.push_back(network_case(
      "block/mlsm", nop,
      [](const model::Network<D>& net, const V& x) {
        return gradcheck::random_projection(net.mlsm(ad::concat<D>({x, ad::scale(x, 0.5)})), 201);
      },
      200));
  cases.push_back(network_case(
      "block/rdm", nop,
      [](const model::Network<D>& net, const V& x) {
        return gradcheck::random_projection(net.rdm(net.mlsm(ad::concat<D>({x, x}))), 211);
      },
      210));
  cases.push_back(network_case(
      "block/tsm", nop,
      [](const model::Network<D>& net, const V& x) {
        auto lap = net.mlsm(ad::concat<D>({x, x}));
        return gradcheck::random_projection(net.tsm(lap, net.rdm(lap)), 221);
      },
      220));
  cases.push_back(network_case(
      "block/stage1", nop,
      [](const model::Network<D>& net, const V& x) {
        auto s = net.stage1(x, ad::scale(x, 0.9), {});
        return ad::add(gradcheck::random_projection(s.reflection, 231), gradcheck::random_projection(s.confidence, 232));
      },
      230));
  cases.push_back(network_case(
      "block/stage2", nop,
      [](const model::Network<D>& net, const V& x) {
        auto r = ad::scale(x, 0.3);
        auto c = ad::channel_mean(x);
        auto s = net.stage2(x, ad::scale(x, 0.9), r, c);
        return ad::add(ad::add(gradcheck::random_projection(s.transmission, 241),
                               gradcheck::random_projection(s.transmission_half, 242)),
                       gradcheck::random_projection(s.transmission_quarter, 243));
      },
      240));
  auto full = [](const model::Network<D>& net, const V& x) {
    auto trace = net.forward(x);
    V acc;
    std::uint64_t k = 300;
    for (const auto& it : trace)
      for (const auto* v : {&it.transmission, &it.reflection, &it.confidence, &it.transmission_half,
                            &it.transmission_quarter}) {
        if (!v->defined()) continue;
        auto p = gradcheck::random_projection(*v, ++k);
        acc = acc.defined() ? ad::add(acc, p) : p;
      }
    return acc;
  };
  cases.push_back(network_case("block/network", nop, full, 250));
  cases.push_back(network_case("block/network_edge", [](auto& m) { m.feature_mode = model::FeatureMode::edge; }, full, 260));
  cases.push_back(network_case("block/network_no_lstm", [](auto& m) { m.use_lstm = false; }, full, 270));
  cases.push_back(network_case("block/network_c_from_features",
                               [](auto& m) { m.rcmap_source = model::RcmapSource::image_features; }, full, 280));
  return cases;
}

// Network trace plus targets for loss checks.
struct LossFixture {
  model::Network<D> net;
  V input;
  Tensor<D> i, t, r;  // i: fixed copy of the input used as a loss target
  double alpha = 0.8;

  explicit LossFixture(std::uint64_t seed) : net(small_model()) {
    randomize(net.params(), seed);
    Rng rng(seed + 1);
    input = V(gradcheck::random_tensor({3, kSize, kSize}, rng, 0.2, 0.8), true);
    i = input.value();
    t = gradcheck::random_tensor({3, kSize, kSize}, rng, 0.2, 0.8);
    r = gradcheck::random_tensor({3, kSize, kSize}, rng, 0.0, 0.2);
  }

  // Checks d(loss)/d(input) and d(loss)/d(params).
  gradcheck::Result check(const std::function<V(const model::Trace<D>&)>& loss) {
    return block_check(net.params(), {&input}, [&] { return loss(net.forward(input)); }, 2);
  }
};

// A trace whose every output is a leaf, for checking loss terms against
// their direct inputs.
struct TraceFixture {
  model::Trace<D> trace;
  Tensor<D> i, t, r;
  double alpha = 0.8;
  std::vector<V*> leaves;
  std::vector<std::string> names;

  explicit TraceFixture(std::uint64_t seed, std::size_t n = 3) {
    Rng rng(seed);
    trace.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      auto& it = trace[k];
      it.transmission = leaf({3, kSize, kSize}, rng, 0.1, 0.9);
      it.reflection = leaf({3, kSize, kSize}, rng, 0.05, 0.4);
      it.confidence = leaf({1, kSize, kSize}, rng, 0.05, 0.95);
      it.transmission_half = leaf({3, kSize / 2, kSize / 2}, rng, 0.1, 0.9);
      it.transmission_quarter = leaf({3, kSize / 4, kSize / 4}, rng, 0.1, 0.9);
      const std::string p = "iter" + std::to_string(k + 1) + "/";
      for (auto [v, name] : {std::pair{&it.transmission, "T"}, {&it.reflection, "R"}, {&it.confidence, "C"},
                             {&it.transmission_half, "T_half"}, {&it.transmission_quarter, "T_quarter"}}) {
        leaves.push_back(v);
        names.push_back(p + name);
      }
    }
    i = gradcheck::random_tensor({3, kSize, kSize}, rng, 0.2, 0.8);
    t = gradcheck::random_tensor({3, kSize, kSize}, rng, 0.2, 0.8);
    r = gradcheck::random_tensor({3, kSize, kSize}, rng, 0.0, 0.2);
  }

  gradcheck::Result check(const std::function<V(const model::Trace<D>&)>& loss, std::vector<V*> extra = {},
                          std::vector<std::string> extra_names = {}) {
    auto all = leaves;
    auto all_names = names;
    all.insert(all.end(), extra.begin(), extra.end());
    all_names.insert(all_names.end(), extra_names.begin(), extra_names.end());
    gradcheck::Options opt;
    opt.coords_per_leaf = 4;
    return gradcheck::check([&] { return loss(trace); }, all, opt, all_names);
  }
};

inline std::vector<Case> loss_cases() {
  std::vector<Case> cases;
  const losses::LossWeights w;
  cases.push_back({"loss/confidence", [=] {
    TraceFixture f(400);
    return f.check([&](const auto& tr) { return losses::loss_confidence(tr, f.i, f.t, f.r, w.theta); });
  }});
  cases.push_back({"loss/residual_gt_transmission", [=] {
    TraceFixture f(410);
    return f.check([&](const auto& tr) {
      return losses::loss_residual_form(tr, f.i, f.t, f.alpha, w.theta, w.gamma,
                                        losses::ResidualForm::ground_truth_transmission);
    });
  }});
  cases.push_back({"loss/residual_pred_transmission", [=] {
    TraceFixture f(420);
    return f.check([&](const auto& tr) {
      return losses::loss_residual_form(tr, f.i, f.t, f.alpha, w.theta, w.gamma,
                                        losses::ResidualForm::predicted_transmission);
    });
  }});
  cases.push_back({"loss/pixel", [=] {
    TraceFixture f(430);
    return f.check([&](const auto& tr) { return losses::loss_pixel(tr, f.t, w.theta); });
  }});
  cases.push_back({"loss/ssim", [=] {
    TraceFixture f(440);
    return f.check([&](const auto& tr) { return losses::loss_ssim(tr, f.t, w.theta); });
  }});
  cases.push_back({"loss/mix", [=] {
    TraceFixture f(450);
    return f.check([&](const auto& tr) { return losses::loss_mix(tr, f.t, w); });
  }});
  cases.push_back({"loss/ssim_direct", [] {
    Rng rng(455);
    auto x = leaf({3, kSize, kSize}, rng), y = leaf({3, kSize, kSize}, rng);
    return gradcheck::check([&] { return losses::ssim(x, y); }, {&x, &y});
  }});
  cases.push_back({"loss/perceptual", [=] {
    TraceFixture f(460);
    losses::RandomConvExtractor<D> ex;
    return f.check([&](const auto& tr) { return losses::loss_perceptual<D>(ex, f.t, tr, w.gamma_scales); });
  }});
  cases.push_back({"loss/adversarial_generator", [] {
    TraceFixture f(470);
    losses::DiscriminatorConfig dc;
    dc.base_channels = kBase;
    losses::Discriminator<D> d(dc);
    randomize(d.params(), 471);
    std::vector<V*> extra;
    std::vector<std::string> extra_names;
    add_params(d.params(), extra, extra_names);
    return f.check([&](const auto& tr) { return losses::adversarial_generator(d, f.t, tr.back().transmission); },
                   extra, extra_names);
  }});
  cases.push_back({"loss/adversarial_discriminator", [] {
    losses::DiscriminatorConfig dc;
    dc.base_channels = kBase;
    losses::Discriminator<D> d(dc);
    randomize(d.params(), 481);
    Rng rng(482);
    const auto t = gradcheck::random_tensor({3, kSize, kSize}, rng);
    const auto fake = gradcheck::random_tensor({3, kSize, kSize}, rng);
    return block_check(d.params(), {}, [&] { return losses::adversarial_discriminator(d, t, fake); });
  }});
  cases.push_back({"loss/total_synthetic", [] {
    LossFixture f(490);
    losses::DiscriminatorConfig dc;
    dc.base_channels = kBase;
    losses::Discriminator<D> d(dc);
    randomize(d.params(), 491);
    losses::RandomConvExtractor<D> ex;
    const losses::LossWeights lw;
    return f.check([&](const auto& tr) {
      losses::Targets<D> tg{f.i, f.t, f.r, f.alpha};
      return losses::compute_losses<D>(tr, tg, lw, &ex, &d).total;
    });
  }});
  cases.push_back({"loss/total_real", [] {
    LossFixture f(495);
    losses::DiscriminatorConfig dc;
    dc.base_channels = kBase;
    losses::Discriminator<D> d(dc);
    randomize(d.params(), 496);
    losses::RandomConvExtractor<D> ex;
    const losses::LossWeights lw;
    return f.check([&](const auto& tr) {
      losses::Targets<D> tg{f.i, f.t, std::nullopt, std::nullopt};
      return losses::compute_losses<D>(tr, tg, lw, &ex, &d).total;
    });
  }});
  return cases;
}

inline std::vector<Case> all_cases() {
  auto out = operator_cases();
  for (auto* part : {block_cases, loss_cases})
    for (auto& c : part()) out.push_back(std::move(c));
  return out;
}

}  // namespace gradcases
