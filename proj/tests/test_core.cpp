#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "lsirr/checkpoint.hpp"
#include "lsirr/config.hpp"
#include "lsirr/image_io.hpp"
#include "lsirr/imagecore.hpp"
#include "lsirr/ops.hpp"
#include "lsirr/optim.hpp"

namespace {

using namespace lsirr;
using D = double;
namespace fs = std::filesystem;

Tensor<D> random_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed, double lo = 0, double hi = 1) {
  Rng rng(seed);
  auto t = Tensor<D>::chw(c, h, w);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Single-bounce mirror padding that does not repeat the edge sample.
long mirror(long i, long n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

// Direct-loop cross-correlation with "same" padding and optional stride.
Tensor<D> naive_conv(const Tensor<D>& x, const Tensor<D>& w, const Tensor<D>& b, std::size_t stride, Pad pad) {
  const long h = static_cast<long>(x.height()), wd = static_cast<long>(x.width());
  const long k = static_cast<long>(w.shape()[2]), half = k / 2;
  const std::size_t cout = w.shape()[0], cin = w.shape()[1];
  const std::size_t ho = (x.height() - 1) / stride + 1, wo = (x.width() - 1) / stride + 1;
  auto out = Tensor<D>::chw(cout, ho, wo);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        double acc = b[o];
        for (std::size_t c = 0; c < cin; ++c)
          for (long ty = 0; ty < k; ++ty)
            for (long tx = 0; tx < k; ++tx) {
              long sy = static_cast<long>(y * stride) + ty - half, sx = static_cast<long>(xx * stride) + tx - half;
              if (sy < 0 || sy >= h || sx < 0 || sx >= wd) {
                if (pad == Pad::zero) continue;
                sy = mirror(sy, h);
                sx = mirror(sx, wd);
              }
              acc += w[((o * cin + c) * static_cast<std::size_t>(k) + static_cast<std::size_t>(ty)) * static_cast<std::size_t>(k) +
                       static_cast<std::size_t>(tx)] *
                     x(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
        out(o, y, xx) = acc;
      }
  return out;
}

TEST(Tensor, ChwLayoutAndIndexing) {
  auto t = Tensor<float>::chw(2, 3, 4);
  EXPECT_EQ(t.size(), 24u);
  t(1, 2, 3) = 5.0f;
  EXPECT_EQ(t[1 * 12 + 2 * 4 + 3], 5.0f);
  EXPECT_EQ(max_abs_diff(t, Tensor<float>::chw(2, 3, 4)), 5.0f);
  EXPECT_TRUE(all_finite(t));
  t[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(all_finite(t));
}

TEST(Rng, SeededStreamsRepeatAndDeriveDistinctSeeds) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  Rng c(7);
  c.uniform();
  const auto state = c.state();
  const double next = c.uniform();
  Rng d;
  d.set_state(state);
  EXPECT_EQ(d.uniform(), next);
}

TEST(Imagecore, ReflectIndexMirrorsWithoutRepeatingEdge) {
  EXPECT_EQ(kernels::reflect_index(-1, 5), 1);
  EXPECT_EQ(kernels::reflect_index(-2, 5), 2);
  EXPECT_EQ(kernels::reflect_index(5, 5), 3);
  EXPECT_EQ(kernels::reflect_index(6, 5), 2);
  EXPECT_EQ(kernels::reflect_index(0, 1), 0);
}

TEST(Imagecore, GaussianKernelMatchesClosedForm) {
  const auto k = imagecore::gaussian_kernel<double>(1.5);
  ASSERT_EQ(k.size(), 11u);
  EXPECT_NEAR(k.sum(), 1.0, 1e-12);
  const double ratio = std::exp(-1.0 / (2 * 1.5 * 1.5));
  EXPECT_NEAR(k.at(5, 6) / k.at(5, 5), ratio, 1e-12);
  EXPECT_NEAR(k.at(4, 6) / k.at(5, 5), ratio * ratio, 1e-12);
  EXPECT_THROW(imagecore::gaussian_kernel<double>(0.0), std::invalid_argument);
}

TEST(Imagecore, SeparableBlurEqualsFullKernel) {
  const auto img = random_image(3, 13, 17, 1);
  for (Pad pad : {Pad::reflect, Pad::zero}) {
    const auto sep = imagecore::gaussian_blur(img, 1.3, pad);
    const auto full = imagecore::conv2d(img, imagecore::gaussian_kernel<double>(1.3), pad);
    EXPECT_LT(max_abs_diff(sep, full), 1e-12);
  }
}

TEST(Imagecore, KernelConvolutionMatchesDirectLoop) {
  const auto img = random_image(3, 9, 11, 2);
  const auto k = imagecore::laplacian_kernel<double>();
  Tensor<D> w({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 9; ++i) w[(c * 3 + c) * 9 + i] = k.taps()[i];
  for (Pad pad : {Pad::reflect, Pad::zero})
    EXPECT_LT(max_abs_diff(imagecore::conv2d(img, k, pad), naive_conv(img, w, Tensor<D>({3}), 1, pad)), 1e-12);
}

TEST(Ops, Conv2dMatchesDirectLoop) {
  Rng rng(3);
  const auto x = random_image(5, 10, 7, 4);
  for (std::size_t k : {1u, 3u, 5u})
    for (std::size_t stride : {1u, 2u})
      for (Pad pad : {Pad::reflect, Pad::zero}) {
        Tensor<D> w({4, 5, k, k}), b({4});
        for (auto& v : w.vec()) v = rng.uniform(-1, 1);
        for (auto& v : b.vec()) v = rng.uniform(-1, 1);
        const auto y = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), stride, pad).value();
        const auto ref = naive_conv(x, w, b, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape());
        EXPECT_LT(max_abs_diff(y, ref), 1e-12) << "k=" << k << " stride=" << stride;
      }
}

TEST(Imagecore, BilinearResizeAlignsCorners) {
  const auto img = random_image(2, 5, 7, 5);
  const auto up = imagecore::bilinear_resize(img, 9, 13);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_DOUBLE_EQ(up(c, 0, 0), img(c, 0, 0));
    EXPECT_DOUBLE_EQ(up(c, 8, 12), img(c, 4, 6));
    // Output (y, x) samples source (y * 4/8, x * 6/12).
    EXPECT_NEAR(up(c, 1, 1), 0.25 * (img(c, 0, 0) + img(c, 0, 1) + img(c, 1, 0) + img(c, 1, 1)), 1e-12);
    EXPECT_NEAR(up(c, 2, 4), img(c, 1, 2), 1e-12);
  }
  EXPECT_EQ(imagecore::downscale(Tensor<D>::chw(3, 16, 8), 4).shape(), (Shape{3, 4, 2}));
  EXPECT_THROW(imagecore::downscale(Tensor<D>::chw(3, 10, 8), 4), std::invalid_argument);
}

TEST(Imagecore, GammaRoundTrip) {
  const auto img = random_image(3, 4, 4, 6);
  EXPECT_LT(max_abs_diff(imagecore::inverse_gamma(imagecore::gamma_correct(img)), img), 1e-12);
  EXPECT_NEAR(imagecore::inverse_gamma(Tensor<D>::chw(1, 1, 1, 0.5))[0], std::pow(0.5, 2.2), 1e-15);
}

TEST(Imagecore, RotationAndFlipGeometry) {
  const auto img = random_image(3, 4, 6, 7);
  const auto r1 = imagecore::rotate90(img, 1);
  ASSERT_EQ(r1.shape(), (Shape{3, 6, 4}));
  // Counter-clockwise: the top-right corner moves to the top-left.
  EXPECT_EQ(r1(0, 0, 0), img(0, 0, 5));
  EXPECT_EQ(r1(2, 5, 3), img(2, 3, 0));
  EXPECT_EQ(imagecore::rotate90(imagecore::rotate90(r1, 2), 1), img);
  EXPECT_EQ(imagecore::rotate90(img, -1), imagecore::rotate90(img, 3));
  const auto f = imagecore::flip_horizontal(img);
  EXPECT_EQ(f(1, 2, 0), img(1, 2, 5));
  EXPECT_EQ(imagecore::flip_horizontal(f), img);
}

TEST(Imagecore, CropAndReflectPadding) {
  const auto img = random_image(1, 5, 6, 8);
  const auto c = imagecore::crop(img, 1, 2, 3, 4);
  EXPECT_EQ(c(0, 0, 0), img(0, 1, 2));
  EXPECT_EQ(c(0, 2, 3), img(0, 3, 5));
  EXPECT_THROW(imagecore::crop(img, 3, 0, 3, 1), std::invalid_argument);
  const auto p = imagecore::pad_to_multiple(img, 8);
  ASSERT_EQ(p.shape(), (Shape{1, 8, 8}));
  EXPECT_EQ(imagecore::crop(p, 0, 0, 5, 6), img);
  EXPECT_EQ(p(0, 5, 0), img(0, 3, 0));
  EXPECT_EQ(p(0, 0, 6), img(0, 0, 4));
  EXPECT_EQ(p(0, 7, 7), img(0, 1, 3));
}

TEST(Imagecore, ResponseMapsAreNormalised) {
  EXPECT_EQ(imagecore::laplacian_map(Tensor<D>::chw(3, 8, 8, 0.4)), Tensor<D>::chw(1, 8, 8));
  const auto img = random_image(3, 12, 12, 9);
  for (const auto& m : {imagecore::laplacian_map(img), imagecore::edge_map(img)}) {
    ASSERT_EQ(m.shape(), (Shape{1, 12, 12}));
    EXPECT_DOUBLE_EQ(max_abs(m), 1.0);
    for (double v : m.vec()) EXPECT_GE(v, 0.0);
    const auto inv = imagecore::inverse_map(m);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_DOUBLE_EQ(inv[i], 1.0 - m[i]);
  }
  // A vertical step edge responds only next to the step.
  auto step = Tensor<D>::chw(1, 6, 6);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 3; x < 6; ++x) step(0, y, x) = 1.0;
  const auto e = imagecore::edge_map(step);
  EXPECT_DOUBLE_EQ(e(0, 2, 2), 1.0);
  EXPECT_DOUBLE_EQ(e(0, 2, 0), 0.0);
  EXPECT_DOUBLE_EQ(e(0, 2, 4), 0.0);
}

TEST(Imagecore, GrayscaleUsesLumaWeights) {
  auto img = Tensor<D>::chw(3, 1, 1);
  img[0] = 1.0;
  img[1] = 0.5;
  img[2] = 0.25;
  const auto g = imagecore::to_grayscale(img);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g[c], 0.299 + 0.587 * 0.5 + 0.114 * 0.25, 1e-15);
}

TEST(ImageIo, PngRoundTripIsQuantisedAndStable) {
  const auto dir = fixtures::scratch_dir("png");
  Rng rng(10);
  auto img = Image::chw(3, 7, 9);
  for (auto& v : img.vec()) v = static_cast<float>(rng.uniform(-0.1, 1.1));
  write_png(dir / "a.png", img);
  const auto back = read_png(dir / "a.png");
  EXPECT_EQ(back, quantize_8bit(img));
  write_png(dir / "b.png", back);
  EXPECT_EQ(fixtures::read_bytes(dir / "a.png"), fixtures::read_bytes(dir / "b.png"));
  fixtures::write_bytes(dir / "bad.png", "not a png");
  EXPECT_THROW(read_png(dir / "bad.png"), ImageIoError);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  checkpoint::Archive a;
  a.header = {{"name", "x"}, {"step", 3}};
  Tensor<float> t({2, 3});
  const float specials[] = {0.0f, -0.0f, 1e-42f, std::numeric_limits<float>::max(), -1.5f,
                            std::bit_cast<float>(0x7fc01234u)};
  for (std::size_t i = 0; i < 6; ++i) t[i] = specials[i];
  a.arrays["b/w"] = t;
  a.arrays["a"] = Tensor<float>::chw(1, 2, 2, 0.25f);
  const auto bytes = checkpoint::serialize(a);
  EXPECT_EQ(bytes.substr(0, 8), "LSIRRCK1");
  const auto back = checkpoint::deserialize(bytes);
  EXPECT_EQ(back.header, a.header);
  ASSERT_EQ(back.arrays.size(), 2u);
  for (std::size_t i = 0; i < 6; ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back.arrays.at("b/w")[i]), std::bit_cast<std::uint32_t>(t[i]));
  EXPECT_EQ(checkpoint::serialize(back), bytes);

  EXPECT_THROW(checkpoint::deserialize("XXXXXXXX" + bytes.substr(8)), DataError);
  EXPECT_THROW(checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), DataError);

  const auto dir = fixtures::scratch_dir("ckpt");
  checkpoint::save(dir / "c.ckpt", a);
  EXPECT_EQ(fixtures::read_bytes(dir / "c.ckpt"), bytes);
  EXPECT_FALSE(fs::exists(dir / "c.ckpt.tmp"));
  EXPECT_EQ(checkpoint::serialize(checkpoint::load(dir / "c.ckpt")), bytes);
  fs::remove_all(dir);
}

TEST(Optim, AdamMatchesHandComputedSteps) {
  nn::ParamStore<D> ps;
  auto& p = ps.create("w", Tensor<D>::chw(1, 1, 2, 1.0));
  ps.create("frozen", Tensor<D>::chw(1, 1, 1, 1.0), false);
  optim::Adam<D> opt({0.1, 0.5, 0.99, 1e-8});
  const double g1[] = {0.2, -3.0}, g2[] = {0.4, 1.0};
  double m[2] = {0, 0}, v[2] = {0, 0}, w[2] = {1, 1};
  for (int step = 1; step <= 2; ++step) {
    const double* g = step == 1 ? g1 : g2;
    ps.zero_grad();
    auto loss = ad::sum(ad::mul(p, ad::constant(Tensor<D>(Shape{1, 1, 2}, std::vector<D>{g[0], g[1]}))));
    loss.backward();
    opt.step(ps);
    for (int i = 0; i < 2; ++i) {
      m[i] = 0.5 * m[i] + 0.5 * g[i];
      v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.5, step)), vh = v[i] / (1 - std::pow(0.99, step));
      w[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(p.value()[static_cast<std::size_t>(i)], w[i], 1e-14);
    }
  }
  EXPECT_EQ(opt.steps(), 2u);
  EXPECT_EQ(ps.at("frozen").value()[0], 1.0);
  EXPECT_EQ(opt.first_moments().count("frozen"), 0u);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  EXPECT_THROW(config::from_json({{"model", {{"base_chanels", 8}}}}), ConfigError);
  EXPECT_THROW(config::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(config::from_json({{"train", {{"lr", -1.0}}}}), ConfigError);
  EXPECT_THROW(config::from_json({{"loss", {{"theta", 1.5}}}}), ConfigError);
  const auto cfg = config::from_json({{"model", {{"base_channels", 8}}}, {"train", {{"seed", 5}}}});
  EXPECT_EQ(cfg.model.base_channels, 8u);
  EXPECT_EQ(cfg.train.seed, 5u);
  EXPECT_EQ(cfg.model.n_iterations, 3u);
  EXPECT_NE(cfg.architecture_hash(), config::RunConfig{}.architecture_hash());
}

TEST(Config, AblationsMapToModelSwitches) {
  EXPECT_EQ(config::ablation_names().size(), 7u);
  for (const auto& name : config::ablation_names()) {
    model::ModelConfig m;
    config::apply_ablation(m, name);
    EXPECT_NE(nlohmann::json(m), nlohmann::json(model::ModelConfig{})) << name;
  }
  model::ModelConfig m;
  EXPECT_THROW(config::apply_ablation(m, "wo_everything"), ConfigError);
}

}  // namespace
