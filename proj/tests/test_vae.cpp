#include <gtest/gtest.h>

#include <filesystem>

#include "flood/vae.hpp"
#include "support/gradcheck.hpp"

using namespace flood;

namespace {

VaeConfig small_cfg(std::size_t D = 6) {
  VaeConfig c;
  c.D_in = D;
  c.hidden = 8;
  return c;
}

MotionSequence random_seq(Rng& rng, std::size_t n, std::size_t D) { return MotionSequence(20, Tensor::randn(rng, {n, D})); }

} // namespace

TEST(VaeShapes, LatentLengthAndRoundTripLength) {
  Rng rng(1);
  CausalVae<float> vae(small_cfg(), rng);
  auto z = vae.encode(random_seq(rng, 16, 6));
  EXPECT_EQ(z.frames.shape(), (Shape{4, 4}));
  EXPECT_DOUBLE_EQ(z.fps, 5.0);
  EXPECT_EQ(vae.decode(z).n_frames(), 16u);
  EXPECT_EQ(vae.encode(random_seq(rng, 17, 6)).length(), 5u);
  EXPECT_THROW(vae.encode(random_seq(rng, 3, 6)), ConfigError);
  EXPECT_THROW(vae.encode(random_seq(rng, 16, 5)), ShapeError);
}

TEST(VaeConfigCheck, FixedFactors) {
  VaeConfig c;
  c.latent_dim = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.downsample = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.hidden = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(VaeCausality, ConstantInputGivesConstantLatents) {
  Rng rng(2);
  CausalVae<float> vae(small_cfg(), rng);
  Tensor f({40, 6});
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t c = 0; c < 6; ++c) f.at(i, c) = 0.1f * static_cast<float>(c);
  auto z = vae.encode(MotionSequence(20, f)).frames;
  for (std::size_t t = 1; t < z.rows(); ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(z.at(t, c), z.at(0, c));
}

TEST(VaeCausality, EncoderPerturbationAtFrame40) {
  Rng rng(3);
  CausalVae<float> vae(small_cfg(), rng);
  auto x = random_seq(rng, 64, 6);
  auto y = x;
  y.frames.at(40, 2) += 1.0f;
  auto a = vae.encode(x).frames, b = vae.encode(y).frames;
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(a.at(t, c), b.at(t, c)) << t;
  bool changed = false;
  for (std::size_t c = 0; c < 4; ++c) changed = changed || a.at(10, c) != b.at(10, c);
  EXPECT_TRUE(changed);
}

TEST(VaeCausality, DecoderPerturbationAtLatent5) {
  Rng rng(4);
  CausalVae<float> vae(small_cfg(), rng);
  LatentSequence z{5.0, Tensor::randn(rng, {10, 4})};
  auto w = z;
  w.frames.at(5, 1) += 0.5f;
  auto a = vae.decode(z).frames, b = vae.decode(w).frames;
  for (std::size_t j = 0; j < 20; ++j)
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(a.at(j, c), b.at(j, c)) << j;
  bool changed = false;
  for (std::size_t c = 0; c < 6; ++c) changed = changed || a.at(20, c) != b.at(20, c);
  EXPECT_TRUE(changed);
}

TEST(VaeCausality, RandomPerturbationProperty) {
  Rng rng(5);
  CausalVae<float> vae(small_cfg(), rng);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 8 + 4 * rng.below(12);
    auto x = random_seq(rng, n, 6);
    const std::size_t p = rng.below(n);
    auto y = x;
    y.frames.at(p, rng.below(6)) += static_cast<float>(rng.uniform(0.1, 2.0));
    auto za = vae.encode(x), zb = vae.encode(y);
    for (std::size_t t = 0; t < p / 4; ++t)
      for (std::size_t c = 0; c < 4; ++c) ASSERT_EQ(za.frames.at(t, c), zb.frames.at(t, c));
    auto ra = vae.decode(za).frames, rb = vae.decode(zb).frames;
    for (std::size_t j = 0; j + kDecoderSlack < p; ++j)
      for (std::size_t c = 0; c < 6; ++c) ASSERT_EQ(ra.at(j, c), rb.at(j, c)) << "p=" << p << " j=" << j;
  }
}

TEST(VaeDecoder, ZeroLatentsDeterministic) {
  Rng rng(6);
  CausalVae<float> vae(small_cfg(), rng);
  LatentSequence z{5.0, Tensor({6, 4}, 0.0f)};
  EXPECT_EQ(vae.decode(z).frames, vae.decode(z).frames);
}

TEST(VaeDecoder, IncrementalMatchesFullDecodeBitwise) {
  Rng rng(7);
  CausalVae<float> vae(small_cfg(), rng);
  Tensor z = Tensor::randn(rng, {12, 4});
  auto full = vae.decode_frames(z);
  auto dec = vae.decoder();
  std::size_t row = 0;
  for (std::size_t t = 0; t < 12; ++t) {
    auto rows = dec.push(std::vector<float>(z.row(t).begin(), z.row(t).end()));
    ASSERT_EQ(rows.size(), 4u);
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < 6; ++c) ASSERT_EQ(r[c], full.at(row, c)) << row;
      ++row;
    }
  }
}

TEST(VaeLossTerms, PerfectCodecIsZero) {
  auto x = ag::constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  auto e = ag::constant(Tensor::from_rows({{0.5f, 0.5f}}));
  auto l = vae_loss(x, e, e, x, 0.25);
  EXPECT_EQ(l.total.item(), 0.0f);
}

TEST(VaeLossTerms, DecompositionAndGammaZero) {
  Rng rng(8);
  auto x = ag::constant(Tensor::randn(rng, {8, 3}));
  auto r = ag::constant(Tensor::randn(rng, {8, 3}));
  auto e = ag::constant(Tensor::randn(rng, {2, 4}));
  auto z = ag::constant(Tensor::randn(rng, {2, 4}));
  for (double gamma : {0.0, 0.25, 1.0}) {
    auto l = vae_loss(x, e, z, r, gamma);
    const float expect = (static_cast<float>(l.recon) + static_cast<float>(l.commit_z)) +
                         static_cast<float>(static_cast<float>(l.commit_e) * gamma);
    EXPECT_EQ(l.total.item(), expect);
    if (gamma == 0.0) EXPECT_EQ(l.total.item(), static_cast<float>(l.recon) + static_cast<float>(l.commit_z));
  }
  EXPECT_THROW(vae_loss(x, e, z, e, 0.25), ShapeError);
}

// Toy codec: E(x) = a x, D(z) = b z, with z an independent latent. The
// encoder gradient must carry only gamma * term 3, the decoder only term 1,
// and z terms 1 and 2.
TEST(VaeLossTerms, StopGradientPlacementByFiniteDifferences) {
  const double gamma = 0.25;
  BasicTensor<double> xs({4, 1}, std::vector<double>{0.3, -1.2, 0.8, 2.0});
  auto x = ag::constant(xs);
  auto a = ag::parameter(BasicTensor<double>::scalar(0.7));
  auto b = ag::parameter(BasicTensor<double>::scalar(-1.3));
  auto z = ag::parameter(BasicTensor<double>({4, 1}, std::vector<double>{0.1, 0.4, -0.5, 0.9}));

  auto build = [&](double g) {
    auto e = ag::mul(x, a);
    auto rec = ag::mul(z, b);
    return vae_loss(x, e, z, rec, g).total;
  };
  auto loss = build(gamma);
  ag::backward(loss);
  const double ga = a.grad()[0], gb = b.grad()[0];
  const auto gz = z.grad();

  // Oracles from the closed-form terms with the stop-gradient operands frozen.
  const double h = 1e-6;
  auto term = [&](double av, double bv, const std::vector<double>& zv, int which, double asg, const std::vector<double>& zsg) {
    double s = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      const double xi = xs[i];
      if (which == 1) s += (xi - bv * zv[i]) * (xi - bv * zv[i]);
      if (which == 2) s += (asg * xi - zv[i]) * (asg * xi - zv[i]);
      if (which == 3) s += (zsg[i] - av * xi) * (zsg[i] - av * xi);
    }
    return s / 4;
  };
  const std::vector<double> z0{0.1, 0.4, -0.5, 0.9};
  const double a0 = 0.7, b0 = -1.3;
  const double d3a = (term(a0 + h, b0, z0, 3, a0, z0) - term(a0 - h, b0, z0, 3, a0, z0)) / (2 * h);
  EXPECT_NEAR(ga, gamma * d3a, 1e-6);
  const double d1b = (term(a0, b0 + h, z0, 1, a0, z0) - term(a0, b0 - h, z0, 1, a0, z0)) / (2 * h);
  EXPECT_NEAR(gb, d1b, 1e-6);
  for (std::size_t i = 0; i < 4; ++i) {
    auto zp = z0, zm = z0;
    zp[i] += h;
    zm[i] -= h;
    const double d = (term(a0, b0, zp, 1, a0, z0) - term(a0, b0, zm, 1, a0, z0)) / (2 * h) +
                     (term(a0, b0, zp, 2, a0, z0) - term(a0, b0, zm, 2, a0, z0)) / (2 * h);
    EXPECT_NEAR(gz[i], d, 1e-6) << i;
  }
  // Term 2 contributes nothing to the encoder: with gamma = 0 its gradient vanishes.
  a.zero_grad();
  ag::backward(build(0.0));
  EXPECT_EQ(a.grad()[0], 0.0);
}

TEST(VaeGradient, FullModelMatchesFiniteDifferences) {
  Rng rng(9);
  VaeConfig cfg = small_cfg(3);
  cfg.hidden = 4;
  cfg.kernel = 2;
  CausalVae<double> vae(cfg, rng);
  auto x = BasicTensor<double>::randn(rng, {16, 3});
  for (const auto& name : {"enc.conv1.w", "head.w", "dec.conv2.w", "dec.out.b"}) {
    auto& leaf = vae.params()[name];
    const double err = flood::testing::max_grad_error(leaf, [&] { return vae.loss(x, {2, 8}).total; });
    EXPECT_LT(err, 1e-4) << name;
  }
}

TEST(VaeCheckpoint, RoundTripAndZeroStepTraining) {
  Rng rng(10);
  CausalVae<float> vae(small_cfg(), rng);
  vae.set_latent_stats({0.1, 0.2, 0.3, 0.4}, {1, 2, 3, 4});
  const auto path = std::filesystem::temp_directory_path() / "flood_vae_rt.ck";
  save_checkpoint(vae.to_checkpoint(), path);
  auto back = CausalVae<float>::from_checkpoint(load_checkpoint(path));
  EXPECT_EQ(back.latent_std(), vae.latent_std());
  for (const auto& n : vae.params().names()) EXPECT_EQ(back.params()[n].value(), vae.params()[n].value());

  std::vector<MotionSequence> data{random_seq(rng, 64, 6)};
  AdamState<float> st;
  VaeTrainOptions opt;
  opt.steps = 0;
  auto before = vae.to_checkpoint();
  train_vae(vae, st, data, opt, rng);
  for (std::size_t i = 0; i < before.tensors.size(); ++i)
    EXPECT_EQ(before.tensors[i].second, vae.to_checkpoint().tensors[i].second);
}

TEST(VaeTraining, DeterministicLossCurves) {
  auto run = [] {
    Rng rng(11);
    std::vector<MotionSequence> data;
    for (auto c : kAllClasses) data.push_back(gen_synthetic(rng, c, 64, 6));
    CausalVae<float> vae(small_cfg(), rng);
    AdamState<float> st;
    VaeTrainOptions opt;
    opt.steps = 15;
    opt.batch = 4;
    opt.clip = 16;
    std::vector<double> losses;
    for (const auto& l : train_vae(vae, st, data, opt, rng)) losses.push_back(l.loss);
    return losses;
  };
  EXPECT_EQ(run(), run());
}

TEST(VaeTraining, DivergenceAborts) {
  Rng rng(12);
  std::vector<MotionSequence> data;
  for (auto c : kAllClasses) data.push_back(gen_synthetic(rng, c, 64, 6));
  CausalVae<float> vae(small_cfg(), rng);
  AdamState<float> st;
  VaeTrainOptions opt;
  opt.steps = 200;
  opt.batch = 2;
  opt.clip = 16;
  opt.adam.lr = 50.0;
  EXPECT_THROW(train_vae(vae, st, data, opt, rng), DivergenceError);
}

TEST(VaeTraining, LearnsToReconstruct) {
  Rng rng(13);
  std::vector<MotionSequence> data, held;
  for (int i = 0; i < 8; ++i)
    for (auto c : {MotionClass::walk, MotionClass::wave}) data.push_back(gen_synthetic(rng, c, 64, 6));
  for (auto c : {MotionClass::walk, MotionClass::wave}) held.push_back(gen_synthetic(rng, c, 64, 6));
  VaeConfig cfg = small_cfg();
  cfg.hidden = 16;
  CausalVae<float> vae(cfg, rng);
  const double before = relative_reconstruction_error(vae, held);
  AdamState<float> st;
  VaeTrainOptions opt;
  opt.steps = 300;
  opt.batch = 8;
  opt.clip = 16;
  opt.adam.lr = 3e-3;
  train_vae(vae, st, data, opt, rng);
  const double after = relative_reconstruction_error(vae, held);
  EXPECT_LT(after, 0.5 * before);
}
