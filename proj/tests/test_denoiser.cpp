#include <gtest/gtest.h>

#include <filesystem>

#include "flood/training.hpp"
#include "support/gradcheck.hpp"

using namespace flood;

namespace {

DenoiserConfig tiny_cfg(AttnMode mode = AttnMode::bidirectional_window) {
  DenoiserConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.mlp_dim = 12;
  c.context_horizon = 4;
  c.attn_mode = mode;
  return c;
}

// The output layer starts at zero; give it weights so outputs depend on inputs.
template <typename T>
Denoiser<T> live_model(const DenoiserConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  Denoiser<T> dn(cfg, rng);
  dn.params()["out.w"].mutable_value() = BasicTensor<T>::randn(rng, {cfg.model_dim, kLatentDim}, 0.5);
  dn.params()["out.b"].mutable_value() = BasicTensor<T>::randn(rng, {kLatentDim}, 0.1);
  return dn;
}

std::vector<std::size_t> constant_ids(std::size_t n, std::size_t id) { return std::vector<std::size_t>(n, id); }

// A clean clip, its noise and a triangular-schedule window at time t.
TrainSample sample_at(Rng& rng, const DenoiserConfig& cfg, double t, std::size_t K, std::vector<std::size_t> ids) {
  ScheduleParams sp;
  sp.K = K;
  TrainSample s;
  s.z = Tensor::randn(rng, {K, kLatentDim});
  s.eps = Tensor::randn(rng, {K, kLatentDim});
  s.ab = alpha_beta(sp, t);
  const auto part = partition(sp, t);
  const std::size_t begin = part.m - std::min(part.m, cfg.context_horizon);
  ids = std::vector<std::size_t>(ids.begin() + static_cast<long>(begin), ids.begin() + static_cast<long>(part.n));
  s.mask = build_attention_mask(part, begin, std::move(ids), cfg.vocabulary.size(), cfg.attn_mode);
  return s;
}

template <typename T>
Tensor predict(const Denoiser<T>& dn, const TrainSample& s) {
  ag::NoGradGuard ng;
  return dn.forward({window_input<T>(s)}).value().template cast<float>();
}

} // namespace

TEST(AttentionMaskShape, SinglePromptActiveBlockFullyEnabled) {
  ScheduleParams sp;
  sp.K = 8;
  const auto part = partition(sp, 1.25);
  ASSERT_EQ(part.m, 2u);
  ASSERT_EQ(part.n, 5u);
  auto mask = build_attention_mask(part, 0, constant_ids(5, 0), 5, AttnMode::bidirectional_window);
  for (std::size_t q = 2; q < 5; ++q)
    for (std::size_t j = 2; j < 5; ++j) EXPECT_TRUE(mask.allows(q, j)) << q << "," << j;
  for (std::size_t q = 0; q < 5; ++q) EXPECT_TRUE(mask.allows(q, 5 + 0));
  EXPECT_FALSE(mask.allows(0, 1));  // context sees only earlier context
  EXPECT_TRUE(mask.allows(1, 0));
}

TEST(AttentionMaskShape, PromptSwitchAtMotionFrame40) {
  auto cfg = tiny_cfg();
  PromptSchedule s({{0, "walk"}, {40, "wave"}});
  auto ids = latent_prompt_ids(s, cfg, 0, 16);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(ids[k], cfg.prompt_id(k < 10 ? "walk" : "wave")) << k;
  // A change inside a latent frame's span reaches that frame.
  PromptSchedule s2({{0, "walk"}, {41, "wave"}});
  EXPECT_EQ(latent_prompt_ids(s2, cfg, 10, 11)[0], cfg.prompt_id("wave"));
  EXPECT_EQ(latent_prompt_ids(s2, cfg, 9, 10)[0], cfg.prompt_id("walk"));

  ScheduleParams sp;
  sp.K = 16;
  auto mask = build_attention_mask(partition(sp, 3.0), s, cfg);
  for (std::size_t q = 0; q < mask.tokens(); ++q) {
    const std::size_t k = mask.begin + q;
    const std::size_t want = cfg.prompt_id(k < 10 ? "walk" : "wave");
    for (std::size_t v = 0; v < cfg.vocabulary.size(); ++v) EXPECT_EQ(mask.allows(q, mask.tokens() + v), v == want);
  }
}

TEST(AttentionMaskShape, CausalWindowBlocksLaterActiveFramesOnly) {
  RegionPartition part{3, 7};
  auto bi = build_attention_mask(part, 1, constant_ids(6, 1), 5, AttnMode::bidirectional_window);
  auto ca = build_attention_mask(part, 1, constant_ids(6, 1), 5, AttnMode::causal_window);
  const std::size_t W = 6, ctx = 2;
  for (std::size_t q = 0; q < W; ++q)
    for (std::size_t j = 0; j < W + 5; ++j) {
      const bool toggled = q >= ctx && j >= ctx && j < W && j > q;
      EXPECT_EQ(bi.allows(q, j) && !toggled, ca.allows(q, j)) << q << "," << j;
      if (toggled) EXPECT_TRUE(bi.allows(q, j));
    }
}

TEST(AttentionMaskShape, EveryFrameSeesExactlyOnePrompt) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t begin = rng.below(5), m = begin + rng.below(6), n = m + rng.below(6);
    std::vector<std::size_t> ids(n - begin);
    for (auto& v : ids) v = rng.below(5);
    auto mask = build_attention_mask({m, n}, begin, ids, 5, trial % 2 ? AttnMode::causal_window : AttnMode::bidirectional_window);
    for (std::size_t q = 0; q < mask.tokens(); ++q) {
      std::size_t prompts = 0;
      for (auto key : mask.keys[q]) {
        if (key >= mask.tokens()) {
          ++prompts;
          EXPECT_EQ(key - mask.tokens(), ids[q]);
        } else if (q < mask.context()) {
          EXPECT_LE(key, q);  // context never reads active frames
        }
      }
      EXPECT_EQ(prompts, 1u);
    }
  }
}

TEST(AttentionMaskShape, RejectsBadInputs) {
  EXPECT_THROW(build_attention_mask({2, 4}, 3, constant_ids(1, 0), 5, AttnMode::causal_window), ConfigError);
  EXPECT_THROW(build_attention_mask({2, 4}, 0, constant_ids(3, 0), 5, AttnMode::causal_window), ShapeError);
  EXPECT_THROW(build_attention_mask({2, 4}, 0, constant_ids(4, 7), 5, AttnMode::causal_window), ConfigError);
  EXPECT_THROW(attn_mode_from_string("full"), ConfigError);
  EXPECT_THROW(tiny_cfg().prompt_id("dance"), ConfigError);
}

TEST(DenoiserForward, ZeroInitialisedOutputPredictsZeroVelocity) {
  Rng rng(2);
  auto cfg = tiny_cfg();
  Denoiser<float> dn(cfg, rng);
  auto s = sample_at(rng, cfg, 1.6, 12, constant_ids(12, 0));
  auto v = predict(dn, s);
  for (float x : v.data()) EXPECT_EQ(x, 0.0f);
}

TEST(DenoiserForward, OutputRowsMatchActiveFrames) {
  Rng rng(3);
  auto cfg = tiny_cfg();
  auto dn = live_model<float>(cfg, 3);
  ScheduleParams sp;
  sp.K = 12;
  for (int trial = 0; trial < 100; ++trial) {
    const double t = rng.uniform(0.0, max_training_time(sp));
    auto s = sample_at(rng, cfg, t, 12, constant_ids(12, rng.below(5)));
    if (s.mask.active() == 0) {
      ag::NoGradGuard ng;
      EXPECT_FALSE(dn.forward({window_input<float>(s)}).defined());
      continue;
    }
    EXPECT_EQ(predict(dn, s).rows(), s.mask.active()) << "t=" << t;
  }
}

TEST(DenoiserForward, FutureNoiseDoesNotMatter) {
  Rng rng(4);
  auto cfg = tiny_cfg();
  auto dn = live_model<float>(cfg, 4);
  auto s = sample_at(rng, cfg, 1.4, 12, constant_ids(12, 2));
  ASSERT_LT(s.mask.part.n, 12u);
  const auto ref = predict(dn, s);
  for (int trial = 0; trial < 10; ++trial) {
    auto s2 = s;
    for (std::size_t k = s.mask.part.n; k < 12; ++k)
      for (std::size_t c = 0; c < kLatentDim; ++c) s2.eps.at(k, c) = static_cast<float>(rng.normal());
    EXPECT_EQ(predict(dn, s2).data(), ref.data());
  }
}

TEST(DenoiserForward, ContextBeyondHorizonDoesNotMatter) {
  Rng rng(5);
  auto cfg = tiny_cfg();
  auto dn = live_model<float>(cfg, 5);
  auto s = sample_at(rng, cfg, 3.0, 16, constant_ids(16, 1));
  const std::size_t m = s.mask.part.m;
  ASSERT_EQ(s.mask.begin, m - cfg.context_horizon);
  const auto ref = predict(dn, s);
  auto outside = s;
  outside.z.at(m - cfg.context_horizon - 1, 0) += 5.0f;
  EXPECT_EQ(predict(dn, outside).data(), ref.data());
  auto inside = s;
  inside.z.at(m - cfg.context_horizon, 0) += 5.0f;
  EXPECT_NE(predict(dn, inside).data(), ref.data());
}

TEST(DenoiserForward, UnusedPromptEmbeddingsHaveNoEffect) {
  Rng rng(6);
  auto cfg = tiny_cfg();
  auto dn = live_model<float>(cfg, 6);
  auto s = sample_at(rng, cfg, 2.0, 12, constant_ids(12, 3));
  const auto ref = predict(dn, s);
  auto& emb = dn.params()["prompt.emb"].mutable_value();
  const auto saved = emb;
  // Rows other than 3 only enter through the layer norm of their own row.
  for (std::size_t v = 0; v < cfg.vocabulary.size(); ++v) {
    if (v == 3) continue;
    for (std::size_t j = 0; j < cfg.model_dim; ++j) emb.at(v, j) += static_cast<float>(rng.normal());
  }
  EXPECT_EQ(predict(dn, s).data(), ref.data());
  emb = saved;
  emb.at(3, 0) += 1.0f;
  EXPECT_NE(predict(dn, s).data(), ref.data());
}

TEST(DenoiserForward, BatchedWindowsAreIndependent) {
  Rng rng(7);
  auto cfg = tiny_cfg();
  auto dn = live_model<float>(cfg, 7);
  auto a = sample_at(rng, cfg, 1.3, 12, constant_ids(12, 0));
  auto b = sample_at(rng, cfg, 2.6, 12, constant_ids(12, 4));
  ag::NoGradGuard ng;
  auto both = dn.forward({window_input<float>(a), window_input<float>(b)}).value();
  auto va = dn.forward({window_input<float>(a)}).value();
  auto vb = dn.forward({window_input<float>(b)}).value();
  ASSERT_EQ(both.rows(), va.rows() + vb.rows());
  for (std::size_t i = 0; i < both.numel(); ++i)
    EXPECT_EQ(both[i], i < va.numel() ? va[i] : vb[i - va.numel()]);
}

TEST(DenoiserForward, MacsDependOnlyOnWindowShape) {
  auto cfg = tiny_cfg();
  Rng rng(8);
  Denoiser<float> dn(cfg, rng);
  auto a = build_attention_mask({10, 14}, 6, constant_ids(8, 0), 5, cfg.attn_mode);
  auto b = build_attention_mask({30, 34}, 26, constant_ids(8, 2), 5, cfg.attn_mode);
  EXPECT_EQ(dn.macs({a}), dn.macs({b}));
  auto c = build_attention_mask({30, 35}, 26, constant_ids(9, 2), 5, cfg.attn_mode);
  EXPECT_GT(dn.macs({c}), dn.macs({a}));
}

TEST(DenoiserGradient, FuturePromptGetsZeroGradient) {
  auto cfg = tiny_cfg();
  auto dn = live_model<double>(cfg, 9);
  Rng rng(9);
  // m = 0: frames [0, n) are under "walk"; "wave" starts after the window.
  PromptSchedule sched({{0, "walk"}, {40, "wave"}});
  ScheduleParams sp;
  sp.K = 16;
  auto s = sample_at(rng, cfg, 0.6, 16, latent_prompt_ids(sched, cfg, 0, 16));
  ASSERT_EQ(s.mask.part.m, 0u);
  ASSERT_LT(s.mask.part.n, 10u);
  auto& emb = dn.params()["prompt.emb"];
  const std::size_t wave = cfg.prompt_id("wave"), d = cfg.model_dim;
  auto loss = [&] {
    auto pred = dn.forward({window_input<double>(s)});
    return ag::sum(ag::mul(pred, pred));
  };
  dn.params().zero_grad();
  ag::backward(loss());
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < d; ++j) idx.push_back(wave * d + j);
  const auto fd = flood::testing::fd_grad(emb, [&] { return loss().item(); }, 1e-3, idx);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_EQ(emb.grad()[wave * d + j], 0.0);
    EXPECT_EQ(fd[j], 0.0);
  }
  // The prompt in force does receive gradient.
  double walk_grad = 0;
  for (std::size_t j = 0; j < d; ++j) walk_grad += std::abs(emb.grad()[cfg.prompt_id("walk") * d + j]);
  EXPECT_GT(walk_grad, 0.0);
}

TEST(DenoiserGradient, TrainingLossMatchesFiniteDifferences) {
  auto cfg = tiny_cfg();
  auto dn = live_model<double>(cfg, 10);
  Rng rng(10);
  std::vector<TrainSample> batch{sample_at(rng, cfg, 1.3, 12, constant_ids(12, 0)),
                                 sample_at(rng, cfg, 2.2, 12, constant_ids(12, 1))};
  auto build = [&] { return *batch_loss(dn, batch); };
  // 50 probes spread over every parameter tensor.
  auto& vars = dn.params().vars();
  double worst = 0;
  for (int p = 0; p < 50; ++p) {
    auto& leaf = vars[static_cast<std::size_t>(p) % vars.size()];
    const std::size_t i = rng.below(leaf.value().numel());
    worst = std::max(worst, flood::testing::max_grad_error(leaf, build, {i}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(DenoiserCheckpoint, RoundTripPreservesOutputs) {
  auto cfg = tiny_cfg(AttnMode::causal_window);
  auto dn = live_model<float>(cfg, 11);
  const auto path = std::filesystem::temp_directory_path() / "flood_dn_rt.ck";
  save_checkpoint(dn.to_checkpoint(), path);
  auto back = Denoiser<float>::from_checkpoint(load_checkpoint(path));
  EXPECT_EQ(back.config().attn_mode, AttnMode::causal_window);
  EXPECT_EQ(back.config().vocabulary, cfg.vocabulary);
  Rng rng(11);
  auto s = sample_at(rng, cfg, 2.1, 12, constant_ids(12, 2));
  EXPECT_EQ(predict(back, s).data(), predict(dn, s).data());
  Checkpoint wrong;
  wrong.meta["kind"] = "vae";
  EXPECT_THROW(Denoiser<float>::from_checkpoint(wrong), IoError);
}
