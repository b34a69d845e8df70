#include <gtest/gtest.h>

#include <cmath>

#include "flood/schedule.hpp"

using namespace flood;

namespace {

// Scalar oracle, written out independently of the library's helpers.
double clamp_oracle(double t, std::size_t k, double n_s) {
  double v = t - static_cast<double>(k) / n_s;
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return v;
}

ScheduleParams tri(double n_s, std::size_t K) { return {n_s, K, ScheduleKind::triangular}; }

// Kolmogorov-Smirnov p-value against Uniform(0, 1).
double ks_uniform_p(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    d = std::max({d, (i + 1) / n - xs[i], xs[i] - i / n});
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int j = 1; j < 100; ++j) p += 2.0 * ((j % 2) ? 1.0 : -1.0) * std::exp(-2.0 * j * j * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

} // namespace

TEST(AlphaAt, ClampExamples) {
  EXPECT_EQ(alpha_at(tri(2, 4), 1.0, 0), 1.0);
  EXPECT_EQ(alpha_at(tri(4, 4), 0.5, 2), 0.0);
  EXPECT_EQ(alpha_at(tri(4, 4), 1.25, 3), 0.5);
  EXPECT_EQ(beta_at(tri(4, 4), 1.25, 3), 0.5);
}

TEST(AlphaAt, OutOfRangeFrameThrows) {
  EXPECT_THROW(alpha_at(tri(4, 12), 1.0, 12), ConfigError);
  EXPECT_THROW(alpha_at({4, 12, ScheduleKind::random}, 1.0, 0), ConfigError);
}

TEST(AlphaAt, AlphaPlusBetaIsExactlyOne) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double n_s = rng.uniform(0.5, 8.0);
    const auto p = tri(n_s, 32);
    const double t = rng.uniform(0.0, max_training_time(p));
    const std::size_t k = rng.below(32);
    EXPECT_EQ(alpha_at(p, t, k) + beta_at(p, t, k), 1.0);
  }
}

TEST(Partition, Examples) {
  EXPECT_EQ(partition(tri(4, 12), 1.25), (RegionPartition{2, 5}));
  EXPECT_EQ(partition(tri(4, 12), 0.0), (RegionPartition{0, 0}));
  EXPECT_EQ(partition(tri(4, 12), 1.0 + 11.0 / 4.0), (RegionPartition{12, 12}));
  EXPECT_EQ(partition(tri(4, 12), 10.0), (RegionPartition{12, 12}));
}

TEST(Partition, AgreesWithThresholdingAndLocalityOnGrid) {
  for (double n_s : {1.0, 2.5, 4.0, 7.3}) {
    const auto p = tri(n_s, 40);
    const double tmax = max_training_time(p) + 0.5;
    for (int i = 0; i <= 10000; ++i) {
      const double t = tmax * i / 10000.0;
      const auto part = partition(p, t);
      for (std::size_t k = 0; k < p.K; ++k) {
        const double a = clamp_oracle(t, k, n_s);
        ASSERT_EQ(part.fixed(k), a == 1.0) << t << " " << k;
        ASSERT_EQ(part.future(k), a == 0.0) << t << " " << k;
        ASSERT_EQ(part.active(k), a > 0.0 && a < 1.0);
      }
      ASSERT_LE(part.active_size(), static_cast<std::size_t>(std::ceil(n_s)));
    }
  }
}

TEST(Schedule, CommitIsPermanent) {
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const auto p = tri(rng.uniform(0.5, 6.0), 24);
    const double t = rng.uniform(0.0, max_training_time(p));
    const double later = t + rng.uniform(0.0, 5.0);
    const auto part = partition(p, t);
    for (std::size_t k = 0; k < part.m; ++k) ASSERT_EQ(alpha_at(p, later, k), 1.0);
  }
}

TEST(Schedule, ResidenceTimeIsOne) {
  const double n_s = 4.0;
  for (std::size_t k = 0; k < 20; ++k) {
    const double enter = k / n_s;
    EXPECT_EQ(triangular_alpha(enter, k, n_s), 0.0);
    EXPECT_GT(triangular_alpha(enter + 1e-9, k, n_s), 0.0);
    EXPECT_LT(triangular_alpha(enter + 1.0 - 1e-9, k, n_s), 1.0);
    EXPECT_EQ(triangular_alpha(enter + 1.0, k, n_s), 1.0);
  }
}

TEST(Corrupt, Endpoints) {
  Rng rng(5);
  auto z = Tensor::randn(rng, {6, 4});
  auto eps = Tensor::randn(rng, {6, 4});
  EXPECT_EQ(corrupt(z, AlphaBetaVector::from_alpha(std::vector<double>(6, 1.0)), eps), z);
  EXPECT_EQ(corrupt(z, AlphaBetaVector::from_alpha(std::vector<double>(6, 0.0)), eps), eps);
}

TEST(Corrupt, QuarterMatchesScalarLoop) {
  Rng rng(6);
  auto z = Tensor::randn(rng, {5, 4});
  auto eps = Tensor::randn(rng, {5, 4});
  auto x = corrupt(z, AlphaBetaVector::from_alpha(std::vector<double>(5, 0.25)), eps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], static_cast<float>(0.25 * z[i] + 0.75 * eps[i]));
}

TEST(Corrupt, ShapeMismatchThrows) {
  EXPECT_THROW(corrupt(Tensor({4, 4}), AlphaBetaVector::from_alpha(std::vector<double>(4, 0.5)), Tensor({4, 3})),
               ShapeError);
}

TEST(SampleTrainingTimes, TriangularRange) {
  Rng rng(8);
  const auto p = tri(4, 12);
  double lo = 1e9, hi = -1e9;
  for (const auto& s : sample_training_times(p, rng, 20000)) {
    ASSERT_TRUE(s.t.has_value());
    lo = std::min(lo, *s.t);
    hi = std::max(hi, *s.t);
    EXPECT_EQ(s.part, partition(p, *s.t));
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 3.75);
  EXPECT_GT(hi, 3.7);  // the whole range is used
}

TEST(SampleTrainingTimes, RandomKindIsUniformPerFrame) {
  Rng rng(9);
  const ScheduleParams p{4, 8, ScheduleKind::random};
  std::vector<double> xs;
  for (const auto& s : sample_training_times(p, rng, 10000 / 8)) {
    EXPECT_FALSE(s.t.has_value());
    xs.insert(xs.end(), s.ab.alpha.begin(), s.ab.alpha.end());
  }
  EXPECT_GT(ks_uniform_p(xs), 0.01);
}

TEST(SampleTrainingTimes, ChunkKindSharesAlpha) {
  Rng rng(10);
  for (const auto& s : sample_training_times({4, 8, ScheduleKind::chunk}, rng, 50))
    for (double a : s.ab.alpha) EXPECT_EQ(a, s.ab.alpha[0]);
}

TEST(Advance, OneFramePerFifthStep) {
  const auto p = tri(4, 100);
  // From t = 1.0 with dt = 0.25 (1/n_s) each advance commits exactly one frame.
  double t = 1.0;
  for (int i = 0; i < 20; ++i) {
    auto a = advance(p, t, 0.25);
    EXPECT_EQ(a.newly_committed, 1u);
    t = a.t;
  }
}

TEST(Advance, ZeroStepThrows) { EXPECT_THROW(advance(tri(4, 4), 0.0, 0.0), ConfigError); }

TEST(Advance, AllFramesCommitAfterClosedFormCount) {
  const std::size_t K = 12;
  const double n_s = 4, dt = 0.05;
  const auto p = tri(n_s, K);
  const int steps = static_cast<int>(std::lround(K / (n_s * dt) + 1.0 / dt));
  std::size_t committed = 0;
  for (int s = 0; s < steps; ++s) committed += advance(p, s * dt, dt).newly_committed;
  EXPECT_EQ(committed, K);
}

TEST(StepWindow, DefaultConfigDenoisesFourFramesPerStep) {
  const double n_s = 4, dt = 0.05;
  for (int s = 0; s < 2000; ++s) {
    const double t = s * dt, t2 = (s + 1) * dt;
    const auto w = step_window(t, t2, n_s);
    // Frames 0..3 still ramping up near the start give a shorter window.
    const std::size_t expect = std::min<std::size_t>(4, w.n);
    EXPECT_EQ(w.active_size(), expect) << s;
    for (std::size_t k = w.m; k < w.n; ++k) {
      EXPECT_LT(triangular_alpha(t, k, n_s), 1.0);
      EXPECT_GT(triangular_alpha(t2, k, n_s), 0.0);
    }
  }
}
