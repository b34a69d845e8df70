#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "flood/commands.hpp"

// Streaming behaviour of the trained model from the acceptance run. The
// checkpoints are read from FLOOD_ACCEPTANCE_DIR/run; without them every test
// is skipped.

using namespace flood;
namespace fs = std::filesystem;

namespace {

RunConfig trained_config() {
  RunConfig cfg;
  cfg.out_dir = (fs::path(FLOOD_ACCEPTANCE_DIR) / "run").string();
  return cfg;
}

bool have_checkpoints() {
  const fs::path run = trained_config().out_dir;
  return fs::exists(run / cmd::kVaeCheckpoint) && fs::exists(run / cmd::kDenoiserCheckpoint);
}

fs::path demo_dir() {
  const auto d = fs::path(FLOOD_ACCEPTANCE_DIR) / "demo";
  fs::create_directories(d);
  return d;
}

MotionSequence stream_to(const std::string& name, const PromptSchedule& sched, std::size_t frames) {
  const auto dir = demo_dir();
  cmd::StreamPaths p;
  p.schedule = dir / (name + ".jsonl");
  write_prompt_schedule(sched, p.schedule);
  p.frames = frames;
  p.out = dir / (name + ".fsmo");
  p.csv = dir / (name + ".csv");
  cmd::stream(trained_config(), p);
  return read_motion(p.out);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double mean_channel_variance(const MotionSequence& s, std::size_t begin, std::size_t end) {
  double total = 0;
  for (std::size_t c = 0; c < s.dims(); ++c) {
    double m = 0, m2 = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const double x = s.frames.at(i, c);
      m += x;
      m2 += x * x;
    }
    const double n = static_cast<double>(end - begin);
    total += m2 / n - (m / n) * (m / n);
  }
  return total / static_cast<double>(s.dims());
}

} // namespace

class Demo : public ::testing::Test {
protected:
  void SetUp() override {
    if (!have_checkpoints()) GTEST_SKIP() << "no trained checkpoints under " << FLOOD_ACCEPTANCE_DIR;
  }
};

TEST_F(Demo, PromptTimingChangesTheOutput) {
  const auto early = stream_to("walk_wave_80", PromptSchedule({{0, "walk"}, {80, "wave"}}), 240);
  const auto late = stream_to("walk_wave_120", PromptSchedule({{0, "walk"}, {120, "wave"}}), 240);
  EXPECT_NE(file_bytes(demo_dir() / "walk_wave_80.fsmo"), file_bytes(demo_dir() / "walk_wave_120.fsmo"));
  // Identical until the earlier switch can take effect: frames that share a
  // window with latent frame 20 may change.
  for (std::size_t i = 0; i < 80 - 4 * kDownsample; ++i)
    for (std::size_t c = 0; c < early.dims(); ++c) ASSERT_EQ(early.frames.at(i, c), late.frames.at(i, c)) << i;
}

TEST_F(Demo, SinglePromptKeepsItsTempo) {
  for (const std::string prompt : {"walk", "run", "wave"}) {
    const auto s = stream_to("long_" + prompt, PromptSchedule::single(prompt), 400);
    const double first = dominant_frequency(s, 0, 200), second = dominant_frequency(s, 200, 400);
    ASSERT_GT(first, 0.0) << prompt;
    EXPECT_LE(std::abs(second - first) / first, 0.10) << prompt << ": " << first << " Hz then " << second << " Hz";
  }
}

TEST_F(Demo, StandPromptStillsTheMotion) {
  constexpr std::size_t switch_frame = 200;
  const auto s = stream_to("run_stand", PromptSchedule({{0, "run"}, {switch_frame, "stand"}}), 400);
  // The push can act up to 4 latent frames plus the decoder slack late.
  const std::size_t settle = switch_frame + 4 * kDownsample + kDecoderSlack;
  const double before = mean_channel_variance(s, 0, switch_frame);
  const double after = mean_channel_variance(s, settle, s.n_frames());
  EXPECT_LT(after, 0.1 * before) << "variance " << before << " before, " << after << " after";
}
