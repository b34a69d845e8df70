#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/binio.hpp"
#include "flood/error.hpp"
#include "flood/rng.hpp"
#include "flood/tensor.hpp"

namespace flood {

inline constexpr std::string_view kMotionMagic = "FSMO1";
inline constexpr double kMinFps = 20.0;
inline constexpr double kMaxFps = 60.0;

// ---------------------------------------------------------------------------
// Prompt schedules

struct PromptEntry {
  std::size_t frame = 0;
  std::string prompt;
  friend bool operator==(const PromptEntry&, const PromptEntry&) = default;
};

/// Time-indexed instructions. Entries start at frame 0 and strictly increase.
class PromptSchedule {
public:
  PromptSchedule() = default;
  explicit PromptSchedule(std::vector<PromptEntry> entries) : entries_(std::move(entries)) { validate(); }

  static PromptSchedule single(std::string prompt) { return PromptSchedule({{0, std::move(prompt)}}); }

  void validate() const {
    if (entries_.empty() || entries_.front().frame != 0) throw ConfigError("schedule must cover frame 0");
    for (std::size_t i = 1; i < entries_.size(); ++i)
      if (entries_[i].frame <= entries_[i - 1].frame)
        throw ConfigError("prompt schedule frames must strictly increase: frame " +
                          std::to_string(entries_[i].frame) + " follows " + std::to_string(entries_[i - 1].frame));
  }

  const std::vector<PromptEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  /// Index of the entry in force at motion frame `frame`.
  std::size_t entry_index_at(std::size_t frame) const {
    if (entries_.empty() || entries_.front().frame > frame)
      throw ConfigError("no prompt is active at frame " + std::to_string(frame));
    auto it = std::upper_bound(entries_.begin(), entries_.end(), frame,
                               [](std::size_t f, const PromptEntry& e) { return f < e.frame; });
    return static_cast<std::size_t>(std::distance(entries_.begin(), it)) - 1;
  }

  const std::string& prompt_at(std::size_t frame) const { return entries_[entry_index_at(frame)].prompt; }

  /// Replaces everything from `frame` on with `prompt`. A push that would not
  /// change the prompt in force at `frame` is coalesced away. Returns whether
  /// the schedule changed.
  bool push(std::size_t frame, const std::string& prompt) {
    if (entries_.empty()) {
      if (frame != 0) throw ConfigError("schedule must cover frame 0");
      entries_.push_back({0, prompt});
      return true;
    }
    std::vector<PromptEntry> kept;
    for (const auto& e : entries_)
      if (e.frame < frame) kept.push_back(e);
    const bool same_as_before = !kept.empty() && kept.back().prompt == prompt;
    if (!same_as_before) kept.push_back({frame, prompt});
    if (kept == entries_) return false;
    entries_ = std::move(kept);
    return true;
  }

  friend bool operator==(const PromptSchedule&, const PromptSchedule&) = default;

private:
  std::vector<PromptEntry> entries_;
};

inline nlohmann::json to_json(const PromptSchedule& s) {
  auto arr = nlohmann::json::array();
  for (const auto& e : s.entries()) arr.push_back({{"frame", e.frame}, {"prompt", e.prompt}});
  return arr;
}

inline PromptSchedule prompt_schedule_from_json(const nlohmann::json& arr) {
  std::vector<PromptEntry> entries;
  for (const auto& e : arr) entries.push_back({e.at("frame").get<std::size_t>(), e.at("prompt").get<std::string>()});
  return PromptSchedule(std::move(entries));
}

/// JSON-lines file, one {"frame": int, "prompt": string} per line.
inline PromptSchedule read_prompt_schedule(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open prompt schedule: " + path.string());
  std::vector<PromptEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto frame = j.at("frame").get<long long>();
      if (frame < 0) throw ConfigError("negative frame");
      entries.push_back({static_cast<std::size_t>(frame), j.at("prompt").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return PromptSchedule(std::move(entries));
}

inline void write_prompt_schedule(const PromptSchedule& s, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write prompt schedule: " + path.string());
  for (const auto& e : s.entries()) f << nlohmann::json{{"frame", e.frame}, {"prompt", e.prompt}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Motion sequences

/// Frames of D channels at a fixed rate, stored row-major [n_frames x D].
struct MotionSequence {
  double fps = 20.0;
  Tensor frames;
  std::optional<PromptSchedule> labels;

  MotionSequence() = default;
  MotionSequence(double fps_, Tensor frames_, std::optional<PromptSchedule> labels_ = std::nullopt)
      : fps(fps_), frames(std::move(frames_)), labels(std::move(labels_)) {
    validate();
  }

  std::size_t n_frames() const { return frames.empty() ? 0 : frames.dim(0); }
  std::size_t dims() const { return frames.empty() ? 0 : frames.dim(1); }
  std::span<const float> frame(std::size_t i) const { return frames.row(i); }

  void validate() const {
    if (fps < kMinFps || fps > kMaxFps)
      throw ConfigError("motion fps " + std::to_string(fps) + " outside [20, 60]");
    if (frames.rank() != 2) throw ShapeError("motion frames must be [n_frames x D]");
    if (!frames.all_finite()) throw NumericError("motion contains non-finite values");
  }

  friend bool operator==(const MotionSequence& a, const MotionSequence& b) {
    return a.fps == b.fps && a.frames == b.frames && a.labels == b.labels;
  }
};

inline void write_motion(const MotionSequence& seq, const std::filesystem::path& path) {
  nlohmann::json header{{"fps", seq.fps}, {"D", seq.dims()}, {"n_frames", seq.n_frames()}};
  if (seq.labels) header["labels"] = to_json(*seq.labels);
  binio::write_framed(path, kMotionMagic, header, seq.frames.span());
}

inline MotionSequence read_motion(const std::filesystem::path& path) {
  auto framed = binio::read_framed(path, kMotionMagic);
  double fps;
  std::size_t D, n;
  std::optional<PromptSchedule> labels;
  try {
    fps = framed.header.at("fps").get<double>();
    D = framed.header.at("D").get<std::size_t>();
    n = framed.header.at("n_frames").get<std::size_t>();
    if (framed.header.contains("labels")) labels = prompt_schedule_from_json(framed.header["labels"]);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": malformed motion header: " + e.what());
  }
  if (D == 0 || n == 0) throw IoError(path.string() + ": empty motion (D=" + std::to_string(D) + ", n_frames=" + std::to_string(n) + ")");
  const std::size_t expected = n * D * sizeof(float);
  if (framed.payload.size() != expected) {
    const bool whole_rows = framed.payload.size() % (n * sizeof(float)) == 0;
    throw IoError(path.string() + ": payload has " + std::to_string(framed.payload.size()) + " bytes, expected " +
                  std::to_string(expected) + " for " + std::to_string(n) + " frames of D=" + std::to_string(D) +
                  (whole_rows && framed.payload.size() < expected ? " (rows shorter than header D)"
                   : framed.payload.size() < expected            ? " (truncated)"
                                                                  : " (trailing bytes or rows wider than header D)"));
  }
  auto data = binio::floats_at(framed.payload, 0, n * D, path.string());
  return MotionSequence(fps, Tensor({n, D}, std::move(data)), std::move(labels));
}

// ---------------------------------------------------------------------------
// Synthetic procedural motion

enum class MotionClass { walk, run, wave, turn, stand };

inline constexpr std::array<MotionClass, 5> kAllClasses = {MotionClass::walk, MotionClass::run, MotionClass::wave,
                                                            MotionClass::turn, MotionClass::stand};

inline std::string class_name(MotionClass c) {
  switch (c) {
  case MotionClass::walk: return "walk";
  case MotionClass::run: return "run";
  case MotionClass::wave: return "wave";
  case MotionClass::turn: return "turn";
  case MotionClass::stand: return "stand";
  }
  return "?";
}

inline MotionClass class_from_name(const std::string& s) {
  for (auto c : kAllClasses)
    if (class_name(c) == s) return c;
  throw ConfigError("unknown motion class \"" + s + "\"");
}

inline std::vector<std::string> class_vocabulary() {
  std::vector<std::string> v;
  for (auto c : kAllClasses) v.push_back(class_name(c));
  return v;
}

/// Per-class generator constants. Each class has its own base frequency,
/// amplitude and channel gain/phase pattern; run's frequency is exactly twice
/// walk's.
struct ClassProfile {
  double freq_hz;
  double amplitude;
};

inline ClassProfile class_profile(MotionClass c) {
  switch (c) {
  case MotionClass::walk: return {0.5, 1.0};
  case MotionClass::run: return {1.0, 1.5};
  case MotionClass::wave: return {0.75, 0.7};
  case MotionClass::turn: return {0.25, 0.5};
  case MotionClass::stand: return {0.0, 0.0};
  }
  return {0, 0};
}

namespace detail {

inline double channel_gain(MotionClass c, double u) {
  switch (c) {
  case MotionClass::walk: return 1.0 - 0.6 * u;
  case MotionClass::run: return 1.0 - 0.3 * u;
  case MotionClass::wave: return 0.1 + 0.9 * u * u;
  case MotionClass::turn: return 0.8;
  case MotionClass::stand: return 0.0;
  }
  return 0.0;
}

inline double channel_phase(MotionClass c, std::size_t ch) {
  const double x = static_cast<double>(ch);
  switch (c) {
  case MotionClass::walk:
  case MotionClass::run: return std::numbers::pi * static_cast<double>(ch % 2) + 0.3 * x;
  case MotionClass::wave: return 0.5 * x;
  case MotionClass::turn: return 0.2 * x;
  case MotionClass::stand: return 0.0;
  }
  return 0.0;
}

inline double rest_pose(MotionClass c, std::size_t ch) {
  return 0.3 * std::sin(static_cast<double>(ch + 1) * (static_cast<double>(c) + 1.0));
}

} // namespace detail

inline constexpr double kStandJitter = 0.01;

/// Procedural motion of one class. Deterministic given the generator state.
/// Channel c follows rest_pose + A * g_c * (sin(w t + p0 + p_c) + 0.25 sin(2(...)))
/// with a random start phase p0, a +-10% amplitude jitter and sigma=0.01 noise.
inline MotionSequence gen_synthetic(Rng& rng, MotionClass cls, std::size_t n_frames, std::size_t D,
                                    double fps = 20.0) {
  if (n_frames < 8) throw ConfigError("gen_synthetic: need at least 8 frames");
  if (D == 0) throw ConfigError("gen_synthetic: D must be positive");
  const auto prof = class_profile(cls);
  const double phase0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = prof.amplitude * rng.uniform(0.9, 1.1);
  const double w = 2.0 * std::numbers::pi * prof.freq_hz;
  Tensor frames({n_frames, D});
  for (std::size_t i = 0; i < n_frames; ++i) {
    const double t = static_cast<double>(i) / fps;
    for (std::size_t c = 0; c < D; ++c) {
      const double u = D > 1 ? static_cast<double>(c) / static_cast<double>(D - 1) : 0.0;
      const double ph = w * t + phase0 + detail::channel_phase(cls, c);
      const double osc = std::sin(ph) + 0.25 * std::sin(2.0 * ph);
      const double v = detail::rest_pose(cls, c) + amp * detail::channel_gain(cls, u) * osc + kStandJitter * rng.normal();
      frames.at(i, c) = static_cast<float>(v);
    }
  }
  return MotionSequence(fps, std::move(frames), PromptSchedule::single(class_name(cls)));
}

/// Joins b after a, blending the last `crossfade` frames of a with the first
/// `crossfade` frames of b using weights (i + 1) / (crossfade + 1).
inline MotionSequence splice(const MotionSequence& a, const MotionSequence& b, std::size_t crossfade) {
  if (a.dims() != b.dims()) throw ShapeError("splice: channel counts differ");
  if (a.fps != b.fps) throw ConfigError("splice: frame rates differ");
  if (crossfade > a.n_frames() || crossfade > b.n_frames())
    throw ConfigError("splice: crossfade of " + std::to_string(crossfade) + " frames exceeds an input length");
  const std::size_t D = a.dims(), la = a.n_frames(), lb = b.n_frames();
  const std::size_t head = la - crossfade;
  Tensor out({la + lb - crossfade, D});
  for (std::size_t i = 0; i < head; ++i)
    for (std::size_t c = 0; c < D; ++c) out.at(i, c) = a.frames.at(i, c);
  for (std::size_t i = 0; i < crossfade; ++i) {
    const double lam = static_cast<double>(i + 1) / static_cast<double>(crossfade + 1);
    for (std::size_t c = 0; c < D; ++c)
      out.at(head + i, c) = static_cast<float>((1.0 - lam) * a.frames.at(head + i, c) + lam * b.frames.at(i, c));
  }
  for (std::size_t i = crossfade; i < lb; ++i)
    for (std::size_t c = 0; c < D; ++c) out.at(head + i, c) = b.frames.at(i, c);

  std::optional<PromptSchedule> labels;
  if (a.labels && b.labels) {
    PromptSchedule s = *a.labels;
    const std::size_t seam = head + crossfade / 2;
    for (const auto& e : b.labels->entries())
      if (head + e.frame >= seam || e.frame == 0) s.push(std::max(seam, head + e.frame), e.prompt);
    labels = std::move(s);
  }
  return MotionSequence(a.fps, std::move(out), std::move(labels));
}

} // namespace flood
