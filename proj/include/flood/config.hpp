#pragma once

// Run configuration: one JSON document describing data, models, training and
// streaming. Every section is optional; missing keys keep their defaults and
// unknown keys are rejected.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "flood/denoiser.hpp"
#include "flood/schedule.hpp"
#include "flood/stream.hpp"
#include "flood/training.hpp"
#include "flood/vae.hpp"

namespace flood {

struct DataSpec {
  std::string dir = "data";
  std::vector<std::string> classes = class_vocabulary();
  std::size_t per_class = 40;
  std::size_t frames = 160;
  std::size_t D = 16;
  double fps = 20.0;
  std::size_t transitions = 100;     ///< spliced two-class sequences
  std::size_t transition_frames = 96; ///< frames per half of a spliced sequence
  std::size_t crossfade = 8;
};

struct TrainSpec {
  std::size_t steps = 0;
  std::size_t batch = 16;
  std::size_t clip = 0;
  double lr = 1e-3;
};

struct RunConfig {
  std::uint64_t seed = 7;
  DataSpec data;
  double n_s = 4.0;
  double dt = 0.05;
  ScheduleKind schedule_kind = ScheduleKind::triangular;
  VaeConfig vae;
  TrainSpec vae_train{2000, 16, 32, 1e-3};
  DenoiserConfig denoiser = [] {
    DenoiserConfig c;
    c.context_horizon = 8;
    return c;
  }();
  TrainSpec denoiser_train{5000, 16, 16, 1e-3};
  double budget_ms = 33.0;
  std::string out_dir = "run";

  ScheduleParams schedule() const { return {n_s, denoiser_train.clip, schedule_kind}; }

  VaeTrainOptions vae_options() const {
    VaeTrainOptions o;
    o.steps = vae_train.steps;
    o.batch = vae_train.batch;
    o.clip = vae_train.clip;
    o.adam.lr = vae_train.lr;
    return o;
  }

  DenoiserTrainOptions denoiser_options() const {
    DenoiserTrainOptions o;
    o.steps = denoiser_train.steps;
    o.batch = denoiser_train.batch;
    o.clip = denoiser_train.clip;
    o.schedule = schedule();
    o.adam.lr = denoiser_train.lr;
    return o;
  }

  StreamOptions stream_options() const {
    StreamOptions o;
    o.n_s = n_s;
    o.dt = dt;
    o.seed = seed;
    o.budget_ms = budget_ms;
    return o;
  }

  /// Checks every module precondition that can be checked without data.
  void validate() const {
    if (data.classes.empty()) throw ConfigError("config: data.classes must name at least one class");
    for (const auto& c : data.classes) {
      class_from_name(c);
      denoiser.prompt_id(c);
    }
    if (data.per_class == 0) throw ConfigError("config: data.per_class must be positive");
    if (data.D == 0) throw ConfigError("config: data.D must be positive");
    if (data.fps < kMinFps || data.fps > kMaxFps) throw ConfigError("config: data.fps must lie in [20, 60]");
    if (data.transitions > 0 && data.crossfade > data.transition_frames)
      throw ConfigError("config: data.crossfade exceeds data.transition_frames");
    if (!(n_s > 0) || !std::isfinite(n_s)) throw ConfigError("config: schedule.n_s must be positive");
    if (!(dt > 0) || !std::isfinite(dt)) throw ConfigError("config: schedule.dt must be positive");
    if (!(budget_ms > 0)) throw ConfigError("config: stream.budget_ms must be positive");
    vae.validate();
    if (vae.D_in != data.D)
      throw ConfigError("config: vae.D_in " + std::to_string(vae.D_in) + " differs from data.D " + std::to_string(data.D));
    denoiser.validate();
    for (const auto* t : {&vae_train, &denoiser_train}) {
      if (t->batch == 0) throw ConfigError("config: training batch must be positive");
      if (!(t->lr > 0)) throw ConfigError("config: learning rate must be positive");
    }
    if (vae_train.clip == 0 || vae_train.clip % kDownsample != 0)
      throw ConfigError("config: vae.train.clip must be a positive multiple of 4");
    if (denoiser_train.clip == 0) throw ConfigError("config: denoiser.train.clip must be positive");
    const std::size_t shortest = data.transitions > 0 ? std::min(data.frames, 2 * data.transition_frames - data.crossfade)
                                                      : data.frames;
    if (shortest < 8) throw ConfigError("config: sequences need at least 8 frames");
    if (vae_train.clip > shortest)
      throw ConfigError("config: vae.train.clip " + std::to_string(vae_train.clip) + " exceeds the shortest sequence (" +
                        std::to_string(shortest) + " frames)");
    if (denoiser_train.clip * kDownsample > shortest)
      throw ConfigError("config: denoiser.train.clip " + std::to_string(denoiser_train.clip) +
                        " latent frames exceeds the shortest sequence (" + std::to_string(shortest) + " frames)");
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
}

inline void read_train(const nlohmann::json& j, const std::string& where, TrainSpec& t) {
  check_keys(j, where, {"steps", "batch", "clip", "lr"});
  t.steps = j.value("steps", t.steps);
  t.batch = j.value("batch", t.batch);
  t.clip = j.value("clip", t.clip);
  t.lr = j.value("lr", t.lr);
}

inline nlohmann::json write_train(const TrainSpec& t) {
  return {{"steps", t.steps}, {"batch", t.batch}, {"clip", t.clip}, {"lr", t.lr}};
}

} // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    detail::check_keys(j, "config", {"seed", "data", "schedule", "vae", "denoiser", "stream", "out_dir"});
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("data")) {
      const auto& d = j["data"];
      detail::check_keys(d, "data",
                         {"dir", "classes", "per_class", "frames", "D", "fps", "transitions", "transition_frames", "crossfade"});
      c.data.dir = d.value("dir", c.data.dir);
      c.data.classes = d.value("classes", c.data.classes);
      c.data.per_class = d.value("per_class", c.data.per_class);
      c.data.frames = d.value("frames", c.data.frames);
      c.data.D = d.value("D", c.data.D);
      c.data.fps = d.value("fps", c.data.fps);
      c.data.transitions = d.value("transitions", c.data.transitions);
      c.data.transition_frames = d.value("transition_frames", c.data.transition_frames);
      c.data.crossfade = d.value("crossfade", c.data.crossfade);
    }
    c.vae.D_in = c.data.D;
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      detail::check_keys(s, "schedule", {"n_s", "dt", "kind"});
      c.n_s = s.value("n_s", c.n_s);
      c.dt = s.value("dt", c.dt);
      if (s.contains("kind")) c.schedule_kind = schedule_kind_from_string(s["kind"].get<std::string>());
    }
    if (j.contains("vae")) {
      auto v = j["vae"];
      detail::check_keys(v, "vae", {"D_in", "latent_dim", "downsample", "hidden", "kernel", "gamma", "train"});
      if (v.contains("train")) detail::read_train(v["train"], "vae.train", c.vae_train);
      v.erase("train");
      from_json(v, c.vae);
    }
    if (j.contains("denoiser")) {
      auto d = j["denoiser"];
      detail::check_keys(d, "denoiser",
                         {"layers", "heads", "model_dim", "mlp_dim", "context_horizon", "attn_mode", "vocabulary", "train"});
      if (d.contains("train")) detail::read_train(d["train"], "denoiser.train", c.denoiser_train);
      d.erase("train");
      from_json(d, c.denoiser);
    }
    if (j.contains("stream")) {
      detail::check_keys(j["stream"], "stream", {"budget_ms"});
      c.budget_ms = j["stream"].value("budget_ms", c.budget_ms);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json vae = c.vae, dn = c.denoiser;
  vae["train"] = detail::write_train(c.vae_train);
  dn["train"] = detail::write_train(c.denoiser_train);
  return {{"seed", c.seed},
          {"out_dir", c.out_dir},
          {"data",
           {{"dir", c.data.dir},
            {"classes", c.data.classes},
            {"per_class", c.data.per_class},
            {"frames", c.data.frames},
            {"D", c.data.D},
            {"fps", c.data.fps},
            {"transitions", c.data.transitions},
            {"transition_frames", c.data.transition_frames},
            {"crossfade", c.data.crossfade}}},
          {"schedule", {{"n_s", c.n_s}, {"dt", c.dt}, {"kind", to_string(c.schedule_kind)}}},
          {"vae", vae},
          {"denoiser", dn},
          {"stream", {{"budget_ms", c.budget_ms}}}};
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

/// FLOOD_SEED, if set, replaces the configured seed.
inline void apply_seed_env(RunConfig& c) {
  if (const char* s = std::getenv("FLOOD_SEED"); s && *s) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw ConfigError(std::string("FLOOD_SEED must be an unsigned integer, got \"") + s + "\"");
    c.seed = v;
  }
}

} // namespace flood
