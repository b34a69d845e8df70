#pragma once

// Subcommand implementations behind the `flood` tool. Each takes a validated
// RunConfig, reads and writes files under the configured directories, and
// reports failures through the error hierarchy (the tool maps those to exit
// codes).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/bench.hpp"
#include "flood/config.hpp"
#include "flood/metrics.hpp"

namespace flood::cmd {

namespace fs = std::filesystem;

inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kVaeCheckpoint = "vae.ck";
inline constexpr const char* kDenoiserCheckpoint = "denoiser.ck";

// Independent generator streams derived from the run seed.
inline constexpr std::uint64_t kStreamVaeInit = 1, kStreamVaeTrain = 2, kStreamDenoiserInit = 3,
                               kStreamDenoiserTrain = 4, kStreamEvalNoise = 5;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_json(const nlohmann::json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::json snapshot_json(const Rng& rng) {
  const auto s = rng.snapshot();
  return {{"state", s.state}, {"spare", s.spare}, {"has_spare", s.has_spare}};
}

inline Rng rng_from_json(const nlohmann::json& j) {
  return Rng::restore({j.at("state").get<std::uint64_t>(), j.at("spare").get<double>(), j.at("has_spare").get<bool>()});
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataResult {
  fs::path dir;
  std::size_t files = 0;
};

/// Writes per_class sequences of each class, then `transitions` spliced
/// two-class sequences, as FSMO1 files plus manifest.json. Every file draws
/// from its own keyed generator, so its content depends only on the seed and
/// its position in the manifest.
inline GenDataResult gen_data(const RunConfig& cfg) {
  cfg.validate();
  const auto& d = cfg.data;
  const fs::path dir = d.dir;
  ensure_dir(dir);
  nlohmann::json files = nlohmann::json::array();
  auto emit = [&](const MotionSequence& seq, const std::string& name) {
    write_motion(seq, dir / name);
    files.push_back({{"file", name}, {"labels", to_json(*seq.labels)}});
  };
  for (std::size_t ci = 0; ci < d.classes.size(); ++ci) {
    const auto cls = class_from_name(d.classes[ci]);
    for (std::size_t i = 0; i < d.per_class; ++i) {
      Rng rng = Rng::keyed(cfg.seed, (static_cast<std::uint64_t>(ci) << 32) | i);
      std::ostringstream name;
      name << d.classes[ci] << '_' << std::setw(4) << std::setfill('0') << i << ".fsmo";
      emit(gen_synthetic(rng, cls, d.frames, d.D, d.fps), name.str());
    }
  }
  for (std::size_t i = 0; i < d.transitions; ++i) {
    Rng rng = Rng::keyed(cfg.seed, (std::uint64_t{1} << 48) | i);
    const auto a = class_from_name(d.classes[rng.below(d.classes.size())]);
    const auto b = class_from_name(d.classes[rng.below(d.classes.size())]);
    auto first = gen_synthetic(rng, a, d.transition_frames, d.D, d.fps);
    auto second = gen_synthetic(rng, b, d.transition_frames, d.D, d.fps);
    std::ostringstream name;
    name << "splice_" << std::setw(4) << std::setfill('0') << i << ".fsmo";
    emit(splice(first, second, d.crossfade), name.str());
  }
  write_json({{"seed", cfg.seed}, {"D", d.D}, {"fps", d.fps}, {"files", files}}, dir / kManifest);
  return {dir, files.size()};
}

/// Loads every sequence listed in a gen-data manifest.
inline std::vector<MotionSequence> load_dataset(const fs::path& dir) {
  const fs::path manifest = dir / kManifest;
  if (!fs::exists(manifest))
    throw IoError("dataset not found: " + manifest.string() + " does not exist (run `flood gen-data` first)");
  std::ifstream in(manifest);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": invalid manifest: " + e.what());
  }
  std::vector<MotionSequence> out;
  for (const auto& f : j.at("files")) out.push_back(read_motion(dir / f.at("file").get<std::string>()));
  if (out.empty()) throw IoError(manifest.string() + " lists no sequences");
  return out;
}

/// Every *.fsmo file directly inside `dir`, in file-name order.
inline std::vector<MotionSequence> load_motion_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".fsmo") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::vector<MotionSequence> out;
  for (const auto& p : paths) out.push_back(read_motion(p));
  if (out.empty()) throw IoError("no .fsmo files in " + dir.string());
  return out;
}

// ---------------------------------------------------------------------------
// training

struct TrainResult {
  std::size_t first_step = 0;  ///< steps already done before this invocation
  std::size_t last_step = 0;
  double final_loss = 0;
  fs::path checkpoint;
};

inline void check_dims(const std::vector<MotionSequence>& data, std::size_t D, const fs::path& dir) {
  for (const auto& s : data)
    if (s.dims() != D)
      throw ShapeError("dataset " + dir.string() + " has D=" + std::to_string(s.dims()) + " but the config expects D=" +
                       std::to_string(D));
}

/// Trains the VAE until its step counter reaches vae.train.steps. With
/// `resume`, model, optimizer and generator state come from the existing
/// checkpoint and the CSV log is appended to.
inline TrainResult train_vae(const RunConfig& cfg, bool resume) {
  cfg.validate();
  auto data = load_dataset(cfg.data.dir);
  check_dims(data, cfg.data.D, cfg.data.dir);
  const fs::path out = cfg.out_dir;
  ensure_dir(out);
  const fs::path ck_path = out / kVaeCheckpoint, csv_path = out / "vae_metrics.csv";

  Rng init = Rng::keyed(cfg.seed, kStreamVaeInit);
  CausalVae<float> vae(cfg.vae, init);
  AdamState<float> adam;
  Rng rng = Rng::keyed(cfg.seed, kStreamVaeTrain);
  std::size_t done = 0;
  double reference = 0;
  if (resume) {
    if (!fs::exists(ck_path)) throw IoError("cannot resume: " + ck_path.string() + " does not exist");
    const auto ck = load_checkpoint(ck_path);
    vae = CausalVae<float>::from_checkpoint(ck);
    if (vae.config().D_in != cfg.vae.D_in || vae.config().hidden != cfg.vae.hidden || vae.config().kernel != cfg.vae.kernel)
      throw ConfigError("cannot resume: " + ck_path.string() + " was trained with a different VAE config");
    load_adam(ck, vae.params(), adam);
    done = ck.meta.value("step", std::size_t{0});
    rng = rng_from_json(ck.meta.at("rng"));
    reference = ck.meta.value("reference_loss", 0.0);
  }

  std::ofstream csv(csv_path, resume ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  if (!resume) csv << "step,loss,recon,commit_z,commit_e,grad_norm\n";
  csv << std::setprecision(9);

  auto opt = cfg.vae_options();
  opt.steps = cfg.vae_train.steps > done ? cfg.vae_train.steps - done : 0;
  opt.reference_loss = reference;
  TrainResult r{done, done, 0.0, ck_path};
  flood::train_vae(vae, adam, data, opt, rng, done, [&](const VaeStepLog& l) {
    if (reference <= 0 && l.loss > 0) reference = l.loss;
    csv << l.step << ',' << l.loss << ',' << l.recon << ',' << l.commit_z << ',' << l.commit_e << ',' << l.grad_norm << '\n';
    r.last_step = l.step;
    r.final_loss = l.loss;
  });
  vae.fit_latent_stats(data);
  auto ck = vae.to_checkpoint();
  store_adam(ck, vae.params(), adam);
  ck.meta["step"] = r.last_step;
  ck.meta["rng"] = snapshot_json(rng);
  ck.meta["seed"] = cfg.seed;
  ck.meta["reference_loss"] = reference;
  save_checkpoint(ck, ck_path);
  return r;
}

inline CausalVae<float> load_vae(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("VAE checkpoint not found: " + path.string() + " (run `flood train-vae` first)");
  return CausalVae<float>::from_checkpoint(load_checkpoint(path));
}

inline Denoiser<float> load_denoiser(const fs::path& path) {
  if (!fs::exists(path))
    throw IoError("denoiser checkpoint not found: " + path.string() + " (run `flood train-denoiser` first)");
  return Denoiser<float>::from_checkpoint(load_checkpoint(path));
}

/// Trains the denoiser on latents of the frozen VAE in out_dir. Same step
/// counter and resume rules as train_vae. The checkpoint records the training
/// schedule kind.
inline TrainResult train_denoiser(const RunConfig& cfg, bool resume) {
  cfg.validate();
  auto data = load_dataset(cfg.data.dir);
  check_dims(data, cfg.data.D, cfg.data.dir);
  const fs::path out = cfg.out_dir;
  ensure_dir(out);
  const auto vae = load_vae(out / kVaeCheckpoint);
  const fs::path ck_path = out / kDenoiserCheckpoint, csv_path = out / "denoiser_metrics.csv";

  Rng init = Rng::keyed(cfg.seed, kStreamDenoiserInit);
  Denoiser<float> model(cfg.denoiser, init);
  AdamState<float> adam;
  Rng rng = Rng::keyed(cfg.seed, kStreamDenoiserTrain);
  std::size_t done = 0;
  double reference = 0;
  if (resume) {
    if (!fs::exists(ck_path)) throw IoError("cannot resume: " + ck_path.string() + " does not exist");
    const auto ck = load_checkpoint(ck_path);
    model = Denoiser<float>::from_checkpoint(ck);
    if (nlohmann::json(model.config()) != nlohmann::json(cfg.denoiser))
      throw ConfigError("cannot resume: " + ck_path.string() + " was trained with a different denoiser config");
    if (ck.meta.value("schedule", std::string()) != to_string(cfg.schedule_kind))
      throw ConfigError("cannot resume: " + ck_path.string() + " was trained with schedule kind " +
                        ck.meta.value("schedule", std::string("?")));
    load_adam(ck, model.params(), adam);
    done = ck.meta.value("step", std::size_t{0});
    rng = rng_from_json(ck.meta.at("rng"));
    reference = ck.meta.value("reference_loss", 0.0);
  }
  const auto ds = LatentDataset::build(vae, cfg.denoiser, data);

  std::ofstream csv(csv_path, resume ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  if (!resume) csv << "step,loss,grad_norm,active_frames\n";
  csv << std::setprecision(9);

  auto opt = cfg.denoiser_options();
  opt.steps = cfg.denoiser_train.steps > done ? cfg.denoiser_train.steps - done : 0;
  opt.reference_loss = reference;
  TrainResult r{done, done, 0.0, ck_path};
  flood::train_denoiser(model, adam, ds, opt, rng, done, [&](const DenoiserStepLog& l) {
    if (reference <= 0 && l.loss > 0) reference = l.loss;
    csv << l.step << ',' << l.loss << ',' << l.grad_norm << ',' << l.active_frames << '\n';
    r.last_step = l.step;
    r.final_loss = l.loss;
  });
  auto ck = model.to_checkpoint();
  store_adam(ck, model.params(), adam);
  ck.meta["step"] = r.last_step;
  ck.meta["rng"] = snapshot_json(rng);
  ck.meta["seed"] = cfg.seed;
  ck.meta["reference_loss"] = reference;
  ck.meta["schedule"] = to_string(cfg.schedule_kind);
  ck.meta["n_s"] = cfg.n_s;
  save_checkpoint(ck, ck_path);
  return r;
}

// ---------------------------------------------------------------------------
// stream

struct StreamPaths {
  fs::path schedule;
  std::size_t frames = 0;
  fs::path out;
  std::optional<fs::path> latency;  ///< default: <out>.latency.json
  std::optional<fs::path> csv;      ///< per-frame channel traces
  std::optional<fs::path> vae;      ///< default: <out_dir>/vae.ck
  std::optional<fs::path> denoiser; ///< default: <out_dir>/denoiser.ck
};

inline void check_vocabulary(const PromptSchedule& s, const DenoiserConfig& cfg, const fs::path& where) {
  for (const auto& e : s.entries())
    try {
      cfg.prompt_id(e.prompt);
    } catch (const ConfigError&) {
      throw ConfigError(where.string() + ": prompt \"" + e.prompt + "\" at frame " + std::to_string(e.frame) +
                        " is not in the model vocabulary");
    }
}

inline void write_channel_csv(const MotionSequence& seq, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "frame,prompt";
  for (std::size_t c = 0; c < seq.dims(); ++c) out << ",c" << c;
  out << '\n' << std::setprecision(9);
  for (std::size_t i = 0; i < seq.n_frames(); ++i) {
    out << i << ',' << (seq.labels ? seq.labels->prompt_at(i) : "");
    for (float v : seq.frame(i)) out << ',' << v;
    out << '\n';
  }
}

inline StreamResult stream(const RunConfig& cfg, const StreamPaths& p) {
  cfg.validate();
  if (p.frames == 0) throw ConfigError("stream: --frames must be positive");
  const auto vae = load_vae(p.vae.value_or(fs::path(cfg.out_dir) / kVaeCheckpoint));
  const auto model = load_denoiser(p.denoiser.value_or(fs::path(cfg.out_dir) / kDenoiserCheckpoint));
  const auto schedule = read_prompt_schedule(p.schedule);
  check_vocabulary(schedule, model.config(), p.schedule);
  StreamEngine engine(model, vae, cfg.stream_options(), schedule.entries().front().prompt);
  auto res = run_stream(engine, schedule, p.frames, cfg.data.fps);
  if (p.out.has_parent_path()) ensure_dir(p.out.parent_path());
  write_motion(res.motion, p.out);
  auto lat = res.latency.to_json();
  lat["late_prompts"] = engine.late_prompts();
  write_json(lat, p.latency.value_or(fs::path(p.out.string() + ".latency.json")));
  if (p.csv) write_channel_csv(res.motion, *p.csv);
  return res;
}

// ---------------------------------------------------------------------------
// eval

struct EvalReport {
  double toy_fid = 0, noise_toy_fid = 0, pj = 0, auj = 0, iis_som = 0;
  std::size_t samples = 0, reference = 0;

  nlohmann::json to_json() const {
    return {{"toy_fid", toy_fid}, {"noise_toy_fid", noise_toy_fid}, {"pj", pj}, {"auj", auj},
            {"iis_som", iis_som}, {"samples", samples},             {"reference", reference}};
  }
};

/// toy-FID of the samples against the reference, mean peak jerk and area
/// under jerk over the samples, and S_som from those two. noise_toy_fid is the
/// toy-FID of unit Gaussian sequences shaped like the samples, as a scale.
inline EvalReport eval(const RunConfig& cfg, const std::vector<MotionSequence>& samples,
                       const std::vector<MotionSequence>& reference) {
  const std::size_t D = reference.front().dims();
  for (const auto* set : {&samples, &reference})
    for (const auto& s : *set)
      if (s.dims() != D)
        throw ShapeError("eval: sequences have D=" + std::to_string(s.dims()) + " and D=" + std::to_string(D));
  EvalReport r;
  r.samples = samples.size();
  r.reference = reference.size();
  r.toy_fid = toy_fid(samples, reference);
  Rng rng = Rng::keyed(cfg.seed, kStreamEvalNoise);
  std::vector<MotionSequence> noise;
  for (const auto& s : samples) noise.emplace_back(s.fps, Tensor::randn(rng, {s.n_frames(), D}));
  r.noise_toy_fid = toy_fid(noise, reference);
  for (const auto& s : samples) {
    const auto prof = jerk_profile(s);
    r.pj += peak_jerk(prof);
    r.auj += area_under_jerk(prof);
  }
  r.pj /= static_cast<double>(samples.size());
  r.auj /= static_cast<double>(samples.size());
  r.iis_som = flood::iis_som(r.toy_fid, r.pj);
  return r;
}

inline EvalReport eval(const RunConfig& cfg, const fs::path& samples_dir, const fs::path& reference_dir,
                       const std::optional<fs::path>& out) {
  auto r = eval(cfg, load_motion_dir(samples_dir), load_motion_dir(reference_dir));
  if (out) write_json(r.to_json(), *out);
  return r;
}

// ---------------------------------------------------------------------------
// bench-latency

/// With `untrained`, freshly initialised models from the config stand in for
/// checkpoints; per-step cost does not depend on the weights.
inline LatencyBench bench_latency(const RunConfig& cfg, std::size_t steps, bool untrained,
                                  const std::optional<fs::path>& out) {
  cfg.validate();
  std::optional<CausalVae<float>> vae;
  std::optional<Denoiser<float>> model;
  if (untrained) {
    Rng a = Rng::keyed(cfg.seed, kStreamVaeInit), b = Rng::keyed(cfg.seed, kStreamDenoiserInit);
    vae.emplace(cfg.vae, a);
    model.emplace(cfg.denoiser, b);
  } else {
    vae.emplace(load_vae(fs::path(cfg.out_dir) / kVaeCheckpoint));
    model.emplace(load_denoiser(fs::path(cfg.out_dir) / kDenoiserCheckpoint));
  }
  auto b = latency_bench(*model, *vae, cfg.stream_options(), steps, model->config().vocabulary.front());
  if (out) write_json(b.to_json(cfg.n_s), *out);
  return b;
}

} // namespace flood::cmd
