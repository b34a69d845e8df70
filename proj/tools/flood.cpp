// flood: data generation, training, streaming, evaluation and latency
// benchmarking for the streaming motion diffusion model.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O error,
// 1 anything else.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "flood/flood.hpp"

using namespace flood;
namespace fs = std::filesystem;

namespace {

// Values given on the command line; each one overrides the config file.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir, data_dir;
  // gen-data
  std::optional<std::size_t> per_class, frames, transitions;
  std::optional<std::vector<std::string>> classes;
  // training
  std::optional<std::size_t> steps, batch;
  std::optional<double> lr;
  std::optional<std::string> attn_mode, schedule_kind;
  std::optional<std::size_t> context_horizon;
  // streaming
  std::optional<double> n_s, dt, budget_ms;
};

template <typename T>
void opt(CLI::App* app, const std::string& name, std::optional<T>& slot, const std::string& help) {
  app->add_option_function<T>(name, [&slot](const T& v) { slot = v; }, help);
}

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Run configuration JSON file (defaults apply when omitted)")
      ->check(CLI::ExistingFile);
  opt(app, "--seed", o.seed, "Run seed; overrides the config file and FLOOD_SEED");
  opt(app, "--out-dir", o.out_dir, "Directory for checkpoints, logs and reports (config: out_dir)");
  opt(app, "--data-dir", o.data_dir, "Dataset directory (config: data.dir)");
}

RunConfig resolve(const Overrides& o, const std::string& cmd) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  apply_seed_env(c);
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.out_dir = *o.out_dir;
  if (o.data_dir) c.data.dir = *o.data_dir;
  if (o.per_class) c.data.per_class = *o.per_class;
  if (o.frames && cmd == "gen-data") c.data.frames = *o.frames;
  if (o.transitions) c.data.transitions = *o.transitions;
  if (o.classes) c.data.classes = *o.classes;
  auto& train = cmd == "train-vae" ? c.vae_train : c.denoiser_train;
  if (o.steps && (cmd == "train-vae" || cmd == "train-denoiser")) train.steps = *o.steps;
  if (o.batch) train.batch = *o.batch;
  if (o.lr) train.lr = *o.lr;
  if (o.attn_mode) c.denoiser.attn_mode = attn_mode_from_string(*o.attn_mode);
  if (o.schedule_kind) c.schedule_kind = schedule_kind_from_string(*o.schedule_kind);
  if (o.context_horizon) c.denoiser.context_horizon = *o.context_horizon;
  if (o.n_s) c.n_s = *o.n_s;
  if (o.dt) c.dt = *o.dt;
  if (o.budget_ms) c.budget_ms = *o.budget_ms;
  c.validate();
  return c;
}

int run(int argc, char** argv) {
  CLI::App app{"Streaming text-steerable motion synthesis with diffusion forcing"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  Overrides o;
  bool resume = false, untrained = false, print_config = false;
  std::size_t bench_steps = 2000;
  cmd::StreamPaths sp;
  std::string samples_dir, reference_dir, eval_out, bench_out;
  std::string stream_latency, stream_csv, stream_vae, stream_dn;
  app.add_flag("--print-config", print_config, "Print the resolved configuration as JSON before running");

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic motion dataset and manifest");
  add_common(gen, o);
  opt(gen, "--per-class", o.per_class, "Sequences per class (config: data.per_class)");
  opt(gen, "--frames", o.frames, "Frames per sequence (config: data.frames)");
  opt(gen, "--transitions", o.transitions, "Spliced two-class sequences (config: data.transitions)");
  gen->add_option_function<std::vector<std::string>>(
         "--classes", [&](const std::vector<std::string>& v) { o.classes = v; },
         "Comma-separated classes from walk,run,wave,turn,stand (config: data.classes)")
      ->delimiter(',')
      ->expected(0, -1);

  auto* tv = app.add_subcommand("train-vae", "Train the causal VAE; writes <out-dir>/vae.ck and vae_metrics.csv");
  auto* td = app.add_subcommand("train-denoiser",
                                "Train the denoiser on frozen VAE latents; writes <out-dir>/denoiser.ck and "
                                "denoiser_metrics.csv");
  for (auto* t : {tv, td}) {
    add_common(t, o);
    opt(t, "--steps", o.steps, "Total optimizer steps (config: <model>.train.steps)");
    opt(t, "--batch", o.batch, "Batch size (config: <model>.train.batch)");
    opt(t, "--lr", o.lr, "Adam learning rate (config: <model>.train.lr)");
    t->add_flag("--resume", resume, "Continue from the checkpoint in --out-dir up to --steps total steps");
  }
  opt(td, "--attn-mode", o.attn_mode, "bidirectional_window or causal_window (config: denoiser.attn_mode)");
  opt(td, "--schedule-kind", o.schedule_kind, "triangular, random or chunk (config: schedule.kind)");
  opt(td, "--context-horizon", o.context_horizon, "Committed latent frames visible as context (config: denoiser.context_horizon)");
  opt(td, "--n-s", o.n_s, "Schedule slope n_s (config: schedule.n_s)");

  auto* st = app.add_subcommand("stream", "Generate motion online under a prompt schedule");
  add_common(st, o);
  st->add_option("--schedule", sp.schedule, "Prompt schedule, JSON lines of {\"frame\", \"prompt\"}")
      ->required()
      ->check(CLI::ExistingFile);
  st->add_option("--frames", sp.frames, "Motion frames to emit")->required();
  st->add_option("--out", sp.out, "Output FSMO1 motion file")->required();
  st->add_option("--latency", stream_latency, "Latency report JSON (default: <out>.latency.json)");
  st->add_option("--csv", stream_csv, "Optional per-frame channel CSV for plotting");
  st->add_option("--vae", stream_vae, "VAE checkpoint (default: <out-dir>/vae.ck)");
  st->add_option("--denoiser", stream_dn, "Denoiser checkpoint (default: <out-dir>/denoiser.ck)");
  opt(st, "--n-s", o.n_s, "Schedule slope n_s (config: schedule.n_s)");
  opt(st, "--dt", o.dt, "Schedule time per step (config: schedule.dt)");
  opt(st, "--budget-ms", o.budget_ms, "Per-step latency budget in ms (config: stream.budget_ms)");

  auto* ev = app.add_subcommand("eval", "toy-FID, peak jerk, area under jerk and S_som of samples vs a reference");
  add_common(ev, o);
  ev->add_option("--samples", samples_dir, "Directory of generated .fsmo files")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--reference", reference_dir, "Directory of reference .fsmo files")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", eval_out, "Report JSON path (default: print to stdout only)");

  auto* bl = app.add_subcommand("bench-latency", "Per-step wall time of the streaming loop");
  add_common(bl, o);
  bl->add_option("--steps", bench_steps, "Measured steps (the second run uses twice as many)")->capture_default_str();
  bl->add_flag("--untrained", untrained, "Use freshly initialised models instead of checkpoints");
  bl->add_option("--out", bench_out, "Report JSON path (default: print to stdout only)");
  opt(bl, "--n-s", o.n_s, "Schedule slope n_s (config: schedule.n_s)");
  opt(bl, "--dt", o.dt, "Schedule time per step (config: schedule.dt)");
  opt(bl, "--budget-ms", o.budget_ms, "Per-step latency budget in ms (config: stream.budget_ms)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  const RunConfig cfg = resolve(o, name);
  if (print_config) std::cout << to_json(cfg).dump(2) << '\n';

  if (name == "gen-data") {
    auto r = cmd::gen_data(cfg);
    std::cout << "wrote " << r.files << " sequences to " << r.dir.string() << '\n';
  } else if (name == "train-vae" || name == "train-denoiser") {
    auto r = name == "train-vae" ? cmd::train_vae(cfg, resume) : cmd::train_denoiser(cfg, resume);
    std::cout << name << ": steps " << r.first_step << " -> " << r.last_step << ", final loss " << r.final_loss
              << ", checkpoint " << r.checkpoint.string() << '\n';
  } else if (name == "stream") {
    if (!stream_latency.empty()) sp.latency = stream_latency;
    if (!stream_csv.empty()) sp.csv = stream_csv;
    if (!stream_vae.empty()) sp.vae = stream_vae;
    if (!stream_dn.empty()) sp.denoiser = stream_dn;
    auto r = cmd::stream(cfg, sp);
    std::cout << "wrote " << r.motion.n_frames() << " frames to " << sp.out.string() << "; p99 step "
              << r.latency.p99_ms << " ms (budget " << r.latency.budget_ms << " ms, " << r.latency.violations
              << " violations)\n";
  } else if (name == "eval") {
    std::optional<fs::path> out;
    if (!eval_out.empty()) out = eval_out;
    std::cout << cmd::eval(cfg, samples_dir, reference_dir, out).to_json().dump(2) << '\n';
  } else if (name == "bench-latency") {
    std::optional<fs::path> out;
    if (!bench_out.empty()) out = bench_out;
    std::cout << cmd::bench_latency(cfg, bench_steps, untrained, out).to_json(cfg.n_s).dump(2) << '\n';
  }
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
