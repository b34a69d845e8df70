#pragma once

// Online generation: a sliding window of latent frames denoised one Euler
// step at a time under the triangular schedule, committed frames decoded
// incrementally into motion.
//
// Frame k's initial noise comes from Rng::keyed(seed, k), so any replay that
// indexes noise by frame position sees the same values.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/denoiser.hpp"
#include "flood/schedule.hpp"
#include "flood/spsc.hpp"
#include "flood/vae.hpp"

namespace flood {

struct StreamOptions {
  double n_s = 4.0;
  double dt = 0.05;
  std::uint64_t seed = 0;
  double budget_ms = 33.0;
  std::size_t publish_capacity = 0;  ///< SPSC queue size in motion frames; 0 disables it

  void validate() const {
    if (!(n_s > 0) || !std::isfinite(n_s)) throw ConfigError("stream: n_s must be positive");
    if (!(dt > 0) || !std::isfinite(dt)) throw ConfigError("stream: dt must be positive, got " + std::to_string(dt));
    if (!(budget_ms > 0)) throw ConfigError("stream: frame budget must be positive");
  }
};

/// Unit-variance noise for latent frame k.
inline std::vector<float> positional_noise(std::uint64_t seed, std::size_t k) {
  Rng r = Rng::keyed(seed, k);
  std::vector<float> e(kLatentDim);
  for (auto& v : e) v = static_cast<float>(r.normal());
  return e;
}

struct StepReport {
  std::vector<std::vector<float>> committed;  ///< motion frames emitted by this step
  std::vector<std::vector<float>> latents;     ///< normalised latent frames committed by this step
  double wall_ms = 0;
  std::size_t window_size = 0;  ///< frames with 0 < alpha < 1 at the step's start time
  std::size_t denoised = 0;     ///< frames the Euler update touched
};

struct LatencyReport {
  double p50_ms = 0, p99_ms = 0, max_ms = 0, budget_ms = 0;
  std::size_t violations = 0;
  std::size_t steps = 0;
  std::size_t max_frames_in_flight = 0;
  std::size_t macs_per_step = 0;
  std::map<std::size_t, std::size_t> window_sizes;  ///< histogram over steps
  std::map<std::size_t, std::size_t> denoised;      ///< histogram over steps

  nlohmann::json to_json() const {
    auto hist = [](const std::map<std::size_t, std::size_t>& h) {
      nlohmann::json j = nlohmann::json::object();
      for (auto [k, v] : h) j[std::to_string(k)] = v;
      return j;
    };
    return {{"p50_ms", p50_ms},
            {"p99_ms", p99_ms},
            {"max_ms", max_ms},
            {"budget_ms", budget_ms},
            {"violations", violations},
            {"steps", steps},
            {"max_frames_in_flight", max_frames_in_flight},
            {"macs_per_step", macs_per_step},
            {"window_sizes", hist(window_sizes)},
            {"denoised_per_step", hist(denoised)}};
  }
};

/// Nearest-rank percentile, q in [0, 1].
inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

class StreamEngine {
public:
  StreamEngine(const Denoiser<float>& model, const CausalVae<float>& vae, const StreamOptions& opt,
               const std::string& initial_prompt)
      : model_(&model), vae_(&vae), opt_(opt), decoder_(vae.decoder()) {
    opt_.validate();
    if (vae.config().latent_dim != kLatentDim) throw ConfigError("stream: incompatible VAE latent size");
    model.config().prompt_id(initial_prompt);
    schedule_ = PromptSchedule::single(initial_prompt);
    capacity_ = model.config().context_horizon + static_cast<std::size_t>(std::ceil(opt_.n_s)) + 2;
    ring_.assign(capacity_ * kLatentDim, 0.0f);
    if (opt_.publish_capacity > 0) publish_ = std::make_unique<SpscRows>(opt_.publish_capacity, vae.config().D_in);
  }

  double t() const { return time_at(step_); }
  std::size_t steps_taken() const { return step_; }
  std::size_t watermark() const { return watermark_.load(std::memory_order_acquire); }
  std::size_t committed_motion_frames() const { return watermark() * kDownsample; }
  std::size_t ring_capacity() const { return capacity_; }
  const PromptSchedule& schedule() const { return schedule_; }
  std::size_t late_prompts() const { return late_prompts_; }
  const std::vector<double>& step_times_ms() const { return step_ms_; }

  /// Requests `prompt` from motion frame `frame` onward. Callable from one
  /// control thread concurrently with step(); applied at the next step
  /// boundary. Throws for unknown prompts and committed frames. A request
  /// overtaken by the watermark before it is applied takes effect at the
  /// watermark instead and is counted in late_prompts().
  void push_prompt(const std::string& prompt, std::size_t frame) {
    model_->config().prompt_id(prompt);
    const std::size_t w = watermark();
    if (frame / kDownsample < w)
      throw ConfigError("cannot change prompt at motion frame " + std::to_string(frame) + ": frames before " +
                        std::to_string(w * kDownsample) + " are committed");
    std::lock_guard lock(queue_mu_);
    queue_.push_back({frame, prompt});
  }

  /// Consumer side of the committed-frame queue (needs publish_capacity > 0).
  bool poll(std::vector<float>& frame) {
    if (!publish_) throw ConfigError("stream: publishing queue is disabled");
    return publish_->try_pop(frame);
  }

  /// One Euler step of the window, then commit and decode.
  StepReport step() {
    const auto start = std::chrono::steady_clock::now();
    drain_prompts();
    const std::size_t H = model_->config().context_horizon;
    const double t0 = time_at(step_), t1 = time_at(step_ + 1);
    const auto win = step_window(t0, t1, opt_.n_s);
    const std::size_t begin = win.m - std::min(win.m, H);
    while (allocated_ < win.n) {
      auto e = positional_noise(opt_.seed, allocated_);
      std::copy(e.begin(), e.end(), slot(allocated_));
      ++allocated_;
    }

    StepReport rep;
    rep.window_size = noise_start(t0, opt_.n_s) - committed_end(t0, opt_.n_s);
    rep.denoised = win.active_size();
    if (win.active_size() > 0) {
      WindowInput<float> in;
      in.x = Tensor({win.n - begin, kLatentDim});
      for (std::size_t k = begin; k < win.n; ++k) {
        std::copy_n(slot(k), kLatentDim, in.x.data().begin() + static_cast<long>((k - begin) * kLatentDim));
        in.alpha.push_back(triangular_alpha(t0, k, opt_.n_s));
      }
      in.mask = build_attention_mask(win, begin, latent_prompt_ids(schedule_, model_->config(), begin, win.n),
                                     model_->config().vocabulary.size(), model_->config().attn_mode);
      Tensor v;
      {
        ag::NoGradGuard ng;
        v = model_->forward({in}).value();
      }
      for (std::size_t k = win.m; k < win.n; ++k) {
        const double da = triangular_alpha(t1, k, opt_.n_s) - triangular_alpha(t0, k, opt_.n_s);
        float* z = slot(k);
        for (std::size_t c = 0; c < kLatentDim; ++c) z[c] = z[c] + static_cast<float>(v.at(k - win.m, c) * da);
      }
    }
    ++step_;

    const std::size_t m_new = committed_end(t1, opt_.n_s);
    for (std::size_t k = watermark(); k < m_new; ++k) {
      Tensor zk({1, kLatentDim}, std::vector<float>(slot(k), slot(k) + kLatentDim));
      const auto raw = vae_->denormalize(zk);
      for (auto& row : decoder_.push(raw.data())) {
        if (publish_ && !publish_->try_push(row))
          throw Error("stream: committed-frame queue overflow; the consumer is not polling");
        rep.committed.push_back(std::move(row));
      }
      rep.latents.emplace_back(slot(k), slot(k) + kLatentDim);
    }
    watermark_.store(std::max(watermark(), m_new), std::memory_order_release);

    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    step_ms_.push_back(rep.wall_ms);
    step_window_.push_back(rep.window_size);
    step_denoised_.push_back(rep.denoised);
    if (rep.denoised > 0) {
      in_flight_mask_ = build_attention_mask(win, begin, latent_prompt_ids(schedule_, model_->config(), begin, win.n),
                                             model_->config().vocabulary.size(), model_->config().attn_mode);
    }
    return rep;
  }

  /// Multiply-accumulates of the most recent non-empty step.
  std::size_t last_step_macs() const { return in_flight_mask_ ? model_->macs({*in_flight_mask_}) : 0; }

  /// Statistics over every step after the first `skip_steps`.
  LatencyReport latency_report(std::size_t skip_steps = 0) const {
    LatencyReport r;
    r.budget_ms = opt_.budget_ms;
    const auto skip = static_cast<long>(std::min(skip_steps, step_ms_.size()));
    std::vector<double> ms(step_ms_.begin() + skip, step_ms_.end());
    r.steps = ms.size();
    r.p50_ms = percentile(ms, 0.5);
    r.p99_ms = percentile(ms, 0.99);
    r.max_ms = ms.empty() ? 0.0 : *std::max_element(ms.begin(), ms.end());
    r.violations = static_cast<std::size_t>(std::count_if(ms.begin(), ms.end(), [&](double x) { return x > opt_.budget_ms; }));
    for (auto i = static_cast<std::size_t>(skip); i < step_ms_.size(); ++i) {
      r.window_sizes[step_window_[i]]++;
      r.denoised[step_denoised_[i]]++;
      r.max_frames_in_flight = std::max(r.max_frames_in_flight, step_denoised_[i]);
    }
    r.macs_per_step = last_step_macs();
    return r;
  }

private:
  struct PendingPrompt {
    std::size_t frame;
    std::string prompt;
  };

  double time_at(std::size_t step) const { return static_cast<double>(step) * opt_.dt; }
  float* slot(std::size_t k) { return ring_.data() + (k % capacity_) * kLatentDim; }

  void drain_prompts() {
    std::vector<PendingPrompt> q;
    {
      std::lock_guard lock(queue_mu_);
      q.swap(queue_);
    }
    for (auto& p : q) {
      std::size_t frame = p.frame;
      const std::size_t floor_frame = watermark() * kDownsample;
      if (frame < floor_frame) {
        frame = floor_frame;
        ++late_prompts_;
      }
      schedule_.push(frame, p.prompt);
    }
  }

  const Denoiser<float>* model_;
  const CausalVae<float>* vae_;
  StreamOptions opt_;
  typename CausalVae<float>::Decoder decoder_;
  PromptSchedule schedule_;
  std::size_t capacity_ = 0;
  std::vector<float> ring_;
  std::size_t allocated_ = 0;
  std::size_t step_ = 0;
  std::atomic<std::size_t> watermark_{0};
  std::mutex queue_mu_;
  std::vector<PendingPrompt> queue_;
  std::size_t late_prompts_ = 0;
  std::unique_ptr<SpscRows> publish_;
  std::vector<double> step_ms_;
  std::vector<std::size_t> step_window_, step_denoised_;
  std::optional<AttentionMask> in_flight_mask_;
};

struct StreamResult {
  MotionSequence motion;
  LatencyReport latency;
  Tensor latents;  ///< normalised committed latent frames, [n x 4]
};

/// Queues every schedule entry up front, then steps until `n_frames` motion
/// frames have been emitted. The returned motion carries the schedule as
/// labels.
inline StreamResult run_stream(StreamEngine& engine, const PromptSchedule& schedule, std::size_t n_frames,
                               double fps = 20.0) {
  schedule.validate();
  if (n_frames == 0) throw ConfigError("run_stream: n_frames must be positive");
  for (const auto& e : schedule.entries()) engine.push_prompt(e.prompt, e.frame);
  std::vector<std::vector<float>> frames;
  std::vector<float> latents;
  while (frames.size() < n_frames) {
    auto rep = engine.step();
    for (auto& f : rep.committed) frames.push_back(std::move(f));
    for (auto& z : rep.latents) latents.insert(latents.end(), z.begin(), z.end());
  }
  frames.resize(n_frames);
  const std::size_t D = frames.front().size();
  Tensor out({n_frames, D});
  for (std::size_t i = 0; i < n_frames; ++i) std::copy(frames[i].begin(), frames[i].end(), out.data().begin() + static_cast<long>(i * D));
  const std::size_t nl = latents.size() / kLatentDim;
  return {MotionSequence(fps, std::move(out), schedule), engine.latency_report(), Tensor({nl, kLatentDim}, std::move(latents))};
}

} // namespace flood
