#pragma once

// Per-step latency measurement of the streaming engine.

#include <cmath>
#include <string>

#include <json.hpp>

#include "flood/stream.hpp"

namespace flood {

struct LatencyBench {
  LatencyReport base;     ///< `steps` steps
  LatencyReport doubled;  ///< 2 * `steps` steps, fresh engine
  std::size_t warmup_steps = 0;

  /// p50 of the doubled run over p50 of the base run.
  double p50_ratio() const { return base.p50_ms > 0 ? doubled.p50_ms / base.p50_ms : 0.0; }

  /// True if every post-warm-up step denoised the same number of frames and
  /// that number is n_s - 1 or n_s (rounded outward for fractional n_s).
  bool denoised_constant(double n_s) const {
    for (const auto* r : {&base, &doubled}) {
      if (r->denoised.size() != 1) return false;
      const auto c = static_cast<double>(r->denoised.begin()->first);
      if (c < std::floor(n_s) - 1 || c > std::ceil(n_s)) return false;
    }
    return true;
  }

  bool window_sizes_in_band(double n_s) const {
    for (const auto* r : {&base, &doubled})
      for (auto [w, count] : r->window_sizes)
        if (static_cast<double>(w) < std::floor(n_s) - 1 || static_cast<double>(w) > std::ceil(n_s)) return false;
    return true;
  }

  nlohmann::json to_json(double n_s) const {
    return {{"steps", base.to_json()},
            {"doubled", doubled.to_json()},
            {"warmup_steps", warmup_steps},
            {"p50_ratio", p50_ratio()},
            {"denoised_constant", denoised_constant(n_s)},
            {"window_sizes_in_band", window_sizes_in_band(n_s)}};
  }
};

/// Runs the engine for `steps` and then, on a fresh engine, for 2 * `steps`
/// steps under a constant prompt. Statistics skip the steps before the first
/// commit, while the window is still filling.
inline LatencyBench latency_bench(const Denoiser<float>& model, const CausalVae<float>& vae, const StreamOptions& opt,
                                  std::size_t steps, const std::string& prompt) {
  if (steps == 0) throw ConfigError("bench-latency: steps must be positive");
  LatencyBench b;
  b.warmup_steps = static_cast<std::size_t>(std::ceil(1.0 / opt.dt - 1e-9));
  auto run = [&](std::size_t n) {
    StreamEngine e(model, vae, opt, prompt);
    for (std::size_t i = 0; i < b.warmup_steps + n; ++i) e.step();
    return e.latency_report(b.warmup_steps);
  };
  b.base = run(steps);
  b.doubled = run(2 * steps);
  return b;
}

} // namespace flood
