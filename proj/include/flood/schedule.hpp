#pragma once

// Per-frame noise schedules for diffusion forcing.
//
// Under the lower-triangular schedule frame k has clean-signal weight
//   alpha_t^k = clamp(t - k / n_s, 0, 1),   beta_t^k = 1 - alpha_t^k
// so at any global time t the frames split into a fixed past (alpha = 1), an
// active window (0 < alpha < 1) of at most ceil(n_s) frames, and future noise
// (alpha = 0). Frame k enters the window at t = k / n_s and commits at
// t = 1 + k / n_s.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "flood/error.hpp"
#include "flood/rng.hpp"
#include "flood/tensor.hpp"

namespace flood {

enum class ScheduleKind { triangular, random, chunk };

inline std::string to_string(ScheduleKind k) {
  switch (k) {
  case ScheduleKind::triangular: return "triangular";
  case ScheduleKind::random: return "random";
  case ScheduleKind::chunk: return "chunk";
  }
  return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "triangular") return ScheduleKind::triangular;
  if (s == "random") return ScheduleKind::random;
  if (s == "chunk") return ScheduleKind::chunk;
  throw ConfigError("unknown schedule kind \"" + s + "\" (expected triangular, random or chunk)");
}

struct ScheduleParams {
  double n_s = 4.0;
  std::size_t K = 1;
  ScheduleKind kind = ScheduleKind::triangular;

  void validate() const {
    if (!(n_s > 0) || !std::isfinite(n_s)) throw ConfigError("schedule: n_s must be positive");
    if (K < 1) throw ConfigError("schedule: K must be >= 1");
  }
};

struct AlphaBetaVector {
  std::vector<double> alpha;
  std::vector<double> beta;

  std::size_t size() const { return alpha.size(); }

  static AlphaBetaVector from_alpha(std::vector<double> alpha) {
    AlphaBetaVector ab;
    ab.beta.resize(alpha.size());
    for (std::size_t k = 0; k < alpha.size(); ++k) ab.beta[k] = 1.0 - alpha[k];
    ab.alpha = std::move(alpha);
    return ab;
  }
};

/// Frames [0, m) are fixed past, [m, n) active, [n, K) future noise.
struct RegionPartition {
  std::size_t m = 0;
  std::size_t n = 0;

  std::size_t active_size() const { return n - m; }
  bool fixed(std::size_t k) const { return k < m; }
  bool active(std::size_t k) const { return k >= m && k < n; }
  bool future(std::size_t k) const { return k >= n; }
  friend bool operator==(const RegionPartition&, const RegionPartition&) = default;
};

/// Unchecked clamp schedule for any frame index, including the unbounded
/// virtual indices of a stream.
inline double triangular_alpha(double t, std::size_t k, double n_s) {
  return std::clamp(t - static_cast<double>(k) / n_s, 0.0, 1.0);
}

inline double alpha_at(const ScheduleParams& p, double t, std::size_t k) {
  if (p.kind != ScheduleKind::triangular) throw ConfigError("alpha_at: only defined for the triangular schedule");
  if (k >= p.K) throw ConfigError("alpha_at: frame " + std::to_string(k) + " out of range [0, " + std::to_string(p.K) + ")");
  return triangular_alpha(t, k, p.n_s);
}

inline double beta_at(const ScheduleParams& p, double t, std::size_t k) { return 1.0 - alpha_at(p, t, k); }

inline AlphaBetaVector alpha_beta(const ScheduleParams& p, double t) {
  std::vector<double> a(p.K);
  for (std::size_t k = 0; k < p.K; ++k) a[k] = alpha_at(p, t, k);
  return AlphaBetaVector::from_alpha(std::move(a));
}

namespace detail {

// Smallest k with pred(alpha(k)) false, for a predicate that holds on a
// prefix. Starts from the closed-form guess and walks to the exact boundary so
// the result agrees with elementwise thresholding under rounding.
template <typename Pred>
std::size_t first_failing(double t, double n_s, double guess, Pred pred) {
  std::size_t k = guess <= 0 ? 0 : static_cast<std::size_t>(std::floor(guess));
  while (k > 0 && !pred(triangular_alpha(t, k - 1, n_s))) --k;
  while (pred(triangular_alpha(t, k, n_s))) ++k;
  return k;
}

} // namespace detail

/// Fixed-past watermark m(t): first frame with alpha < 1. Unbounded index.
inline std::size_t committed_end(double t, double n_s) {
  return detail::first_failing(t, n_s, n_s * (t - 1.0), [](double a) { return a >= 1.0; });
}

/// First frame with alpha == 0. Unbounded index.
inline std::size_t noise_start(double t, double n_s) {
  return detail::first_failing(t, n_s, n_s * t, [](double a) { return a > 0.0; });
}

inline RegionPartition partition(const ScheduleParams& p, double t) {
  if (p.kind != ScheduleKind::triangular) throw ConfigError("partition: only defined for the triangular schedule");
  return {std::min(committed_end(t, p.n_s), p.K), std::min(noise_start(t, p.n_s), p.K)};
}

/// Frames whose alpha changes over [t, t_next]: from m(t) up to n(t_next).
/// These are the frames one solver step updates, including a frame that sits
/// at alpha = 0 at t and starts its ramp during the step.
inline RegionPartition step_window(double t, double t_next, double n_s) {
  return {committed_end(t, n_s), noise_start(t_next, n_s)};
}

/// x[k] = alpha[k] * z[k] + beta[k] * eps[k] for z, eps of shape [K x C].
template <typename T>
BasicTensor<T> corrupt(const BasicTensor<T>& z, const AlphaBetaVector& ab, const BasicTensor<T>& eps) {
  if (z.shape() != eps.shape())
    throw ShapeError("corrupt: latent " + shape_str(z.shape()) + " vs noise " + shape_str(eps.shape()));
  if (z.rows() != ab.size())
    throw ShapeError("corrupt: " + std::to_string(z.rows()) + " frames but " + std::to_string(ab.size()) + " alphas");
  BasicTensor<T> x(z.shape());
  const std::size_t c = z.cols();
  for (std::size_t k = 0; k < z.rows(); ++k)
    for (std::size_t j = 0; j < c; ++j)
      x[k * c + j] = static_cast<T>(ab.alpha[k] * z[k * c + j] + ab.beta[k] * eps[k * c + j]);
  return x;
}

inline double max_training_time(const ScheduleParams& p) {
  return 1.0 + static_cast<double>(p.K - 1) / p.n_s;
}

/// One training draw. `t` is set only for the triangular kind; the random and
/// chunk ablations have no global time and treat every frame as active.
struct TrainingTime {
  std::optional<double> t;
  AlphaBetaVector ab;
  RegionPartition part;
};

inline std::vector<TrainingTime> sample_training_times(const ScheduleParams& p, Rng& rng, std::size_t batch) {
  p.validate();
  std::vector<TrainingTime> out(batch);
  for (auto& s : out) {
    switch (p.kind) {
    case ScheduleKind::triangular: {
      const double t = rng.uniform(0.0, max_training_time(p));
      s.t = t;
      s.ab = alpha_beta(p, t);
      s.part = partition(p, t);
      break;
    }
    case ScheduleKind::random: {
      std::vector<double> a(p.K);
      for (auto& v : a) v = rng.uniform();
      s.ab = AlphaBetaVector::from_alpha(std::move(a));
      s.part = {0, p.K};
      break;
    }
    case ScheduleKind::chunk: {
      s.ab = AlphaBetaVector::from_alpha(std::vector<double>(p.K, rng.uniform()));
      s.part = {0, p.K};
      break;
    }
    }
  }
  return out;
}

struct Advance {
  double t;
  std::size_t newly_committed;
};

inline Advance advance(const ScheduleParams& p, double t, double dt) {
  if (!(dt > 0)) throw ConfigError("advance: step must be positive, got " + std::to_string(dt));
  const double t2 = t + dt;
  return {t2, std::min(committed_end(t2, p.n_s), p.K) - std::min(committed_end(t, p.n_s), p.K)};
}

} // namespace flood
