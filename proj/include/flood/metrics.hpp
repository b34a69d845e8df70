#pragma once

// Smoothness and distribution metrics over motion sequences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flood/error.hpp"
#include "flood/motion.hpp"

namespace flood {

// ---------------------------------------------------------------------------
// Jerk

/// Per-frame jerk magnitude. Entry i is the L2 norm across channels of the
/// third forward difference x[i+3] - 3x[i+2] + 3x[i+1] - x[i], scaled by fps^3.
struct JerkProfile {
  std::vector<double> magnitude;
  double fps = 20.0;
};

/// Raw-frame form; accepts any positive rate so unit-rate calibration inputs
/// can be evaluated without constructing a MotionSequence.
inline JerkProfile jerk_profile(const Tensor& frames, double fps) {
  if (frames.rank() != 2) throw ShapeError("jerk_profile: frames must be [n x D], got " + shape_str(frames.shape()));
  if (!(fps > 0)) throw ConfigError("jerk_profile: fps must be positive");
  const std::size_t n = frames.dim(0), D = frames.dim(1);
  if (n < 4) throw ConfigError("jerk_profile: need at least 4 frames, got " + std::to_string(n));
  const double f3 = fps * fps * fps;
  JerkProfile p;
  p.fps = fps;
  p.magnitude.resize(n - 3);
  for (std::size_t i = 0; i + 3 < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < D; ++c) {
      const double j = (static_cast<double>(frames.at(i + 3, c)) - 3.0 * frames.at(i + 2, c) +
                        3.0 * frames.at(i + 1, c) - frames.at(i, c)) *
                       f3;
      s += j * j;
    }
    p.magnitude[i] = std::sqrt(s);
  }
  return p;
}

inline JerkProfile jerk_profile(const MotionSequence& seq) { return jerk_profile(seq.frames, seq.fps); }

inline double peak_jerk(const JerkProfile& p) {
  if (p.magnitude.empty()) throw ConfigError("peak_jerk: empty profile");
  return *std::max_element(p.magnitude.begin(), p.magnitude.end());
}

/// Rectangle-rule time integral: sum of magnitudes / fps.
inline double area_under_jerk(const JerkProfile& p) {
  if (p.magnitude.empty()) throw ConfigError("area_under_jerk: empty profile");
  double s = 0.0;
  for (double m : p.magnitude) s += m;
  return s / p.fps;
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussians

inline constexpr double kEigenFloor = 1e-6;

struct GaussianStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

/// Mean and unbiased covariance of row vectors, with the covariance eigenvalues
/// floored at kEigenFloor.
inline GaussianStats fit_gaussian(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw ConfigError("fit_gaussian: need at least two samples");
  const std::size_t d = rows.front().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw ShapeError("fit_gaussian: ragged feature rows");
    for (std::size_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  GaussianStats g;
  g.mean = X.colwise().mean().transpose();
  Eigen::MatrixXd C = X.rowwise() - g.mean.transpose();
  g.cov = (C.transpose() * C) / static_cast<double>(rows.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.cov);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(kEigenFloor);
  g.cov = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return g;
}

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-9 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -tol) throw NumericError(std::string(what) + " is not positive semi-definite");
  return es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

} // namespace detail

/// ||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2)). The trace of the
/// product's square root is taken through the symmetric form
/// S_p^(1/2) S_q S_p^(1/2), which has the same eigenvalues.
inline double frechet_distance(const GaussianStats& p, const GaussianStats& q) {
  if (p.mean.size() != q.mean.size()) throw ShapeError("frechet_distance: dimension mismatch");
  const Eigen::MatrixXd sp = detail::psd_sqrt(p.cov, "covariance p");
  detail::psd_sqrt(q.cov, "covariance q");
  const Eigen::MatrixXd mid = sp * q.cov * sp;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mid + mid.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double d2 = (p.mean - q.mean).squaredNorm();
  return std::max(0.0, d2 + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt);
}

// ---------------------------------------------------------------------------
// Spectral features

/// Hann-windowed, mean-removed copy of frames [begin, end), row-major [n x D].
inline std::vector<double> windowed_block(const MotionSequence& seq, std::size_t begin, std::size_t end) {
  const std::size_t n = end - begin, D = seq.dims();
  std::vector<double> out(n * D);
  for (std::size_t c = 0; c < D; ++c) {
    double mean = 0.0;
    for (std::size_t i = begin; i < end; ++i) mean += seq.frames.at(i, c);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double w = n > 1 ? 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1)) : 1.0;
      out[i * D + c] = w * (seq.frames.at(begin + i, c) - mean);
    }
  }
  return out;
}

/// Power at frequency f (Hz) summed over channels of a windowed block.
inline double spectral_power(const std::vector<double>& block, std::size_t D, double fps, double f) {
  const std::size_t n = block.size() / D;
  std::vector<double> re(D, 0.0), im(D, 0.0);
  const double step = 2.0 * std::numbers::pi * f / fps;
  for (std::size_t i = 0; i < n; ++i) {
    const double cr = std::cos(step * static_cast<double>(i)), ci = -std::sin(step * static_cast<double>(i));
    const double* row = block.data() + i * D;
    for (std::size_t c = 0; c < D; ++c) {
      re[c] += row[c] * cr;
      im[c] += row[c] * ci;
    }
  }
  double total = 0.0;
  for (std::size_t c = 0; c < D; ++c) total += re[c] * re[c] + im[c] * im[c];
  return total;
}

/// Mean over channels of the per-channel standard deviation.
inline double mean_amplitude(const MotionSequence& seq, std::size_t begin = 0, std::size_t end = 0) {
  if (end == 0) end = seq.n_frames();
  const std::size_t n = end - begin, D = seq.dims();
  double total = 0.0;
  for (std::size_t c = 0; c < D; ++c) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = begin; i < end; ++i) m += seq.frames.at(i, c);
    m /= static_cast<double>(n);
    for (std::size_t i = begin; i < end; ++i) s += (seq.frames.at(i, c) - m) * (seq.frames.at(i, c) - m);
    total += std::sqrt(s / static_cast<double>(n));
  }
  return total / static_cast<double>(D);
}

inline constexpr double kFreqGridLo = 0.1;
inline constexpr double kFreqGridHi = 3.0;
inline constexpr double kFreqGridStep = 0.01;

/// Windows quieter than this have no dominant frequency (reported as 0 Hz).
inline constexpr double kStillAmplitude = 0.05;

/// Frequency (Hz) of peak spectral power on a 0.01 Hz grid over [0.1, 3].
inline double dominant_frequency(const MotionSequence& seq, std::size_t begin = 0, std::size_t end = 0) {
  if (end == 0) end = seq.n_frames();
  if (end <= begin + 1) throw ConfigError("dominant_frequency: window too short");
  if (mean_amplitude(seq, begin, end) < kStillAmplitude) return 0.0;
  const auto block = windowed_block(seq, begin, end);
  double best_f = kFreqGridLo, best_p = -1.0;
  const int steps = static_cast<int>(std::lround((kFreqGridHi - kFreqGridLo) / kFreqGridStep));
  for (int s = 0; s <= steps; ++s) {
    const double f = kFreqGridLo + s * kFreqGridStep;
    const double p = spectral_power(block, seq.dims(), seq.fps, f);
    if (p > best_p) {
      best_p = p;
      best_f = f;
    }
  }
  return best_f;
}

// ---------------------------------------------------------------------------
// Toy FID

inline constexpr std::size_t kChannelGroups = 4;
inline constexpr std::array<double, 5> kBandEdgesHz = {0.125, 0.375, 0.625, 0.875, 1.25};

/// Hand-made motion descriptor: channel means and standard deviations pooled
/// over 4 contiguous channel groups, plus the fraction of spectral power in
/// each of 4 bands centred on 0.25, 0.5, 0.75 and 1.0 Hz.
inline std::vector<double> toy_features(const MotionSequence& seq) {
  const std::size_t n = seq.n_frames(), D = seq.dims();
  if (n < 8) throw ConfigError("toy_features: need at least 8 frames");
  std::vector<double> mean(D, 0.0), sd(D, 0.0);
  for (std::size_t c = 0; c < D; ++c) {
    for (std::size_t i = 0; i < n; ++i) mean[c] += seq.frames.at(i, c);
    mean[c] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sd[c] += (seq.frames.at(i, c) - mean[c]) * (seq.frames.at(i, c) - mean[c]);
    sd[c] = std::sqrt(sd[c] / static_cast<double>(n));
  }
  std::vector<double> f;
  const std::size_t groups = std::min(kChannelGroups, D);
  for (auto* src : {&mean, &sd})
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t lo = g * D / groups, hi = (g + 1) * D / groups;
      double s = 0.0;
      for (std::size_t c = lo; c < hi; ++c) s += (*src)[c];
      f.push_back(s / static_cast<double>(hi - lo));
    }
  std::vector<double> band(kBandEdgesHz.size() - 1, 0.0);
  const auto block = windowed_block(seq, 0, n);
  double total = 0.0;
  for (double fr = kFreqGridLo; fr <= kFreqGridHi + 1e-9; fr += 0.025) {
    const double p = spectral_power(block, D, seq.fps, fr);
    total += p;
    for (std::size_t b = 0; b + 1 < kBandEdgesHz.size(); ++b)
      if (fr >= kBandEdgesHz[b] && fr < kBandEdgesHz[b + 1]) band[b] += p;
  }
  for (double b : band) f.push_back(total > 0 ? b / total : 0.0);
  return f;
}

inline double toy_fid(const std::vector<MotionSequence>& samples, const std::vector<MotionSequence>& reference) {
  if (samples.size() < 10 || reference.size() < 10)
    throw ConfigError("toy_fid: need at least 10 sequences in each set");
  std::vector<std::vector<double>> fs, fr;
  for (const auto& s : samples) fs.push_back(toy_features(s));
  for (const auto& s : reference) fr.push_back(toy_features(s));
  return frechet_distance(fit_gaussian(fs), fit_gaussian(fr));
}

// ---------------------------------------------------------------------------
// Somatic interaction score

/// S_som = (100 e^(-2 FID) + 100 e^(-0.3 PJ)) / 2, in [0, 100].
inline double iis_som(double fid, double pj) {
  if (fid < 0 || pj < 0 || std::isnan(fid) || std::isnan(pj))
    throw ConfigError("iis_som: FID and PJ must be non-negative");
  return 0.5 * (100.0 * std::exp(-2.0 * fid) + 100.0 * std::exp(-0.3 * pj));
}

// ---------------------------------------------------------------------------
// Nearest-centroid motion classifier

/// Classifies motion windows by (dominant frequency, mean amplitude) with
/// per-feature standardisation fitted on the training windows.
class NearestCentroid {
public:
  static std::array<double, 2> features(const MotionSequence& seq, std::size_t begin = 0, std::size_t end = 0) {
    return {dominant_frequency(seq, begin, end), mean_amplitude(seq, begin, end)};
  }

  void fit(const std::vector<std::array<double, 2>>& xs, const std::vector<std::string>& labels) {
    if (xs.size() != labels.size() || xs.empty()) throw ConfigError("NearestCentroid: bad training set");
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0, s = 0;
      for (const auto& x : xs) m += x[j];
      m /= static_cast<double>(xs.size());
      for (const auto& x : xs) s += (x[j] - m) * (x[j] - m);
      scale_[j] = std::sqrt(s / static_cast<double>(xs.size()));
      if (scale_[j] <= 0) scale_[j] = 1.0;
    }
    std::map<std::string, std::pair<std::array<double, 2>, std::size_t>> acc;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto& [sum, count] = acc[labels[i]];
      for (std::size_t j = 0; j < 2; ++j) sum[j] += xs[i][j] / scale_[j];
      ++count;
    }
    centroids_.clear();
    for (auto& [label, sc] : acc) centroids_.push_back({label, {sc.first[0] / sc.second, sc.first[1] / sc.second}});
  }

  std::string predict(const std::array<double, 2>& x) const {
    double best = 1e300;
    std::string label;
    for (const auto& c : centroids_) {
      double d = 0;
      for (std::size_t j = 0; j < 2; ++j) d += (x[j] / scale_[j] - c.second[j]) * (x[j] / scale_[j] - c.second[j]);
      if (d < best) {
        best = d;
        label = c.first;
      }
    }
    return label;
  }

  /// Per-frame labels for a sequence. Each frame is classified from a window
  /// of `window` frames centred on it, clipped to the prompt span containing
  /// the frame and shifted to stay inside it.
  std::vector<std::string> classify_frames(const MotionSequence& seq, const PromptSchedule& spans,
                                           std::size_t window) const {
    const std::size_t n = seq.n_frames();
    std::vector<std::string> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t e = spans.entry_index_at(i);
      const std::size_t lo = spans.entries()[e].frame;
      const std::size_t hi = e + 1 < spans.size() ? std::min(n, spans.entries()[e + 1].frame) : n;
      const std::size_t w = std::min(window, hi - lo);
      std::size_t b = i >= w / 2 ? i - w / 2 : 0;
      b = std::clamp(b, lo, hi - w);
      out[i] = predict(features(seq, b, b + w));
    }
    return out;
  }

private:
  std::array<double, 2> scale_{1.0, 1.0};
  std::vector<std::pair<std::string, std::array<double, 2>>> centroids_;
};

} // namespace flood
