#pragma once

// Diffusion-forcing training of the denoiser on frozen, normalised VAE latents.

#include <cmath>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "flood/denoiser.hpp"
#include "flood/optim.hpp"
#include "flood/schedule.hpp"
#include "flood/vae.hpp"

namespace flood {

/// v* = z - eps: the time derivative of alpha z + (1 - alpha) eps on the ramp.
template <typename T>
BasicTensor<T> velocity_target(const BasicTensor<T>& z, const BasicTensor<T>& eps) {
  if (z.shape() != eps.shape())
    throw ShapeError("velocity_target: latent " + shape_str(z.shape()) + " vs noise " + shape_str(eps.shape()));
  BasicTensor<T> v(z.shape());
  for (std::size_t i = 0; i < z.numel(); ++i) v[i] = z[i] - eps[i];
  return v;
}

/// Normalised latent sequences with a vocabulary id per latent frame.
struct LatentDataset {
  std::vector<Tensor> z;
  std::vector<std::vector<std::size_t>> prompt;

  std::size_t size() const { return z.size(); }

  /// Encodes each labelled sequence in full, then normalises with the VAE's
  /// latent statistics.
  static LatentDataset build(const CausalVae<float>& vae, const DenoiserConfig& cfg,
                             const std::vector<MotionSequence>& data) {
    LatentDataset ds;
    for (const auto& seq : data) {
      if (!seq.labels) throw ConfigError("denoiser training: every sequence needs prompt labels");
      auto z = vae.normalize(vae.encode(seq).frames);
      ds.prompt.push_back(latent_prompt_ids(*seq.labels, cfg, 0, z.rows()));
      ds.z.push_back(std::move(z));
    }
    return ds;
  }
};

/// One training sample: K clean latents, its noise, alpha vector and window.
struct TrainSample {
  Tensor z, eps;
  AlphaBetaVector ab;
  AttentionMask mask;
};

struct DenoiserTrainOptions {
  std::size_t steps = 5000;
  std::size_t batch = 16;
  std::size_t clip = 16;  ///< latent frames per training clip (K)
  ScheduleParams schedule{};
  AdamConfig adam{};
  double divergence_factor = 10.0;
  double reference_loss = 0;  ///< divergence reference; 0 means the first loss of this call
};

/// Draws crops, training times and fresh noise for one step.
inline std::vector<TrainSample> make_batch(const LatentDataset& ds, const DenoiserConfig& cfg,
                                           const DenoiserTrainOptions& opt, Rng& rng) {
  ScheduleParams sp = opt.schedule;
  sp.K = opt.clip;
  auto times = sample_training_times(sp, rng, opt.batch);
  std::vector<TrainSample> out;
  for (std::size_t b = 0; b < opt.batch; ++b) {
    const std::size_t i = rng.below(ds.size());
    const auto& zs = ds.z[i];
    if (zs.rows() < opt.clip) throw ConfigError("denoiser training: sequence shorter than the latent clip");
    const std::size_t start = rng.below(zs.rows() - opt.clip + 1);
    TrainSample s;
    s.z = Tensor({opt.clip, kLatentDim});
    std::copy_n(zs.data().begin() + start * kLatentDim, opt.clip * kLatentDim, s.z.data().begin());
    s.eps = Tensor::randn(rng, {opt.clip, kLatentDim});
    s.ab = times[b].ab;
    const auto& part = times[b].part;
    const std::size_t begin = part.m - std::min(part.m, cfg.context_horizon);
    std::vector<std::size_t> ids(ds.prompt[i].begin() + static_cast<long>(start + begin),
                                 ds.prompt[i].begin() + static_cast<long>(start + part.n));
    s.mask = build_attention_mask(part, begin, std::move(ids), cfg.vocabulary.size(), cfg.attn_mode);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
WindowInput<T> window_input(const TrainSample& s) {
  const std::size_t b = s.mask.begin, W = s.mask.tokens();
  WindowInput<T> w;
  auto x = corrupt(s.z, s.ab, s.eps);
  w.x = BasicTensor<T>({W, kLatentDim});
  for (std::size_t q = 0; q < W; ++q)
    for (std::size_t c = 0; c < kLatentDim; ++c) w.x.at(q, c) = static_cast<T>(x.at(b + q, c));
  w.alpha.assign(s.ab.alpha.begin() + static_cast<long>(b), s.ab.alpha.begin() + static_cast<long>(b + W));
  w.mask = s.mask;
  return w;
}

/// Squared-norm error summed over active frames, divided by their count.
template <typename T>
ag::Var<T> df_loss(const ag::Var<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("df_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const double frames = static_cast<double>(target.rows());
  return ag::scale(ag::mse(pred, ag::constant(target)), static_cast<double>(target.numel()) / frames);
}

/// Loss over a batch. Only frames with 0 < alpha < 1 are predicted and
/// supervised.
template <typename T>
std::optional<ag::Var<T>> batch_loss(const Denoiser<T>& model, const std::vector<TrainSample>& batch,
                                     std::size_t* active_out = nullptr) {
  std::vector<WindowInput<T>> inputs;
  std::vector<T> target;
  for (const auto& s : batch) {
    if (s.mask.active() == 0) continue;
    inputs.push_back(window_input<T>(s));
    auto v = velocity_target(s.z, s.eps);
    for (std::size_t k = s.mask.part.m; k < s.mask.part.n; ++k)
      for (std::size_t c = 0; c < kLatentDim; ++c) target.push_back(static_cast<T>(v.at(k, c)));
  }
  const std::size_t active = target.size() / kLatentDim;
  if (active_out) *active_out = active;
  if (active == 0) return std::nullopt;
  auto pred = model.forward(inputs);
  return df_loss(pred, BasicTensor<T>({active, kLatentDim}, std::move(target)));
}

struct DenoiserStepLog {
  std::size_t step;
  double loss;
  double grad_norm;
  std::size_t active_frames;
};

/// Adam on the diffusion-forcing loss. A batch without active frames counts
/// as a step with loss 0 and no update, and logs a warning.
inline std::vector<DenoiserStepLog> train_denoiser(Denoiser<float>& model, AdamState<float>& adam,
                                                   const LatentDataset& ds, const DenoiserTrainOptions& opt, Rng& rng,
                                                   std::size_t first_step = 0,
                                                   const std::function<void(const DenoiserStepLog&)>& on_step = {}) {
  if (ds.size() == 0) throw ConfigError("denoiser training: empty dataset");
  if (opt.batch == 0 || opt.clip == 0) throw ConfigError("denoiser training: batch and clip must be positive");
  opt.schedule.validate();
  std::vector<DenoiserStepLog> logs;
  double initial = opt.reference_loss > 0 ? opt.reference_loss : -1;
  for (std::size_t s = 0; s < opt.steps; ++s) {
    auto batch = make_batch(ds, model.config(), opt, rng);
    model.params().zero_grad();
    std::size_t active = 0;
    auto loss = batch_loss(model, batch, &active);
    DenoiserStepLog log{first_step + s + 1, 0.0, 0.0, active};
    if (!loss) {
      std::cerr << "warning: step " << log.step << " batch has no active frames; skipped\n";
    } else {
      log.loss = loss->item();
      if (initial < 0) initial = log.loss;
      if (!std::isfinite(log.loss) || log.loss > opt.divergence_factor * initial)
        throw DivergenceError("denoiser training diverged at step " + std::to_string(log.step) + ": loss " +
                              std::to_string(log.loss) + " vs initial " + std::to_string(initial) +
                              "; try a lower learning rate");
      ag::backward(*loss);
      log.grad_norm = model.params().grad_norm();
      adam_step(model.params(), adam, opt.adam);
    }
    logs.push_back(log);
    if (on_step) on_step(log);
  }
  return logs;
}

} // namespace flood
