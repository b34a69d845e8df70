#pragma once

// Causal temporal autoencoder: D-channel motion at fps <-> 4-channel latents
// at fps/4.
//
// Encoder: conv(k, stride 2) -> conv(k, stride 2) -> conv(k) -> linear = E(x),
// then a learnable 4x4 head z = h(E(x)). Decoder: linear -> conv(k) ->
// x2 upsample -> conv(k) -> x2 upsample -> conv(k) -> linear. Every conv pads
// on the left by replicating the first row, so latent t sees x[0..4t+3] and
// decoded frame j sees z[0..j/4].

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/autograd.hpp"
#include "flood/checkpoint.hpp"
#include "flood/error.hpp"
#include "flood/motion.hpp"
#include "flood/nn.hpp"
#include "flood/optim.hpp"
#include "flood/rng.hpp"

namespace flood {

inline constexpr std::size_t kLatentDim = 4;
inline constexpr std::size_t kDownsample = 4;

/// Decoded frame j can change when input frames up to j + kDecoderSlack change.
inline constexpr std::size_t kDecoderSlack = kDownsample - 1;

struct VaeConfig {
  std::size_t D_in = 16;
  std::size_t latent_dim = kLatentDim;
  std::size_t downsample = kDownsample;
  std::size_t hidden = 64;
  std::size_t kernel = 4;
  double gamma = 0.25;

  void validate() const {
    if (latent_dim != kLatentDim) throw ConfigError("vae: latent_dim is fixed at 4");
    if (downsample != kDownsample) throw ConfigError("vae: downsample is fixed at 4");
    if (D_in < 1) throw ConfigError("vae: D_in must be >= 1");
    if (hidden < 1 || kernel < 1) throw ConfigError("vae: hidden and kernel must be >= 1");
    if (!(gamma >= 0)) throw ConfigError("vae: gamma must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const VaeConfig& c) {
  j = {{"D_in", c.D_in}, {"latent_dim", c.latent_dim}, {"downsample", c.downsample},
       {"hidden", c.hidden}, {"kernel", c.kernel},     {"gamma", c.gamma}};
}

inline void from_json(const nlohmann::json& j, VaeConfig& c) {
  c.D_in = j.value("D_in", c.D_in);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.downsample = j.value("downsample", c.downsample);
  c.hidden = j.value("hidden", c.hidden);
  c.kernel = j.value("kernel", c.kernel);
  c.gamma = j.value("gamma", c.gamma);
}

/// Latent frames [ceil(T/4) x 4] at a quarter of the source frame rate.
struct LatentSequence {
  double fps = 5.0;
  Tensor frames;
  std::size_t length() const { return frames.empty() ? 0 : frames.dim(0); }
};

/// Terms of the training objective; `total` carries the graph.
template <typename T>
struct VaeLoss {
  ag::Var<T> total;
  double recon = 0;
  double commit_z = 0;
  double commit_e = 0;
};

/// L = |x - recon|^2 + |sg[e] - z|^2 + gamma |sg[z] - e|^2, each term a mean
/// over elements.
template <typename T>
VaeLoss<T> vae_loss(const ag::Var<T>& x, const ag::Var<T>& e, const ag::Var<T>& z, const ag::Var<T>& recon,
                    double gamma) {
  if (x.shape() != recon.shape())
    throw ShapeError("vae_loss: input " + shape_str(x.shape()) + " vs reconstruction " + shape_str(recon.shape()));
  if (e.shape() != z.shape())
    throw ShapeError("vae_loss: encoder output " + shape_str(e.shape()) + " vs latent " + shape_str(z.shape()));
  auto t1 = ag::mse(x, recon);
  auto t2 = ag::mse(ag::detach(e), z);
  auto t3 = ag::mse(ag::detach(z), e);
  VaeLoss<T> out;
  out.total = ag::add(ag::add(t1, t2), ag::scale(t3, gamma));
  out.recon = t1.item();
  out.commit_z = t2.item();
  out.commit_e = t3.item();
  return out;
}

template <typename T = float>
class CausalVae {
public:
  CausalVae() = default;

  CausalVae(const VaeConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t H = cfg_.hidden, K = cfg_.kernel, D = cfg_.D_in, L = cfg_.latent_dim;
    nn::add_conv(ps_, rng, "enc.conv1", D, H, K);
    nn::add_conv(ps_, rng, "enc.conv2", H, H, K);
    nn::add_conv(ps_, rng, "enc.conv3", H, H, K);
    nn::add_linear(ps_, rng, "enc.out", H, L);
    BasicTensor<T> eye({L, L}, T{0});
    for (std::size_t i = 0; i < L; ++i) eye.at(i, i) = T{1};
    ps_.add("head.w", eye);
    ps_.add("head.b", BasicTensor<T>({L}, T{0}));
    nn::add_linear(ps_, rng, "dec.in", L, H);
    nn::add_conv(ps_, rng, "dec.conv1", H, H, K);
    nn::add_linear(ps_, rng, "dec.up1", H, 2 * H);
    nn::add_conv(ps_, rng, "dec.conv2", H, H, K);
    nn::add_linear(ps_, rng, "dec.up2", H, 2 * H);
    nn::add_conv(ps_, rng, "dec.conv3", H, H, K);
    nn::add_linear(ps_, rng, "dec.out", H, D);
    latent_mean_.assign(L, 0.0);
    latent_std_.assign(L, 1.0);
  }

  const VaeConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  // -- taped graph over row-stacked clips, each `seg.length` frames (multiple of 4)

  ag::Var<T> encode_pre(const ag::Var<T>& x, const nn::Segments& seg) const {
    if (seg.length % kDownsample != 0) throw ShapeError("vae: clip length must be a multiple of 4");
    const std::size_t K = cfg_.kernel;
    auto h = ag::silu(nn::causal_conv(ps_, "enc.conv1", x, seg, K, 2));
    nn::Segments s2{seg.count, seg.length / 2};
    h = ag::silu(nn::causal_conv(ps_, "enc.conv2", h, s2, K, 2));
    nn::Segments s4{seg.count, seg.length / 4};
    h = ag::silu(nn::causal_conv(ps_, "enc.conv3", h, s4, K, 1));
    return nn::linear(ps_, "enc.out", h);
  }

  ag::Var<T> head(const ag::Var<T>& e) const { return nn::linear(ps_, "head", e); }

  /// z rows [count * n x 4] -> frames [count * 4n x D].
  ag::Var<T> decode(const ag::Var<T>& z, const nn::Segments& zseg) const {
    const std::size_t H = cfg_.hidden, K = cfg_.kernel;
    auto h = ag::silu(nn::linear(ps_, "dec.in", z));
    h = ag::silu(nn::causal_conv(ps_, "dec.conv1", h, zseg, K, 1));
    h = ag::silu(ag::reshape(nn::linear(ps_, "dec.up1", h), {zseg.rows() * 2, H}));
    nn::Segments s2{zseg.count, zseg.length * 2};
    h = ag::silu(nn::causal_conv(ps_, "dec.conv2", h, s2, K, 1));
    h = ag::silu(ag::reshape(nn::linear(ps_, "dec.up2", h), {zseg.rows() * 4, H}));
    nn::Segments s4{zseg.count, zseg.length * 4};
    h = ag::silu(nn::causal_conv(ps_, "dec.conv3", h, s4, K, 1));
    return nn::linear(ps_, "dec.out", h);
  }

  struct Pass {
    ag::Var<T> e, z, recon;
  };

  Pass forward(const ag::Var<T>& x, const nn::Segments& seg) const {
    Pass p;
    p.e = encode_pre(x, seg);
    p.z = head(p.e);
    p.recon = decode(p.z, {seg.count, seg.length / kDownsample});
    return p;
  }

  VaeLoss<T> loss(const BasicTensor<T>& x, const nn::Segments& seg) const {
    auto xv = ag::constant(x);
    auto p = forward(xv, seg);
    return vae_loss(xv, p.e, p.z, p.recon, cfg_.gamma);
  }

  // -- inference on whole sequences (raw latent scale)

  /// Pads the tail by repeating the last frame up to a multiple of 4.
  LatentSequence encode(const MotionSequence& seq) const {
    if (seq.dims() != cfg_.D_in)
      throw ShapeError("vae encode: sequence has D=" + std::to_string(seq.dims()) + ", model expects " +
                       std::to_string(cfg_.D_in));
    return {seq.fps / kDownsample, encode_frames(seq.frames.template cast<T>()).template cast<float>()};
  }

  BasicTensor<T> encode_frames(const BasicTensor<T>& frames) const {
    const std::size_t n = frames.dim(0), D = frames.dim(1);
    if (n < kDownsample)
      throw ConfigError("vae encode: need at least 4 frames, got " + std::to_string(n));
    const std::size_t padded = (n + kDownsample - 1) / kDownsample * kDownsample;
    BasicTensor<T> x({padded, D});
    for (std::size_t i = 0; i < padded; ++i)
      std::copy_n(frames.data().begin() + std::min(i, n - 1) * D, D, x.data().begin() + i * D);
    ag::NoGradGuard ng;
    return head(encode_pre(ag::constant(x), {1, padded})).value();
  }

  MotionSequence decode(const LatentSequence& z) const {
    if (z.length() == 0) throw ShapeError("vae decode: empty latent sequence");
    auto frames = decode_frames(z.frames.template cast<T>()).template cast<float>();
    return MotionSequence(std::clamp(z.fps * kDownsample, kMinFps, kMaxFps), std::move(frames));
  }

  BasicTensor<T> decode_frames(const BasicTensor<T>& z) const {
    if (z.cols() != cfg_.latent_dim) throw ShapeError("vae decode: latents must have 4 channels");
    ag::NoGradGuard ng;
    return decode(ag::constant(z), {1, z.rows()}).value();
  }

  // -- latent normalisation used by the denoiser

  const std::vector<double>& latent_mean() const { return latent_mean_; }
  const std::vector<double>& latent_std() const { return latent_std_; }

  void set_latent_stats(std::vector<double> mean, std::vector<double> stddev) {
    if (mean.size() != cfg_.latent_dim || stddev.size() != cfg_.latent_dim)
      throw ShapeError("vae: latent stats must have 4 entries");
    for (double s : stddev)
      if (!(s > 0)) throw NumericError("vae: latent std must be positive");
    latent_mean_ = std::move(mean);
    latent_std_ = std::move(stddev);
  }

  /// Fits per-channel mean/std over the latents of `data`.
  void fit_latent_stats(const std::vector<MotionSequence>& data) {
    std::vector<double> s(cfg_.latent_dim, 0.0), s2(cfg_.latent_dim, 0.0);
    std::size_t count = 0;
    for (const auto& seq : data) {
      auto z = encode(seq).frames;
      for (std::size_t r = 0; r < z.rows(); ++r)
        for (std::size_t c = 0; c < z.cols(); ++c) {
          s[c] += z.at(r, c);
          s2[c] += static_cast<double>(z.at(r, c)) * z.at(r, c);
        }
      count += z.rows();
    }
    if (count < 2) throw ConfigError("vae: not enough latent frames to fit statistics");
    std::vector<double> mean(cfg_.latent_dim), sd(cfg_.latent_dim);
    for (std::size_t c = 0; c < cfg_.latent_dim; ++c) {
      mean[c] = s[c] / count;
      sd[c] = std::sqrt(std::max(s2[c] / count - mean[c] * mean[c], 1e-8));
    }
    set_latent_stats(mean, sd);
  }

  Tensor normalize(const Tensor& z) const {
    Tensor out = z;
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c)
        out.at(r, c) = static_cast<float>((z.at(r, c) - latent_mean_[c]) / latent_std_[c]);
    return out;
  }

  Tensor denormalize(const Tensor& z) const {
    Tensor out = z;
    for (std::size_t r = 0; r < z.rows(); ++r)
      for (std::size_t c = 0; c < z.cols(); ++c)
        out.at(r, c) = static_cast<float>(z.at(r, c) * latent_std_[c] + latent_mean_[c]);
    return out;
  }

  // -- incremental decoding

  /// Decodes one latent frame at a time into 4 motion frames. The output is
  /// bit-identical to decode_frames over the same prefix.
  class Decoder {
  public:
    explicit Decoder(const CausalVae& vae)
        : vae_(&vae), c1_("dec.conv1", vae.cfg_.kernel), c2_("dec.conv2", vae.cfg_.kernel),
          c3_("dec.conv3", vae.cfg_.kernel) {}

    /// z: one raw-scale latent frame. Returns 4 rows of D channels.
    std::vector<std::vector<T>> push(const std::vector<T>& z) {
      const auto& ps = vae_->ps_;
      const std::size_t H = vae_->cfg_.hidden;
      if (z.size() != vae_->cfg_.latent_dim) throw ShapeError("decoder: latent frame must have 4 channels");
      auto h = nn::linear_row(ps, "dec.in", z);
      nn::silu_inplace(h);
      h = c1_.push(ps, h);
      nn::silu_inplace(h);
      std::vector<std::vector<T>> out;
      for (const auto& u1 : upsample(ps, "dec.up1", h, H)) {
        auto a = c2_.push(ps, u1);
        nn::silu_inplace(a);
        for (const auto& u2 : upsample(ps, "dec.up2", a, H)) {
          auto b = c3_.push(ps, u2);
          nn::silu_inplace(b);
          out.push_back(nn::linear_row(ps, "dec.out", b));
        }
      }
      ++pushed_;
      return out;
    }

    std::size_t latents_consumed() const { return pushed_; }

  private:
    static std::vector<std::vector<T>> upsample(const ParamStore<T>& ps, const std::string& name,
                                                const std::vector<T>& h, std::size_t H) {
      auto wide = nn::linear_row(ps, name, h);
      nn::silu_inplace(wide);
      return {std::vector<T>(wide.begin(), wide.begin() + H), std::vector<T>(wide.begin() + H, wide.end())};
    }

    const CausalVae* vae_;
    nn::ConvStream<T> c1_, c2_, c3_;
    std::size_t pushed_ = 0;
  };

  Decoder decoder() const { return Decoder(*this); }

  // -- persistence

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "vae";
    ck.meta["config"] = cfg_;
    ck.meta["latent_mean"] = latent_mean_;
    ck.meta["latent_std"] = latent_std_;
    store_params(ck, ps_);
    return ck;
  }

  static CausalVae from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("kind", std::string()) != "vae") throw IoError("checkpoint is not a VAE checkpoint");
    Rng rng(0);
    CausalVae v(ck.meta.at("config").get<VaeConfig>(), rng);
    load_params(ck, v.ps_);
    v.set_latent_stats(ck.meta.at("latent_mean").get<std::vector<double>>(),
                       ck.meta.at("latent_std").get<std::vector<double>>());
    return v;
  }

private:
  VaeConfig cfg_;
  ParamStore<T> ps_;
  std::vector<double> latent_mean_, latent_std_;
};

// ---------------------------------------------------------------------------
// Training

struct VaeTrainOptions {
  std::size_t steps = 2000;
  std::size_t batch = 16;
  std::size_t clip = 32;  ///< frames per training clip, multiple of 4
  AdamConfig adam{};
  double divergence_factor = 10.0;
  double reference_loss = 0;  ///< divergence reference; 0 means the first loss of this call
};

struct VaeStepLog {
  std::size_t step;
  double loss, recon, commit_z, commit_e, grad_norm;
};

/// Stacks `batch` random clips of `clip` frames drawn from `data`.
inline Tensor sample_clips(const std::vector<MotionSequence>& data, Rng& rng, std::size_t batch, std::size_t clip) {
  const std::size_t D = data.front().dims();
  Tensor x({batch * clip, D});
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& s = data[rng.below(data.size())];
    if (s.n_frames() < clip) throw ConfigError("vae training: sequence shorter than clip length");
    const std::size_t start = rng.below(s.n_frames() - clip + 1);
    std::copy_n(s.frames.data().begin() + start * D, clip * D, x.data().begin() + b * clip * D);
  }
  return x;
}

/// Adam on the VAE objective. `adam` carries optimizer state across calls so a
/// run can resume; `first_step` numbers the log. Throws DivergenceError if the
/// loss exceeds divergence_factor times opt.reference_loss (or the first loss).
inline std::vector<VaeStepLog> train_vae(CausalVae<float>& vae, AdamState<float>& adam,
                                         const std::vector<MotionSequence>& data, const VaeTrainOptions& opt,
                                         Rng& rng, std::size_t first_step = 0,
                                         const std::function<void(const VaeStepLog&)>& on_step = {}) {
  if (data.empty()) throw ConfigError("vae training: empty dataset");
  if (opt.clip % kDownsample != 0 || opt.clip == 0) throw ConfigError("vae training: clip must be a positive multiple of 4");
  if (opt.batch == 0) throw ConfigError("vae training: batch must be positive");
  std::vector<VaeStepLog> logs;
  double initial = opt.reference_loss > 0 ? opt.reference_loss : -1;
  for (std::size_t s = 0; s < opt.steps; ++s) {
    auto x = sample_clips(data, rng, opt.batch, opt.clip);
    vae.params().zero_grad();
    auto l = vae.loss(x, {opt.batch, opt.clip});
    const double loss = l.total.item();
    if (initial < 0) initial = loss;
    if (!std::isfinite(loss) || loss > opt.divergence_factor * initial)
      throw DivergenceError("vae training diverged at step " + std::to_string(first_step + s) + ": loss " +
                            std::to_string(loss) + " vs initial " + std::to_string(initial) + " (recon " +
                            std::to_string(l.recon) + ", commit " + std::to_string(l.commit_z) + "/" +
                            std::to_string(l.commit_e) + "); try a lower learning rate");
    ag::backward(l.total);
    VaeStepLog log{first_step + s + 1, loss, l.recon, l.commit_z, l.commit_e, vae.params().grad_norm()};
    adam_step(vae.params(), adam, opt.adam);
    logs.push_back(log);
    if (on_step) on_step(log);
  }
  return logs;
}

/// Sum over channels of reconstruction MSE divided by the sum of per-channel
/// variances, over every frame of every sequence.
inline double relative_reconstruction_error(const CausalVae<float>& vae, const std::vector<MotionSequence>& data) {
  const std::size_t D = vae.config().D_in;
  std::vector<double> err(D, 0.0), s(D, 0.0), s2(D, 0.0);
  std::size_t count = 0;
  for (const auto& seq : data) {
    auto rec = vae.decode(vae.encode(seq));
    for (std::size_t i = 0; i < seq.n_frames(); ++i)
      for (std::size_t c = 0; c < D; ++c) {
        const double x = seq.frames.at(i, c), d = x - rec.frames.at(i, c);
        err[c] += d * d;
        s[c] += x;
        s2[c] += x * x;
      }
    count += seq.n_frames();
  }
  double num = 0, den = 0;
  for (std::size_t c = 0; c < D; ++c) {
    num += err[c] / count;
    den += s2[c] / count - (s[c] / count) * (s[c] / count);
  }
  if (!(den > 0)) throw NumericError("relative_reconstruction_error: data has zero variance");
  return num / den;
}

} // namespace flood
