#pragma once

// Velocity predictor over a window of latent frames.
//
// A window holds committed context frames [begin, m) followed by active frames
// [m, n). Frames beyond n are never tokens. Each frame token is
//   x W_x + phi(alpha) W_a + pe(k - m + context_horizon)
// where phi are sinusoidal features of the frame's alpha and pe is a fixed
// sinusoidal position code. Prompt embeddings join every layer's keys and
// values; the mask lets frame k see only the prompt in force at k.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "flood/autograd.hpp"
#include "flood/checkpoint.hpp"
#include "flood/motion.hpp"
#include "flood/nn.hpp"
#include "flood/schedule.hpp"
#include "flood/vae.hpp"

namespace flood {

enum class AttnMode { bidirectional_window, causal_window };

inline std::string to_string(AttnMode m) {
  return m == AttnMode::bidirectional_window ? "bidirectional_window" : "causal_window";
}

inline AttnMode attn_mode_from_string(const std::string& s) {
  if (s == "bidirectional_window") return AttnMode::bidirectional_window;
  if (s == "causal_window") return AttnMode::causal_window;
  throw ConfigError("unknown attn_mode \"" + s + "\" (expected bidirectional_window or causal_window)");
}

struct DenoiserConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t model_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t context_horizon = 32;
  AttnMode attn_mode = AttnMode::bidirectional_window;
  std::vector<std::string> vocabulary = class_vocabulary();

  void validate() const {
    if (layers < 1) throw ConfigError("denoiser: layers must be >= 1");
    if (heads < 1 || model_dim % heads != 0) throw ConfigError("denoiser: model_dim must be divisible by heads");
    if (model_dim % 2 != 0) throw ConfigError("denoiser: model_dim must be even");
    if (mlp_dim < 1) throw ConfigError("denoiser: mlp_dim must be >= 1");
    if (vocabulary.empty()) throw ConfigError("denoiser: empty prompt vocabulary");
    for (std::size_t i = 0; i < vocabulary.size(); ++i)
      for (std::size_t j = i + 1; j < vocabulary.size(); ++j)
        if (vocabulary[i] == vocabulary[j]) throw ConfigError("denoiser: duplicate prompt \"" + vocabulary[i] + "\"");
  }

  std::size_t prompt_id(const std::string& p) const {
    for (std::size_t i = 0; i < vocabulary.size(); ++i)
      if (vocabulary[i] == p) return i;
    throw ConfigError("prompt \"" + p + "\" is not in the vocabulary");
  }
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"layers", c.layers},
       {"heads", c.heads},
       {"model_dim", c.model_dim},
       {"mlp_dim", c.mlp_dim},
       {"context_horizon", c.context_horizon},
       {"attn_mode", to_string(c.attn_mode)},
       {"vocabulary", c.vocabulary}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.context_horizon = j.value("context_horizon", c.context_horizon);
  if (j.contains("attn_mode")) c.attn_mode = attn_mode_from_string(j.at("attn_mode").get<std::string>());
  c.vocabulary = j.value("vocabulary", c.vocabulary);
}

/// Prompt id per latent frame: frame k takes the latest entry whose motion
/// start frame s satisfies s / 4 <= k, i.e. s <= 4k + 3.
inline std::size_t latent_prompt_entry(const PromptSchedule& s, std::size_t k) {
  return s.entry_index_at(k * kDownsample + kDownsample - 1);
}

inline std::vector<std::size_t> latent_prompt_ids(const PromptSchedule& s, const DenoiserConfig& cfg,
                                                  std::size_t begin, std::size_t end) {
  std::vector<std::size_t> ids;
  for (std::size_t k = begin; k < end; ++k) ids.push_back(cfg.prompt_id(s.entries()[latent_prompt_entry(s, k)].prompt));
  return ids;
}

// ---------------------------------------------------------------------------
// Masks

/// Token layout and attention rules of one window. Frame tokens are
/// [begin, n) in order; prompt tokens follow, one per vocabulary entry.
///
/// Active frames see every active frame (only earlier-or-equal ones in
/// causal_window mode) and all context frames. Context frames see context
/// frames at or before themselves. Each frame sees exactly one prompt token.
struct AttentionMask {
  std::size_t begin = 0;
  RegionPartition part;
  std::vector<std::size_t> prompt;  ///< vocabulary id per frame token
  std::size_t vocab_size = 0;
  ag::KeyLists keys;                ///< per frame token; prompt v is key tokens() + v

  std::size_t tokens() const { return part.n - begin; }
  std::size_t active() const { return part.active_size(); }
  std::size_t context() const { return part.m - begin; }

  bool allows(std::size_t q, std::size_t key) const {
    const auto& l = keys.at(q);
    return std::find(l.begin(), l.end(), static_cast<std::uint32_t>(key)) != l.end();
  }
};

/// `prompt_of` gives the vocabulary id of every latent frame in [begin, n).
inline AttentionMask build_attention_mask(const RegionPartition& part, std::size_t begin,
                                          std::vector<std::size_t> prompt_of, std::size_t vocab_size,
                                          AttnMode mode) {
  if (begin > part.m || part.m > part.n) throw ConfigError("attention mask: window bounds out of order");
  if (prompt_of.size() != part.n - begin) throw ShapeError("attention mask: one prompt id per frame token required");
  AttentionMask mask;
  mask.begin = begin;
  mask.part = part;
  mask.vocab_size = vocab_size;
  const std::size_t W = part.n - begin, ctx = part.m - begin;
  mask.keys.resize(W);
  for (std::size_t q = 0; q < W; ++q) {
    if (prompt_of[q] >= vocab_size) throw ConfigError("attention mask: prompt id out of vocabulary");
    auto& l = mask.keys[q];
    if (q < ctx) {
      for (std::size_t j = 0; j <= q; ++j) l.push_back(static_cast<std::uint32_t>(j));
    } else {
      for (std::size_t j = 0; j < ctx; ++j) l.push_back(static_cast<std::uint32_t>(j));
      const std::size_t last = mode == AttnMode::causal_window ? q + 1 : W;
      for (std::size_t j = ctx; j < last; ++j) l.push_back(static_cast<std::uint32_t>(j));
    }
    l.push_back(static_cast<std::uint32_t>(W + prompt_of[q]));
  }
  mask.prompt = std::move(prompt_of);
  return mask;
}

/// Window for schedule partition `part`: context is the last context_horizon
/// committed frames.
inline AttentionMask build_attention_mask(const RegionPartition& part, const PromptSchedule& schedule,
                                          const DenoiserConfig& cfg) {
  schedule.validate();
  const std::size_t begin = part.m - std::min(part.m, cfg.context_horizon);
  return build_attention_mask(part, begin, latent_prompt_ids(schedule, cfg, begin, part.n), cfg.vocabulary.size(),
                              cfg.attn_mode);
}

// ---------------------------------------------------------------------------
// Model

inline constexpr std::size_t kAlphaFreqs = 8;

/// sin/cos of alpha at angular frequencies (i + 1) * pi / 2.
inline std::vector<double> alpha_features(double alpha) {
  std::vector<double> f(2 * kAlphaFreqs);
  for (std::size_t i = 0; i < kAlphaFreqs; ++i) {
    const double w = (static_cast<double>(i) + 1.0) * std::numbers::pi / 2.0;
    f[2 * i] = std::sin(w * alpha);
    f[2 * i + 1] = std::cos(w * alpha);
  }
  return f;
}

inline std::vector<double> position_code(std::size_t p, std::size_t d) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    pe[2 * i] = std::sin(static_cast<double>(p) * w);
    pe[2 * i + 1] = std::cos(static_cast<double>(p) * w);
  }
  return pe;
}

/// One window's inputs: noisy latents and alphas for tokens [begin, n).
template <typename T>
struct WindowInput {
  BasicTensor<T> x;
  std::vector<double> alpha;
  AttentionMask mask;
};

template <typename T = float>
class Denoiser {
public:
  Denoiser() = default;

  Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.model_dim;
    const double res_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    nn::add_linear(ps_, rng, "in.x", kLatentDim, d);
    nn::add_linear(ps_, rng, "in.alpha", 2 * kAlphaFreqs, d);
    ps_.add("prompt.emb", BasicTensor<T>::randn(rng, {cfg_.vocabulary.size(), d}, 1.0));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      nn::add_linear(ps_, rng, p + "q", d, d);
      nn::add_linear(ps_, rng, p + "k", d, d);
      nn::add_linear(ps_, rng, p + "v", d, d);
      nn::add_linear(ps_, rng, p + "o", d, d, res_gain);
      nn::add_linear(ps_, rng, p + "mlp1", d, cfg_.mlp_dim);
      nn::add_linear(ps_, rng, p + "mlp2", cfg_.mlp_dim, d, res_gain);
    }
    ps_.add("out.w", BasicTensor<T>({d, kLatentDim}, T{0}));
    ps_.add("out.b", BasicTensor<T>({kLatentDim}, T{0}));
  }

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  /// Velocities for the active frames of every window, stacked in window
  /// order: [sum of |active| x 4]. Windows are independent: their tokens never
  /// attend across windows. Returns an undefined Var if no window has active
  /// frames.
  ag::Var<T> forward(const std::vector<WindowInput<T>>& batch) const {
    const std::size_t d = cfg_.model_dim, V = cfg_.vocabulary.size();
    std::size_t N = 0;
    for (const auto& w : batch) {
      if (w.x.rows() != w.mask.tokens() || w.x.cols() != kLatentDim || w.alpha.size() != w.mask.tokens())
        throw ShapeError("denoiser: window inputs do not match the mask's " + std::to_string(w.mask.tokens()) +
                         " tokens");
      if (w.mask.vocab_size != V) throw ShapeError("denoiser: mask built for a different vocabulary");
      N += w.mask.tokens();
    }
    std::vector<std::uint32_t> active_rows;
    for (std::size_t off = 0; const auto& w : batch) {
      for (std::size_t q = w.mask.context(); q < w.mask.tokens(); ++q) active_rows.push_back(static_cast<std::uint32_t>(off + q));
      off += w.mask.tokens();
    }
    if (active_rows.empty()) return {};

    BasicTensor<T> x({N, kLatentDim}), feat({N, 2 * kAlphaFreqs}), pos({N, d});
    ag::KeyLists keys;
    keys.reserve(N);
    std::size_t off = 0;
    for (const auto& w : batch) {
      const std::size_t W = w.mask.tokens();
      std::copy(w.x.data().begin(), w.x.data().end(), x.data().begin() + off * kLatentDim);
      for (std::size_t q = 0; q < W; ++q) {
        const auto f = alpha_features(w.alpha[q]);
        for (std::size_t j = 0; j < f.size(); ++j) feat.at(off + q, j) = static_cast<T>(f[j]);
        const std::size_t p = w.mask.begin + q + cfg_.context_horizon - w.mask.part.m;
        const auto pe = position_code(p, d);
        for (std::size_t j = 0; j < d; ++j) pos.at(off + q, j) = static_cast<T>(pe[j]);
        std::vector<std::uint32_t> l;
        l.reserve(w.mask.keys[q].size());
        for (auto key : w.mask.keys[q])
          l.push_back(key < W ? static_cast<std::uint32_t>(off + key) : static_cast<std::uint32_t>(N + key - W));
        keys.push_back(std::move(l));
      }
      off += W;
    }

    auto h = ag::add(ag::add(nn::linear(ps_, "in.x", ag::constant(x)), nn::linear(ps_, "in.alpha", ag::constant(feat))),
                     ag::constant(pos));
    const auto prompts = ag::layer_norm(ps_["prompt.emb"]);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      auto a = ag::layer_norm(h);
      auto src = ag::concat_rows(a, prompts);
      auto att = ag::attention(nn::linear(ps_, p + "q", a), nn::linear(ps_, p + "k", src), nn::linear(ps_, p + "v", src),
                               keys, cfg_.heads);
      h = ag::add(h, nn::linear(ps_, p + "o", att));
      auto m = ag::silu(nn::linear(ps_, p + "mlp1", ag::layer_norm(h)));
      h = ag::add(h, nn::linear(ps_, p + "mlp2", m));
    }
    return nn::linear(ps_, "out", ag::layer_norm(ag::gather_rows(h, std::move(active_rows))));
  }

  /// Multiply-accumulate count of one forward pass over windows with the given
  /// masks. Depends only on token and key counts, not on absolute positions.
  std::size_t macs(const std::vector<AttentionMask>& masks) const {
    const std::size_t d = cfg_.model_dim, V = cfg_.vocabulary.size();
    std::size_t N = 0, A = 0, pairs = 0;
    for (const auto& m : masks) {
      N += m.tokens();
      A += m.active();
      for (const auto& l : m.keys) pairs += l.size();
    }
    const std::size_t in = N * (kLatentDim + 2 * kAlphaFreqs) * d;
    const std::size_t per_layer = N * d * d          // q
                                  + 2 * (N + V) * d * d  // k, v
                                  + 2 * pairs * d        // scores and weighted values
                                  + N * d * d            // o
                                  + 2 * N * d * cfg_.mlp_dim;
    return in + cfg_.layers * per_layer + A * d * kLatentDim;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint ck;
    ck.meta["kind"] = "denoiser";
    ck.meta["config"] = cfg_;
    store_params(ck, ps_);
    return ck;
  }

  static Denoiser from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("kind", std::string()) != "denoiser") throw IoError("checkpoint is not a denoiser checkpoint");
    Rng rng(0);
    Denoiser dn(ck.meta.at("config").get<DenoiserConfig>(), rng);
    load_params(ck, dn.ps_);
    return dn;
  }

private:
  DenoiserConfig cfg_;
  ParamStore<T> ps_;
};

} // namespace flood
