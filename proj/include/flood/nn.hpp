#pragma once

// Layer building blocks on top of the tape: dense layers and strided causal
// 1-D convolutions over row-stacked sequences, plus tape-free single-row
// versions that reproduce the taped arithmetic bit for bit.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flood/autograd.hpp"
#include "flood/optim.hpp"
#include "flood/rng.hpp"

namespace flood::nn {

/// Weight [in x out] drawn N(0, gain^2 / in) and a zero bias.
template <typename T>
void add_linear(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                double gain = 1.0) {
  ps.add(name + ".w", BasicTensor<T>::randn(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))));
  ps.add(name + ".b", BasicTensor<T>({out}, T{0}));
}

template <typename T>
ag::Var<T> linear(const ParamStore<T>& ps, const std::string& name, const ag::Var<T>& x) {
  return ag::add(ag::matmul(x, ps[name + ".w"]), ps[name + ".b"]);
}

/// Several equal-length sequences stacked along rows: `count` blocks of `length`.
struct Segments {
  std::size_t count = 1;
  std::size_t length = 0;
  std::size_t rows() const { return count * length; }
};

/// Row indices feeding a causal convolution with the given kernel and stride.
/// Output i of a segment reads inputs s*i + s - k + j (j < k), clamped to the
/// segment's first row so the left edge replicates frame 0.
inline std::vector<std::uint32_t> causal_taps(const Segments& seg, std::size_t kernel, std::size_t stride) {
  const std::size_t out_len = seg.length / stride;
  std::vector<std::uint32_t> idx;
  idx.reserve(seg.count * out_len * kernel);
  for (std::size_t b = 0; b < seg.count; ++b)
    for (std::size_t i = 0; i < out_len; ++i)
      for (std::size_t j = 0; j < kernel; ++j) {
        const long src = static_cast<long>(stride * i + stride + j) - static_cast<long>(kernel);
        idx.push_back(static_cast<std::uint32_t>(b * seg.length + static_cast<std::size_t>(std::max(0L, src))));
      }
  return idx;
}

/// Conv weight is stored as a dense [kernel*in x out] matrix over the
/// concatenated taps (oldest first).
template <typename T>
void add_conv(ParamStore<T>& ps, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
              std::size_t kernel) {
  add_linear(ps, rng, name, kernel * in, out);
}

template <typename T>
ag::Var<T> causal_conv(const ParamStore<T>& ps, const std::string& name, const ag::Var<T>& x, const Segments& seg,
                       std::size_t kernel, std::size_t stride) {
  if (seg.length % stride != 0)
    throw ShapeError("causal_conv: segment length " + std::to_string(seg.length) + " not divisible by stride " +
                     std::to_string(stride));
  if (x.value().rows() != seg.rows()) throw ShapeError("causal_conv: row count does not match segments");
  const std::size_t c = x.value().cols();
  auto taps = ag::gather_rows(x, causal_taps(seg, kernel, stride));
  auto cols = ag::reshape(taps, {seg.count * (seg.length / stride), kernel * c});
  return linear(ps, name, cols);
}

// ---------------------------------------------------------------------------
// Tape-free row kernels

/// out = x W + b for a single row, with the same rounding as the taped linear.
template <typename T>
std::vector<T> linear_row(const ParamStore<T>& ps, const std::string& name, const std::vector<T>& x) {
  const auto& w = ps[name + ".w"].value();
  const auto& b = ps[name + ".b"].value();
  if (x.size() != w.dim(0)) throw ShapeError("linear_row: width mismatch for " + name);
  const std::size_t n = w.dim(1);
  std::vector<T> out(n);
  kernels::matmul(x.data(), w.data().data(), out.data(), 1, x.size(), n);
  for (std::size_t j = 0; j < n; ++j) out[j] = out[j] + b[j];
  return out;
}

template <typename T>
void silu_inplace(std::vector<T>& v) {
  for (auto& x : v) x = kernels::silu(x);
}

/// Streaming state of one stride-1 causal convolution: the last kernel-1
/// inputs. The first input pre-fills the history, matching replicate padding.
template <typename T>
class ConvStream {
public:
  ConvStream() = default;
  ConvStream(std::string name, std::size_t kernel) : name_(std::move(name)), kernel_(kernel) {}

  std::vector<T> push(const ParamStore<T>& ps, const std::vector<T>& row) {
    if (history_.empty()) history_.assign(kernel_ - 1, row);
    std::vector<T> cat;
    cat.reserve(kernel_ * row.size());
    for (const auto& h : history_) cat.insert(cat.end(), h.begin(), h.end());
    cat.insert(cat.end(), row.begin(), row.end());
    if (kernel_ > 1) {
      history_.erase(history_.begin());
      history_.push_back(row);
    }
    return linear_row(ps, name_, cat);
  }

  void reset() { history_.clear(); }

private:
  std::string name_;
  std::size_t kernel_ = 1;
  std::vector<std::vector<T>> history_;
};

} // namespace flood::nn
