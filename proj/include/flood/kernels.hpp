#pragma once

// Scalar kernels shared by the taped ops and the tape-free streaming paths.
// Both routes must produce bit-identical floats, so every arithmetic step that
// matters lives here exactly once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace flood::kernels {

inline constexpr double kExpClamp = 30.0;

template <typename T>
inline T clamped_exp(T x) {
  return static_cast<T>(std::exp(std::min(static_cast<double>(x), kExpClamp)));
}

template <typename T>
inline T sigmoid(T x) {
  const double xd = x;
  if (xd >= 0) return static_cast<T>(1.0 / (1.0 + std::exp(-xd)));
  const double e = std::exp(xd);
  return static_cast<T>(e / (1.0 + e));
}

template <typename T>
inline T silu(T x) {
  return x * sigmoid(x);
}

/// out[m x n] = a[m x k] * b[k x n]. Each output row is accumulated in double
/// in the fixed order p = 0..k-1, so a row's result never depends on m.
template <typename T>
void matmul(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(br[j]);
    }
    T* o = out + i * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(acc[j]);
  }
}

/// Row-wise layer normalisation without affine terms. Writes the normalised
/// row and returns 1/sigma.
template <typename T>
double layer_norm_row(const T* x, T* y, std::size_t n, double eps) {
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) mean += x[j];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double d = x[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j) y[j] = static_cast<T>((x[j] - mean) * inv);
  return inv;
}

} // namespace flood::kernels
