#pragma once

// Central finite-difference oracle. Independent of the tape: it only calls
// the forward function and reads the scalar it returns.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flood/autograd.hpp"

namespace flood::testing {

inline double rel_err(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / scale;
}

/// Perturbs `leaf` entries in place and returns d(loss)/d(leaf[i]) by
/// (f(x+h) - f(x-h)) / 2h for each listed index (all if empty).
inline std::vector<double> fd_grad(ag::Var<double>& leaf, const std::function<double()>& loss,
                                   double h = 1e-3, std::vector<std::size_t> idx = {}) {
  auto& v = leaf.mutable_value();
  if (idx.empty())
    for (std::size_t i = 0; i < v.numel(); ++i) idx.push_back(i);
  std::vector<double> out;
  for (auto i : idx) {
    const double x0 = v[i];
    v[i] = x0 + h;
    const double fp = loss();
    v[i] = x0 - h;
    const double fm = loss();
    v[i] = x0;
    out.push_back((fp - fm) / (2 * h));
  }
  return out;
}

/// Max relative error between tape gradients of `leaf` and the FD oracle.
inline double max_grad_error(ag::Var<double>& leaf,
                             const std::function<ag::Var<double>()>& build,
                             std::vector<std::size_t> idx = {}) {
  leaf.zero_grad();
  ag::backward(build());
  const auto analytic = leaf.grad();
  if (idx.empty())
    for (std::size_t i = 0; i < analytic.numel(); ++i) idx.push_back(i);
  const auto numeric = fd_grad(leaf, [&] { return build().item(); }, 1e-3, idx);
  double worst = 0.0;
  for (std::size_t q = 0; q < idx.size(); ++q)
    worst = std::max(worst, rel_err(analytic[idx[q]], numeric[q]));
  return worst;
}

} // namespace flood::testing
