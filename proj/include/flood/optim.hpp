#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "flood/autograd.hpp"
#include "flood/error.hpp"

namespace flood {

/// Named trainable tensors in insertion order. Names are stable checkpoint keys.
template <typename T>
class ParamStore {
public:
  ag::Var<T> add(const std::string& name, BasicTensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(ag::parameter(std::move(init)));
    return params_.back();
  }

  const ag::Var<T>& operator[](const std::string& name) const { return params_.at(lookup(name)); }
  ag::Var<T>& operator[](const std::string& name) { return params_.at(lookup(name)); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<ag::Var<T>>& vars() { return params_; }
  const std::vector<ag::Var<T>>& vars() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (T g : p.grad().data()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  /// Copies values from another store with identical names and shapes.
  template <typename U>
  void assign_from(const ParamStore<U>& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& src = other[names_[i]].value();
      if (src.shape() != params_[i].shape())
        throw ShapeError("parameter " + names_[i] + " shape " + shape_str(src.shape()) +
                         " does not match " + shape_str(params_[i].shape()));
      params_[i].mutable_value() = src.template cast<T>();
    }
  }

private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::map<std::string, std::size_t> index_;
  std::vector<std::string> names_;
  std::vector<ag::Var<T>> params_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates, one pair per parameter.
template <typename T>
struct AdamState {
  std::vector<BasicTensor<T>> m, v;
  long step = 0;
};

/// One Adam update with bias correction, in place on `params` using their
/// accumulated gradients. Throws NumericError naming the first parameter
/// whose gradient is not finite; nothing is modified in that case.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw ConfigError("adam: learning rate must be positive");
  auto& vars = params.vars();
  for (std::size_t i = 0; i < vars.size(); ++i)
    if (!vars[i].grad().all_finite())
      throw NumericError("adam: non-finite gradient for parameter " + params.names()[i]);
  if (state.m.size() != vars.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : vars) {
      state.m.emplace_back(p.shape(), T{0});
      state.v.emplace_back(p.shape(), T{0});
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < vars.size(); ++i) {
    auto& w = vars[i].mutable_value();
    const auto& g = vars[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      w[j] = static_cast<T>(w[j] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

} // namespace flood
