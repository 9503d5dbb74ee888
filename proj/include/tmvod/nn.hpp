#pragma once

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tmvod/autograd.hpp"
#include "tmvod/ops.hpp"
#include "tmvod/rng.hpp"
#include "tmvod/tensor.hpp"

namespace tmvod {

// Named trainable arrays, ordered by name so that iteration (and therefore
// initialization, optimization and serialization) is deterministic.
template <typename T>
class ParamStore {
 public:
  using Var = ag::Var<T>;

  Var create(const std::string& name, Shape shape) {
    if (params_.count(name)) throw std::logic_error("duplicate parameter '" + name + "'");
    auto v = ag::parameter(Tensor<T>(std::move(shape)));
    params_.emplace(name, v);
    return v;
  }

  const Var& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  const std::map<std::string, Var>& all() const { return params_; }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [k, v] : params_) {
      if (v->grad.size() == v->value.size()) v->grad.fill(T(0));
    }
  }

 private:
  std::map<std::string, Var> params_;
};

namespace init {

template <typename T>
void normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

// He initialization; fan-in is the product of all but the leading dim.
template <typename T>
void kaiming(Tensor<T>& t, Rng& rng) {
  const double fan_in = static_cast<double>(t.size()) / t.dim(0);
  normal(t, std::sqrt(2.0 / fan_in), rng);
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual recurrent-layer default.
template <typename T>
void fan_in_uniform(Tensor<T>& t, int fan_in, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-a, a);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
void constant(Tensor<T>& t, T value) {
  t.fill(value);
}

}  // namespace init

// A 3x3 (or k x k) convolution addressed by name prefix.
template <typename T>
struct ConvSpec {
  std::string name;
  int in = 0, out = 0, kernel = 3, stride = 1;
  bool bias = true;

  void create(ParamStore<T>& ps, Rng& rng) const {
    init::kaiming(ps.create(name + ".weight", {out, in, kernel, kernel})->value, rng);
    if (bias) ps.create(name + ".bias", {out});
  }
  ag::Var<T> operator()(const ParamStore<T>& ps, const ag::Var<T>& x) const {
    return ag::conv2d(x, ps.get(name + ".weight"), bias ? ps.get(name + ".bias") : nullptr, stride,
                      kernel / 2);
  }
};

template <typename T>
struct LinearSpec {
  std::string name;
  int in = 0, out = 0;
  double init_std = 0;  // 0 selects He initialization

  void create(ParamStore<T>& ps, Rng& rng) const {
    auto& w = ps.create(name + ".weight", {out, in})->value;
    if (init_std > 0) {
      init::normal(w, init_std, rng);
    } else {
      init::kaiming(w, rng);
    }
    ps.create(name + ".bias", {out});
  }
  ag::Var<T> operator()(const ParamStore<T>& ps, const ag::Var<T>& x) const {
    return ag::linear(x, ps.get(name + ".weight"), ps.get(name + ".bias"));
  }
};

// Per-channel affine instance normalization.
template <typename T>
struct NormSpec {
  std::string name;
  int channels = 0;

  void create(ParamStore<T>& ps) const {
    init::constant(ps.create(name + ".gamma", {channels})->value, T(1));
    ps.create(name + ".beta", {channels});
  }
  ag::Var<T> operator()(const ParamStore<T>& ps, const ag::Var<T>& x) const {
    return ag::instance_norm(x, ps.get(name + ".gamma"), ps.get(name + ".beta"));
  }
};

}  // namespace tmvod
