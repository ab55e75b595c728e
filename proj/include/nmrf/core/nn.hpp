#pragma once

#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "nmrf/core/ops.hpp"
#include "nmrf/core/random.hpp"

namespace nmrf {

// Owns all learnable tensors of a model; std::map keeps addresses stable so
// modules can hold raw pointers.
template <class S>
class ParamStore {
 public:
  Parameter<S>& create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw std::logic_error("duplicate parameter: " + name);
    it->second.name = name;
    it->second.value = MatX<S>::Zero(rows, cols);
    return it->second;
  }

  Parameter<S>* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : &it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::map<std::string, Parameter<S>> params_;
};

template <class S>
void fill_uniform(MatX<S>& m, std::mt19937_64& rng, S lo, S hi) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<S>(dist(rng));
}

template <class S>
void fill_normal(MatX<S>& m, std::mt19937_64& rng, S stddev) {
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<S>(dist(rng));
}

// Fan-in scaled uniform init; gain < 1 shrinks residual-branch outputs.
template <class S>
void init_fanin(MatX<S>& m, std::mt19937_64& rng, Eigen::Index fan_in, S gain = S(1)) {
  S bound = gain / std::sqrt(static_cast<S>(fan_in));
  fill_uniform(m, rng, -bound, bound);
}

template <class S>
struct Linear {
  Parameter<S>* w = nullptr;  // [out x in]
  Parameter<S>* b = nullptr;  // [1 x out]

  static Linear create(ParamStore<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index out,
                       std::mt19937_64& rng, S gain = S(1), bool zero_init = false) {
    Linear l;
    l.w = &ps.create(name + ".w", out, in);
    l.b = &ps.create(name + ".b", 1, out);
    if (!zero_init) init_fanin(l.w->value, rng, in, gain);
    return l;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const { return linear(x, use(t, *w), use(t, *b)); }
};

// Two linear layers with an activation in between. The output layer can be
// zero-initialized so a residual branch starts as identity.
template <class S>
struct Mlp {
  Linear<S> fc1, fc2;

  static Mlp create(ParamStore<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index hidden,
                    Eigen::Index out, std::mt19937_64& rng, bool zero_out = false) {
    Mlp m;
    m.fc1 = Linear<S>::create(ps, name + ".fc1", in, hidden, rng);
    m.fc2 = Linear<S>::create(ps, name + ".fc2", hidden, out, rng, S(1), zero_out);
    return m;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const { return fc2(t, gelu(fc1(t, x))); }
};

// Normalizing head: linear -> per-vector channel norm -> activation -> linear.
// Hidden width equals the input width.
template <class S>
struct NormHead {
  Linear<S> fc1, fc2;
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;

  static NormHead create(ParamStore<S>& ps, const std::string& name, Eigen::Index in, Eigen::Index out,
                         std::mt19937_64& rng) {
    NormHead h;
    h.fc1 = Linear<S>::create(ps, name + ".fc1", in, in, rng);
    h.fc2 = Linear<S>::create(ps, name + ".fc2", in, out, rng);
    h.gamma = &ps.create(name + ".norm.g", 1, in);
    h.gamma->value.setOnes();
    h.beta = &ps.create(name + ".norm.b", 1, in);
    return h;
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    Var<S> y = channel_norm(fc1(t, x), use(t, *gamma), use(t, *beta));
    return fc2(t, gelu(y));
  }
};

}  // namespace nmrf
