#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>

#include "curlip/config.hpp"
#include "curlip/tape.hpp"
#include "curlip/tensor.hpp"

namespace curlip {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

template <typename T>
struct AdamMoments {
  Tensor<T> m;
  Tensor<T> v;
};

// Named parameters + config + optimizer moments; the checkpoint unit.
template <typename T>
struct ModelState {
  std::map<std::string, Param<T>> params;
  std::map<std::string, AdamMoments<T>> moments;
  RunConfig config;
  int64_t step_count = 0;
  double stored_val_loss = std::nan("");

  Param<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    auto [it, fresh] = params.emplace(name, Param<T>{});
    if (!fresh) throw Error("duplicate parameter name: " + name);
    it->second.grad = Tensor<T>::zeros(value.shape());
    it->second.value = std::move(value);
    it->second.trainable = trainable;
    return it->second;
  }

  Param<T>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params.count(name) != 0; }

  void zero_grads() {
    for (auto& [_, p] : params)
      std::fill(p.grad.vec().begin(), p.grad.vec().end(), T(0));
  }

  // FNV-1a over the raw value bytes, in name order. Used to prove that a
  // frozen snapshot never drifts.
  uint64_t checksum() const {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, size_t n) {
      const unsigned char* p = (const unsigned char*)data;
      for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, p] : params) {
      mix(name.data(), name.size());
      mix(p.value.data(), (size_t)p.value.numel() * sizeof(T));
    }
    return h;
  }
};

using ModelStateF = ModelState<float>;
using ModelStateD = ModelState<double>;

template <typename To, typename From>
ModelState<To> state_cast(const ModelState<From>& s) {
  ModelState<To> out;
  out.config = s.config;
  out.step_count = s.step_count;
  out.stored_val_loss = s.stored_val_loss;
  for (const auto& [name, p] : s.params)
    out.add(name, tensor_cast<To>(p.value), p.trainable);
  for (const auto& [name, m] : s.moments)
    out.moments.emplace(name, AdamMoments<To>{tensor_cast<To>(m.m), tensor_cast<To>(m.v)});
  return out;
}

// Handles for a ModelState's parameters lifted onto a tape as leaves.
template <typename T>
struct ParamVars {
  std::map<std::string, typename Tape<T>::Var> vars;

  typename Tape<T>::Var at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("unknown lifted parameter: " + name);
    return it->second;
  }
};

template <typename T>
ParamVars<T> lift_params(Tape<T>& tape, const ModelState<T>& state, bool requires_grad) {
  ParamVars<T> out;
  for (const auto& [name, p] : state.params)
    out.vars.emplace(name, tape.leaf(p.value, requires_grad && p.trainable));
  return out;
}

// Accumulates tape gradients back into the state's grad buffers.
template <typename T>
void harvest_grads(Tape<T>& tape, const ParamVars<T>& vars, ModelState<T>& state) {
  for (auto& [name, p] : state.params) {
    if (!p.trainable) continue;
    p.grad.add_(tape.grad(vars.at(name)));
  }
}

// One AdamW update: decoupled weight decay first, then bias-corrected moments.
template <typename T>
void adamw_step(ModelState<T>& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8, double weight_decay = 0.0) {
  state.step_count += 1;
  const double t = (double)state.step_count;
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, p] : state.params) {
    if (!p.trainable) continue;
    auto it = state.moments.find(name);
    if (it == state.moments.end())
      it = state.moments
               .emplace(name, AdamMoments<T>{Tensor<T>::zeros(p.value.shape()),
                                             Tensor<T>::zeros(p.value.shape())})
               .first;
    AdamMoments<T>& mom = it->second;
    const int64_t n = p.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      double theta = (double)p.value.at(i) * (1.0 - lr * weight_decay);
      const double g = (double)p.grad.at(i);
      const double m = beta1 * (double)mom.m.at(i) + (1.0 - beta1) * g;
      const double v = beta2 * (double)mom.v.at(i) + (1.0 - beta2) * g * g;
      mom.m.at(i) = (T)m;
      mom.v.at(i) = (T)v;
      theta -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
      p.value.at(i) = (T)theta;
    }
  }
}

// Binary checkpoint I/O (32-bit parameter data). Defined for float states.
void save_checkpoint(const ModelStateF& state, const std::string& path);
ModelStateF load_checkpoint(const std::string& path);

}  // namespace curlip
