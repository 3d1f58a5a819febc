// Named parameter store plus SGD with optional momentum and weight decay.

#ifndef BATRFST_OPTIM_HPP_
#define BATRFST_OPTIM_HPP_

#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "batrfst/error.hpp"
#include "batrfst/tensor.hpp"

namespace batr {

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xCBF29CE484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// Named parameter tensors for backbone + refinement head. std::map keeps
// iteration (and therefore every update sweep) in deterministic name order.
template <typename S>
struct model_state {
  std::map<std::string, tensor<S>> params;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  bool has(const std::string& name) const { return params.count(name) != 0; }

  tensor<S>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw usage_error("model_state: unknown parameter '" + name + "'");
    return it->second;
  }
  const tensor<S>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw usage_error("model_state: unknown parameter '" + name + "'");
    return it->second;
  }

  void add(const std::string& name, tensor<S> t) {
    if (has(name)) throw usage_error("model_state: duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    params.emplace(name, std::move(t));
  }

  model_state clone() const {
    model_state out;
    out.seed = seed;
    out.config_hash = config_hash;
    for (const auto& [name, t] : params) {
      tensor<S> c = t.detach();
      c.set_requires_grad(t.requires_grad());
      out.params.emplace(name, std::move(c));
    }
    return out;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  // Content hash over raw value bits of parameters matching the prefix;
  // used by the backbone freeze contract.
  std::uint64_t content_hash(const std::string& prefix = "") const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : params) {
      if (name.rfind(prefix, 0) != 0) continue;
      h = fnv1a64(name, h);
      h = fnv1a64(t.values().data(), t.values().size() * sizeof(S), h);
    }
    return h;
  }
};

// p <- p - lr * (grad + weight_decay * p), through a momentum buffer when
// momentum > 0. Grads are zeroed after the step.
template <typename S>
class sgd {
 public:
  explicit sgd(S lr, S momentum = S(0), S weight_decay = S(0))
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (lr < S(0)) throw parameter_error("sgd: negative learning rate");
  }

  S learning_rate() const { return lr_; }
  void set_learning_rate(S lr) {
    if (lr < S(0)) throw parameter_error("sgd: negative learning rate");
    lr_ = lr;
  }

  // Updates every parameter accepted by `select`; a selected parameter with
  // no populated gradient is a usage error.
  void step(model_state<S>& state,
            const std::function<bool(const std::string&)>& select = nullptr) {
    for (auto& [name, p] : state.params) {
      if (select && !select(name)) continue;
      if (!p.has_grad())
        throw usage_error("sgd: parameter '" + name + "' has no gradient");
      apply(name, p);
      p.zero_grad();
    }
  }

  // Single-tensor step (grads zeroed), for callers outside a model_state.
  void step(tensor<S>& p, const std::string& slot = "") {
    if (!p.has_grad()) throw usage_error("sgd: parameter has no gradient");
    apply(slot, p);
    p.zero_grad();
  }

  void reset() { velocity_.clear(); }

 private:
  void apply(const std::string& name, tensor<S>& p) {
    auto& values = p.mutable_values();
    const auto& grad = p.grad();
    if (momentum_ > S(0)) {
      auto& v = velocity_[name];
      if (v.size() != values.size()) v.assign(values.size(), S(0));
      for (std::size_t i = 0; i < values.size(); ++i) {
        S g = grad[i] + weight_decay_ * values[i];
        v[i] = momentum_ * v[i] + g;
        values[i] -= lr_ * v[i];
      }
    } else {
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] -= lr_ * (grad[i] + weight_decay_ * values[i]);
    }
  }

  S lr_;
  S momentum_;
  S weight_decay_;
  std::map<std::string, std::vector<S>> velocity_;
};

}  // namespace batr

#endif  // BATRFST_OPTIM_HPP_
