#pragma once

// Named parameter registry shared by the networks, the optimizer, and the
// checkpoint code. Frozen entries stop tracking gradients and are skipped by
// adam_step; a checksum over them lets training loops prove they never moved.

#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "acpo/errors.hpp"
#include "acpo/tensor.hpp"

namespace acpo {

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t, bool frozen = false) {
    if (entries_.count(name))
      throw ConfigError("ParamStore: duplicate parameter name '" + name + "'");
    t.set_requires_grad(!frozen);
    order_.push_back(name);
    auto [it, _] = entries_.emplace(name, std::move(t));
    if (frozen) frozen_.insert(name);
    return it->second;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw ConfigError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  const Tensor& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  void freeze(const std::string& name) {
    get(name).set_requires_grad(false);
    frozen_.insert(name);
  }

  void freeze_all() {
    for (const std::string& n : order_) freeze(n);
  }

  bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const std::string& n : order_)
      if (!frozen_.count(n)) out.push_back(n);
    return out;
  }

  int64_t trainable_count() const {
    int64_t c = 0;
    for (const std::string& n : order_)
      if (!frozen_.count(n)) c += entries_.at(n).numel();
    return c;
  }

  void zero_grads() {
    for (const std::string& n : order_) {
      Tensor& t = entries_.at(n);
      if (t.requires_grad()) t.zero_grad();
    }
  }

  // FNV-1a over the raw bytes of every frozen tensor, in insertion order.
  // Bit-identical parameters give an identical checksum and vice versa.
  uint64_t checksum_frozen() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t len) {
      const unsigned char* b = static_cast<const unsigned char*>(p);
      for (size_t i = 0; i < len; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const std::string& n : order_) {
      if (!frozen_.count(n)) continue;
      mix(n.data(), n.size());
      const Tensor& t = entries_.at(n);
      mix(t.data().data(), t.data().size() * sizeof(double));
    }
    return h;
  }

  struct Moments {
    std::vector<double> m, v;
  };

  std::unordered_map<std::string, Moments>& moments() { return moments_; }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> entries_;
  std::unordered_set<std::string> frozen_;
  std::unordered_map<std::string, Moments> moments_;
};

// One Adam update with bias correction over the non-frozen entries, consuming
// the gradients accumulated on the tensors. Moment state lives in the store,
// keyed by parameter name, and persists across calls.
inline void adam_step(ParamStore& store, double lr, double beta1, double beta2,
                      double eps, int step_index) {
  if (lr <= 0.0) throw ConfigError("adam_step: lr must be positive");
  if (step_index < 1) throw ConfigError("adam_step: step_index must be >= 1");

  double bc1 = 1.0 - std::pow(beta1, step_index);
  double bc2 = 1.0 - std::pow(beta2, step_index);

  for (const std::string& name : store.names()) {
    if (store.is_frozen(name)) continue;
    Tensor& p = store.get(name);
    if (!p.requires_grad()) continue;
    auto& mo = store.moments()[name];
    if (mo.m.size() != static_cast<size_t>(p.numel())) {
      mo.m.assign(p.numel(), 0.0);
      mo.v.assign(p.numel(), 0.0);
    }
    auto g = p.grad();
    auto& val = p.values();
    for (int i = 0; i < p.numel(); ++i) {
      mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
      mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
      double mhat = mo.m[i] / bc1;
      double vhat = mo.v[i] / bc2;
      val[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace acpo
