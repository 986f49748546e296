// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "protonmt/serialize.hpp"
#include "protonmt/tensor.hpp"

namespace protonmt {

/// Named parameter collection. Insertion order is the canonical order for
/// checkpoints, checksums and optimizer traversal. Non-trainable entries are
/// buffers (e.g. a frozen prototype table) that ride along in checkpoints but
/// are invisible to the optimizer and parameter counts.
template <typename Real>
class ParamStore {
 public:
  struct Item {
    std::string name;
    Tensor<Real> tensor;
    bool trainable = true;
  };

  Tensor<Real>& add(const std::string& name, Tensor<Real> t, bool trainable = true) {
    if (index_.count(name))
      throw std::logic_error("duplicate parameter name: " + name);
    if (trainable) t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.push_back(Item{name, std::move(t), trainable});
    return items_.back().tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<Real>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return items_[it->second].tensor;
  }
  const Tensor<Real>& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  std::vector<Item>& items() { return items_; }
  const std::vector<Item>& items() const { return items_; }

  void zero_grad() {
    for (auto& it : items_) it.tensor.zero_grad();
  }

  /// Scalar count over entries selected by pred(name); trainable entries only.
  template <typename Pred>
  size_t count_scalars(Pred&& pred) const {
    size_t n = 0;
    for (const auto& it : items_)
      if (it.trainable && pred(it.name)) n += it.tensor.numel();
    return n;
  }

  /// FNV-1a over names, shapes and raw values, in insertion order.
  uint64_t checksum() const {
    uint64_t h = fnv1a_init();
    for (const auto& it : items_) {
      h = fnv1a(h, it.name);
      for (int s : it.tensor.shape()) h = fnv1a_pod(h, s);
      h = fnv1a(h, it.tensor.value().data(),
                it.tensor.value().size() * sizeof(Real));
    }
    return h;
  }

 private:
  std::vector<Item> items_;
  std::unordered_map<std::string, size_t> index_;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name, so
/// parameters attached mid-run (the prototype-attention modules) start with
/// fresh zero moments while the shared step counter keeps running.
template <typename Real>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  /// One update over all trainable parameters, at the given learning rate
  /// (callers pass the scheduled rate; defaults to the configured one).
  void step(ParamStore<Real>& params, double lr = -1.0) {
    if (lr < 0) lr = cfg_.lr;
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& item : params.items()) {
      if (!item.trainable) continue;
      if (!item.tensor.requires_grad())
        throw std::logic_error("adam: missing gradient for trainable parameter " +
                               item.name);
      auto& mv = moments_[item.name];
      if (mv.m.size() != item.tensor.numel()) {
        mv.m.assign(item.tensor.numel(), 0.0);
        mv.v.assign(item.tensor.numel(), 0.0);
      }
      auto& val = item.tensor.value();
      const auto& g = item.tensor.grad();
      for (size_t i = 0; i < val.size(); ++i) {
        double gi = static_cast<double>(g[i]);
        mv.m[i] = cfg_.beta1 * mv.m[i] + (1.0 - cfg_.beta1) * gi;
        mv.v[i] = cfg_.beta2 * mv.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        double mhat = mv.m[i] / bc1;
        double vhat = mv.v[i] / bc2;
        val[i] = static_cast<Real>(static_cast<double>(val[i]) -
                                   lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

/// Linear warm-up to base_lr over warmup_steps, then inverse-square-root
/// decay. step counts from 1.
inline double lr_schedule(double base_lr, int warmup_steps, int64_t step) {
  if (step < 1) step = 1;
  if (warmup_steps < 1) warmup_steps = 1;
  if (step <= warmup_steps)
    return base_lr * static_cast<double>(step) / warmup_steps;
  return base_lr * std::sqrt(static_cast<double>(warmup_steps) /
                             static_cast<double>(step));
}

}  // namespace protonmt
