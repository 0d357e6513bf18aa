#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "smoothcert/error.hpp"
#include "smoothcert/tensor.hpp"

namespace smoothcert {

struct SgdConfig {
  double base_lr = 0.1;
  double momentum = 0.9;
  int epochs = 30;
  double warmup_epochs = 3.0;  // may be fractional
  int batch_size = 128;

  void validate() const {
    if (!(base_lr > 0.0) || !std::isfinite(base_lr)) {
      throw ConfigError("sgd.base_lr", "must be positive");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("sgd.momentum", "must lie in [0, 1)");
    }
    if (epochs <= 0) throw ConfigError("sgd.epochs", "must be positive");
    if (!(warmup_epochs >= 0.0 && warmup_epochs < epochs)) {
      throw ConfigError("sgd.warmup_epochs", "must satisfy 0 <= warmup < epochs");
    }
    if (batch_size <= 0) throw ConfigError("sgd.batch_size", "must be positive");
  }
};

// Linear warmup from zero, then half-cosine decay to zero at the final epoch.
// `epoch_time` is measured in fractional epochs since the start of the run.
inline double learning_rate(const SgdConfig& cfg, double epoch_time) {
  const double warmup = cfg.warmup_epochs;
  const double total = cfg.epochs;
  if (epoch_time < warmup) return cfg.base_lr * epoch_time / warmup;
  const double progress = std::min(1.0, (epoch_time - warmup) / (total - warmup));
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// Heavy-ball SGD (v <- mu*v + g; w <- w - lr*v). Velocity buffers are bound
// to parameter positions, so every call must pass the same parameter list.
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const SgdConfig& config() const noexcept { return cfg_; }

  // Applies one update at `epoch_time` and returns the learning rate used.
  double step(std::span<BasicTensor<T>* const> params, double epoch_time) {
    const double lr = learning_rate(cfg_, epoch_time);
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity_[i].assign(params[i]->size(), T{0});
      }
    }
    if (velocity_.size() != params.size()) {
      throw Error("optimizer parameter list changed between steps");
    }
    const T mu = static_cast<T>(cfg_.momentum);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      BasicTensor<T>& p = *params[i];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        w[j] -= rate * v[j];
      }
    }
    return lr;
  }

 private:
  SgdConfig cfg_;
  std::vector<std::vector<T>> velocity_;
};

}  // namespace smoothcert
