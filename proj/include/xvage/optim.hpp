#pragma once

// NovoGrad with layer-wise second moments, and the warmup + cosine learning
// rate schedule.

#include <cmath>
#include <numbers>
#include <string>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "xvage/error.hpp"
#include "xvage/nn.hpp"

namespace xvage {

struct OptimizerConfig {
  double lr = 0.001;
  double weight_decay = 0.001;
  double beta1 = 0.95;
  double beta2 = 0.5;
  double eps = 1e-8;
  long warmup_steps = 10000;
  int batch_size = 16;

  void validate() const {
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (warmup_steps < 0) throw ConfigError("optimizer: warmup_steps must be >= 0");
    if (lr < 0 || weight_decay < 0) throw ConfigError("optimizer: lr and weight_decay must be >= 0");
    if (batch_size <= 0) throw ConfigError("optimizer: batch_size must be positive");
  }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"lr", c.lr},         {"weight_decay", c.weight_decay}, {"beta1", c.beta1},          {"beta2", c.beta2},
       {"eps", c.eps},       {"warmup_steps", c.warmup_steps}, {"batch_size", c.batch_size}};
}
inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  c = OptimizerConfig{};
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validate();
}

/// Linear warmup from 0 to the peak, then half-cosine down to 0 at `total`.
inline double lr_at(long step, long total, const OptimizerConfig& cfg) {
  if (step < 0) throw ValidationError("lr_at: negative step");
  if (total <= cfg.warmup_steps)
    throw ConfigError("lr schedule: total steps (" + std::to_string(total) + ") must exceed warmup steps (" +
                      std::to_string(cfg.warmup_steps) + ")");
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (step >= total) return 0.0;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total - cfg.warmup_steps);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
struct NovoGradSlot {
  double v = 0.0;  // second moment of the layer gradient norm
  Mat<T> m;        // first moment
  bool started = false;
};

/// One NovoGrad update of a single weight array:
///   v <- b2 v + (1 - b2) |g|^2     (v = |g|^2 on the first step)
///   m <- b1 m + g / (sqrt(v) + eps) + wd * w
///   w <- w - lr * m
template <class T>
void novograd_update(Mat<T>& w, const Mat<T>& g, NovoGradSlot<T>& slot, const OptimizerConfig& cfg, double lr) {
  if (w.rows() != g.rows() || w.cols() != g.cols()) throw ShapeError("novograd: gradient/parameter shape mismatch");
  const double norm2 = g.template cast<double>().squaredNorm();
  if (!slot.started) {
    slot.v = norm2;
    slot.m = Mat<T>::Zero(w.rows(), w.cols());
    slot.started = true;
  } else {
    slot.v = cfg.beta2 * slot.v + (1.0 - cfg.beta2) * norm2;
  }
  const T scale = static_cast<T>(1.0 / (std::sqrt(slot.v) + cfg.eps));
  slot.m = static_cast<T>(cfg.beta1) * slot.m + g * scale + static_cast<T>(cfg.weight_decay) * w;
  w -= static_cast<T>(lr) * slot.m;
}

/// Keeps one slot per named learnable array.
template <class T>
class NovoGrad {
 public:
  explicit NovoGrad(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimizerConfig& config() const { return cfg_; }

  void step(const ParamRefs<T>& params, double lr) {
    for (auto* p : params) {
      if (!p->trainable) continue;
      novograd_update(p->value, p->grad, slots_[p->name], cfg_, lr);
    }
  }

  const NovoGradSlot<T>* slot(const std::string& name) const {
    auto it = slots_.find(name);
    return it == slots_.end() ? nullptr : &it->second;
  }

 private:
  OptimizerConfig cfg_;
  std::unordered_map<std::string, NovoGradSlot<T>> slots_;
};

}  // namespace xvage
