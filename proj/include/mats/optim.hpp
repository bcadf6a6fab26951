#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "mats/error.hpp"
#include "mats/param_store.hpp"

namespace mats {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// First/second moment buffers, aligned with the trainable subset of a store.
// Alignment is by store index, captured at init; stores must not gain or lose
// parameters afterwards.
struct OptState {
  std::vector<std::size_t> param_indices;
  std::vector<Matrix> m, v;
  std::int64_t step = 0;

  void init(const ParamStore& store) {
    param_indices.clear();
    m.clear();
    v.clear();
    step = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
      const Param& p = store.param_at(i);
      if (!p.trainable) continue;
      param_indices.push_back(i);
      m.emplace_back(Matrix::Zero(p.value.rows(), p.value.cols()));
      v.emplace_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
  }
};

// Decoupled weight decay: p *= (1 - lr*wd) first, then the bias-corrected
// Adam step. With zero gradients forever this shrinks norms by exactly
// (1 - lr*wd) per step; with constant gradient g the first step moves by
// -lr * g / (|g| + eps).
inline void adamw_step(ParamStore& store, OptState& opt, double lr,
                       const AdamWConfig& cfg) {
  ++opt.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (std::size_t k = 0; k < opt.param_indices.size(); ++k) {
    Param& p = store.param_at(opt.param_indices[k]);
    if (!p.trainable)
      throw UsageError("adamw_step: optimizer state references frozen param");
    if (cfg.weight_decay != 0.0) p.value *= (1.0 - lr * cfg.weight_decay);
    opt.m[k] = cfg.beta1 * opt.m[k] + (1.0 - cfg.beta1) * p.grad;
    opt.v[k] =
        cfg.beta2 * opt.v[k] + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    const Matrix mhat = opt.m[k] / bc1;
    const Matrix vhat = opt.v[k] / bc2;
    p.value.array() -=
        lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
  }
}

// Global-norm clip over all trainable grads. Returns the pre-clip norm.
inline double clip_global_norm(ParamStore& store, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Param& p = store.param_at(i);
    if (p.trainable) sq += p.grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (std::size_t i = 0; i < store.size(); ++i) {
      Param& p = store.param_at(i);
      if (p.trainable) p.grad *= s;
    }
  }
  return norm;
}

enum class Scheduler { linear, cosine };

inline Scheduler scheduler_from_name(const std::string& s) {
  if (s == "linear") return Scheduler::linear;
  if (s == "cosine") return Scheduler::cosine;
  throw ConfigError("unknown scheduler '" + s + "' (expected linear|cosine)");
}

// linear: ramp 0 -> base over warmup steps, then constant.
// cosine: same ramp, then cosine decay to zero at total_steps.
inline double lr_at(std::int64_t step, std::int64_t total_steps,
                    std::int64_t warmup, double base_lr, Scheduler kind) {
  if (step < 0 || total_steps <= 0)
    throw UsageError("lr_at: bad step/total_steps");
  if (warmup > 0 && step < warmup)
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (kind == Scheduler::linear) return base_lr;
  const double span = static_cast<double>(std::max<std::int64_t>(
      total_steps - warmup, 1));
  const double t = static_cast<double>(step - warmup) / span;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

}  // namespace mats
