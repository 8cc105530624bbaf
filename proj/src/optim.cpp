#include "bllm/optim.hpp"

#include <cmath>
#include <numbers>

#include "bllm/error.hpp"

namespace bllm {

void adamw_step(std::span<Parameter* const> params, OptimState& state, double lr) {
  for (const Parameter* p : params) {
    if (p->grad.size() != p->value.size()) {
      throw ShapeError("adamw_step: gradient of " + p->name + " has shape " +
                       p->grad.shape_string() + ", parameter " + p->value.shape_string());
    }
    if (!p->grad.all_finite()) {
      throw NumericError("adamw_step: non-finite gradient in " + p->name + " at step " +
                         std::to_string(state.step + 1));
    }
  }

  const AdamWConfig& cfg = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double correct1 = 1.0 - std::pow(cfg.beta1, t);
  const double correct2 = 1.0 - std::pow(cfg.beta2, t);

  for (Parameter* p : params) {
    Moments& m = state.moments[p->name];
    if (m.first.size() != p->value.size()) {
      m.first = Matrix(p->value.rows(), p->value.cols());
      m.second = Matrix(p->value.rows(), p->value.cols());
    }
    auto& w = p->value.data();
    const auto& g = p->grad.data();
    auto& m1 = m.first.data();
    auto& m2 = m.second.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr * cfg.weight_decay * w[i];
      m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g[i];
      m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m1[i] / correct1;
      const double vhat = m2[i] / correct2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

std::size_t LrSchedule::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
}

double lr_at(const LrSchedule& schedule, std::size_t step) {
  if (step >= schedule.total_steps) return schedule.min_lr;
  const std::size_t warmup = schedule.warmup_steps();
  if (step < warmup) {
    return schedule.max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double span = static_cast<double>(schedule.total_steps - warmup);
  const double progress = static_cast<double>(step - warmup) / span;
  return schedule.min_lr + (schedule.max_lr - schedule.min_lr) *
                               (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

}  // namespace bllm
