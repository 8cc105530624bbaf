#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "bllm/autograd.hpp"
#include "bllm/matrix.hpp"

namespace bllm {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct Moments {
  Matrix first;
  Matrix second;
};

struct OptimState {
  AdamWConfig config;
  std::uint64_t step = 0;
  // Keyed by parameter name.
  std::map<std::string, Moments> moments;
};

// One AdamW update with decoupled weight decay and bias-corrected moments.
// Throws NumericError (and leaves params and state untouched) if any gradient
// is non-finite.
void adamw_step(std::span<Parameter* const> params, OptimState& state, double lr);

struct LrSchedule {
  double max_lr = 1e-5;
  double warmup_ratio = 0.05;
  std::size_t total_steps = 0;
  double min_lr = 0.0;

  std::size_t warmup_steps() const;
};

// Linear warmup from 0 to max_lr, then cosine decay to min_lr at total_steps.
// Steps past the end clamp to min_lr.
double lr_at(const LrSchedule& schedule, std::size_t step);

}  // namespace bllm
