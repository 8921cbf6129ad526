#pragma once

#include <cstddef>
#include <span>
#include <string_view>

#include "pialm/model.hpp"

namespace pialm {

enum class Schedule { constant, cosine, inverse_sqrt };

std::string_view to_string(Schedule s);
Schedule parse_schedule(std::string_view text);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm cap; 0 disables
  Schedule schedule = Schedule::constant;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;  // horizon for the cosine schedule
};

// Learning rate for 1-based `step`. Linear warmup applies to every schedule.
double learning_rate(const AdamConfig& config, std::size_t step);

struct OptimizerState {
  std::size_t step = 0;
  Parameters<float> m, v;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

OptimizerState make_optimizer_state(const Parameters<float>& like);

double global_norm(const Parameters<float>& grads);

// Rescales grads so their global norm is at most max_norm. Returns the norm
// before clipping.
double clip_by_global_norm(Parameters<float>& grads, double max_norm);

// One bias-corrected Adam update of a flat tensor; `step` is 1-based.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> m,
                 std::span<float> v, std::size_t step, double lr, double beta1, double beta2,
                 double eps);

// Advances state.step, then updates every tensor at learning_rate(config, step).
// Clipping is the caller's business.
void adam_step(Parameters<float>& params, const Parameters<float>& grads, OptimizerState& state,
               const AdamConfig& config);

}  // namespace pialm
