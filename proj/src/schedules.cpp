#include "sdssl/schedules.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace sdssl {

void ScheduleState::validate() const {
  if (total_steps <= 0) throw ConfigError("schedule: total_steps must be positive");
  if (step < 0 || step > total_steps) {
    throw ConfigError("schedule: step " + std::to_string(step) + " outside [0, " +
                      std::to_string(total_steps) + "]");
  }
  if (warmup_steps < 0 || warmup_steps >= total_steps) {
    throw ConfigError("schedule: warmup_steps must be in [0, total_steps)");
  }
  if (!(alpha_max >= 0.0)) throw ConfigError("schedule: alpha_max must be non-negative");
  if (!(base_lr > 0.0)) throw ConfigError("schedule: base_lr must be positive");
  if (!(ema_base >= 0.0 && ema_base < 1.0)) throw ConfigError("schedule: ema_base must be in [0, 1)");
  if (!(ema_final > ema_base && ema_final <= 1.0)) {
    throw ConfigError("schedule: ema_final must be in (ema_base, 1]");
  }
}

namespace {

Real progress(std::int64_t step, std::int64_t total) {
  return static_cast<Real>(step) / static_cast<Real>(total);
}

}  // namespace

Real alpha_at(const ScheduleState& s) {
  if (s.step >= s.total_steps) return s.alpha_max;
  return s.alpha_max * (1.0 - std::cos(std::numbers::pi * progress(s.step, s.total_steps))) / 2.0;
}

Real lr_at(const ScheduleState& s) {
  if (s.step < s.warmup_steps) {
    return s.base_lr * progress(s.step, s.warmup_steps);
  }
  if (s.step >= s.total_steps) return 0.0;
  const Real t = progress(s.step - s.warmup_steps, s.total_steps - s.warmup_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

Real ema_momentum_at(const ScheduleState& s) {
  if (s.step >= s.total_steps) return s.ema_final;
  const Real t = progress(s.step, s.total_steps);
  return s.ema_final - (s.ema_final - s.ema_base) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace sdssl
