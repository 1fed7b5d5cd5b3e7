#pragma once

// Per-step scalar schedules. All are pure functions of the state, so a
// resumed run sees exactly the values an uninterrupted run would.

#include "sdssl/common.hpp"

#include <cstdint>

namespace sdssl {

struct ScheduleState {
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
  Real alpha_max = 0.6;
  Real base_lr = 1.5e-4;
  Real ema_base = 0.99;
  Real ema_final = 1.0;

  void validate() const;
  [[nodiscard]] ScheduleState at(std::int64_t s) const {
    ScheduleState copy = *this;
    copy.step = s;
    return copy;
  }
};

/// alpha_max * (1 - cos(pi t / T)) / 2
Real alpha_at(const ScheduleState& state);
/// Linear warmup to base_lr, then cosine decay to 0 at total_steps.
Real lr_at(const ScheduleState& state);
/// Cosine ramp from ema_base to ema_final.
Real ema_momentum_at(const ScheduleState& state);

}  // namespace sdssl
