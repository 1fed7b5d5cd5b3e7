#pragma once

#include "sdssl/params.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sdssl {

struct AdamWConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  Real weight_decay = 0.1;
};

/// Adaptive moment estimation with decoupled weight decay. Decay applies to
/// parameters flagged `weight_decay` only.
class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig config);

  /// One update with learning rate `lr`. Parameters without gradient are
  /// treated as having a zero gradient.
  void step(Real lr);
  void zero_grad() { zero_grads(params_); }

  [[nodiscard]] const ParamList& params() const { return params_; }
  [[nodiscard]] std::int64_t steps_taken() const { return steps_; }

  // checkpoint access
  [[nodiscard]] std::vector<Matrix>& first_moments() { return m_; }
  [[nodiscard]] std::vector<Matrix>& second_moments() { return v_; }
  void set_steps_taken(std::int64_t s) { steps_ = s; }

 private:
  ParamList params_;
  AdamWConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t steps_ = 0;
};

}  // namespace sdssl
