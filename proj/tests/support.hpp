#pragma once

#include "sdssl/autograd.hpp"
#include "sdssl/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

namespace sdssl::testing {

inline Matrix random_matrix(Index rows, Index cols, std::uint64_t seed, Real scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<Real> dist(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Matrix random_unit_rows(Index rows, Index cols, std::uint64_t seed) {
  Matrix m = random_matrix(rows, cols, seed);
  for (Index r = 0; r < rows; ++r) m.row(r).normalize();
  return m;
}

struct GradCheck {
  Real max_rel_error = 0.0;
  Real max_abs_error = 0.0;
  // entries whose numeric gradient is well above the absolute floor
  int significant = 0;
  bool ok = true;
};

/// Compares the analytic gradient of `loss()` w.r.t. `param` with central
/// differences at up to `max_entries` evenly spaced entries.
inline GradCheck check_gradient(const std::function<ag::Var()>& loss, ag::Var param,
                                Real rtol = 1e-3, Real atol = 1e-7, Real h = 1e-5,
                                Index max_entries = 40) {
  param.zero_grad();
  ag::backward(loss());
  const Matrix analytic = param.grad().size() ? param.grad() : Matrix::Zero(param.rows(), param.cols());
  GradCheck out;
  const Index n = param.value().size();
  const Index stride = std::max<Index>(1, n / max_entries);
  for (Index i = 0; i < n; i += stride) {
    Real& w = param.mutable_value().data()[i];
    const Real saved = w;
    Real plus, minus;
    {
      ag::NoGradGuard ng;
      w = saved + h;
      plus = loss().item();
      w = saved - h;
      minus = loss().item();
    }
    w = saved;
    const Real numeric = (plus - minus) / (2.0 * h);
    const Real a = analytic.data()[i];
    const Real abs_err = std::abs(a - numeric);
    const Real rel = abs_err / std::max(std::abs(numeric), 1e-12);
    out.max_abs_error = std::max(out.max_abs_error, abs_err);
    if (std::abs(numeric) > 100.0 * atol) ++out.significant;
    if (abs_err > atol) out.max_rel_error = std::max(out.max_rel_error, rel);
    if (abs_err > atol && rel > rtol) out.ok = false;
  }
  return out;
}

}  // namespace sdssl::testing
