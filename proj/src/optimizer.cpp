#include "sdssl/optimizer.hpp"

#include <cmath>

namespace sdssl {

AdamW::AdamW(ParamList params, AdamWConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.var.requires_grad()) throw ConfigError("AdamW: parameter " + p.name + " is frozen");
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

void AdamW::step(Real lr) {
  ++steps_;
  const Real bc1 = 1.0 - std::pow(config_.beta1, static_cast<Real>(steps_));
  const Real bc2 = 1.0 - std::pow(config_.beta2, static_cast<Real>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ag::Var var = params_[i].var;
    Matrix& w = var.mutable_value();
    if (params_[i].weight_decay && config_.weight_decay != 0.0) {
      w *= 1.0 - lr * config_.weight_decay;
    }
    const Matrix& g = var.grad();
    if (g.size() == 0) {
      m_[i] *= config_.beta1;
      v_[i] *= config_.beta2;
    } else {
      m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
      v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseAbs2();
    }
    w.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

}  // namespace sdssl
