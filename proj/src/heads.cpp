#include "sdssl/heads.hpp"

#include "sdssl/rng.hpp"

#include <string>

namespace sdssl {

namespace {

constexpr Real kInitStd = 0.02;

ag::Var fresh(const ag::Var& v) {
  return v.defined() ? ag::Var(v.value(), v.requires_grad()) : ag::Var();
}

}  // namespace

std::string_view to_string(Framework f) {
  switch (f) {
    case Framework::simclr:
      return "simclr";
    case Framework::byol:
      return "byol";
    case Framework::mocov3:
      return "mocov3";
  }
  return "unknown";
}

Framework parse_framework(std::string_view s) {
  if (s == "simclr") return Framework::simclr;
  if (s == "byol") return Framework::byol;
  if (s == "mocov3") return Framework::mocov3;
  throw ConfigError("unknown framework '" + std::string(s) + "' (expected simclr|byol|mocov3)");
}

void HeadConfig::validate() const {
  if (out_dim <= 0) throw ConfigError("heads.out_dim must be positive");
  if (hidden_last_projector <= 0) throw ConfigError("heads.hidden_last_projector must be positive");
  if (hidden_intermediate_projector <= 0) {
    throw ConfigError("heads.hidden_intermediate_projector must be positive");
  }
  if (hidden_predictor <= 0) throw ConfigError("heads.hidden_predictor must be positive");
}

// ---------------------------------------------------------------------------

BatchNorm1d::BatchNorm1d(Index dim, bool affine)
    : running_mean_(Matrix::Zero(1, dim)), running_var_(Matrix::Ones(1, dim)) {
  if (affine) {
    gamma_ = ag::parameter(Matrix::Ones(1, dim));
    beta_ = ag::parameter(Matrix::Zero(1, dim));
  }
}

ag::Var BatchNorm1d::forward(const ag::Var& x, BnMode mode) {
  if (mode == BnMode::eval) {
    return ag::batch_norm_fixed_stats(x, gamma_, beta_, running_mean_.row(0), running_var_.row(0),
                                      kEps);
  }
  ag::BatchStats stats;
  ag::Var y = ag::batch_norm_batch_stats(x, gamma_, beta_, kEps, &stats);
  if (mode == BnMode::train) {
    const auto n = static_cast<Real>(x.rows());
    running_mean_ = (1.0 - kMomentum) * running_mean_ + kMomentum * stats.mean;
    running_var_ = (1.0 - kMomentum) * running_var_ + kMomentum * stats.var * (n / (n - 1.0));
  }
  return y;
}

void BatchNorm1d::collect_parameters(ParamList& out, const std::string& prefix) const {
  if (gamma_.defined()) {
    out.push_back({prefix + "gamma", gamma_, false});
    out.push_back({prefix + "beta", beta_, false});
  }
}

void BatchNorm1d::collect_buffers(BufferList& out, const std::string& prefix) {
  out.push_back({prefix + "running_mean", &running_mean_});
  out.push_back({prefix + "running_var", &running_var_});
}

BatchNorm1d BatchNorm1d::clone() const {
  BatchNorm1d copy(*this);
  copy.gamma_ = fresh(gamma_);
  copy.beta_ = fresh(beta_);
  return copy;
}

// ---------------------------------------------------------------------------

Mlp::Mlp(const std::vector<LayerSpec>& layers, std::uint64_t seed) {
  if (layers.empty()) throw ConfigError("Mlp needs at least one layer");
  Rng rng(seed);
  for (const auto& spec : layers) {
    Layer layer;
    layer.spec = spec;
    layer.weight = ag::parameter(trunc_normal(spec.in, spec.out, kInitStd, rng));
    if (spec.batch_norm) {
      layer.bn.emplace(spec.out, spec.bn_affine);
    } else {
      layer.bias = ag::parameter(Matrix::Zero(1, spec.out));
    }
    layers_.push_back(std::move(layer));
  }
}

ag::Var Mlp::forward(const ag::Var& x, BnMode mode) {
  ag::Var h = x;
  for (auto& layer : layers_) {
    h = ag::linear(h, layer.weight, layer.bias);
    if (layer.bn) h = layer.bn->forward(h, mode);
    if (layer.spec.relu) h = ag::relu(h);
  }
  return h;
}

void Mlp::collect_parameters(ParamList& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& layer = layers_[i];
    const std::string p = prefix + std::to_string(i) + ".";
    out.push_back({p + "weight", layer.weight, true});
    if (layer.bias.defined()) out.push_back({p + "bias", layer.bias, false});
    if (layer.bn) layer.bn->collect_parameters(out, p + "bn.");
  }
}

void Mlp::collect_buffers(BufferList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (layers_[i].bn) layers_[i].bn->collect_buffers(out, prefix + std::to_string(i) + ".bn.");
  }
}

Mlp Mlp::clone() const {
  Mlp copy(*this);
  for (auto& layer : copy.layers_) {
    layer.weight = fresh(layer.weight);
    layer.bias = fresh(layer.bias);
    if (layer.bn) layer.bn = layer.bn->clone();
  }
  return copy;
}

Mlp make_projector(Index in_dim, Index hidden, Index out_dim, bool bn_on_output,
                   std::uint64_t seed) {
  return Mlp({{in_dim, hidden, true, true, true},
              {hidden, hidden, true, true, true},
              {hidden, out_dim, bn_on_output, false, false}},
             seed);
}

Mlp make_predictor(Index dim, Index hidden, bool bn_on_output, std::uint64_t seed) {
  return Mlp({{dim, hidden, true, true, true}, {hidden, dim, bn_on_output, false, false}}, seed);
}

// ---------------------------------------------------------------------------

HeadBank::HeadBank(const HeadConfig& config, Index embed_dim, int num_layers,
                   bool intermediate_heads, std::uint64_t seed)
    : config_(config), num_layers_(num_layers), intermediate_(intermediate_heads) {
  config_.validate();
  if (num_layers < 1) throw ConfigError("HeadBank needs at least one layer");
  const bool bn_out = config_.bn_on_output();
  const int first = intermediate_ ? 1 : num_layers_;
  // Every head draws from its own stream keyed by layer, so the last-layer
  // heads are identical whether or not intermediate heads exist.
  for (int l = first; l <= num_layers_; ++l) {
    const Index hidden = (l == num_layers_) ? config_.hidden_last_projector
                                            : config_.hidden_intermediate_projector;
    projectors_.push_back(make_projector(embed_dim, hidden, config_.out_dim, bn_out,
                                         derive_seed(seed, {fnv1a("projector"),
                                                            static_cast<std::uint64_t>(l)})));
  }
  if (has_predictor(config_.framework)) {
    const int first_pred = config_.shared_predictor ? num_layers_ : first;
    for (int l = first_pred; l <= num_layers_; ++l) {
      predictors_.push_back(make_predictor(config_.out_dim, config_.hidden_predictor, bn_out,
                                           derive_seed(seed, {fnv1a("predictor"),
                                                              static_cast<std::uint64_t>(l)})));
    }
  }
}

HeadBank HeadBank::make_teacher() const {
  HeadBank teacher;
  teacher.config_ = config_;
  teacher.num_layers_ = num_layers_;
  teacher.intermediate_ = false;
  teacher.role_ = Role::teacher;
  teacher.projectors_.push_back(projectors_.back().clone());
  return teacher;
}

bool HeadBank::has_projector(int layer) const {
  if (layer < 1 || layer > num_layers_) return false;
  return intermediate_ || layer == num_layers_;
}

std::size_t HeadBank::projector_slot(int layer) const {
  if (layer < 1 || layer > num_layers_) {
    throw IndexError("projector layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(num_layers_));
  }
  if (!intermediate_) {
    if (layer != num_layers_) {
      throw IndexError(std::string(role_ == Role::teacher ? "teacher" : "baseline") +
                       " head bank holds only the last projector; requested layer " +
                       std::to_string(layer));
    }
    return 0;
  }
  return static_cast<std::size_t>(layer - 1);
}

std::size_t HeadBank::predictor_slot(int layer) const {
  if (!has_predictor(config_.framework)) {
    throw UnsupportedFrameworkError("framework " + std::string(to_string(config_.framework)) +
                                    " has no predictor");
  }
  if (predictors_.empty()) throw UnsupportedFrameworkError("teacher head bank has no predictor");
  if (layer < 1 || layer > num_layers_) {
    throw IndexError("predictor layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(num_layers_));
  }
  if (config_.shared_predictor) return 0;
  if (!intermediate_) {
    if (layer != num_layers_) {
      throw IndexError("baseline head bank holds only the last predictor; requested layer " +
                       std::to_string(layer));
    }
    return 0;
  }
  return static_cast<std::size_t>(layer - 1);
}

ag::Var HeadBank::project(int layer, const ag::Var& features, BnMode mode) {
  return projectors_[projector_slot(layer)].forward(features, mode);
}

ag::Var HeadBank::predict(int layer, const ag::Var& projected, BnMode mode) {
  return predictors_[predictor_slot(layer)].forward(projected, mode);
}

const Mlp& HeadBank::projector(int layer) const { return projectors_[projector_slot(layer)]; }
const Mlp& HeadBank::predictor(int layer) const { return predictors_[predictor_slot(layer)]; }

void HeadBank::collect_parameters(ParamList& out, const std::string& prefix) const {
  const int first = intermediate_ ? 1 : num_layers_;
  for (std::size_t i = 0; i < projectors_.size(); ++i) {
    projectors_[i].collect_parameters(
        out, prefix + "projector." + std::to_string(first + static_cast<int>(i)) + ".");
  }
  const int first_pred = config_.shared_predictor ? num_layers_ : first;
  for (std::size_t i = 0; i < predictors_.size(); ++i) {
    predictors_[i].collect_parameters(
        out, prefix + "predictor." + std::to_string(first_pred + static_cast<int>(i)) + ".");
  }
}

void HeadBank::collect_buffers(BufferList& out, const std::string& prefix) {
  const int first = intermediate_ ? 1 : num_layers_;
  for (std::size_t i = 0; i < projectors_.size(); ++i) {
    projectors_[i].collect_buffers(
        out, prefix + "projector." + std::to_string(first + static_cast<int>(i)) + ".");
  }
  const int first_pred = config_.shared_predictor ? num_layers_ : first;
  for (std::size_t i = 0; i < predictors_.size(); ++i) {
    predictors_[i].collect_buffers(
        out, prefix + "predictor." + std::to_string(first_pred + static_cast<int>(i)) + ".");
  }
}

}  // namespace sdssl
