#include "sdssl/losses.hpp"

#include <cmath>
#include <string>

namespace sdssl {

std::string_view to_string(DistillView v) {
  return v == DistillView::cross_view ? "cross_view" : "same_view";
}

DistillView parse_distill_view(std::string_view s) {
  if (s == "cross_view") return DistillView::cross_view;
  if (s == "same_view") return DistillView::same_view;
  throw ConfigError("unknown distill_view '" + std::string(s) +
                    "' (expected cross_view|same_view)");
}

void LossConfig::validate() const {
  if (framework != Framework::byol && !(temperature > 0.0)) {
    throw ConfigError("loss.temperature must be > 0 for contrastive frameworks");
  }
  if (!(beta >= 0.0)) throw ConfigError("loss.beta must be non-negative");
}

TargetSet TargetSet::tiled(int times) const {
  TargetSet out;
  out.z = z;
  out.positive_map.reserve(positive_map.size() * static_cast<std::size_t>(times));
  for (int t = 0; t < times; ++t) {
    out.positive_map.insert(out.positive_map.end(), positive_map.begin(), positive_map.end());
    out.excluded.insert(out.excluded.end(), excluded.begin(), excluded.end());
  }
  return out;
}

TargetSet TargetSet::detached() const {
  TargetSet out = *this;
  out.z = z.detach();
  return out;
}

TargetSet aligned_targets(const ag::Var& z) {
  TargetSet t;
  t.z = z;
  t.positive_map.resize(static_cast<std::size_t>(z.rows()));
  for (std::size_t i = 0; i < t.positive_map.size(); ++i) t.positive_map[i] = static_cast<int>(i);
  return t;
}

namespace {

void require_nonzero_rows(const Matrix& m, const char* what) {
  for (Index r = 0; r < m.rows(); ++r) {
    if (!(m.row(r).squaredNorm() > 0.0)) {
      throw NumericError(std::string("byol_loss: zero-norm ") + what + " row " + std::to_string(r));
    }
  }
}

}  // namespace

ag::Var byol_loss(const ag::Var& q, const ag::Var& z) { return byol_loss(q, aligned_targets(z)); }

ag::Var byol_loss(const ag::Var& q, const TargetSet& targets) {
  if (targets.num_queries() != q.rows()) throw ConfigError("byol_loss: one target per query row");
  require_nonzero_rows(q.value(), "query");
  std::vector<Index> rows(targets.positive_map.begin(), targets.positive_map.end());
  ag::Var zp = ag::gather_rows(targets.z, rows);
  require_nonzero_rows(zp.value(), "target");
  ag::Var cos = ag::mean_rowwise_dot(ag::normalize_rows(q), ag::normalize_rows(zp));
  return ag::affine(cos, -2.0, 2.0);
}

ag::Var infonce_loss(const ag::Var& q, const ag::Var& z, Real tau,
                     std::span<const int> positive_map, std::span<const int> excluded) {
  if (!(tau > 0.0)) throw ConfigError("infonce_loss: temperature must be > 0");
  if (static_cast<Index>(positive_map.size()) != q.rows()) {
    throw ConfigError("infonce_loss: positive_map must have one entry per query row");
  }
  for (int p : positive_map) {
    if (p < 0 || p >= z.rows()) throw IndexError("infonce_loss: positive index out of range");
  }
  ag::Var logits = ag::matmul_nt(ag::normalize_rows(q), ag::normalize_rows(z));
  logits = ag::scale(logits, 1.0 / tau);
  return ag::scale(ag::softmax_cross_entropy(logits, positive_map, excluded), 2.0 * tau);
}

ag::Var ssl_loss(Framework framework, const ag::Var& q, const TargetSet& targets, Real tau) {
  if (framework == Framework::byol) return byol_loss(q, targets);
  return infonce_loss(q, targets.z, tau, targets.positive_map, targets.excluded);
}

LayerLoss isd_loss(const std::vector<ag::Var>& q_layers, const TargetSet& targets,
                   const LossConfig& config) {
  if (q_layers.empty()) {
    throw ConfigError("isd_loss: needs at least one intermediate layer (num_layers >= 2)");
  }
  const TargetSet sg = targets.detached();
  LayerLoss out;
  for (const auto& q : q_layers) {
    out.per_layer.push_back(ssl_loss(config.framework, q, sg, config.temperature));
  }
  ag::Var acc = out.per_layer.front();
  for (std::size_t l = 1; l < out.per_layer.size(); ++l) acc = ag::add(acc, out.per_layer[l]);
  out.value = ag::scale(acc, 1.0 / static_cast<Real>(out.per_layer.size()));
  return out;
}

ag::Var isd_loss_stacked(const std::vector<ag::Var>& q_layers, const TargetSet& targets,
                         const LossConfig& config) {
  if (q_layers.empty()) {
    throw ConfigError("isd_loss: needs at least one intermediate layer (num_layers >= 2)");
  }
  const TargetSet sg = targets.detached().tiled(static_cast<int>(q_layers.size()));
  return ssl_loss(config.framework, ag::concat_rows(q_layers), sg, config.temperature);
}

namespace {

void require_predictors(const LossConfig& config) {
  if (!has_predictor(config.framework)) {
    throw UnsupportedFrameworkError("pred_loss: framework " +
                                    std::string(to_string(config.framework)) +
                                    " has no predictors");
  }
}

}  // namespace

LayerLoss pred_loss(const std::vector<ag::Var>& h_layers, const TargetSet& targets,
                    HeadBank& bank, const LossConfig& config, BnMode mode) {
  require_predictors(config);
  if (h_layers.empty()) throw ConfigError("pred_loss: no layers");
  const TargetSet sg = targets.detached();
  LayerLoss out;
  for (std::size_t l = 0; l < h_layers.size(); ++l) {
    ag::Var p = bank.predict(static_cast<int>(l) + 1, h_layers[l].detach(), mode);
    out.per_layer.push_back(ssl_loss(config.framework, p, sg, config.temperature));
  }
  ag::Var acc = out.per_layer.front();
  for (std::size_t l = 1; l < out.per_layer.size(); ++l) acc = ag::add(acc, out.per_layer[l]);
  out.value = acc;
  return out;
}

ag::Var pred_loss_stacked(const std::vector<ag::Var>& h_layers, const TargetSet& targets,
                          HeadBank& bank, const LossConfig& config, BnMode mode) {
  require_predictors(config);
  if (h_layers.empty()) throw ConfigError("pred_loss: no layers");
  std::vector<ag::Var> preds;
  for (std::size_t l = 0; l < h_layers.size(); ++l) {
    preds.push_back(bank.predict(static_cast<int>(l) + 1, h_layers[l].detach(), mode));
  }
  const int layers = static_cast<int>(h_layers.size());
  const TargetSet sg = targets.detached().tiled(layers);
  return ag::scale(ssl_loss(config.framework, ag::concat_rows(preds), sg, config.temperature),
                   static_cast<Real>(layers));
}

TotalLoss total_loss(const ag::Var& ssl, const LayerLoss& isd, const LayerLoss& pred, Real alpha,
                     Real beta, Framework framework) {
  auto check = [](const ag::Var& v, const char* name) {
    if (v.defined() && !std::isfinite(v.item())) {
      throw NumericError(std::string("non-finite loss component: ") + name);
    }
  };
  check(ssl, "ssl");
  check(isd.value, "isd");
  check(pred.value, "pred");
  if (!ssl.defined()) throw ConfigError("total_loss: ssl term is required");

  TotalLoss out;
  out.total = ssl;
  out.bundle.ssl = ssl.item();
  if (isd.value.defined()) {
    out.total = ag::add(out.total, ag::scale(isd.value, alpha));
    out.bundle.isd = isd.value.item();
    for (const auto& v : isd.per_layer) out.bundle.per_layer_isd.push_back(v.item());
  }
  if (pred.value.defined() && has_predictor(framework)) {
    out.total = ag::add(out.total, ag::scale(pred.value, beta));
    out.bundle.pred = pred.value.item();
    for (const auto& v : pred.per_layer) out.bundle.per_layer_pred.push_back(v.item());
  }
  out.bundle.total = out.total.item();
  return out;
}

DistillTargets final_targets(Framework framework, const ViewOutputs& a, const ViewOutputs& b) {
  DistillTargets t;
  if (framework == Framework::simclr) {
    // NT-Xent: both views are candidates, the query's own row is excluded.
    const Index n = a.h_last.rows();
    auto make = [n](const ag::Var& own, const ag::Var& other) {
      TargetSet s;
      s.z = ag::concat_rows({other, own});
      for (Index i = 0; i < n; ++i) {
        s.positive_map.push_back(static_cast<int>(i));
        s.excluded.push_back(static_cast<int>(n + i));
      }
      return s;
    };
    t.view[0] = make(a.h_last, b.h_last);
    t.view[1] = make(b.h_last, a.h_last);
    return t;
  }
  if (!a.z_teacher.defined() || !b.z_teacher.defined()) {
    throw ConfigError("final_targets: teacher outputs required for " +
                      std::string(to_string(framework)));
  }
  // view A is matched against view B's teacher output and vice versa
  t.view[0] = aligned_targets(b.z_teacher);
  t.view[1] = aligned_targets(a.z_teacher);
  return t;
}

DistillTargets same_view_targets(DistillView mode, Framework framework, const ViewOutputs& a,
                                 const ViewOutputs& b) {
  DistillTargets t;
  if (mode == DistillView::cross_view) {
    t = final_targets(framework, a, b);
  } else if (framework == Framework::simclr) {
    // Own-view output is the positive; the other view's copy is excluded.
    t = final_targets(framework, b, a);
  } else {
    t.view[0] = aligned_targets(a.h_last);
    t.view[1] = aligned_targets(b.h_last);
  }
  t.view[0] = t.view[0].detached();
  t.view[1] = t.view[1].detached();
  return t;
}

}  // namespace sdssl
