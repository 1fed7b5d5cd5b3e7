#pragma once

// Self-supervised objectives: the per-framework pairwise loss, intermediate
// self-distillation, predictor-only loss and their weighted total.

#include "sdssl/autograd.hpp"
#include "sdssl/heads.hpp"

#include <span>
#include <string_view>
#include <vector>

namespace sdssl {

enum class DistillView { cross_view, same_view };

std::string_view to_string(DistillView v);
DistillView parse_distill_view(std::string_view s);

struct LossConfig {
  Real temperature = 0.2;
  Real beta = 1.0;
  Framework framework = Framework::mocov3;
  DistillView distill_view = DistillView::cross_view;

  void validate() const;
};

/// Targets for one loss direction. Query row i has its positive at row
/// positive_map[i] of z; `excluded` optionally removes one row of z per
/// query from the softmax (the query's own embedding under SimCLR).
struct TargetSet {
  ag::Var z;
  std::vector<int> positive_map;
  std::vector<int> excluded;

  [[nodiscard]] Index num_queries() const { return static_cast<Index>(positive_map.size()); }
  /// Same targets for `times` vertically stacked query blocks.
  [[nodiscard]] TargetSet tiled(int times) const;
  [[nodiscard]] TargetSet detached() const;
};

/// Row-aligned targets: positive of query i is z row i.
TargetSet aligned_targets(const ag::Var& z);

/// Mean over rows of 2 - 2 cos(q_i, z_i).
ag::Var byol_loss(const ag::Var& q, const ag::Var& z);
ag::Var byol_loss(const ag::Var& q, const TargetSet& targets);

/// 2*tau * mean_i -log softmax(<q_i, z> / tau)[positive_map[i]] over
/// l2-normalized rows.
ag::Var infonce_loss(const ag::Var& q, const ag::Var& z, Real tau,
                     std::span<const int> positive_map, std::span<const int> excluded = {});

/// The framework's pairwise objective.
ag::Var ssl_loss(Framework framework, const ag::Var& q, const TargetSet& targets, Real tau);

struct LayerLoss {
  ag::Var value;
  std::vector<ag::Var> per_layer;
};

/// Mean over the given (intermediate) layers of ssl_loss(q_l, sg(targets)).
LayerLoss isd_loss(const std::vector<ag::Var>& q_layers, const TargetSet& targets,
                   const LossConfig& config);
/// Same quantity computed as one loss over all layers' rows stacked.
ag::Var isd_loss_stacked(const std::vector<ag::Var>& q_layers, const TargetSet& targets,
                         const LossConfig& config);

/// Sum over layers of ssl_loss(predict(l, sg(h_l)), sg(targets)). h_layers
/// holds layers 1..L in order. Only predictor parameters receive gradient.
LayerLoss pred_loss(const std::vector<ag::Var>& h_layers, const TargetSet& targets,
                    HeadBank& bank, const LossConfig& config, BnMode mode);
/// L times the loss over all layers' predictions stacked.
ag::Var pred_loss_stacked(const std::vector<ag::Var>& h_layers, const TargetSet& targets,
                          HeadBank& bank, const LossConfig& config, BnMode mode);

struct LossBundle {
  Real ssl = 0.0;
  Real isd = 0.0;
  Real pred = 0.0;
  Real total = 0.0;
  std::vector<Real> per_layer_isd;
  std::vector<Real> per_layer_pred;
};

struct TotalLoss {
  ag::Var total;
  LossBundle bundle;
};

/// ssl + alpha*isd (+ beta*pred for frameworks with predictors). isd/pred
/// may be undefined, meaning the term is absent.
TotalLoss total_loss(const ag::Var& ssl, const LayerLoss& isd, const LayerLoss& pred, Real alpha,
                     Real beta, Framework framework);

/// Student/teacher outputs of one view needed to pick distillation targets.
struct ViewOutputs {
  ag::Var h_last;     // student projection of the last layer
  ag::Var z_teacher;  // teacher projection (undefined for simclr)
};

struct DistillTargets {
  TargetSet view[2];
};

/// Targets for the final-layer objective (SimCLR keeps gradients on both
/// sides; teacher outputs carry none).
DistillTargets final_targets(Framework framework, const ViewOutputs& a, const ViewOutputs& b);

/// Detached targets for the intermediate layers of each view. cross_view:
/// view A distills the other view's output; same_view: its own student output.
DistillTargets same_view_targets(DistillView mode, Framework framework, const ViewOutputs& a,
                                 const ViewOutputs& b);

}  // namespace sdssl
