#include "sdssl/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

namespace sdssl {

TrainerConfig TrainerConfig::resolved() const {
  TrainerConfig out = *this;
  out.heads.framework = framework;
  out.loss.framework = framework;
  out.encoder.validate();
  out.heads.validate();
  out.loss.validate();
  ScheduleState s = out.schedule;
  s.step = 0;
  s.validate();
  out.schedule = s;
  return out;
}

void ema_update(const ParamList& teacher, const ParamList& student, Real m) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("ema_update: momentum must be in [0, 1]");
  if (teacher.size() != student.size()) {
    throw StructuralError("ema_update: teacher has " + std::to_string(teacher.size()) +
                          " parameters, student " + std::to_string(student.size()));
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const auto& t = teacher[i];
    const auto& s = student[i];
    if (t.name != s.name || t.var.rows() != s.var.rows() || t.var.cols() != s.var.cols()) {
      throw StructuralError("ema_update: parameter mismatch at " + t.name + " / " + s.name);
    }
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    ag::Var t = teacher[i].var;
    Matrix& tv = t.mutable_value();
    // exact endpoints: m = 1 keeps the teacher, m = 0 copies the student
    if (m == 1.0) continue;
    if (m == 0.0) {
      tv = student[i].var.value();
      continue;
    }
    tv = m * tv + (1.0 - m) * student[i].var.value();
  }
}

namespace {

ParamList gather_student_params(const ViTEncoder& enc, const HeadBank& heads) {
  ParamList out;
  enc.collect_parameters(out, "encoder.");
  heads.collect_parameters(out, "heads.");
  return out;
}

void add_layer_losses(LayerLoss& acc, const LayerLoss& other) {
  if (!acc.value.defined()) {
    acc = other;
    return;
  }
  acc.value = ag::add(acc.value, other.value);
  for (std::size_t l = 0; l < acc.per_layer.size(); ++l) {
    acc.per_layer[l] = ag::add(acc.per_layer[l], other.per_layer[l]);
  }
}

}  // namespace

Trainer::Trainer(const TrainerConfig& config)
    : config_(config.resolved()),
      student_encoder_(config_.encoder, config_.seed),
      student_heads_(config_.heads, config_.encoder.embed_dim, config_.encoder.num_layers,
                     config_.sdssl_enabled, config_.seed),
      optimizer_(gather_student_params(student_encoder_, student_heads_), config_.optimizer) {
  if (sdssl::has_teacher(config_.framework)) {
    teacher_encoder_.emplace(student_encoder_.clone());
    teacher_heads_.emplace(student_heads_.make_teacher());
  }
}

Real Trainer::current_alpha() const {
  if (!config_.sdssl_enabled) return 0.0;
  return config_.alpha_anneal ? alpha_at(schedule()) : config_.schedule.alpha_max;
}

const ViTEncoder& Trainer::teacher_encoder() const {
  if (!teacher_encoder_) throw ConfigError("framework has no teacher");
  return *teacher_encoder_;
}

HeadBank& Trainer::teacher_heads() {
  if (!teacher_heads_) throw ConfigError("framework has no teacher");
  return *teacher_heads_;
}

ParamList Trainer::student_parameters() const {
  return gather_student_params(student_encoder_, student_heads_);
}

ParamList Trainer::teacher_parameters() const {
  ParamList out;
  if (!teacher_encoder_) return out;
  teacher_encoder_->collect_parameters(out, "encoder.");
  teacher_heads_->collect_parameters(out, "heads.");
  return out;
}

ParamList Trainer::teacher_sources() const {
  ParamList teacher = teacher_parameters();
  ParamList student = student_parameters();
  ParamList out;
  out.reserve(teacher.size());
  for (const auto& t : teacher) {
    auto it = std::find_if(student.begin(), student.end(),
                           [&](const NamedParam& s) { return s.name == t.name; });
    if (it == student.end()) throw StructuralError("teacher parameter without source: " + t.name);
    out.push_back(*it);
  }
  return out;
}

BufferList Trainer::student_buffers() {
  BufferList out;
  student_encoder_.collect_buffers(out, "encoder.");
  student_heads_.collect_buffers(out, "heads.");
  return out;
}

BufferList Trainer::teacher_buffers() {
  BufferList out;
  if (!teacher_encoder_) return out;
  teacher_encoder_->collect_buffers(out, "encoder.");
  teacher_heads_->collect_buffers(out, "heads.");
  return out;
}

Trainer::ViewForward Trainer::forward_student(const ImageBatch& batch) {
  ViewForward out;
  const int num_layers = config_.encoder.num_layers;
  std::vector<ag::Var> features = student_encoder_.forward_all_layers(batch);
  const int first = config_.sdssl_enabled ? 1 : num_layers;
  for (int l = first; l <= num_layers; ++l) {
    ag::Var h = student_heads_.project(l, features[static_cast<std::size_t>(l - 1)], BnMode::train);
    out.h.push_back(h);
    out.q.push_back(has_predictor(config_.framework) ? student_heads_.predict(l, h, BnMode::train)
                                                     : h);
  }
  return out;
}

ag::Var Trainer::teacher_projection(const ImageBatch& batch) {
  ag::NoGradGuard no_grad;
  ag::Var f = teacher_encoder_->forward(batch);
  return teacher_heads_->project(config_.encoder.num_layers, f, BnMode::train_frozen);
}

Trainer::ViewForward Trainer::forward_view(const ImageBatch& batch) {
  ViewForward out = forward_student(batch);
  if (teacher_encoder_) out.z_teacher = teacher_projection(batch);
  return out;
}

LossGraph Trainer::forward_losses(const ViewPair& views, Real alpha) {
  if (views.first.size() != views.second.size() ||
      views.first.source_indices != views.second.source_indices) {
    throw ConfigError("train_step: the two views must share source indices");
  }
  const Framework fw = config_.framework;
  ViewForward a = forward_view(views.first);
  ViewForward b = forward_view(views.second);

  const ViewOutputs out_a{a.h.back(), a.z_teacher};
  const ViewOutputs out_b{b.h.back(), b.z_teacher};
  const DistillTargets final_t = final_targets(fw, out_a, out_b);
  const Real tau = config_.loss.temperature;

  LossGraph g;
  g.ssl = ag::add(ssl_loss(fw, a.q.back(), final_t.view[0], tau),
                  ssl_loss(fw, b.q.back(), final_t.view[1], tau));

  if (config_.sdssl_enabled) {
    const DistillTargets dt = same_view_targets(config_.loss.distill_view, fw, out_a, out_b);
    const std::vector<ag::Var> qa(a.q.begin(), a.q.end() - 1);
    const std::vector<ag::Var> qb(b.q.begin(), b.q.end() - 1);
    add_layer_losses(g.isd, isd_loss(qa, dt.view[0], config_.loss));
    add_layer_losses(g.isd, isd_loss(qb, dt.view[1], config_.loss));
    if (has_predictor(fw)) {
      add_layer_losses(g.pred,
                       pred_loss(a.h, dt.view[0], student_heads_, config_.loss, BnMode::train));
      add_layer_losses(g.pred,
                       pred_loss(b.h, dt.view[1], student_heads_, config_.loss, BnMode::train));
    }
  }
  g.total = total_loss(g.ssl, g.isd, g.pred, alpha, config_.loss.beta, fw);
  return g;
}

namespace {

void check_finite(const LossBundle& b, std::int64_t step) {
  if (!std::isfinite(b.total) || !std::isfinite(b.ssl) || !std::isfinite(b.isd) || !std::isfinite(b.pred)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " (ssl=" << b.ssl << ", isd=" << b.isd << ", pred=" << b.pred
        << ", total=" << b.total << ")";
    throw NumericError(msg.str());
  }
}

void add_into(std::vector<Real>& acc, const std::vector<Real>& v) {
  if (acc.empty()) {
    acc = v;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
}

}  // namespace

LossBundle Trainer::accumulate_gradients(const ViewPair& views, Real alpha) {
  if (!teacher_encoder_) {
    // SimCLR targets are the other view's student projections, so both views
    // must share one graph.
    LossGraph g = forward_losses(views, alpha);
    check_finite(g.total.bundle, step_);
    ag::backward(g.total.total);
    return g.total.bundle;
  }

  if (views.first.size() != views.second.size() ||
      views.first.source_indices != views.second.source_indices) {
    throw ConfigError("train_step: the two views must share source indices");
  }
  // With an EMA teacher every target is detached, so the objective splits
  // into one independent graph per view; only one view's activations are
  // alive at a time.
  const Framework fw = config_.framework;
  const ag::Var z[2] = {teacher_projection(views.first), teacher_projection(views.second)};
  const ImageBatch* batch[2] = {&views.first, &views.second};
  LossBundle total;
  for (int v = 0; v < 2; ++v) {
    ViewForward f = forward_student(*batch[v]);
    // both slots carry this view's projection; the slot-v target then reads
    // the other view's teacher output (cross_view) or this projection (same_view)
    const ViewOutputs a{f.h.back(), z[0]};
    const ViewOutputs b{f.h.back(), z[1]};
    const ag::Var ssl = ssl_loss(fw, f.q.back(), final_targets(fw, a, b).view[v], config_.loss.temperature);
    LayerLoss isd, pred;
    if (config_.sdssl_enabled) {
      const TargetSet dt = same_view_targets(config_.loss.distill_view, fw, a, b).view[v];
      isd = isd_loss(std::vector<ag::Var>(f.q.begin(), f.q.end() - 1), dt, config_.loss);
      if (has_predictor(fw)) pred = pred_loss(f.h, dt, student_heads_, config_.loss, BnMode::train);
    }
    const TotalLoss t = total_loss(ssl, isd, pred, alpha, config_.loss.beta, fw);
    check_finite(t.bundle, step_);
    ag::backward(t.total);
    total.ssl += t.bundle.ssl;
    total.isd += t.bundle.isd;
    total.pred += t.bundle.pred;
    total.total += t.bundle.total;
    add_into(total.per_layer_isd, t.bundle.per_layer_isd);
    add_into(total.per_layer_pred, t.bundle.per_layer_pred);
  }
  return total;
}

StepRecord Trainer::train_step(const ViewPair& views) {
  const auto start = std::chrono::steady_clock::now();
  const ScheduleState sched = schedule();
  StepRecord rec;
  rec.step = step_;
  rec.alpha = current_alpha();
  rec.lr = lr_at(sched);
  rec.ema_m = ema_momentum_at(sched);

  optimizer_.zero_grad();
  rec.losses = accumulate_gradients(views, rec.alpha);
  optimizer_.step(rec.lr);
  if (teacher_encoder_) ema_update(teacher_parameters(), teacher_sources(), rec.ema_m);
  ++step_;
  rec.ms_per_step = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              start)
                        .count();
  return rec;
}

std::map<std::string, Matrix> Trainer::state_arrays() {
  std::map<std::string, Matrix> out;
  for (const auto& p : student_parameters()) out["student." + p.name] = p.var.value();
  for (const auto& b : student_buffers()) out["student." + b.name] = *b.value;
  for (const auto& p : teacher_parameters()) out["teacher." + p.name] = p.var.value();
  for (const auto& b : teacher_buffers()) out["teacher." + b.name] = *b.value;
  const ParamList& opt = optimizer_.params();
  for (std::size_t i = 0; i < opt.size(); ++i) {
    out["adam.m." + opt[i].name] = optimizer_.first_moments()[i];
    out["adam.v." + opt[i].name] = optimizer_.second_moments()[i];
  }
  return out;
}

void Trainer::load_state_arrays(const std::map<std::string, Matrix>& arrays, std::int64_t step,
                                std::int64_t optimizer_steps) {
  struct Target {
    std::string name;
    Matrix* dest;
  };
  std::vector<Target> targets;
  // parameter storage lives in the shared nodes owned by the modules
  auto add_params = [&](const ParamList& params, const std::string& prefix) {
    for (const auto& p : params) {
      ag::Var v = p.var;
      targets.push_back({prefix + p.name, &v.mutable_value()});
    }
  };
  add_params(student_parameters(), "student.");
  for (const auto& b : student_buffers()) targets.push_back({"student." + b.name, b.value});
  add_params(teacher_parameters(), "teacher.");
  for (const auto& b : teacher_buffers()) targets.push_back({"teacher." + b.name, b.value});
  const ParamList& opt = optimizer_.params();
  for (std::size_t i = 0; i < opt.size(); ++i) {
    targets.push_back({"adam.m." + opt[i].name, &optimizer_.first_moments()[i]});
    targets.push_back({"adam.v." + opt[i].name, &optimizer_.second_moments()[i]});
  }

  if (targets.size() != arrays.size()) {
    throw FormatError("checkpoint holds " + std::to_string(arrays.size()) +
                      " arrays, model expects " + std::to_string(targets.size()));
  }
  for (const auto& t : targets) {
    auto it = arrays.find(t.name);
    if (it == arrays.end()) throw FormatError("checkpoint is missing array " + t.name);
    if (it->second.rows() != t.dest->rows() || it->second.cols() != t.dest->cols()) {
      throw FormatError("checkpoint array " + t.name + " has the wrong shape");
    }
  }
  if (step < 0 || step > config_.schedule.total_steps) {
    throw FormatError("checkpoint step " + std::to_string(step) + " outside the schedule");
  }
  for (const auto& t : targets) *t.dest = arrays.at(t.name);
  step_ = step;
  optimizer_.set_steps_taken(optimizer_steps);
}

}  // namespace sdssl
