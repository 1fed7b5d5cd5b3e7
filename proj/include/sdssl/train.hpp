#pragma once

// Student/teacher training step, EMA teacher and checkpoints.

#include "sdssl/heads.hpp"
#include "sdssl/losses.hpp"
#include "sdssl/optimizer.hpp"
#include "sdssl/schedules.hpp"
#include "sdssl/vit.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sdssl {

struct TrainerConfig {
  Framework framework = Framework::mocov3;
  bool sdssl_enabled = true;
  EncoderConfig encoder;
  HeadConfig heads;
  LossConfig loss;
  /// total_steps, warmup, alpha_max, lr and EMA endpoints; `step` is ignored.
  ScheduleState schedule;
  /// false holds alpha at alpha_max for the whole run.
  bool alpha_anneal = true;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;

  /// Copies `framework` into the head and loss sections and validates.
  [[nodiscard]] TrainerConfig resolved() const;
};

struct StepRecord {
  std::int64_t step = 0;
  LossBundle losses;
  Real alpha = 0.0;
  Real lr = 0.0;
  Real ema_m = 0.0;
  double ms_per_step = 0.0;
};

/// Loss graph of one step, before backward.
struct LossGraph {
  ag::Var ssl;
  LayerLoss isd;
  LayerLoss pred;
  TotalLoss total;
};

/// theta_t <- m theta_t + (1 - m) theta_s. The two lists must hold the same
/// names and shapes in the same order.
void ema_update(const ParamList& teacher, const ParamList& student, Real m);

class Trainer {
 public:
  explicit Trainer(const TrainerConfig& config);

  [[nodiscard]] const TrainerConfig& config() const { return config_; }
  [[nodiscard]] std::int64_t step() const { return step_; }
  [[nodiscard]] ScheduleState schedule() const { return config_.schedule.at(step_); }
  [[nodiscard]] Real current_alpha() const;

  /// Builds the full loss graph for a view pair with the given alpha.
  [[nodiscard]] LossGraph forward_losses(const ViewPair& views, Real alpha);

  /// Loss and backward without the optimizer step; gradients accumulate into
  /// the student parameters. With a teacher each view gets its own graph,
  /// which gives the same gradients as backward through forward_losses.
  LossBundle accumulate_gradients(const ViewPair& views, Real alpha);
  /// One optimization step: loss, backward, AdamW, EMA update.
  StepRecord train_step(const ViewPair& views);

  [[nodiscard]] ViTEncoder& student_encoder() { return student_encoder_; }
  [[nodiscard]] const ViTEncoder& student_encoder() const { return student_encoder_; }
  [[nodiscard]] HeadBank& student_heads() { return student_heads_; }
  [[nodiscard]] bool has_teacher() const { return teacher_encoder_.has_value(); }
  [[nodiscard]] const ViTEncoder& teacher_encoder() const;
  [[nodiscard]] HeadBank& teacher_heads();

  /// Every trainable student parameter (encoder, projectors, predictors).
  [[nodiscard]] ParamList student_parameters() const;
  /// Teacher parameters (empty without a teacher).
  [[nodiscard]] ParamList teacher_parameters() const;
  /// Student parameters mirrored by the teacher, in teacher order.
  [[nodiscard]] ParamList teacher_sources() const;
  [[nodiscard]] BufferList student_buffers();
  [[nodiscard]] BufferList teacher_buffers();

  [[nodiscard]] AdamW& optimizer() { return optimizer_; }

  /// Named arrays for a checkpoint: parameters, buffers, optimizer moments.
  [[nodiscard]] std::map<std::string, Matrix> state_arrays();
  /// Restores arrays produced by state_arrays. Every name and shape is
  /// checked before anything is written.
  void load_state_arrays(const std::map<std::string, Matrix>& arrays, std::int64_t step,
                         std::int64_t optimizer_steps);

 private:
  struct ViewForward {
    std::vector<ag::Var> h;  // projections per tapped layer (1..L or just L)
    std::vector<ag::Var> q;  // predictions (== h for simclr)
    ag::Var z_teacher;
  };
  ViewForward forward_student(const ImageBatch& batch);
  ag::Var teacher_projection(const ImageBatch& batch);
  ViewForward forward_view(const ImageBatch& batch);

  TrainerConfig config_;
  ViTEncoder student_encoder_;
  HeadBank student_heads_;
  std::optional<ViTEncoder> teacher_encoder_;
  std::optional<HeadBank> teacher_heads_;
  AdamW optimizer_;
  std::int64_t step_ = 0;
};

// Checkpoint container

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::string framework;
  std::int64_t step = 0;
  std::int64_t optimizer_steps = 0;
  /// Resolved experiment configuration text the run was started with.
  std::string config_text;
  std::map<std::string, Matrix> arrays;
};

void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path);
/// Throws FormatError for a bad magic, version, checksum or truncation;
/// IoError when the file cannot be opened.
CheckpointData read_checkpoint(const std::filesystem::path& path);

CheckpointData snapshot(Trainer& trainer, const std::string& config_text);
void restore(Trainer& trainer, const CheckpointData& data);

}  // namespace sdssl
