#pragma once

// End-to-end drivers behind the CLI: training runs, checkpoint evaluation
// and the ablation matrix.

#include "sdssl/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace sdssl {

inline constexpr const char* kVersion = "0.1.0";

// Run directory layout.
inline constexpr const char* kResolvedConfigFile = "config.resolved.cfg";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kCheckpointFile = "checkpoint.ckpt";
inline constexpr const char* kVersionFile = "VERSION";

struct RunOptions {
  /// Continue from <run dir>/checkpoint.ckpt when it exists.
  bool resume = false;
  /// Stop (with a checkpoint) once this global step is reached; < 0 = no cap.
  std::int64_t max_steps = -1;
  /// Progress lines; null for silence.
  std::ostream* log = nullptr;
};

struct RunResult {
  std::filesystem::path dir;
  std::int64_t steps_done = 0;
  std::int64_t total_steps = 0;
  StepRecord last;
};

/// Training split after the configured class-balanced subset.
Dataset load_training_data(const ExperimentConfig& config);
/// Augmentation pipeline with normalization statistics of the full train split.
PipelineConfig make_pipeline(const ExperimentConfig& config);

/// Trains per the config, writing resolved config, metrics CSV, version stamp
/// and checkpoints into config.run_dir().
RunResult run_training(ExperimentConfig config, const RunOptions& options = {});

/// Trainer restored from a checkpoint, with the config it was trained under.
struct LoadedModel {
  ExperimentConfig config;
  std::unique_ptr<Trainer> trainer;
};
LoadedModel load_model(const std::filesystem::path& checkpoint);

enum class EvalCommand { knn, linear, multiexit, metrics };
EvalCommand parse_eval_command(const std::string& s);

struct EvalRequest {
  EvalCommand command = EvalCommand::knn;
  /// Per-layer classifier for multiexit.
  EvalKind probe = EvalKind::knn;
  /// Dataset override; empty uses the checkpoint's training dataset.
  std::string dataset;
  std::filesystem::path out_dir;
};

/// Evaluates the student encoder and writes CSV, JSON and SVG reports.
MetricsReport run_eval(const LoadedModel& model, const EvalRequest& request, std::ostream* log = nullptr);

/// Per-layer k-NN accuracy of a trained encoder on the configured splits.
std::vector<Real> knn_per_layer(const ViTEncoder& encoder, const ExperimentConfig& config);

struct AblationRow {
  std::string variant;
  std::vector<Real> knn;  // per layer
  Real final_knn = 0.0;
  Real mean_knn = 0.0;
  Real delta_final = 0.0;  // relative to the reference
  Real delta_mean = 0.0;
};

/// Known suites: baseline, no_anneal, no_pred, pred_only, same_view.
const std::vector<std::string>& ablation_suites();
/// Applies a suite's modification to a copy of the reference config.
ExperimentConfig ablation_variant(const ExperimentConfig& reference, const std::string& suite);

/// Trains the reference and every variant with a shared seed, then writes
/// ablation.csv and ablation.md into <out_dir>.
std::vector<AblationRow> run_ablation(const ExperimentConfig& reference, const std::vector<std::string>& suites,
                                      const std::filesystem::path& out_dir, std::ostream* log = nullptr);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace sdssl
