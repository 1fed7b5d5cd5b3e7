#pragma once

// Experiment configuration: a nested key/value text format with [section]
// headers, dotted keys and `--set key=value` overrides.
//
//   # comment
//   framework = mocov3
//   sdssl_enabled = true
//   [encoder]
//   num_layers = 6
//
// Every key is listed by `config_keys()`; unknown keys are rejected.

#include "sdssl/augment.hpp"
#include "sdssl/eval.hpp"
#include "sdssl/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace sdssl {

struct DataConfig {
  std::string dataset = "cifar10";
  /// Class-balanced training subset size; 0 uses the whole split.
  Index train_subset = 0;
  Index batch_size = 256;
  int epochs = 50;
  int workers = 1;
  /// Per-channel dataset mean/std normalization after augmentation.
  bool normalize = true;
  AugmentationRecipe recipe;
};

struct EvalConfig {
  KnnConfig knn;
  ProbeConfig probe;
  MetricConfig metrics;
  /// Size caps (class-balanced) for the train bank and the test split; 0 = all.
  Index bank_subset = 0;
  Index test_subset = 0;
};

struct RunConfig {
  std::string name = "run";
  /// Empty: <output root>/<name>.
  std::string output_dir;
  /// Checkpoint period in epochs; 0 writes only the final checkpoint.
  int checkpoint_every = 1;
  /// Console progress period in steps; 0 disables progress lines.
  int log_every = 50;
};

struct ExperimentConfig {
  TrainerConfig trainer;
  DataConfig data;
  EvalConfig eval;
  RunConfig run;
  /// Warmup length as a fraction of total steps, used when
  /// schedule.warmup_steps < 0.
  Real warmup_fraction = 0.1;

  ExperimentConfig();

  /// Throws ConfigError naming the offending key.
  void validate() const;
  /// Fills total_steps and warmup_steps when left at 0 / negative, given the
  /// number of training samples.
  void resolve_schedule(Index num_train_samples);
  [[nodiscard]] Index steps_per_epoch(Index num_train_samples) const;
  [[nodiscard]] std::filesystem::path run_dir() const;

  /// Canonical text listing every key with its current value.
  [[nodiscard]] std::string to_text() const;

  void set(const std::string& key, const std::string& value);
  [[nodiscard]] std::string get(const std::string& key) const;
};

/// Every key the schema accepts, in canonical order.
const std::vector<std::string>& config_keys();

/// Parses config text onto `base`. Throws ConfigError listing every unknown
/// key or malformed line.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = ExperimentConfig());

/// Reads a file (IoError when missing), then applies "key=value" overrides.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

void apply_overrides(ExperimentConfig& config, const std::vector<std::string>& overrides);

}  // namespace sdssl
